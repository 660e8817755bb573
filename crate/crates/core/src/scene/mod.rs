//! Explicit scene representation: Gaussian primitives, cameras, rigid
//! transforms, depth-based initialization, and subset deformation.

pub mod camera;
pub mod io;
pub mod transform;

pub use camera::Camera;
pub use transform::RigidTransform;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::feature::decoder::DecoderWeights;
use crate::img::{depth_valid, ColorImage, DepthMap};
use crate::LATENT_DIM;

/// Explicit anisotropic Gaussian scene atom.
///
/// `rotation` is kept unit-norm (w, x, y, z order on disk); `feature_latent`
/// is view-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    /// World-space center, meters.
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Positive axis lengths, meters.
    pub scale: Vector3<f64>,
    /// Base opacity in [0, 1] before the screen-space falloff.
    pub opacity: f64,
    /// RGB in [0, 1].
    pub color: Vector3<f64>,
    pub feature_latent: [f64; LATENT_DIM],
}

impl GaussianPrimitive {
    pub fn new(center: Vector3<f64>, scale: Vector3<f64>, opacity: f64, color: Vector3<f64>) -> Self {
        GaussianPrimitive {
            center,
            rotation: UnitQuaternion::identity(),
            scale,
            opacity,
            color,
            feature_latent: [0.0; LATENT_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::precondition("quaternion not unit"));
        }
        if self.scale.min() <= 0.0 {
            return Err(Error::precondition("non-positive scale"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::precondition("opacity outside [0,1]"));
        }
        Ok(())
    }

    /// Largest axis length; used as the conservative bounding-sphere radius.
    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }
}

/// Ground-truth provenance labels carried by synthetic scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimitiveLabel {
    /// Object id (1-based; 0 means unlabeled/background).
    pub object: u16,
    /// Global part id (1-based; 0 means unlabeled).
    pub part: u16,
}

/// Mutable world state: ordered primitives plus the feature decoder.
///
/// Indices into `primitives` are stable; only `apply_transform` and the
/// fitting routines mutate. Reads (render, query, grasp) may run
/// concurrently, writers need exclusive access.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub decoder: DecoderWeights,
    pub labels: Option<Vec<PrimitiveLabel>>,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, decoder: DecoderWeights) -> Self {
        Scene {
            primitives,
            decoder,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Diagonal of the center bounding box; scene-size reference for
    /// position learning rates.
    pub fn extent(&self) -> f64 {
        if self.primitives.is_empty() {
            return 0.0;
        }
        let mut lo = self.primitives[0].center;
        let mut hi = lo;
        for p in &self.primitives {
            lo = lo.inf(&p.center);
            hi = hi.sup(&p.center);
        }
        (hi - lo).norm()
    }

    /// Indices of primitives carrying the given object label.
    pub fn indices_with_object(&self, object: u16) -> Vec<usize> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.object == object)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Indices of primitives carrying the given part label.
    pub fn indices_with_part(&self, part: u16) -> Vec<usize> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.part == part)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Fraction of the pixel footprint used for the initial isotropic scale.
pub const INIT_SCALE_PIXEL_FRACTION: f64 = 0.5;
/// Opacity assigned to freshly back-projected primitives.
pub const INIT_OPACITY: f64 = 0.5;

/// Result of depth back-projection, keeping the source pixel of every
/// primitive so callers can attach per-pixel ground truth.
pub struct Backprojection {
    pub primitives: Vec<GaussianPrimitive>,
    /// (x, y) source pixel per primitive.
    pub pixels: Vec<(usize, usize)>,
}

/// Lifts every valid strided depth pixel to an initial Gaussian.
///
/// Center = pose ∘ ((u-cx)·d/fx, (v-cy)·d/fy, d); isotropic scale
/// 0.5·d/fx (half the local pixel footprint); opacity 0.5; color from the
/// pixel; zero latent. Invalid pixels (NaN or <= 0) are skipped.
pub fn backproject_depth_indexed(
    camera: &Camera,
    depth: &DepthMap,
    color: &ColorImage,
    stride: usize,
) -> Result<Backprojection> {
    camera.validate()?;
    if stride == 0 {
        return Err(Error::precondition("stride must be positive"));
    }
    if depth.width != camera.width || depth.height != camera.height {
        return Err(Error::precondition("depth map size does not match camera"));
    }
    if color.width != depth.width || color.height != depth.height {
        return Err(Error::precondition("color map size does not match depth"));
    }
    let mut primitives = Vec::new();
    let mut pixels = Vec::new();
    for y in (0..depth.height).step_by(stride) {
        for x in (0..depth.width).step_by(stride) {
            let d = depth.get(x, y) as f64;
            if !depth_valid(d) {
                continue;
            }
            let center = camera.backproject(x as f64, y as f64, d);
            let s = INIT_SCALE_PIXEL_FRACTION * d / camera.fx;
            let c = color.get(x, y);
            primitives.push(GaussianPrimitive::new(
                center,
                Vector3::new(s, s, s),
                INIT_OPACITY,
                Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64),
            ));
            pixels.push((x, y));
        }
    }
    if primitives.is_empty() {
        return Err(Error::precondition(
            "depth map has no valid pixels to initialize from",
        ));
    }
    Ok(Backprojection { primitives, pixels })
}

pub fn backproject_depth(
    camera: &Camera,
    depth: &DepthMap,
    color: &ColorImage,
    stride: usize,
) -> Result<Vec<GaussianPrimitive>> {
    Ok(backproject_depth_indexed(camera, depth, color, stride)?.primitives)
}

/// Rigidly moves the selected primitives: centers by `R p + t`, rotations
/// by quaternion pre-multiplication. Scale, opacity, color, and latent stay
/// untouched; out-of-range indices fail before any mutation.
pub fn apply_transform(scene: &mut Scene, indices: &[usize], t: &RigidTransform) -> Result<()> {
    t.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= scene.primitives.len()) {
        return Err(Error::precondition(format!(
            "index {bad} out of range ({} primitives)",
            scene.primitives.len()
        )));
    }
    let rot_q = t.rotation_quaternion();
    for &i in indices {
        let p = &mut scene.primitives[i];
        p.center = t.apply(&p.center);
        p.rotation = UnitQuaternion::new_normalize(
            (rot_q.into_inner() * p.rotation.into_inner()).normalize(),
        );
    }
    Ok(())
}

/// Ratio below which a primitive counts as isotropic and has no meaningful
/// flattest axis.
pub const NORMAL_DEGENERATE_RATIO: f64 = 1.05;

/// Surface-normal proxy: the rotated axis of the smallest scale component,
/// sign-flipped toward `view_origin`. Returns the normal and a flag marking
/// the isotropic fallback (direction toward the viewer).
pub fn primitive_normal_flagged(
    p: &GaussianPrimitive,
    view_origin: &Vector3<f64>,
) -> (Vector3<f64>, bool) {
    let to_view = view_origin - p.center;
    if p.scale.max() / p.scale.min() < NORMAL_DEGENERATE_RATIO {
        let n = to_view.norm();
        if n < 1e-12 {
            return (Vector3::z(), true);
        }
        return (to_view / n, true);
    }
    let mut axis = 0;
    for k in 1..3 {
        if p.scale[k] < p.scale[axis] {
            axis = k;
        }
    }
    let rot = p.rotation.to_rotation_matrix().into_inner();
    let mut n = rot.column(axis).into_owned();
    if n.dot(&to_view) < 0.0 {
        n = -n;
    }
    (n, false)
}

pub fn primitive_normal(p: &GaussianPrimitive, view_origin: &Vector3<f64>) -> Vector3<f64> {
    primitive_normal_flagged(p, view_origin).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::decoder::DecoderWeights;
    use approx::assert_relative_eq;

    fn identity_camera(width: usize, height: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: (width / 2) as f64,
            cy: (height / 2) as f64,
            width,
            height,
            pose: RigidTransform::identity(),
        }
    }

    #[test]
    fn principal_point_ray() {
        let cam = identity_camera(33, 33, 40.0);
        let mut depth = DepthMap::filled(33, 33, 0.0);
        depth.set(16, 16, 1.0);
        let color = ColorImage::filled(33, 33, [0.2, 0.4, 0.6]);
        let prims = backproject_depth(&cam, &depth, &color, 1).unwrap();
        assert_eq!(prims.len(), 1);
        assert_relative_eq!(prims[0].center, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_eq!(prims[0].opacity, INIT_OPACITY);
    }

    #[test]
    fn forty_five_degree_ray() {
        // pixel (cx + fx, cy) at depth 2 lands at x = 2, z = 2.
        let cam = identity_camera(128, 64, 40.0);
        let mut depth = DepthMap::filled(128, 64, 0.0);
        depth.set(64 + 40, 32, 2.0);
        let color = ColorImage::filled(128, 64, [0.0; 3]);
        let prims = backproject_depth(&cam, &depth, &color, 1).unwrap();
        assert_eq!(prims.len(), 1);
        assert_relative_eq!(prims[0].center, Vector3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn all_invalid_depth_errors() {
        let cam = identity_camera(8, 8, 10.0);
        let depth = DepthMap::filled(8, 8, f32::NAN);
        let color = ColorImage::filled(8, 8, [0.0; 3]);
        assert!(matches!(
            backproject_depth(&cam, &depth, &color, 1),
            Err(Error::Precondition(_))
        ));
    }

    /// Analytic ray–sphere oracle: every back-projected center of a rendered
    /// sphere depth map must sit on the sphere surface.
    #[test]
    fn sphere_depth_backprojection_lies_on_surface() {
        let cam = identity_camera(65, 65, 80.0);
        let center = Vector3::new(0.0, 0.0, 0.5);
        let radius = 0.1;
        let mut depth = DepthMap::filled(65, 65, 0.0);
        for y in 0..65 {
            for x in 0..65 {
                // ray through pixel, unit z component convention
                let dir = Vector3::new((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0);
                // solve |o + t*dir - c| = r for smallest positive t (o = origin)
                let a = dir.dot(&dir);
                let b = -2.0 * dir.dot(&center);
                let c = center.dot(&center) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc > 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    if t > 0.0 {
                        // depth = camera z of the hit = t (dir.z == 1)
                        depth.set(x, y, t as f32);
                    }
                }
            }
        }
        let color = ColorImage::filled(65, 65, [0.5; 3]);
        let prims = backproject_depth(&cam, &depth, &color, 1).unwrap();
        assert!(prims.len() > 100);
        for p in &prims {
            let err = ((p.center - center).norm() - radius).abs();
            assert!(err < 1e-3, "center off sphere surface by {err}");
        }
    }

    #[test]
    fn backproject_reproject_roundtrip() {
        let mut cam = identity_camera(32, 24, 55.0);
        cam.pose = RigidTransform::from_axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.7)
            .compose(&RigidTransform::from_translation(Vector3::new(0.3, 0.1, -0.2)));
        let mut depth = DepthMap::filled(32, 24, 0.0);
        for y in 0..24 {
            for x in 0..32 {
                depth.set(x, y, 0.5 + 0.01 * (x + y) as f32);
            }
        }
        let color = ColorImage::filled(32, 24, [0.0; 3]);
        let bp = backproject_depth_indexed(&cam, &depth, &color, 3).unwrap();
        for (prim, &(x, y)) in bp.primitives.iter().zip(&bp.pixels) {
            let (px, d) = cam.project(&prim.center).unwrap();
            assert!((px.x - x as f64).abs() < 1e-4 && (px.y - y as f64).abs() < 1e-4);
            assert!((d - depth.get(x, y) as f64).abs() < 1e-6);
        }
    }

    fn test_scene(prims: Vec<GaussianPrimitive>) -> Scene {
        Scene::new(prims, DecoderWeights::seeded(7))
    }

    #[test]
    fn identity_transform_is_noop() {
        let p = GaussianPrimitive::new(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.1, 0.2, 0.3),
            0.5,
            Vector3::new(0.1, 0.1, 0.1),
        );
        let mut scene = test_scene(vec![p.clone()]);
        apply_transform(&mut scene, &[0], &RigidTransform::identity()).unwrap();
        assert_eq!(scene.primitives[0], p);
    }

    #[test]
    fn translation_shifts_selected_centers_only() {
        let mk = |x: f64| {
            GaussianPrimitive::new(
                Vector3::new(x, 0.0, 0.0),
                Vector3::new(0.1, 0.1, 0.1),
                0.5,
                Vector3::zeros(),
            )
        };
        let mut scene = test_scene(vec![mk(0.0), mk(1.0)]);
        let t = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        apply_transform(&mut scene, &[1], &t).unwrap();
        assert_eq!(scene.primitives[0].center, Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(scene.primitives[1].center, Vector3::new(1.1, 0.0, 0.0));
    }

    #[test]
    fn rotation_about_z_moves_unit_x_to_unit_y() {
        let p = GaussianPrimitive::new(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::zeros(),
        );
        let mut scene = test_scene(vec![p]);
        let t = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        apply_transform(&mut scene, &[0], &t).unwrap();
        assert_relative_eq!(
            scene.primitives[0].center,
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn out_of_range_index_leaves_scene_untouched() {
        let p = GaussianPrimitive::new(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.1, 0.1, 0.1),
            0.5,
            Vector3::zeros(),
        );
        let mut scene = test_scene(vec![p.clone()]);
        let t = RigidTransform::from_translation(Vector3::x());
        assert!(apply_transform(&mut scene, &[0, 5], &t).is_err());
        assert_eq!(scene.primitives[0], p);
    }

    #[test]
    fn transform_preserves_pairwise_distances_and_inverts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let prims: Vec<_> = (0..20)
            .map(|_| {
                let mut p = GaussianPrimitive::new(
                    Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                    Vector3::new(0.05, 0.07, 0.02),
                    0.5,
                    Vector3::zeros(),
                );
                p.rotation = UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(Vector3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    )),
                    rng.gen::<f64>(),
                );
                p
            })
            .collect();
        let before = prims.clone();
        let mut scene = test_scene(prims);
        let idx: Vec<usize> = (0..20).collect();
        let t = RigidTransform::from_axis_angle(&Vector3::new(1.0, -0.4, 0.2), 1.1)
            .compose(&RigidTransform::from_translation(Vector3::new(0.4, 0.5, -0.6)));
        apply_transform(&mut scene, &idx, &t).unwrap();
        for i in 0..20 {
            for j in (i + 1)..20 {
                let d0 = (before[i].center - before[j].center).norm();
                let d1 = (scene.primitives[i].center - scene.primitives[j].center).norm();
                assert!((d0 - d1).abs() < 1e-9, "rigidity broken: {d0} vs {d1}");
            }
        }
        apply_transform(&mut scene, &idx, &t.inverse()).unwrap();
        for i in 0..20 {
            assert!((scene.primitives[i].center - before[i].center).norm() < 1e-7);
            assert!(
                scene.primitives[i]
                    .rotation
                    .angle_to(&before[i].rotation)
                    .abs()
                    < 1e-7
            );
        }
    }

    #[test]
    fn flattest_axis_normal_with_sign_flip() {
        let p = GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(0.1, 0.1, 0.01),
            0.9,
            Vector3::zeros(),
        );
        let (n, degenerate) = primitive_normal_flagged(&p, &Vector3::new(0.0, 0.0, 5.0));
        assert!(!degenerate);
        assert_relative_eq!(n, Vector3::z(), epsilon = 1e-12);
        let (n, _) = primitive_normal_flagged(&p, &Vector3::new(0.0, 0.0, -5.0));
        assert_relative_eq!(n, -Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn isotropic_primitive_normal_is_degenerate() {
        let p = GaussianPrimitive::new(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.1, 0.1, 0.1),
            0.9,
            Vector3::zeros(),
        );
        let (n, degenerate) = primitive_normal_flagged(&p, &Vector3::new(3.0, 0.0, 0.0));
        assert!(degenerate);
        assert_relative_eq!(n, Vector3::x(), epsilon = 1e-12);
    }
}
