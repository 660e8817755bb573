//! Forward splatting: EWA-style projection of primitives to screen-space
//! ellipses and front-to-back alpha compositing of depth, color, latent
//! features, normals, and subset masks.
//!
//! Per pixel, with splats sorted by view depth (index tie-break):
//!   α'_i = min(opacity_i · exp(-q/2), 0.99),  q = δᵀ Σ₂d⁻¹ δ  (zero beyond q > 9)
//!   out  = Σ attr_i · α'_i · Π_{j<i} (1 - α'_j)
//! and compositing stops once transmittance drops below 1e-4. The q ≤ 9
//! support bound is part of the operation's definition (3σ footprint), so
//! bounding-box acceleration reproduces the naive per-ray loop bitwise.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Mask;
use crate::scene::{primitive_normal, Camera, GaussianPrimitive, Scene};
use crate::LATENT_DIM;

/// Splats closer than this camera-space depth are culled (meters).
pub const NEAR_PLANE: f64 = 0.01;
/// Anti-aliasing floor on the 2D covariance eigenvalues (pixels²).
pub const COV_EIGEN_FLOOR: f64 = 0.3;
/// Per-splat alpha ceiling.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Mahalanobis support bound (3σ).
pub const SUPPORT_CHI2: f64 = 9.0;

/// Which buffers `render` fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSet {
    pub color: bool,
    pub depth: bool,
    pub feature: bool,
    pub normal: bool,
}

impl ChannelSet {
    pub fn all() -> Self {
        ChannelSet {
            color: true,
            depth: true,
            feature: true,
            normal: true,
        }
    }

    pub fn geometry() -> Self {
        ChannelSet {
            color: true,
            depth: true,
            feature: false,
            normal: false,
        }
    }

    pub fn fit_default() -> Self {
        ChannelSet {
            color: true,
            depth: true,
            feature: true,
            normal: false,
        }
    }
}

/// Screen-space footprint of one projected primitive.
#[derive(Debug, Clone, Copy)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// SPD, eigenvalues >= COV_EIGEN_FLOOR.
    pub cov: Matrix2<f64>,
    /// Camera-space z of the center (meters).
    pub view_depth: f64,
    /// 3σ bounding radius in pixels.
    pub effective_radius: f64,
}

/// Symmetric 2×2 eigendecomposition, eigenvalues descending.
pub fn symmetric_eigen_2x2(m: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).max(0.0).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    let v1 = if b.abs() > 1e-300 {
        Vector2::new(b, l1 - a).normalize()
    } else if a >= c {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let v2 = Vector2::new(-v1.y, v1.x);
    ([l1, l2], [v1, v2])
}

/// Full projection record: everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub prim: usize,
    /// Camera-space center.
    pub t_cam: Vector3<f64>,
    /// Projection Jacobian at the center.
    pub jacobian: Matrix2x3<f64>,
    /// Camera-space 3D covariance.
    pub cov_cam: Matrix3<f64>,
    /// Screen covariance before the eigenvalue floor.
    pub cov_raw: Matrix2<f64>,
    pub eigvals: [f64; 2],
    pub eigvecs: [Vector2<f64>; 2],
    pub clamped: [bool; 2],
    pub splat: Splat2D,
    pub cov_inv: Matrix2<f64>,
}

/// World-space covariance R diag(s²) Rᵀ of a primitive.
pub fn world_covariance(p: &GaussianPrimitive) -> Matrix3<f64> {
    let r = p.rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&p.scale.component_mul(&p.scale));
    r * s2 * r.transpose()
}

/// Projects one primitive; None when culled (behind the near plane or with
/// a 3σ footprint entirely outside the image).
pub fn project_gaussian_full(camera: &Camera, p: &GaussianPrimitive, prim: usize) -> Option<ProjectedSplat> {
    let w2c = camera.pose.inverse();
    let t_cam = w2c.apply(&p.center);
    let z = t_cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let mean = Vector2::new(
        camera.fx * t_cam.x / z + camera.cx,
        camera.fy * t_cam.y / z + camera.cy,
    );
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * t_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * t_cam.y / (z * z),
    );
    let cov_cam = w2c.rotation * world_covariance(p) * w2c.rotation.transpose();
    let cov_raw = jacobian * cov_cam * jacobian.transpose();
    let (eigvals, eigvecs) = symmetric_eigen_2x2(&cov_raw);
    let clamped = [eigvals[0] < COV_EIGEN_FLOOR, eigvals[1] < COV_EIGEN_FLOOR];
    let l1 = eigvals[0].max(COV_EIGEN_FLOOR);
    let l2 = eigvals[1].max(COV_EIGEN_FLOOR);
    let cov = l1 * eigvecs[0] * eigvecs[0].transpose() + l2 * eigvecs[1] * eigvecs[1].transpose();
    let effective_radius = 3.0 * l1.sqrt();
    // cull splats whose footprint misses the pixel grid [0, W-1]×[0, H-1]
    if mean.x + effective_radius < 0.0
        || mean.x - effective_radius > (camera.width - 1) as f64
        || mean.y + effective_radius < 0.0
        || mean.y - effective_radius > (camera.height - 1) as f64
    {
        return None;
    }
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let cov_inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    Some(ProjectedSplat {
        prim,
        t_cam,
        jacobian,
        cov_cam,
        cov_raw,
        eigvals,
        eigvecs,
        clamped,
        splat: Splat2D {
            mean,
            cov,
            view_depth: z,
            effective_radius,
        },
        cov_inv,
    })
}

/// Spec-facing projection: just the screen-space splat.
pub fn project_gaussian(camera: &Camera, p: &GaussianPrimitive) -> Option<Splat2D> {
    project_gaussian_full(camera, p, 0).map(|f| f.splat)
}

/// Projects all primitives and sorts front-to-back by (view_depth, index).
pub fn project_and_sort(camera: &Camera, prims: &[GaussianPrimitive]) -> Vec<ProjectedSplat> {
    let mut splats: Vec<ProjectedSplat> = prims
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_gaussian_full(camera, p, i))
        .collect();
    splats.sort_by(|a, b| {
        a.splat
            .view_depth
            .partial_cmp(&b.splat.view_depth)
            .unwrap()
            .then(a.prim.cmp(&b.prim))
    });
    splats
}

/// Per-pixel lists of splat indices (into the sorted list), preserving the
/// front-to-back order.
pub fn bin_pixels(splats: &[ProjectedSplat], width: usize, height: usize) -> Vec<Vec<u32>> {
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); width * height];
    for (si, s) in splats.iter().enumerate() {
        let r = s.splat.effective_radius;
        let x0 = (s.splat.mean.x - r).ceil().max(0.0) as usize;
        let x1 = (s.splat.mean.x + r).floor().min((width - 1) as f64) as usize;
        let y0 = (s.splat.mean.y - r).ceil().max(0.0) as usize;
        let y1 = (s.splat.mean.y + r).floor().min((height - 1) as f64) as usize;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                bins[y * width + x].push(si as u32);
            }
        }
    }
    bins
}

/// Output buffers of one render pass. Flat row-major storage; `feature` has
/// LATENT_DIM channels per pixel.
#[derive(Debug, Clone)]
pub struct RenderedBuffers {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub normal: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub contrib_count: Vec<u32>,
}

impl RenderedBuffers {
    fn zeros(width: usize, height: usize, channels: ChannelSet) -> Self {
        let n = width * height;
        RenderedBuffers {
            width,
            height,
            depth: if channels.depth { vec![0.0; n] } else { Vec::new() },
            color: if channels.color { vec![0.0; 3 * n] } else { Vec::new() },
            feature: if channels.feature { vec![0.0; LATENT_DIM * n] } else { Vec::new() },
            normal: channels.normal.then(|| vec![0.0; 3 * n]),
            alpha: vec![0.0; n],
            contrib_count: vec![0; n],
        }
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn feature_at(&self, x: usize, y: usize) -> &[f64] {
        let i = LATENT_DIM * (y * self.width + x);
        &self.feature[i..i + LATENT_DIM]
    }
}

/// Per-splat attributes gathered once before compositing.
struct SplatAttrs {
    opacity: Vec<f64>,
    color: Vec<[f64; 3]>,
    feature: Vec<[f64; LATENT_DIM]>,
    normal_cam: Vec<[f64; 3]>,
}

fn gather_attrs(
    scene: &Scene,
    camera: &Camera,
    splats: &[ProjectedSplat],
    channels: ChannelSet,
) -> SplatAttrs {
    let r_w2c = camera.pose.rotation.transpose();
    let origin = camera.center();
    let mut attrs = SplatAttrs {
        opacity: Vec::with_capacity(splats.len()),
        color: Vec::with_capacity(splats.len()),
        feature: Vec::with_capacity(splats.len()),
        normal_cam: Vec::with_capacity(splats.len()),
    };
    for s in splats {
        let p = &scene.primitives[s.prim];
        attrs.opacity.push(p.opacity.clamp(0.0, 1.0));
        attrs.color.push([p.color.x, p.color.y, p.color.z]);
        attrs.feature.push(p.feature_latent);
        if channels.normal {
            let n_world = primitive_normal(p, &origin);
            let n_cam = r_w2c * n_world;
            attrs.normal_cam.push([n_cam.x, n_cam.y, n_cam.z]);
        }
    }
    attrs
}

/// Forward splatting per Eq. 1 semantics (see module docs). Deterministic:
/// per-pixel work is independent and accumulation order is fixed by the
/// global depth sort, so parallel and scalar execution match bitwise.
pub fn render(scene: &Scene, camera: &Camera, channels: ChannelSet) -> Result<RenderedBuffers> {
    if scene.is_empty() {
        return Err(Error::precondition("render requires a non-empty scene"));
    }
    camera.validate()?;
    let splats = project_and_sort(camera, &scene.primitives);
    let bins = bin_pixels(&splats, camera.width, camera.height);
    let attrs = gather_attrs(scene, camera, &splats, channels);
    let (width, height) = (camera.width, camera.height);
    let mut out = RenderedBuffers::zeros(width, height, channels);

    // split output rows so rayon can fill them without overlap
    struct RowSlices<'a> {
        depth: Option<&'a mut [f64]>,
        color: Option<&'a mut [f64]>,
        feature: Option<&'a mut [f64]>,
        normal: Option<&'a mut [f64]>,
        alpha: &'a mut [f64],
        contrib: &'a mut [u32],
    }
    fn split_row<'a>(opt: &mut Option<&'a mut [f64]>, n: usize) -> Option<&'a mut [f64]> {
        opt.take().map(|s| {
            let (head, tail) = s.split_at_mut(n);
            *opt = Some(tail);
            head
        })
    }
    let mut rows: Vec<RowSlices> = Vec::with_capacity(height);
    {
        let mut depth = channels.depth.then_some(out.depth.as_mut_slice());
        let mut color = channels.color.then_some(out.color.as_mut_slice());
        let mut feature = channels.feature.then_some(out.feature.as_mut_slice());
        let mut normal = out.normal.as_mut().map(|n| n.as_mut_slice());
        let mut alpha = out.alpha.as_mut_slice();
        let mut contrib = out.contrib_count.as_mut_slice();
        for _ in 0..height {
            let d = split_row(&mut depth, width);
            let c = split_row(&mut color, 3 * width);
            let f = split_row(&mut feature, LATENT_DIM * width);
            let nrm = split_row(&mut normal, 3 * width);
            let (a_head, a_tail) = std::mem::take(&mut alpha).split_at_mut(width);
            alpha = a_tail;
            let (ct_head, ct_tail) = std::mem::take(&mut contrib).split_at_mut(width);
            contrib = ct_tail;
            rows.push(RowSlices {
                depth: d,
                color: c,
                feature: f,
                normal: nrm,
                alpha: a_head,
                contrib: ct_head,
            });
        }
    }

    rows.par_iter_mut().enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let mut transmittance = 1.0f64;
            let mut contrib = 0u32;
            let px = Vector2::new(x as f64, y as f64);
            for &si in &bins[y * width + x] {
                let s = &splats[si as usize];
                let delta = px - s.splat.mean;
                let q = delta.dot(&(s.cov_inv * delta));
                if q > SUPPORT_CHI2 {
                    continue;
                }
                let alpha = (attrs.opacity[si as usize] * (-0.5 * q).exp()).min(ALPHA_MAX);
                if alpha <= 0.0 {
                    continue;
                }
                let w = alpha * transmittance;
                if let Some(d) = &mut row.depth {
                    d[x] += s.splat.view_depth * w;
                }
                if let Some(c) = &mut row.color {
                    let col = &attrs.color[si as usize];
                    for k in 0..3 {
                        c[3 * x + k] += col[k] * w;
                    }
                }
                if let Some(f) = &mut row.feature {
                    let feat = &attrs.feature[si as usize];
                    for k in 0..LATENT_DIM {
                        f[LATENT_DIM * x + k] += feat[k] * w;
                    }
                }
                if let Some(n) = &mut row.normal {
                    let nc = &attrs.normal_cam[si as usize];
                    for k in 0..3 {
                        n[3 * x + k] += nc[k] * w;
                    }
                }
                transmittance *= 1.0 - alpha;
                contrib += 1;
                if transmittance < TRANSMITTANCE_MIN {
                    break;
                }
            }
            row.alpha[x] = 1.0 - transmittance;
            row.contrib[x] = contrib;
        }
        // renormalize composited normals where anything landed
        if let Some(n) = &mut row.normal {
            for x in 0..width {
                if row.alpha[x] > 0.0 {
                    let v = Vector3::new(n[3 * x], n[3 * x + 1], n[3 * x + 2]);
                    let norm = v.norm();
                    if norm > 1e-12 {
                        for k in 0..3 {
                            n[3 * x + k] /= norm;
                        }
                    }
                }
            }
        }
    });

    Ok(out)
}

/// Camera-frame normal buffer (H×W×3), renormalized per covered pixel.
pub fn render_normals(scene: &Scene, camera: &Camera) -> Result<Vec<f64>> {
    let channels = ChannelSet {
        color: false,
        depth: false,
        feature: false,
        normal: true,
    };
    Ok(render(scene, camera, channels)?.normal.unwrap())
}

/// Silhouette of a primitive subset composited against the full scene's
/// occlusion: pixel set where the subset's accumulated weight exceeds 0.5.
pub fn render_mask(scene: &Scene, indices: &[usize], camera: &Camera) -> Result<Mask> {
    camera.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= scene.primitives.len()) {
        return Err(Error::precondition(format!("mask index {bad} out of range")));
    }
    let mut selected = vec![false; scene.primitives.len()];
    for &i in indices {
        selected[i] = true;
    }
    let mut mask = Mask::filled(camera.width, camera.height, false);
    if scene.is_empty() || indices.is_empty() {
        return Ok(mask);
    }
    let splats = project_and_sort(camera, &scene.primitives);
    let bins = bin_pixels(&splats, camera.width, camera.height);
    let opacity: Vec<f64> = splats
        .iter()
        .map(|s| scene.primitives[s.prim].opacity.clamp(0.0, 1.0))
        .collect();
    let width = camera.width;
    mask.data
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                let mut transmittance = 1.0f64;
                let mut subset_alpha = 0.0f64;
                let px = Vector2::new(x as f64, y as f64);
                for &si in &bins[y * width + x] {
                    let s = &splats[si as usize];
                    let delta = px - s.splat.mean;
                    let q = delta.dot(&(s.cov_inv * delta));
                    if q > SUPPORT_CHI2 {
                        continue;
                    }
                    let alpha = (opacity[si as usize] * (-0.5 * q).exp()).min(ALPHA_MAX);
                    if alpha <= 0.0 {
                        continue;
                    }
                    if selected[s.prim] {
                        subset_alpha += alpha * transmittance;
                    }
                    transmittance *= 1.0 - alpha;
                    if transmittance < TRANSMITTANCE_MIN {
                        break;
                    }
                }
                row[x] = subset_alpha > 0.5;
            }
        });
    Ok(mask)
}
