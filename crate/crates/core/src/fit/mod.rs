//! Gradient-based scene fitting against posed RGB-D + feature frames:
//! photometric and depth L2 terms plus the two-branch cosine feature loss
//! L_obj + λ·L_part (λ = 2 by default), optimized with per-group adaptive
//! steps.

pub mod grad;
pub mod params;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature::decoder::DecoderWeights;
use crate::feature::FeatureMap;
use crate::img::{depth_valid, ColorBuffer, DepthBuffer, Mask};
use crate::render::RenderedBuffers;
use crate::scene::{Camera, Scene};
use params::{Adam, ParamGroup, ParamVector};

/// One posed supervision frame. Feature maps share the image resolution;
/// their `assigned` masks drive which pixels contribute to the feature loss.
#[derive(Debug, Clone)]
pub struct Frame {
    pub camera: Camera,
    pub color: ColorBuffer,
    pub depth: DepthBuffer,
    pub feat_obj: FeatureMap,
    pub feat_part: FeatureMap,
}

impl Frame {
    /// Frame with no feature supervision.
    pub fn geometry_only(camera: Camera, color: ColorBuffer, depth: DepthBuffer) -> Frame {
        let (w, h) = (camera.width, camera.height);
        Frame {
            camera,
            color,
            depth,
            feat_obj: FeatureMap::unassigned(w, h, 1),
            feat_part: FeatureMap::unassigned(w, h, 1),
        }
    }
}

/// Loss term weights. `total = color·w_color + depth·w_depth +
/// w_feature·(L_obj + part_lambda·L_part)`.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub feature: f64,
    pub part_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            depth: 1.0,
            feature: 1.0,
            part_lambda: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub color_l2: f64,
    pub depth_l2: f64,
    pub feat_obj_cosine: f64,
    pub feat_part_cosine: f64,
    pub total: f64,
}

impl LossReport {
    pub fn assemble(color: f64, depth: f64, obj: f64, part: f64, w: &LossWeights) -> LossReport {
        LossReport {
            color_l2: color,
            depth_l2: depth,
            feat_obj_cosine: obj,
            feat_part_cosine: part,
            total: w.color * color + w.depth * depth + w.feature * (obj + w.part_lambda * part),
        }
    }
}

/// Per-group learning rates (3DGS-style defaults). The center rate is
/// multiplied by the scene extent at fit time.
#[derive(Debug, Clone, Copy)]
pub struct LearningRates {
    pub center: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub latent: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            center: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            latent: 2.5e-3,
            decoder: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: usize,
    pub rates: LearningRates,
    pub weights: LossWeights,
    /// Scene-size reference for the center learning rate; derived from the
    /// initial centers when None.
    pub scene_extent: Option<f64>,
    /// Abort when total > abort_factor × initial for `abort_patience`
    /// consecutive iterations.
    pub abort_factor: f64,
    pub abort_patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            rates: LearningRates::default(),
            weights: LossWeights::default(),
            scene_extent: None,
            abort_factor: 10.0,
            abort_patience: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitStats {
    /// (iteration, per-frame loss report) per step.
    pub trace: Vec<(usize, LossReport)>,
    pub trainable_primitives: usize,
    /// Set when partial fine-tuning found empty masks and did nothing.
    pub noop: bool,
}

/// Evaluates the joint loss from already-rendered buffers against a target
/// frame. Independent of the fused gradient path; pixels outside `region`
/// (when given) are ignored. Errors when no term has any valid pixel.
pub fn compute_losses(
    rendered: &RenderedBuffers,
    frame: &Frame,
    decoder: &DecoderWeights,
    weights: &LossWeights,
    region: Option<&Mask>,
) -> Result<LossReport> {
    if rendered.width != frame.camera.width || rendered.height != frame.camera.height {
        return Err(Error::precondition("rendered/target shapes differ"));
    }
    let (w, h) = (rendered.width, rendered.height);
    let in_region = |x: usize, y: usize| region.map(|m| m.get(x, y)).unwrap_or(true);

    let mut n_color = 0usize;
    let mut n_depth = 0usize;
    let mut n_obj = 0usize;
    let mut n_part = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !in_region(x, y) {
                continue;
            }
            n_color += 1;
            if depth_valid(frame.depth.get(x, y)) {
                n_depth += 1;
            }
            if frame.feat_obj.is_assigned(x, y) {
                n_obj += 1;
            }
            if frame.feat_part.is_assigned(x, y) {
                n_part += 1;
            }
        }
    }
    if n_color + n_depth + n_obj + n_part == 0 {
        return Err(Error::precondition("zero valid pixels in loss support"));
    }

    let mut color = 0.0;
    let mut depth = 0.0;
    let mut obj = 0.0;
    let mut part = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !in_region(x, y) {
                continue;
            }
            let tc = frame.color.get(x, y);
            let rc = rendered.color_at(x, y);
            for k in 0..3 {
                let d = rc[k] - tc[k];
                color += d * d;
            }
            let td = frame.depth.get(x, y);
            if depth_valid(td) {
                let d = rendered.depth_at(x, y) - td;
                depth += d * d;
            }
            let oa = frame.feat_obj.is_assigned(x, y);
            let pa = frame.feat_part.is_assigned(x, y);
            if oa || pa {
                let (fo, fp) = decoder.decode(rendered.feature_at(x, y));
                if oa {
                    obj += one_minus_cosine(&fo, frame.feat_obj.pixel(x, y));
                }
                if pa {
                    part += one_minus_cosine(&fp, frame.feat_part.pixel(x, y));
                }
            }
        }
    }
    if n_color > 0 {
        color /= n_color as f64;
    }
    if n_depth > 0 {
        depth /= n_depth as f64;
    }
    if n_obj > 0 {
        obj /= n_obj as f64;
    }
    if n_part > 0 {
        part /= n_part as f64;
    }
    Ok(LossReport::assemble(color, depth, obj, part, weights))
}

fn one_minus_cosine(a: &DVector<f64>, b: &[f32]) -> f64 {
    let na = a.norm();
    let nb = b.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
    1.0 - dot / (na * nb)
}

/// Analytic gradients of the total loss for one frame, packed in the
/// [`ParamVector`] layout.
pub fn gradients(scene: &Scene, frame: &Frame, weights: &LossWeights) -> Result<(LossReport, Vec<f64>)> {
    let params = ParamVector::pack(scene);
    let (report, grads) = grad::evaluate_frame(&params, frame, weights, None, true)?;
    Ok((report, grads.unwrap()))
}

fn learning_rate_vector(
    params: &ParamVector,
    rates: &LearningRates,
    extent: f64,
    trainable: Option<&[bool]>,
    train_decoder: bool,
) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            if i < params.decoder_offset() {
                if let Some(t) = trainable {
                    if !t[i / params::PRIM_STRIDE] {
                        return 0.0;
                    }
                }
                match params.group_of(i) {
                    ParamGroup::Center => rates.center * extent,
                    ParamGroup::Rotation => rates.rotation,
                    ParamGroup::Scale => rates.scale,
                    ParamGroup::Opacity => rates.opacity,
                    ParamGroup::Color => rates.color,
                    ParamGroup::Latent => rates.latent,
                    ParamGroup::Decoder => unreachable!(),
                }
            } else if train_decoder {
                rates.decoder
            } else {
                0.0
            }
        })
        .collect()
}

fn fit_loop(
    scene: &mut Scene,
    frames: &[Frame],
    regions: Option<&[Mask]>,
    trainable: Option<&[bool]>,
    train_decoder: bool,
    config: &FitConfig,
) -> Result<FitStats> {
    if frames.is_empty() {
        return Err(Error::precondition("fit needs at least one frame"));
    }
    if scene.is_empty() {
        return Err(Error::precondition("fit needs an initialized scene"));
    }
    let extent = config.scene_extent.unwrap_or_else(|| scene.extent()).max(1e-6);
    let mut params = ParamVector::pack(scene);
    let lr = learning_rate_vector(&params, &config.rates, extent, trainable, train_decoder);
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut initial_total = None;
    let mut over_budget = 0usize;

    for iter in 0..config.iterations {
        let fi = iter % frames.len();
        let region = regions.map(|r| &r[fi]);
        let (report, grads) =
            grad::evaluate_frame(&params, &frames[fi], &config.weights, region, true)?;
        let grads = grads.unwrap();
        adam.step(&mut params.data, &grads, &lr);
        params.project_constraints();
        let initial = *initial_total.get_or_insert(report.total);
        if report.total > config.abort_factor * initial + 1e-9 {
            over_budget += 1;
            if over_budget >= config.abort_patience {
                return Err(Error::numerical(format!(
                    "fit diverged: total {:.3e} stayed above {:.1}x initial {:.3e} for {} iterations (iter {})",
                    report.total, config.abort_factor, initial, config.abort_patience, iter
                )));
            }
        } else {
            over_budget = 0;
        }
        trace.push((iter, report));
    }

    params.unpack_into(scene);
    Ok(FitStats {
        trace,
        trainable_primitives: trainable
            .map(|t| t.iter().filter(|&&b| b).count())
            .unwrap_or(scene.len()),
        noop: false,
    })
}

/// Full-scene fitting: every primitive attribute plus the decoder, one frame
/// per iteration in round-robin order.
pub fn fit(scene: &mut Scene, frames: &[Frame], config: &FitConfig) -> Result<FitStats> {
    fit_loop(scene, frames, None, None, true, config)
}

/// Pre/post-displacement mask pair rendered in one frame's camera.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub pre: Mask,
    pub post: Mask,
}

/// Dilation radius applied to the pre/post mask union (pixels).
pub const FINETUNE_MASK_DILATION: usize = 5;

/// Re-optimizes only the primitives whose centers project into the dilated
/// union of the pre/post-displacement masks; the loss is confined to the
/// same region. Everything else (including the decoder) stays bit-identical.
pub fn partial_finetune(
    scene: &mut Scene,
    indices_moved: &[usize],
    frames: &[Frame],
    masks: &[MaskPair],
    config: &FitConfig,
) -> Result<FitStats> {
    if frames.len() != masks.len() {
        return Err(Error::precondition("one mask pair per frame required"));
    }
    if let Some(&bad) = indices_moved.iter().find(|&&i| i >= scene.len()) {
        return Err(Error::precondition(format!("moved index {bad} out of range")));
    }
    let regions: Vec<Mask> = masks
        .iter()
        .map(|m| m.pre.union(&m.post).dilate(FINETUNE_MASK_DILATION))
        .collect();
    if regions.iter().all(|r| r.count_set() == 0) {
        return Ok(FitStats {
            trace: Vec::new(),
            trainable_primitives: 0,
            noop: true,
        });
    }
    let mut trainable = vec![false; scene.len()];
    for (frame, region) in frames.iter().zip(&regions) {
        for (i, p) in scene.primitives.iter().enumerate() {
            if trainable[i] {
                continue;
            }
            if let Some((px, _)) = frame.camera.project(&p.center) {
                let (x, y) = (px.x.round(), px.y.round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < region.width && (y as usize) < region.height
                {
                    trainable[i] = region.get(x as usize, y as usize);
                }
            }
        }
    }
    if trainable.iter().all(|&t| !t) {
        return Ok(FitStats {
            trace: Vec::new(),
            trainable_primitives: 0,
            noop: true,
        });
    }
    fit_loop(scene, frames, Some(&regions), Some(&trainable), false, config)
}

/// Peak signal-to-noise ratio of a rendered color buffer against a target
/// image, over all pixels.
pub fn psnr(rendered: &RenderedBuffers, target: &ColorBuffer) -> f64 {
    let mut mse = 0.0;
    let n = rendered.width * rendered.height;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            let rc = rendered.color_at(x, y);
            let tc = target.get(x, y);
            for k in 0..3 {
                let d = rc[k] - tc[k];
                mse += d * d;
            }
        }
    }
    mse /= (3 * n) as f64;
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Mean absolute rendered-depth error over valid target pixels (meters).
pub fn depth_l1(rendered: &RenderedBuffers, target: &DepthBuffer) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            let td = target.get(x, y);
            if depth_valid(td) {
                sum += (rendered.depth_at(x, y) - td).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::decoder::DecoderWeights;
    use crate::render::{render, ChannelSet, COV_EIGEN_FLOOR, SUPPORT_CHI2};
    use crate::scene::{GaussianPrimitive, RigidTransform};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(width: usize, height: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            pose: RigidTransform::identity(),
        }
    }

    fn random_primitive(rng: &mut ChaCha8Rng) -> GaussianPrimitive {
        let mut p = GaussianPrimitive::new(
            Vector3::new(
                rng.gen::<f64>() * 0.5 - 0.25,
                rng.gen::<f64>() * 0.5 - 0.25,
                0.8 + rng.gen::<f64>() * 0.6,
            ),
            Vector3::new(
                0.03 + rng.gen::<f64>() * 0.05,
                0.03 + rng.gen::<f64>() * 0.05,
                0.002 + rng.gen::<f64>() * 0.006,
            ),
            0.2 + rng.gen::<f64>() * 0.5,
            Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        );
        p.rotation = UnitQuaternion::from_euler_angles(
            rng.gen::<f64>() * 6.0,
            rng.gen::<f64>() * 6.0,
            rng.gen::<f64>() * 6.0,
        );
        for f in p.feature_latent.iter_mut() {
            *f = rng.gen::<f64>() - 0.5;
        }
        p
    }

    /// Scene generator for finite-difference checks: rejects configurations
    /// where an h=1e-4 perturbation could cross a nonsmooth boundary (depth
    /// sort ties, the 3σ support edge, or the covariance eigen floor).
    fn gradcheck_scene(seed: u64, n: usize, cam: &Camera, embed: usize) -> Scene {
        'outer: for attempt in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(attempt));
            let prims: Vec<GaussianPrimitive> = (0..n).map(|_| random_primitive(&mut rng)).collect();
            let scene = Scene::new(prims, DecoderWeights::seeded_with_dim(seed ^ 77, embed));
            let splats = crate::render::project_and_sort(cam, &scene.primitives);
            if splats.len() < n {
                continue 'outer;
            }
            let mut depths: Vec<f64> = splats.iter().map(|s| s.splat.view_depth).collect();
            depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in depths.windows(2) {
                if w[1] - w[0] < 1e-3 {
                    continue 'outer;
                }
            }
            for s in &splats {
                for l in s.eigvals {
                    if (l - COV_EIGEN_FLOOR).abs() < 0.1 {
                        continue 'outer;
                    }
                }
                // every covered pixel must sit clear of the support edge
                let r = s.splat.effective_radius + 1.0;
                let x0 = (s.splat.mean.x - r).max(0.0) as usize;
                let x1 = (s.splat.mean.x + r).min((cam.width - 1) as f64) as usize;
                let y0 = (s.splat.mean.y - r).max(0.0) as usize;
                let y1 = (s.splat.mean.y + r).min((cam.height - 1) as f64) as usize;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let d = nalgebra::Vector2::new(x as f64, y as f64) - s.splat.mean;
                        let q = d.dot(&(s.cov_inv * d));
                        if (q - SUPPORT_CHI2).abs() < 0.05 {
                            continue 'outer;
                        }
                    }
                }
            }
            return scene;
        }
        panic!("no gradcheck-safe scene found for seed {seed}");
    }

    fn random_frame(rng: &mut ChaCha8Rng, cam: &Camera, embed: usize, stride: usize) -> Frame {
        let (w, h) = (cam.width, cam.height);
        let mut color = ColorBuffer::filled(w, h, [0.0; 3]);
        let mut depth = DepthBuffer::filled(w, h, 0.0);
        let mut fo = FeatureMap::unassigned(w, h, embed);
        let mut fp = FeatureMap::unassigned(w, h, embed);
        for y in 0..h {
            for x in 0..w {
                color.set(x, y, [rng.gen(), rng.gen(), rng.gen()]);
                if rng.gen::<f64>() < 0.8 {
                    depth.set(x, y, 0.7 + rng.gen::<f64>());
                }
                if x % stride == 0 && y % stride == 0 {
                    let vo: Vec<f32> = (0..embed).map(|_| rng.gen::<f32>() - 0.5).collect();
                    fo.set_pixel(x, y, &vo);
                    if rng.gen::<bool>() {
                        let vp: Vec<f32> = (0..embed).map(|_| rng.gen::<f32>() - 0.5).collect();
                        fp.set_pixel(x, y, &vp);
                    }
                }
            }
        }
        Frame {
            camera: cam.clone(),
            color,
            depth,
            feat_obj: fo,
            feat_part: fp,
        }
    }

    /// Central finite differences against the analytic gradient for the
    /// given parameter indices.
    fn fd_check(scene: &Scene, frame: &Frame, weights: &LossWeights, coords: &[usize]) -> f64 {
        let params = ParamVector::pack(scene);
        let (_, grads) = grad::evaluate_frame(&params, frame, weights, None, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        for &i in coords {
            let mut plus = params.clone();
            plus.data[i] += h;
            let (rp, _) = grad::evaluate_frame(&plus, frame, weights, None, false).unwrap();
            let mut minus = params.clone();
            minus.data[i] -= h;
            let (rm, _) = grad::evaluate_frame(&minus, frame, weights, None, false).unwrap();
            let fd = (rp.total - rm.total) / (2.0 * h);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        max_rel
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cam = camera(8, 8, 9.0);
        let embed = 24;
        let scene = gradcheck_scene(3, 5, &cam, embed);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frame = random_frame(&mut rng, &cam, embed, 2);
        let weights = LossWeights::default();
        // all primitive parameters
        let coords: Vec<usize> = (0..5 * params::PRIM_STRIDE).collect();
        let rel = fd_check(&scene, &frame, &weights, &coords);
        assert!(rel < 1e-3, "primitive gradient mismatch: rel {rel:.2e}");
        // a seeded subset of decoder parameters
        let p = ParamVector::pack(&scene);
        let dec: Vec<usize> = (0..40)
            .map(|k| p.decoder_offset() + (k * 997) % ParamVector::decoder_len(embed))
            .collect();
        let rel = fd_check(&scene, &frame, &weights, &dec);
        assert!(rel < 1e-3, "decoder gradient mismatch: rel {rel:.2e}");
    }

    #[test]
    fn zero_influence_parameter_has_zero_gradient() {
        let cam = camera(8, 8, 9.0);
        let mut scene = gradcheck_scene(5, 2, &cam, 16);
        // a primitive far outside the frustum contributes nothing
        scene.primitives.push(GaussianPrimitive::new(
            Vector3::new(50.0, 0.0, 1.0),
            Vector3::new(0.05, 0.05, 0.01),
            0.5,
            Vector3::new(0.5, 0.5, 0.5),
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_frame(&mut rng, &cam, 16, 2);
        let (_, grads) = gradients(&scene, &frame, &LossWeights::default()).unwrap();
        let o = 2 * params::PRIM_STRIDE;
        for k in 0..params::PRIM_STRIDE {
            assert_eq!(grads[o + k], 0.0, "param {k} of culled primitive");
        }
    }

    #[test]
    fn opacity_gradient_zero_when_alpha_ceiling_clamps() {
        // opacity ~1 at the pixel center: alpha_raw > 0.99 so the ceiling is
        // active and d(loss)/d(opacity) must be exactly zero there.
        let cam = camera(5, 5, 20.0);
        let p = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(2.0, 2.0, 2.0),
            0.9999,
            Vector3::new(0.3, 0.3, 0.3),
        );
        let scene = Scene::new(vec![p], DecoderWeights::zeros(8));
        let mut color = ColorBuffer::filled(5, 5, [0.9, 0.9, 0.9]);
        color.set(2, 2, [0.1, 0.1, 0.1]);
        let frame = Frame::geometry_only(cam, color, DepthBuffer::filled(5, 5, 0.0));
        let weights = LossWeights {
            depth: 0.0,
            feature: 0.0,
            ..Default::default()
        };
        let (_, grads) = gradients(&scene, &frame, &weights).unwrap();
        // with this footprint every covered pixel has alpha_raw >= 0.99
        assert_eq!(grads[params::OFF_LOGIT_OPACITY], 0.0);
    }

    #[test]
    fn fused_report_matches_render_plus_compute_losses() {
        let cam = camera(10, 10, 10.0);
        let embed = 16;
        let scene = gradcheck_scene(8, 6, &cam, embed);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frame = random_frame(&mut rng, &cam, embed, 3);
        let weights = LossWeights::default();
        let params = ParamVector::pack(&scene);
        let (fused, _) = grad::evaluate_frame(&params, &frame, &weights, None, false).unwrap();
        let buffers = render(&scene, &frame.camera, ChannelSet::fit_default()).unwrap();
        let direct = compute_losses(&buffers, &frame, &scene.decoder, &weights, None).unwrap();
        assert!((fused.total - direct.total).abs() < 1e-12);
        assert!((fused.color_l2 - direct.color_l2).abs() < 1e-12);
        assert!((fused.depth_l2 - direct.depth_l2).abs() < 1e-12);
        assert!((fused.feat_obj_cosine - direct.feat_obj_cosine).abs() < 1e-12);
        assert!((fused.feat_part_cosine - direct.feat_part_cosine).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_when_rendered_equals_target() {
        let cam = camera(9, 9, 10.0);
        let scene = gradcheck_scene(11, 4, &cam, 12);
        let buffers = render(&scene, &cam, ChannelSet::fit_default()).unwrap();
        // build the target from the render itself
        let mut color = ColorBuffer::filled(9, 9, [0.0; 3]);
        let mut depth = DepthBuffer::filled(9, 9, 0.0);
        for y in 0..9 {
            for x in 0..9 {
                color.set(x, y, buffers.color_at(x, y));
                depth.set(x, y, buffers.depth_at(x, y));
            }
        }
        let frame = Frame::geometry_only(cam, color, depth);
        let report =
            compute_losses(&buffers, &frame, &scene.decoder, &LossWeights::default(), None).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn antiparallel_features_cost_two() {
        // decoder that passes latent[0..8] through; target = -decoded
        let mut decoder = DecoderWeights::zeros(8);
        decoder.activation = crate::feature::Activation::Identity;
        for k in 0..8 {
            decoder.trunk_w[(k, k)] = 1.0;
            decoder.obj_w[(k, k)] = 1.0;
            decoder.part_w[(k, k)] = 1.0;
        }
        let cam = camera(3, 3, 20.0);
        let mut p = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.5, 0.5, 0.5),
            0.9999,
            Vector3::zeros(),
        );
        p.feature_latent[2] = 1.0;
        let scene = Scene::new(vec![p], decoder);
        let buffers = render(&scene, &cam, ChannelSet::fit_default()).unwrap();
        let mut fo = FeatureMap::unassigned(3, 3, 8);
        for y in 0..3 {
            for x in 0..3 {
                let f = buffers.feature_at(x, y);
                let neg: Vec<f32> = (0..8).map(|k| -(f[k] as f32)).collect();
                fo.set_pixel(x, y, &neg);
            }
        }
        let frame = Frame {
            camera: cam,
            color: ColorBuffer::filled(3, 3, [0.0; 3]),
            depth: DepthBuffer::filled(3, 3, 0.0),
            feat_obj: fo,
            feat_part: FeatureMap::unassigned(3, 3, 8),
        };
        let weights = LossWeights {
            color: 0.0,
            depth: 0.0,
            ..Default::default()
        };
        let report =
            compute_losses(&buffers, &frame, &scene.decoder, &weights, None).unwrap();
        assert!((report.feat_obj_cosine - 2.0).abs() < 1e-9);
    }

    #[test]
    fn part_lambda_scales_linearly() {
        let cam = camera(8, 8, 9.0);
        let embed = 12;
        let scene = gradcheck_scene(13, 4, &cam, embed);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frame = random_frame(&mut rng, &cam, embed, 2);
        let params = ParamVector::pack(&scene);
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            part_lambda: 4.0,
            ..w1
        };
        let (r1, _) = grad::evaluate_frame(&params, &frame, &w1, None, false).unwrap();
        let (r2, _) = grad::evaluate_frame(&params, &frame, &w2, None, false).unwrap();
        let contrib1 = r1.total - (r1.color_l2 + r1.depth_l2 + r1.feat_obj_cosine);
        let contrib2 = r2.total - (r2.color_l2 + r2.depth_l2 + r2.feat_obj_cosine);
        assert!((contrib2 - 2.0 * contrib1).abs() < 1e-12);
    }

    #[test]
    fn zero_valid_pixels_is_error() {
        let cam = camera(4, 4, 8.0);
        let scene = gradcheck_scene(15, 2, &cam, 8);
        let buffers = render(&scene, &cam, ChannelSet::fit_default()).unwrap();
        let frame = Frame::geometry_only(cam.clone(), ColorBuffer::filled(4, 4, [0.0; 3]), DepthBuffer::filled(4, 4, 0.0));
        let region = Mask::filled(4, 4, false);
        assert!(matches!(
            compute_losses(&buffers, &frame, &scene.decoder, &LossWeights::default(), Some(&region)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fit_at_target_is_a_fixed_point() {
        let cam = camera(10, 10, 11.0);
        let mut scene = gradcheck_scene(21, 5, &cam, 8);
        let buffers = render(&scene, &cam, ChannelSet::geometry()).unwrap();
        let mut color = ColorBuffer::filled(10, 10, [0.0; 3]);
        let mut depth = DepthBuffer::filled(10, 10, 0.0);
        for y in 0..10 {
            for x in 0..10 {
                color.set(x, y, buffers.color_at(x, y));
                depth.set(x, y, buffers.depth_at(x, y));
            }
        }
        let frame = Frame::geometry_only(cam, color, depth);
        let before = ParamVector::pack(&scene);
        let config = FitConfig {
            iterations: 100,
            weights: LossWeights {
                feature: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let stats = fit(&mut scene, &[frame], &config).unwrap();
        let after = ParamVector::pack(&scene);
        for i in 0..before.len() {
            let rel = (after.data[i] - before.data[i]).abs() / before.data[i].abs().max(1.0);
            assert!(rel < 1e-3, "param {i} moved by {rel:.2e}");
        }
        for (i, r) in &stats.trace {
            assert!(r.total < 1e-6, "iter {i}: total {:.3e}", r.total);
        }
    }

    #[test]
    fn single_primitive_color_converges() {
        let cam = camera(9, 9, 10.0);
        let p = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.15, 0.15, 0.05),
            0.95,
            Vector3::new(0.1, 0.2, 0.3),
        );
        let mut scene = Scene::new(vec![p], DecoderWeights::zeros(8));
        let target = [0.8f64, 0.55, 0.25];
        // color supervision only, against a constant image where covered
        let buffers = render(&scene, &cam, ChannelSet::geometry()).unwrap();
        let mut color = ColorBuffer::filled(9, 9, [0.0; 3]);
        for y in 0..9 {
            for x in 0..9 {
                let a = buffers.alpha[y * 9 + x];
                color.set(x, y, [target[0] * a, target[1] * a, target[2] * a]);
            }
        }
        let frame = Frame::geometry_only(cam, color, DepthBuffer::filled(9, 9, 0.0));
        let config = FitConfig {
            iterations: 500,
            weights: LossWeights {
                depth: 0.0,
                feature: 0.0,
                ..Default::default()
            },
            rates: LearningRates {
                // freeze geometry; this is the convex color subproblem
                center: 0.0,
                rotation: 0.0,
                scale: 0.0,
                opacity: 0.0,
                color: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let stats = fit(&mut scene, &[frame], &config).unwrap();
        for k in 0..3 {
            assert!(
                (scene.primitives[0].color[k] - target[k]).abs() < 1e-2,
                "channel {k}: {} vs {}",
                scene.primitives[0].color[k],
                target[k]
            );
        }
        let first: Vec<f64> = stats.trace.iter().take(100).map(|(_, r)| r.total).collect();
        let last: Vec<f64> = stats.trace.iter().rev().take(100).map(|(_, r)| r.total).collect();
        let med = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[s.len() / 2]
        };
        assert!(med(&last) < med(&first), "loss trend not monotone");
    }

    #[test]
    fn quaternions_stay_normalized_through_fit() {
        let cam = camera(8, 8, 9.0);
        let mut scene = gradcheck_scene(31, 4, &cam, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let frame = random_frame(&mut rng, &cam, 8, 2);
        let config = FitConfig {
            iterations: 50,
            ..Default::default()
        };
        fit(&mut scene, &[frame], &config).unwrap();
        for p in &scene.primitives {
            assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
        }
    }
}
