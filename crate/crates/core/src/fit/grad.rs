//! Fused forward/backward pass: renders one frame from packed parameters,
//! evaluates the joint loss, and accumulates analytic gradients for every
//! primitive attribute and the decoder.
//!
//! The screen-space chain per splat:
//!   center -> t_cam -> (mean, J, view_depth)
//!   (quat, scale) -> Σ_world -> Σ_cam -> Σ_raw = J Σ_cam Jᵀ -> eigen floor -> Σ -> Σ⁻¹
//! and per pixel q = δᵀ Σ⁻¹ δ, α' = min(op·e^{-q/2}, 0.99) composited
//! front-to-back. Adjoints follow the same chain in reverse; the eigenvalue
//! floor and the α' ceiling contribute zero subgradient on their clamped
//! side.

use nalgebra::{DVector, Matrix2, Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::decoder::{decode_backward, DecoderGrads, DecoderWeights};
use crate::fit::params::{
    ParamVector, OFF_CENTER, OFF_COLOR, OFF_LATENT, OFF_LOGIT_OPACITY, OFF_LOG_SCALE, OFF_QUAT,
    PRIM_STRIDE,
};
use crate::fit::{Frame, LossReport, LossWeights};
use crate::img::{depth_valid, Mask};
use crate::render::{
    bin_pixels, project_and_sort, ProjectedSplat, ALPHA_MAX, COV_EIGEN_FLOOR, SUPPORT_CHI2,
    TRANSMITTANCE_MIN,
};
use crate::LATENT_DIM;

/// Valid-pixel counts for each loss term; all derived from the target so
/// they stay constant under parameter perturbations.
struct Support {
    n_color: usize,
    n_depth: usize,
    n_obj: usize,
    n_part: usize,
}

fn count_support(frame: &Frame, region: Option<&Mask>) -> Support {
    let (w, h) = (frame.camera.width, frame.camera.height);
    let mut s = Support {
        n_color: 0,
        n_depth: 0,
        n_obj: 0,
        n_part: 0,
    };
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = region {
                if !m.get(x, y) {
                    continue;
                }
            }
            s.n_color += 1;
            if depth_valid(frame.depth.get(x, y)) {
                s.n_depth += 1;
            }
            if frame.feat_obj.is_assigned(x, y) {
                s.n_obj += 1;
            }
            if frame.feat_part.is_assigned(x, y) {
                s.n_part += 1;
            }
        }
    }
    s
}

#[derive(Clone)]
struct SplatAccum {
    mean: Vector2<f64>,
    sinv: Matrix2<f64>,
    depth: f64,
    opacity_linear: f64,
    color: [f64; 3],
    feature: [f64; LATENT_DIM],
}

impl SplatAccum {
    fn zero() -> Self {
        SplatAccum {
            mean: Vector2::zeros(),
            sinv: Matrix2::zeros(),
            depth: 0.0,
            opacity_linear: 0.0,
            color: [0.0; 3],
            feature: [0.0; LATENT_DIM],
        }
    }

    fn add(&mut self, other: &SplatAccum) {
        self.mean += other.mean;
        self.sinv += other.sinv;
        self.depth += other.depth;
        self.opacity_linear += other.opacity_linear;
        for k in 0..3 {
            self.color[k] += other.color[k];
        }
        for k in 0..LATENT_DIM {
            self.feature[k] += other.feature[k];
        }
    }
}

struct BandResult {
    loss_color: f64,
    loss_depth: f64,
    loss_obj: f64,
    loss_part: f64,
    splat_accum: Vec<SplatAccum>,
    decoder_grads: DecoderGrads,
}

struct Contribution {
    splat: u32,
    alpha_raw: f64,
    /// transmittance before this splat
    transmittance: f64,
}

/// Cosine-loss gradient: returns (1 - cos) and dL/da for L = 1 - cos(a, b).
fn cosine_loss_grad(a: &DVector<f64>, b: &[f32]) -> (f64, DVector<f64>) {
    let na = a.norm();
    let nb = b.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return (0.0, DVector::zeros(a.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
    let cos = dot / (na * nb);
    let mut grad = DVector::zeros(a.len());
    for i in 0..a.len() {
        // d(1-cos)/da_i = -(b_i/(na*nb) - cos*a_i/na²)
        grad[i] = -(b[i] as f64 / (na * nb) - cos * a[i] / (na * na));
    }
    (1.0 - cos, grad)
}

/// Adjoint of the eigenvalue floor on a symmetric 2×2 matrix.
fn clamp_adjoint(
    g: &Matrix2<f64>,
    eigvals: &[f64; 2],
    eigvecs: &[Vector2<f64>; 2],
    clamped: &[bool; 2],
) -> Matrix2<f64> {
    match (clamped[0], clamped[1]) {
        (false, false) => *g,
        (true, true) => Matrix2::zeros(),
        (false, true) => {
            let (v1, v2) = (eigvecs[0], eigvecs[1]);
            let s1 = (v1.transpose() * g * v1)[(0, 0)];
            let s = (v2.transpose() * (g + g.transpose()) * v1)[(0, 0)];
            let denom = (eigvals[0] - eigvals[1]).max(1e-12);
            let k = (eigvals[0] - COV_EIGEN_FLOOR) / denom;
            let sym = v2 * v1.transpose() + v1 * v2.transpose();
            s1 * v1 * v1.transpose() + 0.5 * k * s * sym
        }
        // λ1 < floor implies λ2 < floor, so this arm is unreachable
        (true, false) => Matrix2::zeros(),
    }
}

fn rotation_grad_quat(g_r: &Matrix3<f64>, q: &[f64; 4]) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let dot = |d: &Matrix3<f64>| -> f64 { g_r.component_mul(d).sum() };
    let raw = [dot(&dw), dot(&dx), dot(&dy), dot(&dz)];
    // project through quaternion normalization (|q| = 1 here)
    let qdot = raw[0] * w + raw[1] * x + raw[2] * y + raw[3] * z;
    [
        raw[0] - w * qdot,
        raw[1] - x * qdot,
        raw[2] - y * qdot,
        raw[3] - z * qdot,
    ]
}

/// Renders `frame` from `params`, returning the loss report and (optionally)
/// the gradient of the total loss w.r.t. every packed parameter.
pub fn evaluate_frame(
    params: &ParamVector,
    frame: &Frame,
    weights: &LossWeights,
    region: Option<&Mask>,
    want_grads: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let camera = &frame.camera;
    camera.validate()?;
    if params.n_prims == 0 {
        return Err(Error::precondition("cannot evaluate an empty scene"));
    }
    if frame.color.width != camera.width || frame.color.height != camera.height {
        return Err(Error::precondition("frame buffers do not match camera size"));
    }
    let support = count_support(frame, region);
    if support.n_color + support.n_depth + support.n_obj + support.n_part == 0 {
        return Err(Error::precondition("zero valid pixels in loss support"));
    }
    let prims = params.primitives();
    let decoder = params.decoder();
    let use_features = weights.feature > 0.0 && (support.n_obj + support.n_part) > 0;

    let splats = project_and_sort(camera, &prims);
    let bins = bin_pixels(&splats, camera.width, camera.height);
    let opacity: Vec<f64> = splats.iter().map(|s| prims[s.prim].opacity).collect();

    let height = camera.height;
    let n_bands = rayon::current_num_threads().clamp(1, 8);
    let rows_per_band = height.div_ceil(n_bands);
    let band_ranges: Vec<(usize, usize)> = (0..height)
        .step_by(rows_per_band.max(1))
        .map(|y0| (y0, (y0 + rows_per_band).min(height)))
        .collect();

    let bands: Vec<BandResult> = band_ranges
        .par_iter()
        .map(|&(y0, y1)| {
            process_band(
                y0, y1, frame, weights, region, &support, &splats, &bins, &opacity, &prims,
                &decoder, use_features, want_grads,
            )
        })
        .collect();

    let mut loss_color = 0.0;
    let mut loss_depth = 0.0;
    let mut loss_obj = 0.0;
    let mut loss_part = 0.0;
    for b in &bands {
        loss_color += b.loss_color;
        loss_depth += b.loss_depth;
        loss_obj += b.loss_obj;
        loss_part += b.loss_part;
    }
    let report = LossReport::assemble(loss_color, loss_depth, loss_obj, loss_part, weights);

    if !want_grads {
        return Ok((report, None));
    }

    // merge band accumulators in band order (deterministic)
    let mut accum: Vec<SplatAccum> = vec![SplatAccum::zero(); splats.len()];
    let mut dec_grads = DecoderGrads::zeros_like(&decoder);
    for b in &bands {
        for (a, o) in accum.iter_mut().zip(&b.splat_accum) {
            a.add(o);
        }
        dec_grads.add_assign(&b.decoder_grads);
    }

    let mut grads = vec![0.0; params.len()];
    backprop_splats(camera, &prims, &splats, &accum, &mut grads);

    // decoder grads into the packed layout
    let mut off = params.decoder_offset();
    for (m, b) in [
        (&dec_grads.trunk_w, &dec_grads.trunk_b),
        (&dec_grads.obj_w, &dec_grads.obj_b),
        (&dec_grads.part_w, &dec_grads.part_b),
    ] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                grads[off] = m[(r, c)];
                off += 1;
            }
        }
        for r in 0..b.len() {
            grads[off] = b[r];
            off += 1;
        }
    }

    Ok((report, Some(grads)))
}

#[allow(clippy::too_many_arguments)]
fn process_band(
    y0: usize,
    y1: usize,
    frame: &Frame,
    weights: &LossWeights,
    region: Option<&Mask>,
    support: &Support,
    splats: &[ProjectedSplat],
    bins: &[Vec<u32>],
    opacity: &[f64],
    prims: &[crate::scene::GaussianPrimitive],
    decoder: &DecoderWeights,
    use_features: bool,
    want_grads: bool,
) -> BandResult {
    let width = frame.camera.width;
    let mut out = BandResult {
        loss_color: 0.0,
        loss_depth: 0.0,
        loss_obj: 0.0,
        loss_part: 0.0,
        splat_accum: if want_grads {
            vec![SplatAccum::zero(); splats.len()]
        } else {
            Vec::new()
        },
        decoder_grads: DecoderGrads::zeros_like(decoder),
    };
    let mut contribs: Vec<Contribution> = Vec::with_capacity(64);
    let embed = decoder.embed_dim();
    let zero_branch = DVector::zeros(embed);

    for y in y0..y1 {
        for x in 0..width {
            if let Some(m) = region {
                if !m.get(x, y) {
                    continue;
                }
            }
            let px = Vector2::new(x as f64, y as f64);
            contribs.clear();
            let mut transmittance = 1.0f64;
            let mut out_depth = 0.0f64;
            let mut out_color = [0.0f64; 3];
            let mut out_feat = [0.0f64; LATENT_DIM];
            for &si in &bins[y * width + x] {
                let s = &splats[si as usize];
                let delta = px - s.splat.mean;
                let q = delta.dot(&(s.cov_inv * delta));
                if q > SUPPORT_CHI2 {
                    continue;
                }
                let raw = opacity[si as usize] * (-0.5 * q).exp();
                let alpha = raw.min(ALPHA_MAX);
                if alpha <= 0.0 {
                    continue;
                }
                contribs.push(Contribution {
                    splat: si,
                    alpha_raw: raw,
                    transmittance,
                });
                let w = alpha * transmittance;
                out_depth += s.splat.view_depth * w;
                let p = &prims[s.prim];
                for k in 0..3 {
                    out_color[k] += p.color[k] * w;
                }
                if use_features {
                    for k in 0..LATENT_DIM {
                        out_feat[k] += p.feature_latent[k] * w;
                    }
                }
                transmittance *= 1.0 - alpha;
                if transmittance < TRANSMITTANCE_MIN {
                    break;
                }
            }

            // losses + upstream per-pixel gradients
            let mut g_color = [0.0f64; 3];
            let mut g_depth = 0.0f64;
            let mut g_feat = [0.0f64; LATENT_DIM];
            let mut any_feat_grad = false;

            if weights.color > 0.0 && support.n_color > 0 {
                let tgt = frame.color.get(x, y);
                let mut e2 = 0.0;
                for k in 0..3 {
                    let d = out_color[k] - tgt[k];
                    e2 += d * d;
                    g_color[k] = weights.color * 2.0 * d / support.n_color as f64;
                }
                out.loss_color += e2 / support.n_color as f64;
            }
            let tgt_depth = frame.depth.get(x, y);
            if weights.depth > 0.0 && support.n_depth > 0 && depth_valid(tgt_depth) {
                let d = out_depth - tgt_depth;
                out.loss_depth += d * d / support.n_depth as f64;
                g_depth = weights.depth * 2.0 * d / support.n_depth as f64;
            }
            if use_features {
                let obj_assigned = support.n_obj > 0 && frame.feat_obj.is_assigned(x, y);
                let part_assigned = support.n_part > 0 && frame.feat_part.is_assigned(x, y);
                if obj_assigned || part_assigned {
                    let cache = decoder.forward_cached(&out_feat);
                    let mut g_obj = None;
                    let mut g_part = None;
                    if obj_assigned {
                        let (l, g) = cosine_loss_grad(&cache.obj, frame.feat_obj.pixel(x, y));
                        out.loss_obj += l / support.n_obj as f64;
                        g_obj = Some(g * (weights.feature / support.n_obj as f64));
                    }
                    if part_assigned {
                        let (l, g) = cosine_loss_grad(&cache.part, frame.feat_part.pixel(x, y));
                        out.loss_part += l / support.n_part as f64;
                        g_part = Some(g * (weights.feature * weights.part_lambda / support.n_part as f64));
                    }
                    if want_grads {
                        let go = g_obj.as_ref().unwrap_or(&zero_branch);
                        let gp = g_part.as_ref().unwrap_or(&zero_branch);
                        let g_latent =
                            decode_backward(decoder, &out_feat, &cache, go, gp, &mut out.decoder_grads);
                        for k in 0..LATENT_DIM {
                            g_feat[k] = g_latent[k];
                        }
                        any_feat_grad = true;
                    }
                }
            }

            if !want_grads {
                continue;
            }
            let any_grad = g_depth != 0.0
                || g_color.iter().any(|&g| g != 0.0)
                || any_feat_grad;
            if !any_grad || contribs.is_empty() {
                continue;
            }

            // reverse walk with suffix sums S_ch = Σ_{j>i} attr_j w_j
            let mut s_depth = 0.0f64;
            let mut s_color = [0.0f64; 3];
            let mut s_feat = [0.0f64; LATENT_DIM];
            for c in contribs.iter().rev() {
                let si = c.splat as usize;
                let s = &splats[si];
                let p = &prims[s.prim];
                let alpha = c.alpha_raw.min(ALPHA_MAX);
                let w = alpha * c.transmittance;
                let acc = &mut out.splat_accum[si];

                // gradient w.r.t. alpha and attributes
                let mut d_alpha = g_depth * (s.splat.view_depth * c.transmittance - s_depth / (1.0 - alpha));
                acc.depth += g_depth * w;
                for k in 0..3 {
                    d_alpha += g_color[k] * (p.color[k] * c.transmittance - s_color[k] / (1.0 - alpha));
                    acc.color[k] += g_color[k] * w;
                }
                if any_feat_grad {
                    for k in 0..LATENT_DIM {
                        d_alpha += g_feat[k]
                            * (p.feature_latent[k] * c.transmittance - s_feat[k] / (1.0 - alpha));
                        acc.feature[k] += g_feat[k] * w;
                    }
                }

                // suffix update
                s_depth += s.splat.view_depth * w;
                for k in 0..3 {
                    s_color[k] += p.color[k] * w;
                }
                if any_feat_grad {
                    for k in 0..LATENT_DIM {
                        s_feat[k] += p.feature_latent[k] * w;
                    }
                }

                if c.alpha_raw >= ALPHA_MAX {
                    continue; // ceiling clamp: zero subgradient
                }
                let op = opacity[si];
                if op <= 0.0 {
                    continue;
                }
                let gauss = c.alpha_raw / op;
                acc.opacity_linear += d_alpha * gauss;
                let d_q = -0.5 * d_alpha * c.alpha_raw;
                let delta = px - s.splat.mean;
                let u = s.cov_inv * delta;
                acc.mean += d_q * (-2.0) * u;
                acc.sinv += d_q * delta * delta.transpose();
            }
        }
    }
    out
}

/// Second stage: push per-splat screen-space adjoints down to the packed
/// primitive parameters.
fn backprop_splats(
    camera: &crate::scene::Camera,
    prims: &[crate::scene::GaussianPrimitive],
    splats: &[ProjectedSplat],
    accum: &[SplatAccum],
    grads: &mut [f64],
) {
    let w2c_rot = camera.pose.inverse().rotation;
    for (si, s) in splats.iter().enumerate() {
        let a = &accum[si];
        let o = s.prim * PRIM_STRIDE;
        let p = &prims[s.prim];

        // attribute gradients
        for k in 0..3 {
            grads[o + OFF_COLOR + k] += a.color[k];
        }
        for k in 0..LATENT_DIM {
            grads[o + OFF_LATENT + k] += a.feature[k];
        }
        let op = p.opacity;
        grads[o + OFF_LOGIT_OPACITY] += a.opacity_linear * op * (1.0 - op);

        let has_geom = a.mean != Vector2::zeros() || a.sinv != Matrix2::zeros() || a.depth != 0.0;
        if !has_geom {
            continue;
        }

        // Σ⁻¹ -> Σ
        let g_sigma = -(s.cov_inv * a.sinv * s.cov_inv);
        // eigenvalue floor
        let g_raw = clamp_adjoint(&g_sigma, &s.eigvals, &s.eigvecs, &s.clamped);
        // Σ_raw = J Σ_cam Jᵀ
        let g_j: Matrix2x3<f64> = (g_raw + g_raw.transpose()) * s.jacobian * s.cov_cam;
        let g_cov_cam = s.jacobian.transpose() * g_raw * s.jacobian;
        // Σ_cam = Rw Σ_world Rwᵀ
        let g_cov_world = w2c_rot.transpose() * g_cov_cam * w2c_rot;
        // Σ_world = M Mᵀ, M = R diag(scale)
        let rot = p.rotation.to_rotation_matrix().into_inner();
        let m = rot * Matrix3::from_diagonal(&p.scale);
        let g_m = (g_cov_world + g_cov_world.transpose()) * m;
        let g_rot = g_m * Matrix3::from_diagonal(&p.scale);
        for k in 0..3 {
            let g_scale_k = rot.column(k).dot(&g_m.column(k));
            grads[o + OFF_LOG_SCALE + k] += g_scale_k * p.scale[k];
        }
        let q = p.rotation.quaternion();
        let g_q = rotation_grad_quat(&g_rot, &[q.w, q.i, q.j, q.k]);
        for k in 0..4 {
            grads[o + OFF_QUAT + k] += g_q[k];
        }

        // t_cam adjoint: mean, view depth, and the Jacobian's own dependence
        let (fx, fy) = (camera.fx, camera.fy);
        let t = s.t_cam;
        let z2 = t.z * t.z;
        let z3 = z2 * t.z;
        let mut g_t = s.jacobian.transpose() * a.mean;
        g_t.z += a.depth;
        g_t.x += g_j[(0, 2)] * (-fx / z2);
        g_t.y += g_j[(1, 2)] * (-fy / z2);
        g_t.z += g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * t.x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * t.y / z3);
        let g_center = camera.pose.rotation * g_t;
        for k in 0..3 {
            grads[o + OFF_CENTER + k] += g_center[k];
        }
    }
}
