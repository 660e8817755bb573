//! Flat parameter vector over scene + decoder, with the reparametrizations
//! the optimizer works in: log scales, logit opacities, raw quaternions
//! (renormalized after every step).

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::feature::decoder::{DecoderWeights, HIDDEN_DIM};
use crate::scene::{GaussianPrimitive, Scene};
use crate::LATENT_DIM;

/// Per-primitive scalar count in the packed layout.
pub const PRIM_STRIDE: usize = 30;
pub const OFF_CENTER: usize = 0;
pub const OFF_QUAT: usize = 3;
pub const OFF_LOG_SCALE: usize = 7;
pub const OFF_LOGIT_OPACITY: usize = 10;
pub const OFF_COLOR: usize = 11;
pub const OFF_LATENT: usize = 14;

/// Opacity stays in [1e-4, 1 - 1e-4]; the logit is clamped accordingly.
pub const OPACITY_EPS: f64 = 1e-4;

pub fn logit_bound() -> f64 {
    ((1.0 - OPACITY_EPS) / OPACITY_EPS).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Optimization groups with separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Center,
    Rotation,
    Scale,
    Opacity,
    Color,
    Latent,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub n_prims: usize,
    pub embed_dim: usize,
}

impl ParamVector {
    pub fn decoder_offset(&self) -> usize {
        self.n_prims * PRIM_STRIDE
    }

    pub fn decoder_len(embed_dim: usize) -> usize {
        HIDDEN_DIM * LATENT_DIM + HIDDEN_DIM + 2 * (embed_dim * HIDDEN_DIM + embed_dim)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        if index >= self.decoder_offset() {
            return ParamGroup::Decoder;
        }
        match index % PRIM_STRIDE {
            i if i < OFF_QUAT => ParamGroup::Center,
            i if i < OFF_LOG_SCALE => ParamGroup::Rotation,
            i if i < OFF_LOGIT_OPACITY => ParamGroup::Scale,
            i if i < OFF_COLOR => ParamGroup::Opacity,
            i if i < OFF_LATENT => ParamGroup::Color,
            _ => ParamGroup::Latent,
        }
    }

    pub fn pack(scene: &Scene) -> ParamVector {
        let n = scene.primitives.len();
        let embed_dim = scene.decoder.embed_dim();
        let mut data = vec![0.0; n * PRIM_STRIDE + Self::decoder_len(embed_dim)];
        for (i, p) in scene.primitives.iter().enumerate() {
            let o = i * PRIM_STRIDE;
            data[o..o + 3].copy_from_slice(p.center.as_slice());
            let q = p.rotation.quaternion();
            data[o + OFF_QUAT] = q.w;
            data[o + OFF_QUAT + 1] = q.i;
            data[o + OFF_QUAT + 2] = q.j;
            data[o + OFF_QUAT + 3] = q.k;
            for k in 0..3 {
                data[o + OFF_LOG_SCALE + k] = p.scale[k].ln();
            }
            data[o + OFF_LOGIT_OPACITY] = logit(p.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS));
            data[o + OFF_COLOR..o + OFF_COLOR + 3].copy_from_slice(p.color.as_slice());
            data[o + OFF_LATENT..o + OFF_LATENT + LATENT_DIM].copy_from_slice(&p.feature_latent);
        }
        let mut off = n * PRIM_STRIDE;
        let d = &scene.decoder;
        for (m, b) in [(&d.trunk_w, &d.trunk_b), (&d.obj_w, &d.obj_b), (&d.part_w, &d.part_b)] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    data[off] = m[(r, c)];
                    off += 1;
                }
            }
            for r in 0..b.len() {
                data[off] = b[r];
                off += 1;
            }
        }
        ParamVector {
            data,
            n_prims: n,
            embed_dim,
        }
    }

    /// Builds the primitive this parameter block encodes. The quaternion is
    /// normalized as part of materialization so gradients and finite
    /// differences see the same function of the raw parameters.
    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        let o = i * PRIM_STRIDE;
        let d = &self.data;
        let q = Quaternion::new(d[o + OFF_QUAT], d[o + OFF_QUAT + 1], d[o + OFF_QUAT + 2], d[o + OFF_QUAT + 3]);
        let mut latent = [0.0; LATENT_DIM];
        latent.copy_from_slice(&d[o + OFF_LATENT..o + OFF_LATENT + LATENT_DIM]);
        GaussianPrimitive {
            center: Vector3::new(d[o], d[o + 1], d[o + 2]),
            rotation: UnitQuaternion::new_normalize(q),
            scale: Vector3::new(
                d[o + OFF_LOG_SCALE].exp(),
                d[o + OFF_LOG_SCALE + 1].exp(),
                d[o + OFF_LOG_SCALE + 2].exp(),
            ),
            opacity: sigmoid(d[o + OFF_LOGIT_OPACITY]),
            color: Vector3::new(d[o + OFF_COLOR], d[o + OFF_COLOR + 1], d[o + OFF_COLOR + 2]),
            feature_latent: latent,
        }
    }

    pub fn primitives(&self) -> Vec<GaussianPrimitive> {
        (0..self.n_prims).map(|i| self.primitive(i)).collect()
    }

    pub fn decoder(&self) -> DecoderWeights {
        let mut w = DecoderWeights::zeros(self.embed_dim);
        let mut off = self.decoder_offset();
        {
            let d = &self.data;
            for (m, b) in [
                (&mut w.trunk_w, &mut w.trunk_b),
                (&mut w.obj_w, &mut w.obj_b),
                (&mut w.part_w, &mut w.part_b),
            ] {
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        m[(r, c)] = d[off];
                        off += 1;
                    }
                }
                for r in 0..b.len() {
                    b[r] = d[off];
                    off += 1;
                }
            }
        }
        w.activation = crate::feature::Activation::Tanh;
        w
    }

    /// Writes the packed state back into the scene.
    pub fn unpack_into(&self, scene: &mut Scene) {
        let activation = scene.decoder.activation;
        scene.primitives = self.primitives();
        scene.decoder = self.decoder();
        scene.decoder.activation = activation;
    }

    /// Projection step after an optimizer update: renormalize quaternions
    /// and clamp opacity logits.
    pub fn project_constraints(&mut self) {
        let bound = logit_bound();
        for i in 0..self.n_prims {
            let o = i * PRIM_STRIDE;
            let q = &mut self.data[o + OFF_QUAT..o + OFF_QUAT + 4];
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if norm > 1e-12 {
                for v in q.iter_mut() {
                    *v /= norm;
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
            let l = &mut self.data[o + OFF_LOGIT_OPACITY];
            *l = l.clamp(-bound, bound);
        }
    }
}

/// Adam state over the packed vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            // deadband: keeps updates proportional to the gradient once it
            // falls below this scale, so converged scenes stop drifting
            eps: 1e-5,
        }
    }

    /// One update with per-parameter learning rates; indices where
    /// `lr == 0` are left untouched (frozen).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), lr.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if lr[i] == 0.0 {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= lr[i] * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
