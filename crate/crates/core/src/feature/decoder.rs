//! Two-branch latent decoder: a shared trunk lifts the 16-dim per-primitive
//! latent to a hidden layer, then separate heads emit the object-level and
//! part-level embeddings.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::LATENT_DIM;

pub const HIDDEN_DIM: usize = 64;
pub const EMBED_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    pub fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Activation> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub trunk_w: DMatrix<f64>,
    pub trunk_b: DVector<f64>,
    pub obj_w: DMatrix<f64>,
    pub obj_b: DVector<f64>,
    pub part_w: DMatrix<f64>,
    pub part_b: DVector<f64>,
    pub activation: Activation,
}

/// Trunk activations cached for the backward pass.
pub struct DecodeCache {
    pub hidden: DVector<f64>,
    pub obj: DVector<f64>,
    pub part: DVector<f64>,
}

impl DecoderWeights {
    pub fn embed_dim(&self) -> usize {
        self.obj_w.nrows()
    }

    pub fn zeros(embed_dim: usize) -> Self {
        DecoderWeights {
            trunk_w: DMatrix::zeros(HIDDEN_DIM, LATENT_DIM),
            trunk_b: DVector::zeros(HIDDEN_DIM),
            obj_w: DMatrix::zeros(embed_dim, HIDDEN_DIM),
            obj_b: DVector::zeros(embed_dim),
            part_w: DMatrix::zeros(embed_dim, HIDDEN_DIM),
            part_b: DVector::zeros(embed_dim),
            activation: Activation::Tanh,
        }
    }

    /// Xavier-uniform initialization, deterministic per seed.
    pub fn seeded_with_dim(seed: u64, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465636f64657273);
        let mut init = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
        };
        DecoderWeights {
            trunk_w: init(HIDDEN_DIM, LATENT_DIM),
            trunk_b: DVector::zeros(HIDDEN_DIM),
            obj_w: init(embed_dim, HIDDEN_DIM),
            obj_b: DVector::zeros(embed_dim),
            part_w: init(embed_dim, HIDDEN_DIM),
            part_b: DVector::zeros(embed_dim),
            activation: Activation::Tanh,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::seeded_with_dim(seed, EMBED_DIM)
    }

    pub fn forward_cached(&self, latent: &[f64]) -> DecodeCache {
        debug_assert_eq!(latent.len(), self.trunk_w.ncols());
        let x = DVector::from_column_slice(latent);
        let mut hidden = &self.trunk_w * x + &self.trunk_b;
        for h in hidden.iter_mut() {
            *h = self.activation.apply(*h);
        }
        let obj = &self.obj_w * &hidden + &self.obj_b;
        let part = &self.part_w * &hidden + &self.part_b;
        DecodeCache { hidden, obj, part }
    }

    /// Decodes one latent into (object embedding, part embedding).
    pub fn decode(&self, latent: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let cache = self.forward_cached(latent);
        (cache.obj, cache.part)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.trunk_w.len()
            + self.trunk_b.len()
            + self.obj_w.len()
            + self.obj_b.len()
            + self.part_w.len()
            + self.part_b.len()
    }
}

/// Gradient buffers matching [`DecoderWeights`] shapes.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub trunk_w: DMatrix<f64>,
    pub trunk_b: DVector<f64>,
    pub obj_w: DMatrix<f64>,
    pub obj_b: DVector<f64>,
    pub part_w: DMatrix<f64>,
    pub part_b: DVector<f64>,
}

impl DecoderGrads {
    pub fn zeros_like(w: &DecoderWeights) -> Self {
        DecoderGrads {
            trunk_w: DMatrix::zeros(w.trunk_w.nrows(), w.trunk_w.ncols()),
            trunk_b: DVector::zeros(w.trunk_b.len()),
            obj_w: DMatrix::zeros(w.obj_w.nrows(), w.obj_w.ncols()),
            obj_b: DVector::zeros(w.obj_b.len()),
            part_w: DMatrix::zeros(w.part_w.nrows(), w.part_w.ncols()),
            part_b: DVector::zeros(w.part_b.len()),
        }
    }

    pub fn add_assign(&mut self, other: &DecoderGrads) {
        self.trunk_w += &other.trunk_w;
        self.trunk_b += &other.trunk_b;
        self.obj_w += &other.obj_w;
        self.obj_b += &other.obj_b;
        self.part_w += &other.part_w;
        self.part_b += &other.part_b;
    }
}

/// Accumulates decoder gradients for one pixel/primitive given the upstream
/// gradients on both branch outputs. Returns dL/d(latent input).
pub fn decode_backward(
    weights: &DecoderWeights,
    latent: &[f64],
    cache: &DecodeCache,
    g_obj: &DVector<f64>,
    g_part: &DVector<f64>,
    grads: &mut DecoderGrads,
) -> DVector<f64> {
    let x = DVector::from_column_slice(latent);
    // branch weights: rank-1 updates g ⊗ hidden
    grads.obj_w.ger(1.0, g_obj, &cache.hidden, 1.0);
    grads.obj_b += g_obj;
    grads.part_w.ger(1.0, g_part, &cache.hidden, 1.0);
    grads.part_b += g_part;
    let mut g_hidden = weights.obj_w.tr_mul(g_obj) + weights.part_w.tr_mul(g_part);
    for (g, h) in g_hidden.iter_mut().zip(cache.hidden.iter()) {
        *g *= weights.activation.derivative_from_output(*h);
    }
    grads.trunk_w.ger(1.0, &g_hidden, &x, 1.0);
    grads.trunk_b += &g_hidden;
    weights.trunk_w.tr_mul(&g_hidden)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_decode_to_zero() {
        let w = DecoderWeights::zeros(32);
        let (obj, part) = w.decode(&[1.0; LATENT_DIM]);
        assert!(obj.iter().all(|&v| v == 0.0));
        assert!(part.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_activation_is_linear_in_input() {
        let mut w = DecoderWeights::seeded_with_dim(5, 48);
        w.activation = Activation::Identity;
        w.trunk_b.fill(0.0);
        w.obj_b.fill(0.0);
        w.part_b.fill(0.0);
        let x: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 - 7.5) * 0.1).collect();
        let (o1, p1) = w.decode(&x);
        let scaled: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let (o2, p2) = w.decode(&scaled);
        assert!((o2 - &o1 * 3.5).norm() < 1e-12);
        assert!((p2 - &p1 * 3.5).norm() < 1e-12);
    }

    #[test]
    fn seeded_decoder_is_deterministic() {
        let a = DecoderWeights::seeded(42);
        let b = DecoderWeights::seeded(42);
        assert_eq!(a, b);
    }
}
