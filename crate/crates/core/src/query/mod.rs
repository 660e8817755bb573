//! Embedding-based object and part segmentation over primitives: cosine
//! similarities against positive/negative vocabulary embeddings, softmax
//! scoring with temperature, thresholding at τ, and DBSCAN outlier removal
//! on 3D centers.

pub mod dbscan;

pub use dbscan::dbscan;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::feature::EmbeddingOracle;
use crate::scene::Scene;
use crate::spatial::median_nn_distance;

/// Vocabulary and thresholds of one query.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub positive: String,
    pub negatives: Vec<String>,
    pub temperature: f64,
    pub tau: f64,
}

impl QuerySet {
    pub fn new(positive: impl Into<String>) -> QuerySet {
        QuerySet {
            positive: positive.into(),
            negatives: vec!["objects".into(), "things".into()],
            temperature: 1.0,
            tau: 0.6,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> QuerySet {
        self.temperature = t;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> QuerySet {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::precondition("query needs at least one negative word"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::precondition("temperature must be positive"));
        }
        Ok(())
    }
}

/// Which decoder branch scores the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryBranch {
    Object,
    Part,
}

#[derive(Debug, Clone)]
pub struct SegmentResult {
    /// Primitives whose positive score exceeded τ.
    pub indices: Vec<usize>,
    /// Positive softmax probability per entry of `indices`.
    pub scores: Vec<f64>,
    /// Subset of `indices` surviving DBSCAN outlier removal.
    pub cluster_kept: Vec<usize>,
}

/// DBSCAN defaults and cluster selection for segmentation.
#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    /// Neighborhood radius; derived as 2× the median nearest-neighbour
    /// distance among passing primitives when None.
    pub dbscan_eps: Option<f64>,
    pub dbscan_min_pts: usize,
    /// Keep only the largest surviving cluster (for grasping pipelines).
    pub largest_cluster_only: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            dbscan_eps: None,
            dbscan_min_pts: 10,
            largest_cluster_only: false,
        }
    }
}

/// Stable softmax of `sims / temperature`.
pub fn softmax_scores(sims: &[f64], temperature: f64) -> Vec<f64> {
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|&s| ((s - m) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Positive-query softmax score per candidate primitive: decode the latent
/// through the requested branch, cosine against every vocabulary embedding,
/// temperature softmax, return the positive entry.
pub fn score_primitives(
    scene: &Scene,
    query: &QuerySet,
    candidate: &[usize],
    oracle: &dyn EmbeddingOracle,
    branch: QueryBranch,
) -> Result<Vec<f64>> {
    query.validate()?;
    if candidate.is_empty() {
        return Err(Error::precondition("empty candidate set"));
    }
    if let Some(&bad) = candidate.iter().find(|&&i| i >= scene.len()) {
        return Err(Error::precondition(format!("candidate index {bad} out of range")));
    }
    let mut embeddings: Vec<DVector<f64>> = Vec::with_capacity(query.negatives.len() + 1);
    for w in &query.negatives {
        embeddings.push(oracle.text_embedding(w)?);
    }
    embeddings.push(oracle.text_embedding(&query.positive)?);
    let positive_idx = embeddings.len() - 1;

    let mut scores = Vec::with_capacity(candidate.len());
    for &i in candidate {
        let (obj, part) = scene.decoder.decode(&scene.primitives[i].feature_latent);
        let decoded = match branch {
            QueryBranch::Object => obj,
            QueryBranch::Part => part,
        };
        let sims: Vec<f64> = embeddings.iter().map(|e| cosine(&decoded, e)).collect();
        scores.push(softmax_scores(&sims, query.temperature)[positive_idx]);
    }
    Ok(scores)
}

fn threshold_and_cluster(
    scene: &Scene,
    candidate: &[usize],
    scores: &[f64],
    query: &QuerySet,
    opts: &SegmentOptions,
) -> Result<SegmentResult> {
    let mut indices = Vec::new();
    let mut kept_scores = Vec::new();
    for (&i, &s) in candidate.iter().zip(scores) {
        if s > query.tau {
            indices.push(i);
            kept_scores.push(s);
        }
    }
    if indices.is_empty() {
        let mut ranked: Vec<(usize, f64)> =
            candidate.iter().cloned().zip(scores.iter().cloned()).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let top: Vec<String> = ranked
            .iter()
            .take(5)
            .map(|(i, s)| format!("#{i}:{s:.3}"))
            .collect();
        return Err(Error::precondition(format!(
            "no primitive passed tau={} for query {:?}; top scores: {}",
            query.tau,
            query.positive,
            top.join(", ")
        )));
    }

    let centers: Vec<_> = indices.iter().map(|&i| scene.primitives[i].center).collect();
    let eps = opts
        .dbscan_eps
        .unwrap_or_else(|| 2.0 * median_nn_distance(&centers))
        .max(1e-9);
    let labels = dbscan(&centers, eps, opts.dbscan_min_pts);

    let cluster_kept: Vec<usize> = if opts.largest_cluster_only {
        let n_clusters = labels.iter().flatten().max().map(|&m| m + 1).unwrap_or(0);
        let mut sizes = vec![0usize; n_clusters];
        for l in labels.iter().flatten() {
            sizes[*l] += 1;
        }
        match sizes.iter().enumerate().max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i))) {
            Some((best, _)) => indices
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == Some(best))
                .map(|(&i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    } else {
        indices
            .iter()
            .zip(&labels)
            .filter(|(_, l)| l.is_some())
            .map(|(&i, _)| i)
            .collect()
    };

    Ok(SegmentResult {
        indices,
        scores: kept_scores,
        cluster_kept,
    })
}

/// Object-level query over the whole scene.
pub fn segment_object(
    scene: &Scene,
    query: &QuerySet,
    oracle: &dyn EmbeddingOracle,
    opts: &SegmentOptions,
) -> Result<SegmentResult> {
    let candidate: Vec<usize> = (0..scene.len()).collect();
    let scores = score_primitives(scene, query, &candidate, oracle, QueryBranch::Object)?;
    threshold_and_cluster(scene, &candidate, &scores, query, opts)
}

/// Conditional part-level query, restricted to an already segmented object
/// and scored through the part decoder branch.
pub fn segment_part(
    scene: &Scene,
    object_result: &SegmentResult,
    part_query: &QuerySet,
    oracle: &dyn EmbeddingOracle,
    opts: &SegmentOptions,
) -> Result<SegmentResult> {
    if object_result.cluster_kept.is_empty() {
        return Err(Error::precondition("empty object segmentation to condition on"));
    }
    let scores = score_primitives(
        scene,
        part_query,
        &object_result.cluster_kept,
        oracle,
        QueryBranch::Part,
    )?;
    threshold_and_cluster(scene, &object_result.cluster_kept, &scores, part_query, opts)
}
