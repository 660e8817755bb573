//! Density-based clustering with noise (Ester et al. 1996). Points are
//! scanned in index order and region queries return ascending indices, so
//! labels are deterministic for a given input order while the partition
//! itself is order-independent.

use nalgebra::Vector3;

use crate::spatial::SpatialGrid;

/// Cluster label per point; None marks noise. `eps` is inclusive.
pub fn dbscan(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0, "eps must be positive");
    assert!(min_pts >= 1, "min_pts must be at least 1");
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    if n == 0 {
        return labels;
    }
    let grid = SpatialGrid::build(points, eps);
    let mut next_cluster = 0usize;
    let mut queue: Vec<usize> = Vec::new();

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let neighbours = grid.within(&points[seed], eps);
        if neighbours.len() < min_pts {
            continue; // noise for now; may become a border point later
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[seed] = Some(cluster);
        queue.clear();
        queue.extend(neighbours);
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            if labels[p].is_none() {
                labels[p] = Some(cluster);
            }
            if visited[p] {
                continue;
            }
            visited[p] = true;
            let nb = grid.within(&points[p], eps);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    /// Quadratic reference implementation, straight from the textbook
    /// definition, for cross-checking.
    fn dbscan_reference(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
        let n = points.len();
        let neigh = |i: usize| -> Vec<usize> {
            (0..n)
                .filter(|&j| (points[j] - points[i]).norm() <= eps)
                .collect()
        };
        let mut labels = vec![None; n];
        let mut visited = vec![false; n];
        let mut cluster = 0;
        for i in 0..n {
            if visited[i] {
                continue;
            }
            visited[i] = true;
            let nb = neigh(i);
            if nb.len() < min_pts {
                continue;
            }
            labels[i] = Some(cluster);
            let mut queue = nb;
            let mut h = 0;
            while h < queue.len() {
                let p = queue[h];
                h += 1;
                if labels[p].is_none() {
                    labels[p] = Some(cluster);
                }
                if !visited[p] {
                    visited[p] = true;
                    let nbp = neigh(p);
                    if nbp.len() >= min_pts {
                        queue.extend(nbp);
                    }
                }
            }
            cluster += 1;
        }
        labels
    }

    fn partition(labels: &[Option<usize>]) -> BTreeSet<BTreeSet<usize>> {
        let mut by_cluster: std::collections::HashMap<usize, BTreeSet<usize>> = Default::default();
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                by_cluster.entry(*c).or_default().insert(i);
            }
        }
        by_cluster.into_values().collect()
    }

    #[test]
    fn tight_group_is_one_cluster() {
        let points: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64 * 0.001, 0.0, 0.0))
            .collect();
        let labels = dbscan(&points, 0.01, 4);
        assert!(labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn isolated_point_is_noise() {
        let points = vec![Vector3::zeros()];
        let labels = dbscan(&points, 0.5, 2);
        assert_eq!(labels, vec![None]);
    }

    #[test]
    fn blobs_and_strays_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let eps = 0.02;
        let mut points = Vec::new();
        for c in [Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)] {
            for _ in 0..20 {
                points.push(
                    c + Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * eps,
                );
            }
        }
        for k in 0..5 {
            points.push(Vector3::new(-3.0 - k as f64, 4.0, 1.0 + k as f64));
        }
        let got = dbscan(&points, eps, 4);
        let want = dbscan_reference(&points, eps, 4);
        assert_eq!(got, want);
        let clusters = partition(&got);
        assert_eq!(clusters.len(), 2);
        assert_eq!(got.iter().filter(|l| l.is_none()).count(), 5);
    }

    #[test]
    fn partition_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut points: Vec<Vector3<f64>> = Vec::new();
        for _ in 0..3 {
            let c = Vector3::new(rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0, 0.0);
            for _ in 0..15 {
                points.push(c + Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>()) * 0.05);
            }
        }
        let base = partition(&dbscan(&points, 0.08, 4));
        for round in 0..5 {
            // deterministic shuffle
            let mut perm: Vec<usize> = (0..points.len()).collect();
            for i in (1..perm.len()).rev() {
                let j = (rng.gen::<u64>() as usize) % (i + 1);
                perm.swap(i, j);
            }
            let shuffled: Vec<Vector3<f64>> = perm.iter().map(|&i| points[i]).collect();
            let labels = dbscan(&shuffled, 0.08, 4);
            // map back to original indexing before comparing partitions
            let mut unshuffled = vec![None; points.len()];
            for (k, &orig) in perm.iter().enumerate() {
                unshuffled[orig] = labels[k];
            }
            assert_eq!(partition(&unshuffled), base, "round {round}");
        }
    }
}
