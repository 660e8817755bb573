//! Uniform hash grid over 3D points for radius queries and nearest
//! neighbours. Query results are returned in ascending point-index order so
//! downstream algorithms stay deterministic.

use std::collections::HashMap;

use nalgebra::Vector3;

pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vector3<f64>>,
}

impl SpatialGrid {
    pub fn build(points: &[Vector3<f64>], cell: f64) -> SpatialGrid {
        let cell = if cell.is_finite() && cell > 1e-12 { cell } else { 1.0 };
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        SpatialGrid {
            cell,
            cells,
            points: points.to_vec(),
        }
    }

    #[inline]
    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of all points within `radius` of `center`, ascending.
    pub fn within(&self, center: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        let lo = Self::key(&(center - Vector3::repeat(radius)), self.cell);
        let hi = Self::key(&(center + Vector3::repeat(radius)), self.cell);
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                for cz in lo.2..=hi.2 {
                    if let Some(ids) = self.cells.get(&(cx, cy, cz)) {
                        for &i in ids {
                            if (self.points[i as usize] - center).norm_squared() <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Distance from point `i` to its nearest other point.
    pub fn nearest_neighbor_distance(&self, i: usize) -> f64 {
        let p = self.points[i];
        let mut radius = self.cell;
        for _ in 0..64 {
            let mut best = f64::INFINITY;
            for j in self.within(&p, radius) {
                if j != i {
                    best = best.min((self.points[j] - p).norm());
                }
            }
            if best.is_finite() {
                // a closer point could still hide just outside the search box
                if best <= radius {
                    return best;
                }
                radius = best;
            } else {
                radius *= 2.0;
            }
        }
        f64::INFINITY
    }
}

/// Median nearest-neighbour distance of a point set (used to derive
/// clustering scales). O(n·grid) with a heuristic cell size.
pub fn median_nn_distance(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).norm().max(1e-9);
    let cell = extent / (points.len() as f64).cbrt().max(1.0);
    let grid = SpatialGrid::build(points, cell);
    let mut dists: Vec<f64> = (0..points.len())
        .map(|i| grid.nearest_neighbor_distance(i))
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn within_matches_bruteforce() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let grid = SpatialGrid::build(&points, 0.13);
        for _ in 0..50 {
            let c = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let r = 0.05 + rng.gen::<f64>() * 0.3;
            let got = grid.within(&c, r);
            let want: Vec<usize> = (0..points.len())
                .filter(|&i| (points[i] - c).norm() <= r)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn nearest_neighbor_matches_bruteforce() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Vector3<f64>> = (0..120)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() * 0.2))
            .collect();
        let grid = SpatialGrid::build(&points, 0.21);
        for i in 0..points.len() {
            let want = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (points[j] - points[i]).norm())
                .fold(f64::INFINITY, f64::min);
            let got = grid.nearest_neighbor_distance(i);
            assert!((got - want).abs() < 1e-12);
        }
    }
}
