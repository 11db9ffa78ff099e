//! Lloyd's k-means with k-means++ seeding.
//!
//! Single-threaded and fully determined by the seed. Empty clusters are
//! re-seeded from the point farthest from its current centroid, so a fit
//! always returns exactly `k` non-empty clusters when `n >= k` distinct
//! points exist.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            tolerance: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

pub fn kmeans(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    let k = params.k;
    if k == 0 {
        return Err(Error::InvalidConfig("k-means needs k >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidConfig(format!(
            "k-means with k={k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.len(),
        });
    }

    let mut rng = rng::stream(params.seed, streams::KMEANS);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            assignments[i] = c;
            dists[i] = d;
        }
        reseed_empty(points, &mut centroids, &mut assignments, &mut dists);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            max_shift = max_shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if max_shift <= params.tolerance {
            converged = true;
            break;
        }
    }
    // Final assignment against the settled centroids.
    let mut dists = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(&centroids, p);
        assignments[i] = c;
        dists[i] = d;
    }
    reseed_empty(points, &mut centroids, &mut assignments, &mut dists);

    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
        converged,
    })
}

/// Moves each empty cluster onto the point farthest from its centroid.
fn reseed_empty(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        // Donor must keep at least one member.
        let far = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(far) = far else {
            return;
        };
        centroids[empty] = points[far].clone();
        assignments[far] = empty;
        dists[far] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for i in 0..20 {
                let t = i as f64 * 0.3;
                pts.push(vec![cx + 0.5 * t.sin(), cy + 0.5 * t.cos()]);
            }
        }
        pts
    }

    #[test]
    fn separates_well_spaced_blobs() {
        let pts = blobs();
        let fit = kmeans(&pts, &KMeansParams::new(3, 1)).unwrap();
        assert!(fit.converged);
        for blob in 0..3 {
            let c = fit.assignments[blob * 20];
            assert!(fit.assignments[blob * 20..(blob + 1) * 20].iter().all(|&a| a == c));
        }
        let mut used: Vec<usize> = fit.assignments.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
    }

    #[test]
    fn deterministic_for_seed() {
        let pts = blobs();
        let a = kmeans(&pts, &KMeansParams::new(5, 42)).unwrap();
        let b = kmeans(&pts, &KMeansParams::new(5, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cluster_count_matches_k_with_duplicates() {
        // Many duplicate points force empty clusters during seeding.
        let mut pts = vec![vec![0.0, 0.0]; 30];
        pts.extend((0..10).map(|i| vec![i as f64 + 1.0, 0.0]));
        let fit = kmeans(&pts, &KMeansParams::new(10, 3)).unwrap();
        for c in 0..10 {
            assert!(fit.members(c).count() > 0, "cluster {c} empty");
        }
    }

    #[test]
    fn rejects_too_few_points() {
        assert!(kmeans(&[vec![0.0]], &KMeansParams::new(2, 0)).is_err());
        assert!(kmeans(&[vec![0.0]], &KMeansParams::new(0, 0)).is_err());
    }
}
