use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{RoutingTrace, StratificationConfig};
use crate::error::Result;

/// Result of Lloyd clustering over the trace embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Euclidean distance of each sample to its assigned centroid.
    pub distances: Vec<f64>,
    /// Total within-cluster squared distance after every assignment step.
    pub distortion_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn distortion(&self) -> f64 {
        self.distances.iter().map(|d| d * d).sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every point (ties to the lower index) and the squared
/// distance to it.
fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Greedy farthest-point seeding: a seeded random first centre, then
/// repeatedly the point farthest from every chosen centre.
fn farthest_point_seeds(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let chosen = points[next];
        centroids.push(chosen.to_vec());
        nearest
            .par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(n, p)| *n = n.min(sq_dist(p, chosen)));
    }
    centroids
}

/// Moves every empty cluster's centroid onto the point farthest from its
/// current centroid, taken from a cluster that can spare it.
fn reseed_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], assigned: &mut [(usize, f64)]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &(c, _) in assigned.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = assigned
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c] > 1)
            .fold(None::<(usize, f64)>, |best, (i, &(_, d))| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = donor else { return };
        centroids[empty] = points[i].to_vec();
        assigned[i] = (empty, 0.0);
    }
}

fn means(points: &[&[f64]], assigned: &[(usize, f64)], k: usize, dim: usize, old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &(c, _)) in points.iter().zip(assigned) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                old[c].clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Lloyd iteration with farthest-point seeding over the trace embeddings.
///
/// Stops when the largest centroid shift drops below `config.tolerance` or
/// after `config.max_kmeans_iters` updates. Every sample ends assigned to
/// its nearest final centroid.
pub fn cluster(trace: &RoutingTrace, config: &StratificationConfig) -> Result<Clustering> {
    config.validate(trace.samples.len())?;
    let points: Vec<&[f64]> = trace.samples.iter().map(|s| s.embedding.as_slice()).collect();
    let k = config.num_clusters;
    let dim = trace.meta.embedding_dim;

    let mut centroids = farthest_point_seeds(&points, k, config.seed);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assigned;
    loop {
        assigned = assign(&points, &centroids);
        reseed_empty(&points, &mut centroids, &mut assigned);
        history.push(assigned.iter().map(|&(_, d)| d).sum::<f64>());
        if iterations >= config.max_kmeans_iters {
            break;
        }
        let updated = means(&points, &assigned, k, dim, &centroids);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations += 1;
        if shift < config.tolerance {
            assigned = assign(&points, &centroids);
            reseed_empty(&points, &mut centroids, &mut assigned);
            history.push(assigned.iter().map(|&(_, d)| d).sum::<f64>());
            break;
        }
    }

    Ok(Clustering {
        assignments: assigned.iter().map(|&(c, _)| c).collect(),
        distances: assigned.iter().map(|&(_, d)| d.sqrt()).collect(),
        centroids,
        distortion_history: history,
        iterations,
    })
}
