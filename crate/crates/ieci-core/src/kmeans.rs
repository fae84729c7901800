//! Seeded Lloyd clustering with k-means++ initialization.
//!
//! Used to compress training features into a confounder codebook. The
//! objective (total squared distance to assigned centroids) is recorded
//! per iteration and is non-increasing; empty clusters are re-seeded from
//! the point farthest from its current centroid.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum KMeansError {
    #[error("need at least {k} points for {k} clusters, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("points must be a nonempty rank-2 matrix, got shape {shape:?}")]
    BadShape { shape: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `[k × d]` cluster centers.
    pub centroids: Tensor,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Objective after each assignment pass; non-increasing.
    pub objective_trace: Vec<f64>,
}

pub fn kmeans(
    points: &Tensor,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeans, KMeansError> {
    if k == 0 {
        return Err(KMeansError::ZeroClusters);
    }
    if points.shape().len() != 2 || points.numel() == 0 {
        return Err(KMeansError::BadShape {
            shape: points.shape().to_vec(),
        });
    }
    let n = points.rows();
    let d = points.cols();
    if n < k {
        return Err(KMeansError::TooFewPoints { n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();

    for iter in 0..max_iters.max(1) {
        assign(points, &centroids, &mut assignments);
        reseed_empty_clusters(points, &mut centroids, &mut assignments, k);
        let obj = objective(points, &centroids, &assignments);
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (prev - obj).abs() <= tol * prev.max(f64::MIN_POSITIVE));
        trace.push(obj);
        if converged || iter + 1 == max_iters.max(1) {
            break;
        }
        update_centroids(points, &assignments, k, d, &mut centroids);
    }

    Ok(KMeans {
        centroids,
        assignments,
        objective_trace: trace,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, the rest sampled with
/// probability proportional to squared distance from the nearest center.
fn plus_plus_init(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.rows();
    let d = points.cols();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = *chosen.last().expect("at least one center");
        for i in 0..n {
            let dist = dist2(points.row(i), points.row(last));
            if dist < nearest[i] {
                nearest[i] = dist;
            }
        }
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point coincides with a chosen center
            rng.random_range(0..n)
        };
        chosen.push(next);
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(points.row(i));
    }
    Tensor::new(vec![k, d], data).expect("init centroid shape")
}

/// Nearest-centroid assignment; ties break to the lowest cluster index.
fn assign(points: &Tensor, centroids: &Tensor, assignments: &mut [usize]) {
    let k = centroids.rows();
    for (i, slot) in assignments.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_c = 0;
        for c in 0..k {
            let dist = dist2(points.row(i), centroids.row(c));
            if dist < best {
                best = dist;
                best_c = c;
            }
        }
        *slot = best_c;
    }
}

/// Move the centroid of each empty cluster onto the point farthest from
/// its assigned centroid, then re-assign. Bounded at `k` rounds; fully
/// degenerate inputs (all points identical) may legitimately keep a
/// cluster empty, with its centroid equal to the duplicated point.
fn reseed_empty_clusters(
    points: &Tensor,
    centroids: &mut Tensor,
    assignments: &mut [usize],
    k: usize,
) {
    let d = points.cols();
    for _round in 0..k {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if empties.is_empty() {
            return;
        }
        for &e in &empties {
            let far = (0..points.rows())
                .max_by(|&a, &b| {
                    let da = dist2(points.row(a), centroids.row(assignments[a]));
                    let db = dist2(points.row(b), centroids.row(assignments[b]));
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("nonempty points");
            let src = points.row(far).to_vec();
            centroids.data_mut()[e * d..(e + 1) * d].copy_from_slice(&src);
        }
        assign(points, centroids, assignments);
    }
}

fn objective(points: &Tensor, centroids: &Tensor, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| dist2(points.row(i), centroids.row(c)))
        .sum()
}

fn update_centroids(
    points: &Tensor,
    assignments: &[usize],
    k: usize,
    d: usize,
    centroids: &mut Tensor,
) {
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (j, v) in points.row(i).iter().enumerate() {
            sums[c * d + j] += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue; // keep the re-seeded position
        }
        for j in 0..d {
            centroids.data_mut()[c * d + j] = sums[c * d + j] / counts[c] as f64;
        }
    }
}
