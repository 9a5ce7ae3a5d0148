//! k-means over refined codes and the growing cluster schedule.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id of each point.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Lloyd iterations run.
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub inertia: f64,
    pub iterations: usize,
}

impl Clustering {
    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary { k: self.k, inertia: self.inertia, iterations: self.iterations }
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest id on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixed point or `max_iters` is reached. Empty clusters are reseeded at the
/// point farthest from its centroid.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    max_iters: usize,
    exec: Exec,
) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, points: n });
    }
    if k == n {
        return Ok(Clustering {
            k,
            centroids: points.to_vec(),
            assignment: (0..n).collect(),
            inertia: 0.0,
            iterations: 0,
            inertia_trace: vec![0.0],
        });
    }
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let assigned = exec.map_slice(points, |p| nearest(p, &centroids));
        let changed = assigned.iter().zip(&assignment).any(|(a, &b)| a.0 != b);
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for (slot, a) in assignment.iter_mut().zip(&assigned) {
            *slot = a.0;
        }
        trace.push(dists.iter().sum());
        if !changed || iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignment[i]] -= 1;
                counts[j] = 1;
                assignment[i] = j;
                dists[i] = 0.0;
                centroids[j] = points[i].clone();
            }
        }
    }
    let inertia = *trace.last().unwrap();
    Ok(Clustering { k, centroids, assignment, inertia, iterations, inertia_trace: trace })
}

/// Cluster count for a 1-based search iteration: 16, 160, N/10, then N,
/// clamped to `[batch, N]`.
pub fn schedule(iteration: usize, n: usize, batch: usize) -> usize {
    assert!(iteration >= 1);
    let k = match iteration {
        1 => 16,
        2 => 160,
        3 => n / 10,
        _ => n,
    };
    k.max(batch).min(n)
}

/// Per cluster, the unevaluated member nearest its centroid (lowest index on
/// ties), or `None` when every member has been evaluated. Clusters are
/// disjoint, so representatives are distinct.
pub fn representatives(clustering: &Clustering, points: &[Vec<f64>], evaluated: &[bool]) -> Vec<Option<usize>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; clustering.k];
    for (i, p) in points.iter().enumerate() {
        if evaluated[i] {
            continue;
        }
        let j = clustering.assignment[i];
        let d = sq_dist(p, &clustering.centroids[j]);
        if best[j].is_none_or(|(_, bd)| d < bd) {
            best[j] = Some((i, d));
        }
    }
    best.into_iter().map(|b| b.map(|(i, _)| i)).collect()
}
