//! Linear refinement of standardized codes.
//!
//! A matrix `W` maps a standardized code `z` to `W z`, so Euclidean distance
//! between refined codes is the Mahalanobis distance with matrix `WᵀW`. `W`
//! starts at the identity and is fitted so that ratios of code distances
//! track ratios of accuracy gaps over random quadruplets of observations:
//!
//! ```text
//! loss = (|y0 - y1| / |y2 - y3|  -  ‖W(z0 - z1)‖ / ‖W(z2 - z3)‖)²
//! ```

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub quadruplets_per_step: usize,
    /// Cap on the Frobenius norm of each averaged gradient.
    pub grad_clip: f64,
    /// Floor on both loss denominators.
    pub denominator_floor: f64,
    /// Size of the held-out sample used to accept or reject the fit.
    pub held_out: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 2000,
            quadruplets_per_step: 16,
            grad_clip: 10.0,
            denominator_floor: 1e-6,
            held_out: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRefiner {
    dim: usize,
    /// Row-major `dim × dim`.
    weight: Vec<f64>,
}

impl LinearRefiner {
    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "refiner dimension must be positive");
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self { dim, weight }
    }

    pub fn from_weight(dim: usize, weight: Vec<f64>) -> Self {
        assert_eq!(weight.len(), dim * dim);
        Self { dim, weight }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim)
    }

    pub fn refine(&self, z: &[f64]) -> Vec<f64> {
        apply(&self.weight, self.dim, z)
    }

    pub fn refine_all(&self, zs: &[Vec<f64>], exec: Exec) -> Vec<Vec<f64>> {
        exec.map_slice(zs, |z| self.refine(z))
    }
}

fn apply(w: &[f64], m: usize, z: &[f64]) -> Vec<f64> {
    assert_eq!(z.len(), m);
    (0..m).map(|i| w[i * m..(i + 1) * m].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Four evaluated observations (standardized codes and accuracies).
#[derive(Debug, Clone, Copy)]
pub struct Quadruplet<'a> {
    pub codes: [&'a [f64]; 4],
    pub accuracies: [f64; 4],
}

impl Quadruplet<'_> {
    fn accuracy_ratio(&self, floor: f64) -> Option<f64> {
        let [y0, y1, y2, y3] = self.accuracies;
        let den = (y2 - y3).abs();
        (den >= floor).then(|| (y0 - y1).abs() / den)
    }
}

/// Loss of one quadruplet under `refiner`.
pub fn loss(q: &Quadruplet, refiner: &LinearRefiner, floor: f64) -> Result<f64> {
    loss_and_grad(q, &refiner.weight, refiner.dim, floor, false).map(|(l, _)| l).ok_or(Error::DegenerateQuadruplet)
}

/// Loss and (optionally) its gradient with respect to the row-major weight.
pub fn loss_and_grad(q: &Quadruplet, w: &[f64], m: usize, floor: f64, want_grad: bool) -> Option<(f64, Vec<f64>)> {
    let ry = q.accuracy_ratio(floor)?;
    let d01 = diff(q.codes[0], q.codes[1]);
    let d23 = diff(q.codes[2], q.codes[3]);
    let u = apply(w, m, &d01);
    let v = apply(w, m, &d23);
    let a = norm(&u);
    let b = norm(&v);
    if b < floor {
        return None;
    }
    let rx = a / b;
    let resid = ry - rx;
    let l = resid * resid;
    if !want_grad {
        return Some((l, Vec::new()));
    }
    // d rx / dW = (u d01ᵀ)/(a b) - a (v d23ᵀ)/b³
    let ca = if a > 0.0 { 1.0 / (a * b) } else { 0.0 };
    let cb = a / (b * b * b);
    let scale = -2.0 * resid;
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            g[i * m + j] = scale * (ca * u[i] * d01[j] - cb * v[i] * d23[j]);
        }
    }
    Some((l, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    /// True when the fit was skipped or rejected and the identity returned.
    pub kept_identity: bool,
}

fn draw_quadruplet<'a, R: Rng + ?Sized>(
    codes: &'a [Vec<f64>],
    accuracies: &[f64],
    w: &[f64],
    m: usize,
    floor: f64,
    rng: &mut R,
) -> Option<Quadruplet<'a>> {
    for _ in 0..1000 {
        let idx = index::sample(rng, codes.len(), 4);
        let q = Quadruplet {
            codes: [&codes[idx.index(0)], &codes[idx.index(1)], &codes[idx.index(2)], &codes[idx.index(3)]],
            accuracies: [
                accuracies[idx.index(0)],
                accuracies[idx.index(1)],
                accuracies[idx.index(2)],
                accuracies[idx.index(3)],
            ],
        };
        if q.accuracy_ratio(floor).is_some() && norm(&apply(w, m, &diff(q.codes[2], q.codes[3]))) >= floor {
            return Some(q);
        }
    }
    None
}

fn mean_loss(qs: &[Quadruplet], w: &[f64], m: usize, floor: f64) -> f64 {
    let ls: Vec<f64> = qs.iter().filter_map(|q| loss_and_grad(q, w, m, floor, false).map(|x| x.0)).collect();
    if ls.is_empty() {
        0.0
    } else {
        ls.iter().sum::<f64>() / ls.len() as f64
    }
}

/// Fits a refiner from the identity by SGD over random quadruplets.
///
/// Returns the identity if every quadruplet is degenerate (constant
/// accuracies) or if the fit does not lower the held-out loss.
pub fn train<R: Rng + ?Sized>(
    codes: &[Vec<f64>],
    accuracies: &[f64],
    config: &RefinerConfig,
    rng: &mut R,
) -> Result<(LinearRefiner, TrainReport)> {
    if codes.len() < 4 {
        return Err(Error::TooFewObservations { needed: 4, got: codes.len() });
    }
    assert_eq!(codes.len(), accuracies.len());
    let m = codes[0].len();
    let floor = config.denominator_floor;
    let identity = LinearRefiner::identity(m);
    let skipped = |loss| {
        Ok((identity.clone(), TrainReport { initial_loss: loss, final_loss: loss, steps_run: 0, kept_identity: true }))
    };

    let (lo, hi) = accuracies.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if hi - lo < floor {
        log::warn!("refiner: accuracies are constant, keeping identity");
        return skipped(0.0);
    }

    let held_out: Vec<Quadruplet> = (0..config.held_out)
        .map_while(|_| draw_quadruplet(codes, accuracies, &identity.weight, m, floor, rng))
        .collect();
    if held_out.is_empty() {
        log::warn!("refiner: no non-degenerate quadruplet, keeping identity");
        return skipped(0.0);
    }
    let initial_loss = mean_loss(&held_out, &identity.weight, m, floor);

    let mut w = identity.weight.clone();
    let mut steps_run = 0;
    'steps: for _ in 0..config.steps {
        let mut g = vec![0.0; m * m];
        let mut count = 0usize;
        for _ in 0..config.quadruplets_per_step {
            let Some(q) = draw_quadruplet(codes, accuracies, &w, m, floor, rng) else {
                break 'steps;
            };
            if let Some((_, gq)) = loss_and_grad(&q, &w, m, floor, true) {
                g.iter_mut().zip(&gq).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
        if count == 0 {
            break;
        }
        let inv = 1.0 / count as f64;
        g.iter_mut().for_each(|x| *x *= inv);
        let gn = norm(&g);
        let clip = if gn > config.grad_clip { config.grad_clip / gn } else { 1.0 };
        if !gn.is_finite() {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= config.learning_rate * clip * gi;
        }
        steps_run += 1;
    }

    let final_loss = mean_loss(&held_out, &w, m, floor);
    if w.iter().all(|x| x.is_finite()) && final_loss <= initial_loss {
        Ok((
            LinearRefiner::from_weight(m, w),
            TrainReport { initial_loss, final_loss, steps_run, kept_identity: false },
        ))
    } else {
        Ok((identity, TrainReport { initial_loss, final_loss: initial_loss, steps_run, kept_identity: true }))
    }
}
