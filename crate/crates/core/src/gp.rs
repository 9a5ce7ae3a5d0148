//! Gaussian-process surrogate with expected improvement and Monte-Carlo batch
//! selection.
//!
//! Targets are standardized to mean 0 and variance `1 + η²`, so the unit RBF
//! prior plus noise `η²` matches their scale. EEI draws fantasy targets for
//! pending points from the joint predictive distribution and averages the
//! closed-form EI of the fantasy-augmented posterior.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::cluster::sq_dist;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Cholesky;

pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_MC_SAMPLES: usize = 128;

/// Negative variances down to this are rounding noise.
const VARIANCE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    sigma: f64,
    eta: f64,
    chol: Cholesky,
    /// `L⁻¹ Ŷ`
    u: Vec<f64>,
    shift: f64,
    scale: f64,
    tau: f64,
}

impl GpModel {
    /// Fits on raw accuracies, standardizing them first.
    pub fn fit(x: Vec<Vec<f64>>, accuracies: &[f64], sigma: f64, eta: f64) -> Result<Self> {
        let n = accuracies.len();
        assert_eq!(x.len(), n);
        if n == 0 {
            return Err(Error::TooFewObservations { needed: 1, got: 0 });
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let var = accuracies.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let scale = if n >= 2 && var > 0.0 { (1.0 + eta * eta).sqrt() / var.sqrt() } else { 1.0 };
        let y = accuracies.iter().map(|a| (a - mean) * scale).collect();
        let mut m = Self::from_standardized(x, y, sigma, eta)?;
        m.shift = mean;
        m.scale = scale;
        Ok(m)
    }

    /// Fits on targets already on the model scale.
    pub fn from_standardized(x: Vec<Vec<f64>>, y: Vec<f64>, sigma: f64, eta: f64) -> Result<Self> {
        let n = y.len();
        assert_eq!(x.len(), n);
        assert!(sigma > 0.0 && sigma.is_finite(), "kernel bandwidth must be positive");
        for i in 0..n {
            for j in 0..i {
                if x[i] == x[j] {
                    return Err(Error::DuplicateInput { first: j, second: i });
                }
            }
        }
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = rbf(&x[i], &x[j], sigma);
            }
            gram[i * n + i] += eta * eta;
        }
        let chol = Cholesky::factor(n, &gram)?;
        let u = chol.solve_lower(&y);
        let tau = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { x, y, sigma, eta, chol, u, shift: 0.0, scale: 1.0, tau })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Incumbent: the largest standardized target.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Maps a model-scale value back to accuracy.
    pub fn destandardize(&self, v: f64) -> f64 {
        v / self.scale + self.shift
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        rbf(a, b, self.sigma)
    }

    fn cross(&self, x: &[f64]) -> Vec<f64> {
        self.x.iter().map(|xi| self.kernel(xi, x)).collect()
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let v = self.chol.solve_lower(&self.cross(x));
        let mean = dot(&v, &self.u);
        (mean, clamp_var(1.0 - dot(&v, &v)))
    }

    pub fn ei(&self, x: &[f64]) -> f64 {
        let (mu, var) = self.posterior(x);
        expected_improvement(mu, var.sqrt(), self.tau)
    }

    /// Expected EI at `x` given fantasy outcomes at `pending`, over
    /// `mc_samples` rounds. Equal to [`GpModel::ei`] when nothing is pending.
    pub fn eei<R: Rng + ?Sized>(&self, x: &[f64], pending: &[Vec<f64>], mc_samples: usize, rng: &mut R) -> Result<f64> {
        if pending.is_empty() {
            return Ok(self.ei(x));
        }
        assert!(mc_samples >= 1);
        let aug = self.augment(pending)?;
        let z = draw_normals(rng, mc_samples, pending.len());
        let mut state = CenterState::new(self, x);
        for p in pending {
            state.push(&aug, x, p, self.sigma);
        }
        let taus = aug.fantasy_taus(self.tau, &self.u, &z);
        Ok(state.eei(&z, &taus))
    }

    fn augment(&self, pending: &[Vec<f64>]) -> Result<Augmented> {
        let mut aug = Augmented { chol: self.chol.clone(), points: self.x.clone(), n: self.len() };
        for p in pending {
            aug.push(p, self.sigma, self.eta)?;
        }
        Ok(aug)
    }
}

fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_var(v: f64) -> f64 {
    if v < 0.0 {
        debug_assert!(v > -VARIANCE_SLACK * 1e3, "variance {v} far below zero");
        0.0
    } else {
        v.min(1.0)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[max(0, f - τ)]` for `f ~ N(μ, s²)`.
pub fn expected_improvement(mu: f64, s: f64, tau: f64) -> f64 {
    let d = mu - tau;
    if s <= 0.0 {
        return d.max(0.0);
    }
    let z = d / s;
    (d * normal_cdf(z) + s * normal_pdf(z)).max(0.0)
}

/// Factor of the Gram matrix over observations followed by pending points.
struct Augmented {
    chol: Cholesky,
    points: Vec<Vec<f64>>,
    n: usize,
}

impl Augmented {
    fn push(&mut self, p: &[f64], sigma: f64, eta: f64) -> Result<()> {
        let cross: Vec<f64> = self.points.iter().map(|q| rbf(q, p, sigma)).collect();
        self.chol = self.chol.extend(&cross, 1.0 + eta * eta)?;
        self.points.push(p.to_vec());
        Ok(())
    }

    fn pending(&self) -> usize {
        self.points.len() - self.n
    }

    /// Per round, the incumbent raised by that round's fantasy targets. The
    /// fantasy for pending point `j` is row `n + j` of `L` applied to
    /// `[L⁻¹Ŷ; z]`, i.e. a draw conditioned on the data and earlier fantasies.
    fn fantasy_taus(&self, tau: f64, u: &[f64], z: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let p = self.pending();
        let base: Vec<f64> = (0..p).map(|j| (0..n).map(|k| self.chol.at(n + j, k) * u[k]).sum()).collect();
        z.iter()
            .map(|zr| {
                let mut t = tau;
                for j in 0..p {
                    let y = base[j] + (0..=j).map(|k| self.chol.at(n + j, n + k) * zr[k]).sum::<f64>();
                    t = t.max(y);
                }
                t
            })
            .collect()
    }
}

fn draw_normals<R: Rng + ?Sized>(rng: &mut R, rounds: usize, p: usize) -> Vec<Vec<f64>> {
    (0..rounds).map(|_| (0..p).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// `v = L_aug⁻¹ k_aug(x)` for one center, extended as pending points arrive.
#[derive(Debug, Clone)]
struct CenterState {
    v: Vec<f64>,
    n: usize,
    mean_obs: f64,
    norm2: f64,
}

impl CenterState {
    fn new(model: &GpModel, x: &[f64]) -> Self {
        let v = model.chol.solve_lower(&model.cross(x));
        let mean_obs = dot(&v, &model.u);
        let norm2 = dot(&v, &v);
        Self { v, n: model.len(), mean_obs, norm2 }
    }

    /// Appends the entry for the pending point just pushed onto `aug`.
    fn push(&mut self, aug: &Augmented, x: &[f64], p: &[f64], sigma: f64) {
        let r = self.v.len();
        let s: f64 = (0..r).map(|k| aug.chol.at(r, k) * self.v[k]).sum();
        let e = (rbf(x, p, sigma) - s) / aug.chol.at(r, r);
        self.v.push(e);
        self.norm2 += e * e;
    }

    fn ei(&self, tau: f64) -> f64 {
        expected_improvement(self.mean_obs, clamp_var(1.0 - self.norm2).sqrt(), tau)
    }

    fn eei(&self, z: &[Vec<f64>], taus: &[f64]) -> f64 {
        let s = clamp_var(1.0 - self.norm2).sqrt();
        let vp = &self.v[self.n..];
        let total: f64 =
            z.iter().zip(taus).map(|(zr, &t)| expected_improvement(self.mean_obs + dot(vp, zr), s, t)).sum();
        total / z.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    /// Index into the center list.
    pub center: usize,
    /// EI for the first pick, EEI afterwards.
    pub value: f64,
}

/// Greedy batch: the first pick maximizes EI, each later pick maximizes EEI
/// with the earlier picks pending. Ties go to the lowest center index. All
/// centers share the same fantasy draws within a pick.
pub fn select_batch<R: Rng + ?Sized>(
    model: &GpModel,
    centers: &[Vec<f64>],
    batch_size: usize,
    mc_samples: usize,
    rng: &mut R,
    exec: Exec,
) -> Result<Vec<Pick>> {
    if centers.len() < batch_size {
        return Err(Error::InsufficientCenters { needed: batch_size, available: centers.len() });
    }
    assert!(mc_samples >= 1);
    let mut states: Vec<CenterState> = exec.map_slice(centers, |c| CenterState::new(model, c));
    let mut taken = vec![false; centers.len()];
    let mut aug = Augmented { chol: model.chol.clone(), points: model.x.clone(), n: model.len() };
    let mut picks = Vec::with_capacity(batch_size);
    for round in 0..batch_size {
        let values: Vec<f64> = if round == 0 {
            exec.map_slice(&states, |s| s.ei(model.tau))
        } else {
            let z = draw_normals(rng, mc_samples, aug.pending());
            let taus = aug.fantasy_taus(model.tau, &model.u, &z);
            exec.map_slice(&states, |s| s.eei(&z, &taus))
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in values.iter().enumerate() {
            if !taken[i] && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (i, value) = best.expect("enough centers");
        taken[i] = true;
        picks.push(Pick { center: i, value });
        if round + 1 < batch_size {
            aug.push(&centers[i], model.sigma, model.eta)?;
            let p = &centers[i];
            let aug_ref = &aug;
            states = exec.map_range(states.len(), |k| {
                let mut s = states[k].clone();
                s.push(aug_ref, &centers[k], p, model.sigma);
                s
            });
        }
    }
    Ok(picks)
}

/// Kernel bandwidth from observed data: with `g` the mean accuracy gap over
/// pairs of the first `first_count` observations, sort the code distances of
/// all pairs whose gap exceeds `g` and return half the one at index `⌊l/20⌋`.
/// Falls back to half the median pairwise distance when no pair qualifies.
pub fn sigma_heuristic(codes: &[Vec<f64>], accuracies: &[f64], first_count: usize) -> f64 {
    let n = codes.len();
    assert_eq!(n, accuracies.len());
    assert!(n >= 2, "sigma heuristic needs two observations");
    let first = first_count.clamp(2, n);
    let mut gap_sum = 0.0;
    let mut gap_count = 0usize;
    for i in 0..first {
        for j in 0..i {
            gap_sum += (accuracies[i] - accuracies[j]).abs();
            gap_count += 1;
        }
    }
    let mean_gap = gap_sum / gap_count as f64;
    let mut kept = Vec::new();
    let mut all = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let d = sq_dist(&codes[i], &codes[j]).sqrt();
            all.push(d);
            if (accuracies[i] - accuracies[j]).abs() > mean_gap {
                kept.push(d);
            }
        }
    }
    let sigma = if kept.is_empty() {
        all.sort_by(f64::total_cmp);
        all[(all.len() - 1) / 2] / 2.0
    } else {
        sigma_from_distances(&mut kept)
    };
    if sigma > 0.0 && sigma.is_finite() {
        sigma
    } else {
        log::warn!("sigma heuristic degenerate ({sigma}), using 1");
        1.0
    }
}

/// `Dis_{⌊l/20⌋} / 2` over ascending distances.
pub fn sigma_from_distances(distances: &mut [f64]) -> f64 {
    distances.sort_by(f64::total_cmp);
    distances[distances.len() / 20] / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gauss_solve;
    use crate::rng::Rng as ChaCha;
    use rand::SeedableRng;

    /// Posterior by explicit dense solves against `K + η²I`.
    fn dense_posterior(x: &[Vec<f64>], y: &[f64], sigma: f64, eta: f64, q: &[f64]) -> (f64, f64) {
        let n = x.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (-sq_dist(&x[i], &x[j]) / (2.0 * sigma * sigma)).exp();
            }
            a[i * n + i] += eta * eta;
        }
        let k: Vec<f64> = x.iter().map(|xi| (-sq_dist(xi, q) / (2.0 * sigma * sigma)).exp()).collect();
        let alpha = gauss_solve(n, &a, y).unwrap();
        let beta = gauss_solve(n, &a, &k).unwrap();
        (dot(&k, &alpha), 1.0 - dot(&k, &beta))
    }

    fn random_points(rng: &mut ChaCha, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn standardization_two_points() {
        let m = GpModel::fit(vec![vec![0.0], vec![1.0]], &[70.0, 72.0], 1.0, 0.1).unwrap();
        let s = 1.01f64.sqrt();
        assert!((m.targets()[0] + s).abs() < 1e-12);
        assert!((m.targets()[1] - s).abs() < 1e-12);
        assert!((m.tau() - s).abs() < 1e-12);
        assert!((m.destandardize(m.targets()[1]) - 72.0).abs() < 1e-9);
    }

    #[test]
    fn standardization_moments() {
        let mut rng = ChaCha::seed_from_u64(1);
        let x = random_points(&mut rng, 9, 3);
        let acc: Vec<f64> = (0..9).map(|_| rng.random_range(60.0..80.0)).collect();
        let m = GpModel::fit(x, &acc, 1.0, 0.1).unwrap();
        let n = 9.0;
        let mean = m.targets().iter().sum::<f64>() / n;
        let var = m.targets().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.01).abs() < 1e-12);
    }

    #[test]
    fn single_observation() {
        let m = GpModel::fit(vec![vec![3.0]], &[71.5], 1.0, 0.1).unwrap();
        assert_eq!(m.targets(), &[0.0]);
        let m = GpModel::from_standardized(vec![vec![0.0]], vec![1.0], 1.0, 0.1).unwrap();
        let (mu, var) = m.posterior(&[0.0]);
        assert!((mu - 1.0 / 1.01).abs() < 1e-12);
        assert!((var - (1.0 - 1.0 / 1.01)).abs() < 1e-12);
        let (mu, var) = m.posterior(&[1e3]);
        assert!(mu.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_input() {
        let r = GpModel::fit(vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]], &[1.0, 2.0, 3.0], 1.0, 0.1);
        assert!(matches!(r, Err(Error::DuplicateInput { first: 0, second: 2 })));
    }

    #[test]
    fn posterior_matches_dense_solve() {
        let mut rng = ChaCha::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=20);
            let d = rng.random_range(1..=6);
            let x = random_points(&mut rng, n, d);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma = rng.random_range(0.3..2.0);
            let m = GpModel::from_standardized(x.clone(), y.clone(), sigma, 0.1).unwrap();
            for q in random_points(&mut rng, 5, d) {
                let (mu, var) = m.posterior(&q);
                let (mu2, var2) = dense_posterior(&x, &y, sigma, 0.1, &q);
                assert!((mu - mu2).abs() < 1e-8);
                assert!((var - var2.max(0.0)).abs() < 1e-8);
                assert!((0.0..=1.0).contains(&var));
            }
        }
    }

    #[test]
    fn ei_closed_form_values() {
        assert!((expected_improvement(0.0, 1.0, 0.0) - 0.398_942_280_4).abs() < 1e-9);
        assert_eq!(expected_improvement(-1.0, 0.0, 0.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 0.5), 1.5);
        let mut last = 0.0;
        for s in [0.1, 0.5, 1.0, 2.0] {
            let e = expected_improvement(0.3, s, 1.0);
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = ChaCha::seed_from_u64(11);
        for _ in 0..10 {
            let s = rng.random_range(0.2..2.0);
            let tau = rng.random_range(-1.0..1.0);
            let mu = tau + s * rng.random_range(-0.5..2.0);
            let draws = 200_000;
            let mc: f64 = (0..draws)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (mu + s * z - tau).max(0.0)
                })
                .sum::<f64>()
                / draws as f64;
            let e = expected_improvement(mu, s, tau);
            assert!((mc - e).abs() / e < 0.03, "{mc} vs {e}");
        }
    }

    #[test]
    fn eei_without_pending_is_ei() {
        let mut rng = ChaCha::seed_from_u64(3);
        let x = random_points(&mut rng, 6, 2);
        let acc: Vec<f64> = (0..6).map(|i| 70.0 + i as f64).collect();
        let m = GpModel::fit(x, &acc, 0.8, 0.1).unwrap();
        for q in random_points(&mut rng, 10, 2) {
            assert_eq!(m.eei(&q, &[], 64, &mut rng).unwrap().to_bits(), m.ei(&q).to_bits());
        }
    }

    /// One EEI round computed by sequentially conditioning on each fantasy
    /// with dense solves.
    fn naive_eei(
        x: &[Vec<f64>],
        y: &[f64],
        sigma: f64,
        eta: f64,
        q: &[f64],
        pending: &[Vec<f64>],
        z: &[Vec<f64>],
    ) -> f64 {
        let tau0 = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for zr in z {
            let mut xs = x.to_vec();
            let mut ys = y.to_vec();
            let mut tau = tau0;
            for (p, &zj) in pending.iter().zip(zr) {
                let (mu, var) = dense_posterior(&xs, &ys, sigma, eta, p);
                let f = mu + (var + eta * eta).sqrt() * zj;
                tau = tau.max(f);
                xs.push(p.clone());
                ys.push(f);
            }
            let (mu, var) = dense_posterior(&xs, &ys, sigma, eta, q);
            total += expected_improvement(mu, var.max(0.0).sqrt(), tau);
        }
        total / z.len() as f64
    }

    #[test]
    fn eei_matches_sequential_conditioning() {
        let mut rng = ChaCha::seed_from_u64(19);
        for _ in 0..20 {
            let n = rng.random_range(2..=8);
            let x = random_points(&mut rng, n, 2);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = rng.random_range(1..=4);
            let pending = random_points(&mut rng, p, 2);
            let q = random_points(&mut rng, 1, 2).remove(0);
            let m = GpModel::from_standardized(x.clone(), y.clone(), 0.9, 0.1).unwrap();
            let seed: u64 = rng.random();
            let fast = m.eei(&q, &pending, 50, &mut ChaCha::seed_from_u64(seed)).unwrap();
            let z = draw_normals(&mut ChaCha::seed_from_u64(seed), 50, pending.len());
            let slow = naive_eei(&x, &y, 0.9, 0.1, &q, &pending, &z);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn eei_self_shadowing() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let m = GpModel::fit(x, &[70.0, 71.0, 70.5], 1.0, 0.1).unwrap();
        let q = vec![3.0];
        let ei = m.ei(&q);
        let mut rng = ChaCha::seed_from_u64(4);
        let rounds = 20_000;
        let e = m.eei(&q, std::slice::from_ref(&q), rounds, &mut rng).unwrap();
        assert!(e < ei);
    }

    #[test]
    fn select_batch_single_is_ei_argmax() {
        let mut rng = ChaCha::seed_from_u64(5);
        let x = random_points(&mut rng, 8, 2);
        let acc: Vec<f64> = (0..8).map(|_| rng.random_range(60.0..80.0)).collect();
        let m = GpModel::fit(x, &acc, 0.7, 0.1).unwrap();
        let centers = random_points(&mut rng, 30, 2);
        let picks = select_batch(&m, &centers, 1, 16, &mut rng, Exec::Sequential).unwrap();
        let best = (0..30).max_by(|&a, &b| m.ei(&centers[a]).total_cmp(&m.ei(&centers[b])).then(b.cmp(&a))).unwrap();
        assert_eq!(picks[0].center, best);
        assert_eq!(picks[0].value, m.ei(&centers[best]));
    }

    #[test]
    fn select_batch_ties_and_errors() {
        let m = GpModel::fit(vec![vec![0.0]], &[70.0], 1.0, 0.1).unwrap();
        let centers = vec![vec![1.0], vec![5.0], vec![5.0]];
        let picks = select_batch(&m, &centers, 1, 8, &mut ChaCha::seed_from_u64(0), Exec::Sequential).unwrap();
        assert_eq!(picks[0].center, 1);
        assert!(matches!(
            select_batch(&m, &centers, 4, 8, &mut ChaCha::seed_from_u64(0), Exec::Sequential),
            Err(Error::InsufficientCenters { needed: 4, available: 3 })
        ));
    }

    #[test]
    fn select_batch_spreads_out() {
        let m = GpModel::fit(vec![vec![0.0]], &[70.0], 0.5, 0.1).unwrap();
        let centers: Vec<Vec<f64>> = (0..41).map(|i| vec![-2.0 + 0.1 * i as f64]).collect();
        let picks = select_batch(&m, &centers, 3, 256, &mut ChaCha::seed_from_u64(1), Exec::Sequential).unwrap();
        for a in 0..3 {
            for b in 0..a {
                let d = (centers[picks[a].center][0] - centers[picks[b].center][0]).abs();
                assert!(d > 0.1 + 1e-9, "{picks:?}");
            }
        }
    }

    #[test]
    fn select_batch_deterministic_and_exec_independent() {
        let mut rng = ChaCha::seed_from_u64(9);
        let x = random_points(&mut rng, 12, 3);
        let acc: Vec<f64> = (0..12).map(|_| rng.random_range(60.0..80.0)).collect();
        let centers = random_points(&mut rng, 60, 3);
        let m = GpModel::fit(x.clone(), &acc, 1.1, 0.1).unwrap();
        let a = select_batch(&m, &centers, 6, 32, &mut ChaCha::seed_from_u64(2), Exec::Sequential).unwrap();
        let b = select_batch(&m, &centers, 6, 32, &mut ChaCha::seed_from_u64(2), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let shifted: Vec<f64> = acc.iter().map(|y| y + 10.0).collect();
        let m2 = GpModel::fit(x, &shifted, 1.1, 0.1).unwrap();
        let c = select_batch(&m2, &centers, 6, 32, &mut ChaCha::seed_from_u64(2), Exec::Sequential).unwrap();
        let ia: Vec<usize> = a.iter().map(|p| p.center).collect();
        let ic: Vec<usize> = c.iter().map(|p| p.center).collect();
        assert_eq!(ia, ic);
    }

    #[test]
    fn sigma_from_sorted_distances() {
        let mut d: Vec<f64> = (1..=40).rev().map(|i| i as f64 / 10.0).collect();
        assert!((sigma_from_distances(&mut d) - 0.15).abs() < 1e-12);
        let mut d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(sigma_from_distances(&mut d), 0.5);
    }

    #[test]
    fn sigma_heuristic_filters_and_falls_back() {
        let codes = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        // mean gap over the first three is 2; the wider pairs sit at distances 3, 7, 6, 4
        let acc = [70.0, 71.0, 73.0, 76.0];
        assert_eq!(sigma_heuristic(&codes, &acc, 3), 1.5);
        let flat = [70.0; 4];
        // no gap exceeds 0: half the lower median of 1, 2, 3, 4, 6, 7
        assert_eq!(sigma_heuristic(&codes, &flat, 3), 1.5);
        let codes = vec![vec![0.0], vec![2.0], vec![10.0], vec![30.0]];
        assert_eq!(sigma_heuristic(&codes, &flat, 4), 5.0);
    }
}
