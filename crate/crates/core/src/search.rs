//! The search loop: refine, cluster, acquire a batch, evaluate, repeat.

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::candidates::CandidateSet;
use crate::cluster::{self, sq_dist};
use crate::cost::{Constraint, Metric};
use crate::error::{Error, Result};
use crate::evaluator::{EvalRequest, Evaluator};
use crate::exec::Exec;
use crate::gp::{self, GpModel};
use crate::journal::{Journal, Record, WALL_CLOCK_KEY};
use crate::refiner::{self, LinearRefiner, RefinerConfig};
use crate::rng::{self, TAG_ACQUIRE, TAG_KMEANS, TAG_RANDOM_SEARCH, TAG_REFINER};
use crate::space::{Bssc, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub family: Preset,
    pub metric: Metric,
    /// Budget on `metric`; the cost of the family's original code if unset.
    pub threshold: Option<f64>,
    pub candidate_size: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub eta: f64,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub refiner: RefinerConfig,
    pub exec: Exec,
    /// Adds elapsed evaluation time to journal records. Such journals still
    /// replay, but are no longer byte-identical across runs.
    pub record_wall_clock: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            family: Preset::ResNet18,
            metric: Metric::Flops,
            threshold: None,
            candidate_size: 10_000,
            iterations: 4,
            batch_size: 16,
            mc_samples: gp::DEFAULT_MC_SAMPLES,
            eta: gp::DEFAULT_ETA,
            kmeans_max_iters: cluster::DEFAULT_MAX_ITERS,
            seed: 0,
            refiner: RefinerConfig::default(),
            exec: Exec::default(),
            record_wall_clock: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.candidate_size < self.batch_size * self.iterations {
            return bad(format!(
                "candidate_size {} is below the evaluation budget {}",
                self.candidate_size,
                self.batch_size * self.iterations
            ));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if let Some(t) = self.threshold {
            Constraint::new(self.metric, t)?;
        }
        Ok(())
    }

    pub fn constraint(&self) -> Result<Constraint> {
        match self.threshold {
            Some(t) => Constraint::new(self.metric, t),
            None => {
                let p = self.family;
                Ok(Constraint::from_code(self.metric, &p.original_code(), &p.space()))
            }
        }
    }

    pub fn budget(&self) -> usize {
        self.iterations * self.batch_size
    }

    /// Builds the candidate set this configuration searches.
    pub fn build_candidates(&self) -> Result<CandidateSet> {
        self.validate()?;
        CandidateSet::build(&self.family.space(), self.constraint()?, self.candidate_size, self.seed, self.exec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: usize,
    /// 1-based position by ascending accuracy within the iteration.
    pub rank: usize,
    pub id: u64,
    /// Index into the candidate set.
    pub candidate: usize,
    pub code: Bssc,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Evaluation,
    /// Ordered by iteration, then by ascending accuracy.
    pub history: Vec<Evaluation>,
    pub per_iteration_best: Vec<f64>,
    pub candidates_digest: String,
}

impl SearchResult {
    fn from_history(mut history: Vec<Evaluation>, digest: String) -> Result<Self> {
        history.sort_by(|a, b| {
            a.iteration.cmp(&b.iteration).then(a.accuracy.total_cmp(&b.accuracy)).then(a.id.cmp(&b.id))
        });
        let mut per_iteration_best = Vec::new();
        let mut rank = 0;
        for i in 0..history.len() {
            if i == 0 || history[i].iteration != history[i - 1].iteration {
                rank = 0;
                per_iteration_best.push(f64::NEG_INFINITY);
            }
            rank += 1;
            history[i].rank = rank;
            let last = per_iteration_best.last_mut().unwrap();
            *last = last.max(history[i].accuracy);
        }
        let best = history
            .iter()
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.id.cmp(&a.id)))
            .cloned()
            .ok_or_else(|| Error::Config("search produced no evaluations".into()))?;
        Ok(Self { best, history, per_iteration_best, candidates_digest: digest })
    }

    /// CSV with header `iteration,rank,accuracy,code`.
    pub fn write_trajectory<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "rank", "accuracy", "code"])?;
        for e in &self.history {
            w.write_record([e.iteration.to_string(), e.rank.to_string(), e.accuracy.to_string(), e.code.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Driver<'a> {
    config: &'a SearchConfig,
    candidates: &'a CandidateSet,
    evaluator: &'a dyn Evaluator,
    journal: Option<&'a mut Journal>,
    evaluated: Vec<bool>,
    history: Vec<Evaluation>,
    next_id: u64,
}

impl Driver<'_> {
    fn record(&mut self, rec_type: &str, iteration: usize, payload: serde_json::Value) -> Result<()> {
        if let Some(j) = self.journal.as_deref_mut() {
            j.append(&Record::new(rec_type, iteration, payload)?)?;
        }
        Ok(())
    }

    fn header(&mut self, mode: &str) -> Result<()> {
        let payload = json!({
            "mode": mode,
            "config": self.config,
            "constraint": self.candidates.constraint.to_string(),
            "candidates": self.candidates.len(),
            "candidates_digest": self.candidates.digest(),
        });
        self.record("header", 0, payload)
    }

    /// Evaluates `picks` (candidate indices) as one batch, serving replayed
    /// ids from the journal, and records each result.
    fn evaluate(&mut self, iteration: usize, picks: &[usize]) -> Result<()> {
        let requests: Vec<EvalRequest> = picks
            .iter()
            .enumerate()
            .map(|(k, &c)| EvalRequest { id: self.next_id + k as u64, code: self.candidates.codes[c].clone() })
            .collect();
        let cached: Vec<Option<f64>> =
            requests.iter().map(|r| self.journal.as_deref().and_then(|j| j.cached_accuracy(r.id))).collect();
        let missing: Vec<EvalRequest> =
            requests.iter().zip(&cached).filter(|(_, c)| c.is_none()).map(|(r, _)| r.clone()).collect();
        let start = Instant::now();
        let fresh = if missing.is_empty() { Vec::new() } else { self.evaluator.evaluate(&missing)? };
        if fresh.len() != missing.len() {
            return Err(crate::error::EvalError::MalformedResponse(format!(
                "expected {} accuracies, got {}",
                missing.len(),
                fresh.len()
            ))
            .into());
        }
        let elapsed = start.elapsed().as_millis() as u64;
        let mut fresh = fresh.into_iter();
        for ((req, &cand), cached) in requests.iter().zip(picks).zip(cached) {
            let accuracy = match cached {
                Some(a) => a,
                None => fresh.next().unwrap(),
            };
            let mut payload = json!({
                "id": req.id,
                "candidate": cand,
                "code": req.code,
                "accuracy": accuracy,
            });
            if self.config.record_wall_clock {
                payload[WALL_CLOCK_KEY] = json!(elapsed);
            }
            self.record("evaluation", iteration, payload)?;
            self.evaluated[cand] = true;
            self.history.push(Evaluation {
                iteration,
                rank: 0,
                id: req.id,
                candidate: cand,
                code: req.code.clone(),
                accuracy,
            });
        }
        self.next_id += picks.len() as u64;
        Ok(())
    }

    fn finish(mut self) -> Result<SearchResult> {
        let result = SearchResult::from_history(std::mem::take(&mut self.history), self.candidates.digest())?;
        let payload = json!({
            "best_id": result.best.id,
            "best_code": result.best.code,
            "best_accuracy": result.best.accuracy,
            "evaluations": result.history.len(),
        });
        self.record("summary", self.config.iterations, payload)?;
        Ok(result)
    }
}

/// Runs the search over a prebuilt candidate set. With a journal opened by
/// [`Journal::resume`], earlier records are verified and earlier
/// evaluations reused.
pub fn run(
    config: &SearchConfig,
    candidates: &CandidateSet,
    evaluator: &dyn Evaluator,
    journal: Option<&mut Journal>,
) -> Result<SearchResult> {
    config.validate()?;
    let n = candidates.len();
    if n < config.budget() {
        return Err(Error::Config(format!("{n} candidates cannot cover a budget of {}", config.budget())));
    }
    let mut d =
        Driver { config, candidates, evaluator, journal, evaluated: vec![false; n], history: Vec::new(), next_id: 0 };
    d.header("autobss")?;
    let standardized = candidates.standardized();
    let batch = config.batch_size;
    let mut first_iteration_count = 0;

    for it in 1..=config.iterations {
        let obs_z: Vec<Vec<f64>> = d.history.iter().map(|e| standardized[e.candidate].clone()).collect();
        let obs_y: Vec<f64> = d.history.iter().map(|e| e.accuracy).collect();

        let (refiner, refiner_report) = if it == 1 || obs_z.len() < 4 {
            (LinearRefiner::identity(candidates.stats.dim()), None)
        } else {
            let mut r = rng::substream(config.seed, TAG_REFINER, it as u64);
            let (w, rep) = refiner::train(&obs_z, &obs_y, &config.refiner, &mut r)?;
            (w, Some(rep))
        };
        let points = refiner.refine_all(&standardized, config.exec);

        let k = cluster::schedule(it, n, batch);
        let mut krng = rng::substream(config.seed, TAG_KMEANS, it as u64);
        let clustering = cluster::kmeans(&points, k, &mut krng, config.kmeans_max_iters, config.exec)?;
        let mut pool: Vec<usize> =
            cluster::representatives(&clustering, &points, &d.evaluated).into_iter().flatten().collect();
        if pool.len() < batch {
            top_up(&mut pool, batch, &clustering, &points, &d.evaluated);
        }

        let mut sigma = None;
        let mut tau = None;
        let picks: Vec<(usize, Option<f64>)> = if d.history.is_empty() {
            pool.iter().take(batch).map(|&c| (c, None)).collect()
        } else {
            let obs_points: Vec<Vec<f64>> = d.history.iter().map(|e| points[e.candidate].clone()).collect();
            let s = if obs_points.len() >= 2 {
                gp::sigma_heuristic(&obs_points, &obs_y, first_iteration_count)
            } else {
                1.0
            };
            let model = GpModel::fit(obs_points, &obs_y, s, config.eta)?;
            sigma = Some(s);
            tau = Some(model.tau());
            let centers: Vec<Vec<f64>> = pool.iter().map(|&c| points[c].clone()).collect();
            let mut arng = rng::substream(config.seed, TAG_ACQUIRE, it as u64);
            gp::select_batch(&model, &centers, batch, config.mc_samples, &mut arng, config.exec)?
                .into_iter()
                .map(|p| (pool[p.center], Some(p.value)))
                .collect()
        };

        d.record(
            "iteration",
            it,
            json!({
                "clusters": clustering.summary(),
                "pool": pool.len(),
                "refiner_weights": refiner.weight(),
                "refiner": refiner_report,
                "sigma": sigma,
                "tau": tau,
            }),
        )?;
        for (rank, &(c, value)) in picks.iter().enumerate() {
            d.record("pick", it, json!({"rank": rank, "candidate": c, "code": candidates.codes[c], "value": value}))?;
        }
        let chosen: Vec<usize> = picks.iter().map(|p| p.0).collect();
        d.evaluate(it, &chosen)?;
        if it == 1 {
            first_iteration_count = d.history.len();
        }
        log::info!(
            "iteration {it}: k={k}, best so far {:.4}",
            d.history.iter().map(|e| e.accuracy).fold(f64::NEG_INFINITY, f64::max)
        );
    }
    d.finish()
}

/// Adds the unevaluated non-pool candidates nearest their centroids until the
/// pool holds `batch` codes.
fn top_up(pool: &mut Vec<usize>, batch: usize, c: &cluster::Clustering, points: &[Vec<f64>], evaluated: &[bool]) {
    let mut in_pool = vec![false; points.len()];
    for &i in pool.iter() {
        in_pool[i] = true;
    }
    let mut rest: Vec<(f64, usize)> = (0..points.len())
        .filter(|&i| !evaluated[i] && !in_pool[i])
        .map(|i| (sq_dist(&points[i], &c.centroids[c.assignment[i]]), i))
        .collect();
    rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pool.extend(rest.into_iter().take(batch - pool.len()).map(|r| r.1));
}

/// Baseline: the same budget drawn uniformly without replacement from the
/// candidate set, evaluated in batches of `batch_size`.
pub fn random_search(
    config: &SearchConfig,
    candidates: &CandidateSet,
    evaluator: &dyn Evaluator,
    journal: Option<&mut Journal>,
) -> Result<SearchResult> {
    config.validate()?;
    let n = candidates.len();
    if n < config.budget() {
        return Err(Error::Config(format!("{n} candidates cannot cover a budget of {}", config.budget())));
    }
    let mut d =
        Driver { config, candidates, evaluator, journal, evaluated: vec![false; n], history: Vec::new(), next_id: 0 };
    d.header("random")?;
    let mut r = rng::substream(config.seed, TAG_RANDOM_SEARCH, 0);
    let drawn = index::sample(&mut r, n, config.budget()).into_vec();
    for (i, chunk) in drawn.chunks(config.batch_size).enumerate() {
        d.evaluate(i + 1, chunk)?;
    }
    d.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{OracleConfig, SyntheticOracle};
    use std::collections::HashSet;

    fn small_config() -> SearchConfig {
        SearchConfig { candidate_size: 400, seed: 7, mc_samples: 32, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let c = SearchConfig { iterations: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SearchConfig { candidate_size: 63, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SearchConfig { threshold: Some(-1.0), ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn budget_is_exact_and_unique() {
        let cfg = small_config();
        let set = cfg.build_candidates().unwrap();
        let oracle = SyntheticOracle::new(&set, OracleConfig { seed: cfg.seed, ..Default::default() });
        let r = run(&cfg, &set, &oracle, None).unwrap();
        assert_eq!(r.history.len(), 64);
        let ids: HashSet<usize> = r.history.iter().map(|e| e.candidate).collect();
        assert_eq!(ids.len(), 64);
        assert_eq!(r.per_iteration_best.len(), 4);
        for w in r.history.windows(2) {
            if w[0].iteration == w[1].iteration {
                assert!(w[0].accuracy <= w[1].accuracy);
                assert_eq!(w[1].rank, w[0].rank + 1);
            }
        }
        assert!(r.history.iter().all(|e| e.accuracy <= r.best.accuracy));

        let b = random_search(&cfg, &set, &oracle, None).unwrap();
        assert_eq!(b.history.len(), 64);
        let ids: HashSet<usize> = b.history.iter().map(|e| e.candidate).collect();
        assert_eq!(ids.len(), 64);
    }

    #[test]
    fn single_iteration_takes_all_representatives() {
        let cfg = SearchConfig { iterations: 1, ..small_config() };
        let set = cfg.build_candidates().unwrap();
        let oracle = SyntheticOracle::new(&set, OracleConfig::default());
        let r = run(&cfg, &set, &oracle, None).unwrap();
        assert_eq!(r.history.len(), 16);
    }

    #[test]
    fn trajectory_csv() {
        let cfg = small_config();
        let set = cfg.build_candidates().unwrap();
        let oracle = SyntheticOracle::new(&set, OracleConfig::default());
        let r = run(&cfg, &set, &oracle, None).unwrap();
        let mut buf = Vec::new();
        r.write_trajectory(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,rank,accuracy,code"));
        assert_eq!(lines.count(), 64);
    }
}
