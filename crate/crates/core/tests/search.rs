use std::sync::atomic::{AtomicUsize, Ordering};

use autobss::error::EvalError;
use autobss::evaluator::{EvalRequest, OracleConfig, OracleShape};
use autobss::journal::Journal;
use autobss::search::{self, SearchConfig};
use autobss::{CandidateSet, Evaluator, Exec, Preset, SyntheticOracle};

fn config(exec: Exec) -> SearchConfig {
    let mut c = SearchConfig {
        family: Preset::MobileNetV2,
        candidate_size: 300,
        iterations: 4,
        batch_size: 8,
        mc_samples: 32,
        seed: 11,
        exec,
        ..SearchConfig::default()
    };
    c.refiner.steps = 300;
    c
}

struct Counting<'a> {
    inner: &'a SyntheticOracle,
    calls: AtomicUsize,
}

impl Evaluator for Counting<'_> {
    fn evaluate(&self, batch: &[EvalRequest]) -> Result<Vec<f64>, EvalError> {
        self.calls.fetch_add(batch.len(), Ordering::SeqCst);
        self.inner.evaluate(batch)
    }
}

fn setup() -> (SearchConfig, CandidateSet, SyntheticOracle) {
    let cfg = config(Exec::Sequential);
    let set = cfg.build_candidates().unwrap();
    let oracle = SyntheticOracle::new(&set, OracleConfig { shape: OracleShape::Rugged, seed: 2, ..Default::default() });
    (cfg, set, oracle)
}

fn journaled(
    cfg: &SearchConfig,
    set: &CandidateSet,
    ev: &dyn Evaluator,
    path: &std::path::Path,
) -> search::SearchResult {
    let mut j = Journal::create(path).unwrap();
    let r = search::run(cfg, set, ev, Some(&mut j)).unwrap();
    j.finish().unwrap();
    r
}

#[test]
fn identical_runs_give_identical_journals() {
    let (cfg, set, oracle) = setup();
    let dir = tempfile::tempdir().unwrap();
    let a = journaled(&cfg, &set, &oracle, &dir.path().join("a.jsonl"));
    let b = journaled(&cfg, &set, &oracle, &dir.path().join("b.jsonl"));
    let par = config(Exec::Parallel);
    let c = journaled(&par, &set, &oracle, &dir.path().join("c.jsonl"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    let ja = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(ja, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    // the exec mode is part of the recorded config; everything after the header matches
    let jc = std::fs::read(dir.path().join("c.jsonl")).unwrap();
    let body = |j: &[u8]| j.splitn(2, |&b| b == b'\n').nth(1).unwrap().to_vec();
    assert_eq!(body(&ja), body(&jc));
    assert_eq!(a.history.len(), cfg.budget());
}

#[test]
fn resume_from_every_cut_reproduces_the_run() {
    let (cfg, set, oracle) = setup();
    let dir = tempfile::tempdir().unwrap();
    let full_path = dir.path().join("full.jsonl");
    let full = journaled(&cfg, &set, &oracle, &full_path);
    let bytes = std::fs::read(&full_path).unwrap();
    let line_ends: Vec<usize> = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1).collect();

    let mut cuts: Vec<usize> = line_ends.iter().step_by(7).copied().collect();
    cuts.push(line_ends[line_ends.len() / 2] + 9); // mid-line
    cuts.push(0);
    for cut in cuts {
        let path = dir.path().join(format!("cut{cut}.jsonl"));
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let counting = Counting { inner: &oracle, calls: AtomicUsize::new(0) };
        let mut j = Journal::resume(&path).unwrap();
        let r = search::run(&cfg, &set, &counting, Some(&mut j)).unwrap();
        j.finish().unwrap();
        assert_eq!(r, full, "cut at byte {cut}");
        assert_eq!(std::fs::read(&path).unwrap(), bytes, "cut at byte {cut}");
        let kept = bytes[..cut].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let done =
            bytes[..kept].split(|&b| b == b'\n').filter(|l| l.starts_with(b"{\"record_type\":\"evaluation\"")).count();
        assert_eq!(counting.calls.load(Ordering::SeqCst), cfg.budget() - done, "cut at byte {cut}");
    }
}

#[test]
fn resume_with_other_seed_is_rejected() {
    let (cfg, set, oracle) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.jsonl");
    journaled(&cfg, &set, &oracle, &path);
    let other = SearchConfig { seed: 12, ..cfg.clone() };
    let mut j = Journal::resume(&path).unwrap();
    assert!(search::run(&other, &set, &oracle, Some(&mut j)).is_err());
}

#[test]
fn autobss_beats_random_on_average() {
    let (cfg, set, oracle) = setup();
    let mut auto = 0.0;
    let mut rand = 0.0;
    for seed in 0..3 {
        let c = SearchConfig { seed, ..cfg.clone() };
        auto += search::run(&c, &set, &oracle, None).unwrap().best.accuracy;
        rand += search::random_search(&c, &set, &oracle, None).unwrap().best.accuracy;
    }
    assert!(auto >= rand, "autobss {auto} random {rand}");
}

#[test]
fn random_search_visits_distinct_candidates() {
    let (cfg, set, oracle) = setup();
    let r = search::random_search(&cfg, &set, &oracle, None).unwrap();
    let mut seen: Vec<usize> = r.history.iter().map(|e| e.candidate).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), cfg.budget());
}
