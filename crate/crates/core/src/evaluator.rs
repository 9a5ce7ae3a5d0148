//! Accuracy evaluation: a synthetic oracle and an external-process protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::cluster::sq_dist;
use crate::error::EvalError;
use crate::rng::{self, TAG_ORACLE};
use crate::space::{Bssc, StandardizationStats};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub code: Bssc,
}

/// Scores a batch of codes, returning accuracies (percent) in request order.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, batch: &[EvalRequest]) -> Result<Vec<f64>, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleShape {
    /// One Gaussian bump at the hidden optimum.
    #[default]
    Single,
    /// Three bumps with amplitudes 1, 0.6 and 0.35 times `amplitude`.
    Rugged,
}

const RUGGED_WEIGHTS: [f64; 3] = [1.0, 0.6, 0.35];
const NOISE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub shape: OracleShape,
    pub base: f64,
    pub amplitude: f64,
    /// Standard deviation of the per-code noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { shape: OracleShape::Single, base: 70.0, amplitude: 8.0, noise: 0.0, seed: 0 }
    }
}

/// Smooth stand-in for trained accuracy over a candidate set:
/// `base + amplitude · exp(-‖z(x) - z(x*)‖² / 2m) + noise`, with `z` the
/// candidate-set standardization and `x*` the candidate with the largest
/// seeded hash.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    config: OracleConfig,
    stats: StandardizationStats,
    centers: Vec<(Bssc, Vec<f64>, f64)>,
}

impl SyntheticOracle {
    pub fn new(candidates: &CandidateSet, config: OracleConfig) -> Self {
        assert!(!candidates.is_empty(), "oracle needs a non-empty candidate set");
        let bumps = match config.shape {
            OracleShape::Single => 1,
            OracleShape::Rugged => RUGGED_WEIGHTS.len(),
        };
        let mut centers: Vec<(Bssc, Vec<f64>, f64)> = Vec::with_capacity(bumps);
        for k in 0..bumps {
            let key = rng::derive_seed(config.seed, TAG_ORACLE, k as u64);
            let code = candidates
                .codes
                .iter()
                .filter(|c| centers.iter().all(|(o, _, _)| o != *c))
                .max_by_key(|c| rng::hash_words(key, c.0.iter().map(|&v| v as u64)))
                .expect("enough candidates for every bump")
                .clone();
            let z = candidates.stats.standardize(&code);
            centers.push((code, z, RUGGED_WEIGHTS[k] * config.amplitude));
        }
        Self { config, stats: candidates.stats.clone(), centers }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// The primary bump's center.
    pub fn optimum(&self) -> &Bssc {
        &self.centers[0].0
    }

    pub fn accuracy(&self, code: &Bssc) -> Result<f64, EvalError> {
        let m = self.stats.dim();
        if code.len() != m {
            return Err(EvalError::UnknownCode(code.to_string()));
        }
        let z = self.stats.standardize(code);
        let mut acc = self.config.base;
        for (_, c, a) in &self.centers {
            acc += a * (-sq_dist(&z, c) / (2.0 * m as f64)).exp();
        }
        if self.config.noise > 0.0 {
            let key = rng::hash_words(
                rng::derive_seed(self.config.seed, TAG_ORACLE, NOISE_STREAM),
                code.0.iter().map(|&v| v as u64),
            );
            let n: f64 = StandardNormal.sample(&mut rng::Rng::seed_from_u64(key));
            acc += self.config.noise * n;
        }
        Ok(acc)
    }

    /// Scores every candidate; the brute-force reference for search quality.
    pub fn scan(&self, candidates: &CandidateSet) -> Result<Vec<f64>, EvalError> {
        candidates.codes.iter().map(|c| self.accuracy(c)).collect()
    }

    /// Number of candidates scoring strictly above `accuracy`.
    pub fn rank_of(&self, candidates: &CandidateSet, accuracy: f64) -> Result<usize, EvalError> {
        Ok(self.scan(candidates)?.into_iter().filter(|&s| s > accuracy).count())
    }
}

impl Evaluator for SyntheticOracle {
    fn evaluate(&self, batch: &[EvalRequest]) -> Result<Vec<f64>, EvalError> {
        batch.iter().map(|r| self.accuracy(&r.code)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Run through `sh -c`; `{request}` and `{response}` are replaced by
    /// the exchange file paths, which are also exported as
    /// `AUTOBSS_REQUEST` and `AUTOBSS_RESPONSE`.
    pub command: String,
    pub exchange_dir: PathBuf,
    #[serde(with = "secs", default = "default_poll")]
    pub poll_interval: Duration,
    #[serde(with = "secs", default = "default_timeout")]
    pub timeout: Duration,
}

fn default_poll() -> Duration {
    Duration::from_millis(200)
}

fn default_timeout() -> Duration {
    Duration::from_secs(7 * 24 * 3600)
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize)]
struct RequestLine<'a> {
    id: u64,
    family: &'a str,
    code: &'a [u32],
    constraint: &'a str,
}

#[derive(Debug, Deserialize)]
struct ResponseLine {
    id: u64,
    accuracy: f64,
}

/// Hands each batch to an external command through JSON-lines files.
///
/// Request lines are `{"id", "family", "code", "constraint"}`; the command
/// (or whatever it launches) must write one `{"id", "accuracy"}` line per
/// request to the response path. The response may appear after the command
/// exits, so submit-and-return scripts work.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    config: ExternalConfig,
    family: String,
    constraint: String,
}

impl ExternalEvaluator {
    pub fn new(config: ExternalConfig, family: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self { config, family: family.into(), constraint: constraint.into() }
    }

    fn paths(&self, batch: &[EvalRequest]) -> (PathBuf, PathBuf) {
        let tag = batch.first().map_or(0, |r| r.id);
        let dir = &self.config.exchange_dir;
        (dir.join(format!("request-{tag:06}.jsonl")), dir.join(format!("response-{tag:06}.jsonl")))
    }

    fn write_request(&self, path: &Path, batch: &[EvalRequest]) -> Result<(), EvalError> {
        let tmp = path.with_extension("tmp");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for r in batch {
            let line = RequestLine { id: r.id, family: &self.family, code: &r.code.0, constraint: &self.constraint };
            serde_json::to_writer(&mut f, &line).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        drop(f);
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Matches response lines to request ids, in request order.
pub fn parse_response<R: BufRead>(input: R, batch: &[EvalRequest]) -> Result<Vec<f64>, EvalError> {
    let mut acc: Vec<Option<f64>> = vec![None; batch.len()];
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ResponseLine =
            serde_json::from_str(&line).map_err(|e| EvalError::MalformedResponse(format!("line {}: {e}", n + 1)))?;
        let Some(slot) = batch.iter().position(|q| q.id == r.id) else {
            return Err(EvalError::MalformedResponse(format!("unknown id {}", r.id)));
        };
        if !r.accuracy.is_finite() {
            return Err(EvalError::MalformedResponse(format!("non-finite accuracy for id {}", r.id)));
        }
        if acc[slot].replace(r.accuracy).is_some() {
            return Err(EvalError::MalformedResponse(format!("duplicate id {}", r.id)));
        }
    }
    acc.iter()
        .zip(batch)
        .map(|(a, q)| a.ok_or_else(|| EvalError::MalformedResponse(format!("missing id {}", q.id))))
        .collect()
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, batch: &[EvalRequest]) -> Result<Vec<f64>, EvalError> {
        std::fs::create_dir_all(&self.config.exchange_dir)?;
        let (request, response) = self.paths(batch);
        if response.exists() {
            std::fs::remove_file(&response)?;
        }
        self.write_request(&request, batch)?;
        let command = self
            .config
            .command
            .replace("{request}", &request.to_string_lossy())
            .replace("{response}", &response.to_string_lossy());
        log::info!("evaluating {} codes: {command}", batch.len());
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .env("AUTOBSS_REQUEST", &request)
            .env("AUTOBSS_RESPONSE", &response)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let stderr = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });

        let start = Instant::now();
        let mut exited = false;
        loop {
            if !exited {
                if let Some(status) = child.try_wait()? {
                    exited = true;
                    if !status.success() {
                        let stderr = stderr.join().unwrap_or_default();
                        return Err(EvalError::CommandFailed { status: status.to_string(), stderr });
                    }
                }
            }
            if exited && response.exists() {
                let f = BufReader::new(std::fs::File::open(&response)?);
                return parse_response(f, batch);
            }
            if start.elapsed() >= self.config.timeout {
                if !exited {
                    let _ = child.kill();
                    let _ = child.wait();
                }
                return Err(EvalError::Timeout(self.config.timeout, response));
            }
            std::thread::sleep(self.config.poll_interval);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Constraint, Metric};
    use crate::exec::Exec;
    use crate::space::Preset;

    fn small_set() -> CandidateSet {
        let p = Preset::ResNet18;
        let space = p.space();
        let c = Constraint::from_code(Metric::Flops, &p.original_code(), &space);
        CandidateSet::build(&space, c, 300, 4, Exec::Sequential).unwrap()
    }

    #[test]
    fn oracle_peak_and_determinism() {
        let set = small_set();
        let o = SyntheticOracle::new(&set, OracleConfig { seed: 3, ..Default::default() });
        assert_eq!(o.accuracy(o.optimum()).unwrap(), 78.0);
        let scores: Vec<f64> = set.codes.iter().map(|c| o.accuracy(c).unwrap()).collect();
        assert!(scores.iter().all(|&s| s > 70.0 && s <= 78.0));
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, 78.0);
        let again = SyntheticOracle::new(&set, OracleConfig { seed: 3, ..Default::default() });
        assert_eq!(again.optimum(), o.optimum());
        let other = SyntheticOracle::new(&set, OracleConfig { seed: 4, ..Default::default() });
        assert_ne!(other.optimum(), o.optimum());
    }

    #[test]
    fn oracle_far_code_approaches_base() {
        let set = small_set();
        let o = SyntheticOracle::new(&set, OracleConfig::default());
        let far = Bssc(vec![100_000; 8]);
        assert!((o.accuracy(&far).unwrap() - 70.0).abs() < 1e-9);
        assert!(matches!(o.accuracy(&Bssc(vec![1, 2])), Err(EvalError::UnknownCode(_))));
    }

    #[test]
    fn oracle_noise_is_deterministic_per_code() {
        let set = small_set();
        let cfg = OracleConfig { noise: 0.5, seed: 9, ..Default::default() };
        let o = SyntheticOracle::new(&set, cfg);
        let a: Vec<f64> = set.codes.iter().take(50).map(|c| o.accuracy(c).unwrap()).collect();
        let b: Vec<f64> = set.codes.iter().take(50).map(|c| o.accuracy(c).unwrap()).collect();
        assert_eq!(a, b);
        let clean = SyntheticOracle::new(&set, OracleConfig { seed: 9, ..Default::default() });
        assert!(set.codes.iter().take(50).any(|c| o.accuracy(c).unwrap() != clean.accuracy(c).unwrap()));
        for c in &set.codes {
            let v = o.accuracy(c).unwrap();
            assert!(v > 70.0 - 2.5 && v < 78.0 + 2.5);
        }
    }

    #[test]
    fn rugged_oracle_has_three_distinct_bumps() {
        let set = small_set();
        let o = SyntheticOracle::new(&set, OracleConfig { shape: OracleShape::Rugged, ..Default::default() });
        assert_eq!(o.centers.len(), 3);
        assert_ne!(o.centers[0].0, o.centers[1].0);
        assert_ne!(o.centers[1].0, o.centers[2].0);
        assert_eq!(&o.centers[0].0, o.optimum());
    }

    fn batch(ids: &[u64]) -> Vec<EvalRequest> {
        ids.iter().map(|&id| EvalRequest { id, code: Bssc(vec![id as u32, 1]) }).collect()
    }

    #[test]
    fn response_parsing() {
        let b = batch(&[4, 5, 6]);
        let ok = "{\"id\":6,\"accuracy\":1.5}\n{\"id\":4,\"accuracy\":0.5}\n\n{\"id\":5,\"accuracy\":1}\n";
        assert_eq!(parse_response(ok.as_bytes(), &b).unwrap(), vec![0.5, 1.0, 1.5]);
        let missing = "{\"id\":6,\"accuracy\":1.5}\n{\"id\":4,\"accuracy\":0.5}\n";
        assert!(matches!(parse_response(missing.as_bytes(), &b), Err(EvalError::MalformedResponse(_))));
        let dup = "{\"id\":4,\"accuracy\":1}\n{\"id\":4,\"accuracy\":1}\n{\"id\":5,\"accuracy\":1}\n{\"id\":6,\"accuracy\":1}\n";
        assert!(matches!(parse_response(dup.as_bytes(), &b), Err(EvalError::MalformedResponse(_))));
        let junk = "not json\n";
        assert!(matches!(parse_response(junk.as_bytes(), &b), Err(EvalError::MalformedResponse(_))));
        let unknown = "{\"id\":9,\"accuracy\":1}\n";
        assert!(matches!(parse_response(unknown.as_bytes(), &b), Err(EvalError::MalformedResponse(_))));
    }
}
