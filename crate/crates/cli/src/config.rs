//! TOML configuration for `autobss search` and `autobss bench`.
//!
//! Keys are flat and dotted (`search.iterations = 4`); unknown keys are
//! rejected. Every key is optional.

use std::path::{Path, PathBuf};

use anyhow::Context;
use autobss::evaluator::{ExternalConfig, OracleConfig};
use autobss::{Exec, Metric, OracleShape, Preset, RefinerConfig, SearchConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub family: Option<Preset>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub refiner: RefinerConfig,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub external: Option<ExternalConfig>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub metric: Metric,
    pub threshold: Option<f64>,
    pub candidate_size: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub eta: f64,
    pub kmeans_max_iters: usize,
    pub exec: Exec,
    pub record_wall_clock: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            metric: d.metric,
            threshold: d.threshold,
            candidate_size: d.candidate_size,
            iterations: d.iterations,
            batch_size: d.batch_size,
            mc_samples: d.mc_samples,
            eta: d.eta,
            kmeans_max_iters: d.kmeans_max_iters,
            exec: d.exec,
            record_wall_clock: d.record_wall_clock,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Synthetic,
    External,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub kind: EvaluatorKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub shape: OracleShape,
    pub base: f64,
    pub amplitude: f64,
    pub noise: f64,
    /// Defaults to the search seed.
    pub seed: Option<u64>,
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = OracleConfig::default();
        Self { shape: d.shape, base: d.base, amplitude: d.amplitude, noise: d.noise, seed: None }
    }
}

impl OracleSection {
    pub fn oracle_config(&self, search_seed: u64) -> OracleConfig {
        OracleConfig {
            shape: self.shape,
            base: self.base,
            amplitude: self.amplitude,
            noise: self.noise,
            seed: self.seed.unwrap_or(search_seed),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub journal: PathBuf,
    pub trajectory: PathBuf,
    /// Also save the candidate set when set.
    pub candidates: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { journal: "journal.jsonl".into(), trajectory: "trajectory.csv".into(), candidates: None }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn search_config(&self, family: Option<Preset>, seed: Option<u64>) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            family: family.or(self.family).unwrap_or(Preset::ResNet18),
            metric: s.metric,
            threshold: s.threshold,
            candidate_size: s.candidate_size,
            iterations: s.iterations,
            batch_size: s.batch_size,
            mc_samples: s.mc_samples,
            eta: s.eta,
            kmeans_max_iters: s.kmeans_max_iters,
            seed: seed.or(self.seed).unwrap_or(0),
            refiner: self.refiner,
            exec: s.exec,
            record_wall_clock: s.record_wall_clock,
        }
    }
}
