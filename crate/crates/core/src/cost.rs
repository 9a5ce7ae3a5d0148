//! Analytic FLOPs and parameter counting.
//!
//! FLOPs are multiply-accumulate operations of convolution and fully
//! connected layers, squeeze-excitation included. Batch-norm and activation
//! FLOPs are not counted. Parameters cover conv weights (no bias when
//! followed by BN), two affine BN parameters per channel, SE weights and
//! biases, and the classifier weights and bias.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{self, BlockKind, HeadSpec, NetworkPlan, StageSpec, StemSpec};
use crate::space::{Bssc, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Flops,
    Params,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Flops => "flops",
            Metric::Params => "params",
        })
    }
}

/// Upper bound on one cost metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub metric: Metric,
    /// MACs for `flops`, parameter count for `params`.
    pub threshold: f64,
}

impl Constraint {
    pub fn new(metric: Metric, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Config(format!("constraint threshold must be positive, got {threshold}")));
        }
        Ok(Self { metric, threshold })
    }

    /// The cost of `code` under `space`, used as a budget.
    pub fn from_code(metric: Metric, code: &Bssc, space: &SearchSpace) -> Self {
        let c = Cost::of_values(space, &code.0);
        Self { metric, threshold: c.get(metric) as f64 }
    }

    pub fn admits(&self, cost: Cost) -> bool {
        cost.get(self.metric) as f64 <= self.threshold
    }
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}<={}", self.metric, self.threshold)
    }
}

/// A (flops, params) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl Cost {
    pub fn get(self, metric: Metric) -> u64 {
        match metric {
            Metric::Flops => self.flops,
            Metric::Params => self.params,
        }
    }

    /// Allocation-free total for a code; the hot path of candidate sampling.
    pub fn of_values(space: &SearchSpace, values: &[u32]) -> Cost {
        let mut h = space.input_resolution as u64;
        let stem = plan::stem_of(space, values);
        let mut total = stem_cost(&stem, &mut h);
        let mut last = stem.out_channels;
        plan::for_each_stage(space, values, |s| {
            total += stage_cost(&s, &mut h);
            last = s.out_channels;
        });
        total + head_cost(&plan::head_of(space, values), last, h)
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { flops: self.flops + o.flops, params: self.params + o.params }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::ops::Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost { flops: self.flops * k, params: self.params * k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: u32,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub stem: Cost,
    pub per_stage: Vec<StageCost>,
    pub head: Cost,
}

fn conv_out(h: u64, kernel: u32, stride: u32) -> u64 {
    let pad = (kernel / 2) as u64;
    (h + 2 * pad - kernel as u64) / stride as u64 + 1
}

/// Conv followed by BN. Returns the output resolution through `h`.
fn conv_bn(cin: u32, cout: u32, kernel: u32, stride: u32, groups: u32, h: &mut u64) -> Cost {
    let out = conv_out(*h, kernel, stride);
    *h = out;
    let weights = (kernel * kernel) as u64 * (cin / groups) as u64 * cout as u64;
    Cost { flops: weights * out * out, params: weights + 2 * cout as u64 }
}

fn stem_cost(stem: &StemSpec, h: &mut u64) -> Cost {
    let c = conv_bn(3, stem.out_channels, stem.kernel, stem.stride, 1, h);
    if stem.max_pool {
        *h = conv_out(*h, 3, 2);
    }
    c
}

fn block_cost(s: &StageSpec, cin: u32, stride: u32, h: &mut u64) -> Cost {
    let h_in = *h;
    let cout = s.out_channels;
    let shortcut = |h_in: u64| {
        if stride != 1 || cin != cout {
            let mut hs = h_in;
            conv_bn(cin, cout, 1, stride, 1, &mut hs)
        } else {
            Cost::default()
        }
    };
    match s.kind {
        BlockKind::Basic => conv_bn(cin, cout, 3, stride, 1, h) + conv_bn(cout, cout, 3, 1, 1, h) + shortcut(h_in),
        BlockKind::Bottleneck => {
            let b = s.bottleneck.expect("bottleneck width");
            conv_bn(cin, b, 1, 1, 1, h) + conv_bn(b, b, 3, stride, 1, h) + conv_bn(b, cout, 1, 1, 1, h) + shortcut(h_in)
        }
        BlockKind::MbConv => {
            let t = s.expansion.expect("expansion factor");
            let e = cin * t;
            let mut c = Cost::default();
            if t != 1 {
                c += conv_bn(cin, e, 1, 1, 1, h);
            }
            c += conv_bn(e, e, s.kernel, stride, e, h);
            if s.se {
                let r = (cin / 4).max(1) as u64;
                let e = e as u64;
                c += Cost { flops: 2 * e * r, params: 2 * e * r + r + e };
            }
            c + conv_bn(e, cout, 1, 1, 1, h)
        }
    }
}

fn stage_cost(s: &StageSpec, h: &mut u64) -> Cost {
    let mut c = block_cost(s, s.in_channels, s.stride, h);
    if s.repeats > 1 {
        // every later block has identical shape
        let mut h_rest = *h;
        c += block_cost(s, s.out_channels, 1, &mut h_rest) * (s.repeats as u64 - 1);
    }
    c
}

fn head_cost(head: &HeadSpec, last_channels: u32, h: u64) -> Cost {
    let mut c = Cost::default();
    if let Some(ch) = head.conv_channels {
        let mut h = h;
        c += conv_bn(last_channels, ch, 1, 1, 1, &mut h);
    }
    let fc = head.classifier_in as u64 * head.classes as u64;
    c + Cost { flops: fc, params: fc + head.classes as u64 }
}

/// Counts FLOPs and parameters of a plan.
pub fn count(plan: &NetworkPlan) -> CostReport {
    let mut h = plan.input_resolution as u64;
    let stem = stem_cost(&plan.stem, &mut h);
    let mut per_stage = Vec::with_capacity(plan.stages.len());
    for s in &plan.stages {
        let c = stage_cost(s, &mut h);
        per_stage.push(StageCost { stage: s.stage, flops: c.flops, params: c.params });
    }
    let last = plan.stages.last().map_or(plan.stem.out_channels, |s| s.out_channels);
    let head = head_cost(&plan.head, last, h);
    let total = per_stage.iter().fold(stem + head, |acc, s| acc + Cost { flops: s.flops, params: s.params });
    CostReport { flops: total.flops, params: total.params, stem, per_stage, head }
}

/// Whether a code's cost is within the constraint.
pub fn satisfies(code: &Bssc, space: &SearchSpace, constraint: &Constraint) -> bool {
    constraint.admits(Cost::of_values(space, &code.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    /// `stem`, the stage number, or `head`.
    pub stage: String,
    pub flops: u64,
    pub params: u64,
    pub flops_share: f64,
}

/// Fraction of total FLOPs spent in the stem, each stage and the head.
pub fn stage_profile(code: &Bssc, space: &SearchSpace) -> Result<Vec<StageShare>> {
    let report = count(&NetworkPlan::decode(code, space)?);
    Ok(profile_of(&report))
}

pub fn profile_of(report: &CostReport) -> Vec<StageShare> {
    let total = report.flops as f64;
    let row = |stage: String, c: Cost| StageShare {
        stage,
        flops: c.flops,
        params: c.params,
        flops_share: c.flops as f64 / total,
    };
    std::iter::once(row("stem".into(), report.stem))
        .chain(report.per_stage.iter().map(|s| row(s.stage.to_string(), Cost { flops: s.flops, params: s.params })))
        .chain(std::iter::once(row("head".into(), report.head)))
        .collect()
}

/// Writes the profile as CSV with header `stage,flops,params,flops_share`.
pub fn write_profile_csv<W: Write>(rows: &[StageShare], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "flops", "params", "flops_share"])?;
    for r in rows {
        w.write_record([r.stage.clone(), r.flops.to_string(), r.params.to_string(), format!("{:.6}", r.flops_share)])?;
    }
    w.flush()?;
    Ok(())
}
