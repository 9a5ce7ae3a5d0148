//! Candidate set construction.
//!
//! Codes are drawn one dimension at a time. The next value is chosen with
//! probability proportional to the (estimated) number of feasible completions
//! of the extended prefix, which makes each feasible code equally likely when
//! the sizes are exact. Sizes are estimated recursively: the first three
//! remaining dimensions branch over every value, deeper dimensions follow the
//! median value only and multiply by the grid size. Each draw is then pushed
//! to a maximal code by random single-step increases.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::cost::{Constraint, Cost};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{self, TAG_CANDIDATES};
use crate::space::{Bssc, SearchSpace, StandardizationStats};

/// Depth up to which the size estimate branches over every value.
const FULL_BRANCH_DEPTH: usize = 2;
pub const DEFAULT_MAX_RESTARTS: usize = 1000;
pub const DEFAULT_ATTEMPT_FACTOR: usize = 50;

/// Membership test for the constrained space.
pub trait Feasibility: Sync {
    fn is_feasible(&self, values: &[u32]) -> bool;

    /// True if raising any single value never turns an infeasible code
    /// feasible. Enables exact pruning in the size estimate and permanent
    /// blocking during maximization.
    fn is_monotone(&self) -> bool {
        false
    }
}

impl<F: Fn(&[u32]) -> bool + Sync> Feasibility for F {
    fn is_feasible(&self, values: &[u32]) -> bool {
        self(values)
    }
}

/// Declares a closure monotone (larger values cost more).
pub struct Monotone<F>(pub F);

impl<F: Fn(&[u32]) -> bool + Sync> Feasibility for Monotone<F> {
    fn is_feasible(&self, values: &[u32]) -> bool {
        (self.0)(values)
    }

    fn is_monotone(&self) -> bool {
        true
    }
}

/// Feasibility under a FLOPs or parameter budget.
pub struct CostBudget<'a> {
    pub space: &'a SearchSpace,
    pub constraint: Constraint,
}

impl Feasibility for CostBudget<'_> {
    fn is_feasible(&self, values: &[u32]) -> bool {
        self.constraint.admits(Cost::of_values(self.space, values))
    }

    fn is_monotone(&self) -> bool {
        true
    }
}

/// Per-dimension value grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice {
    grids: Vec<Vec<u32>>,
}

impl Lattice {
    pub fn new(grids: Vec<Vec<u32>>) -> Self {
        assert!(grids.iter().all(|g| !g.is_empty()), "empty grid");
        Self { grids }
    }

    pub fn from_space(space: &SearchSpace) -> Self {
        Self::new(space.dims.iter().map(|d| d.values.clone()).collect())
    }

    pub fn dim(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, i: usize) -> &[u32] {
        &self.grids[i]
    }

    fn median(&self, i: usize) -> u32 {
        let g = &self.grids[i];
        g[(g.len() - 1) / 2]
    }

    /// Calls `f` on every code of the lattice in lexicographic order.
    pub fn for_each_code(&self, mut f: impl FnMut(&[u32])) {
        let m = self.dim();
        let mut pos = vec![0usize; m];
        let mut buf: Vec<u32> = self.grids.iter().map(|g| g[0]).collect();
        loop {
            f(&buf);
            let mut i = m;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                pos[i] += 1;
                if pos[i] < self.grids[i].len() {
                    buf[i] = self.grids[i][pos[i]];
                    break;
                }
                pos[i] = 0;
                buf[i] = self.grids[i][0];
            }
        }
    }
}

/// Estimated number of feasible completions of `prefix`, with `depth` the
/// recursion depth of this call (0 at the query).
pub fn estimate_size(lattice: &Lattice, feasible: &dyn Feasibility, prefix: &[u32], depth: usize) -> u64 {
    let mut buf = vec![0u32; lattice.dim()];
    buf[..prefix.len()].copy_from_slice(prefix);
    estimate_rec(lattice, feasible, &mut buf, prefix.len(), depth)
}

fn estimate_rec(lattice: &Lattice, feasible: &dyn Feasibility, buf: &mut [u32], r: usize, depth: usize) -> u64 {
    let m = lattice.dim();
    if r == m {
        return feasible.is_feasible(buf) as u64;
    }
    if depth > FULL_BRANCH_DEPTH {
        // the median chain down to a single leaf: one check, scaled by the grid sizes
        let mut scale = 1u64;
        for k in r..m {
            buf[k] = lattice.median(k);
            scale = scale.saturating_mul(lattice.grids[k].len() as u64);
        }
        return if feasible.is_feasible(buf) { scale } else { 0 };
    }
    if feasible.is_monotone() {
        // all leaves below evaluate to 0 (resp. 1), so the recursion's value is known
        for k in r..m {
            buf[k] = lattice.grids[k][0];
        }
        if !feasible.is_feasible(buf) {
            return 0;
        }
        for k in r..m {
            buf[k] = *lattice.grids[k].last().unwrap();
        }
        if feasible.is_feasible(buf) {
            return lattice.grids[r..].iter().fold(1u64, |acc, g| acc.saturating_mul(g.len() as u64));
        }
    }
    let mut total = 0u64;
    for j in 0..lattice.grids[r].len() {
        buf[r] = lattice.grids[r][j];
        total = total.saturating_add(estimate_rec(lattice, feasible, buf, r + 1, depth + 1));
    }
    total
}

/// Sequential draw where value `j` of dimension `i` is picked with weight
/// `size(prefix ∪ c_j)`. Restarts when every weight at a step is zero.
pub fn sample_code_with<R: Rng + ?Sized>(
    lattice: &Lattice,
    mut size: impl FnMut(&[u32]) -> u64,
    rng: &mut R,
    max_restarts: usize,
) -> Result<Vec<u32>> {
    sample_weighted(
        lattice,
        |prefix, i, out| {
            let mut p = prefix.to_vec();
            for &c in &lattice.grids[i] {
                p.push(c);
                out.push(size(&p));
                p.pop();
            }
        },
        rng,
        max_restarts,
    )
}

/// `weights(prefix, i, out)` pushes one weight per value of dimension `i`.
fn sample_weighted<R: Rng + ?Sized>(
    lattice: &Lattice,
    mut weights: impl FnMut(&[u32], usize, &mut Vec<u64>),
    rng: &mut R,
    max_restarts: usize,
) -> Result<Vec<u32>> {
    let m = lattice.dim();
    let mut prefix = Vec::with_capacity(m);
    let mut w = Vec::new();
    'restart: for _ in 0..=max_restarts {
        prefix.clear();
        for i in 0..m {
            w.clear();
            weights(&prefix, i, &mut w);
            let Ok(dist) = WeightedIndex::new(&w) else {
                continue 'restart;
            };
            prefix.push(lattice.grids[i][dist.sample(rng)]);
        }
        return Ok(prefix);
    }
    Err(Error::InfeasibleSpace { restarts: max_restarts })
}

fn estimate_weights(lattice: &Lattice, feasible: &dyn Feasibility, prefix: &[u32], i: usize, out: &mut Vec<u64>) {
    let mut buf = vec![0u32; lattice.dim()];
    buf[..i].copy_from_slice(prefix);
    for &c in &lattice.grids[i] {
        buf[i] = c;
        out.push(estimate_rec(lattice, feasible, &mut buf, i + 1, 0));
    }
}

/// Step weights shared across draws. Shallow prefixes recur in almost every
/// draw and are the expensive ones to estimate; deep ones are cheap and
/// nearly unique, so they bypass the cache.
struct WeightCache<'a> {
    lattice: &'a Lattice,
    feasible: &'a dyn Feasibility,
    map: Mutex<HashMap<Vec<u32>, Arc<[u64]>>>,
}

/// Prefixes with at least this many dimensions left are cached.
const CACHE_MIN_REMAINING: usize = 4;

impl WeightCache<'_> {
    fn weights(&self, prefix: &[u32], i: usize, out: &mut Vec<u64>) {
        if self.lattice.dim() - i < CACHE_MIN_REMAINING {
            return estimate_weights(self.lattice, self.feasible, prefix, i, out);
        }
        if let Some(w) = self.map.lock().unwrap().get(prefix) {
            out.extend_from_slice(w);
            return;
        }
        estimate_weights(self.lattice, self.feasible, prefix, i, out);
        self.map.lock().unwrap().insert(prefix.to_vec(), out.as_slice().into());
    }
}

/// Draws one code using the recursive size estimate.
pub fn sample_code<R: Rng + ?Sized>(lattice: &Lattice, feasible: &dyn Feasibility, rng: &mut R) -> Result<Vec<u32>> {
    sample_code_with(lattice, |p| estimate_size(lattice, feasible, p, 0), rng, DEFAULT_MAX_RESTARTS)
}

/// Raises random dimensions one grid step at a time while the code stays
/// feasible, until no dimension can be raised.
pub fn maximize_code<R: Rng + ?Sized>(
    lattice: &Lattice,
    feasible: &dyn Feasibility,
    code: &[u32],
    rng: &mut R,
) -> Vec<u32> {
    let m = lattice.dim();
    let mut values = code.to_vec();
    let mut pos: Vec<usize> =
        (0..m).map(|i| lattice.grids[i].binary_search(&values[i]).expect("value on grid")).collect();
    let mut blocked = vec![false; m];
    let mut open = Vec::with_capacity(m);
    loop {
        open.clear();
        open.extend((0..m).filter(|&i| !blocked[i] && pos[i] + 1 < lattice.grids[i].len()));
        if open.is_empty() {
            return values;
        }
        let i = open[rng.random_range(0..open.len())];
        values[i] = lattice.grids[i][pos[i] + 1];
        if feasible.is_feasible(&values) {
            pos[i] += 1;
            if !feasible.is_monotone() {
                blocked.fill(false);
            }
        } else {
            values[i] = lattice.grids[i][pos[i]];
            blocked[i] = true;
        }
    }
}

/// True if no single-step increase keeps the code feasible.
pub fn is_maximal(lattice: &Lattice, feasible: &dyn Feasibility, code: &[u32]) -> bool {
    let mut v = code.to_vec();
    (0..lattice.dim()).all(|i| {
        let g = &lattice.grids[i];
        let p = g.binary_search(&code[i]).expect("value on grid");
        if p + 1 == g.len() {
            return true;
        }
        v[i] = g[p + 1];
        let ok = !feasible.is_feasible(&v);
        v[i] = code[i];
        ok
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub target_size: usize,
    pub seed: u64,
    pub max_restarts: usize,
    /// Give up after `attempt_factor * target_size` draws.
    pub attempt_factor: usize,
    pub exec: Exec,
}

impl BuildOptions {
    pub fn new(target_size: usize, seed: u64) -> Self {
        Self {
            target_size,
            seed,
            max_restarts: DEFAULT_MAX_RESTARTS,
            attempt_factor: DEFAULT_ATTEMPT_FACTOR,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltCodes {
    pub codes: Vec<Vec<u32>>,
    pub attempts: usize,
    pub diversity_exhausted: bool,
}

/// Samples, maximizes and deduplicates until `target_size` distinct codes are
/// collected. Draw `k` uses its own substream, so the result is independent
/// of the execution mode.
pub fn build_codes(lattice: &Lattice, feasible: &dyn Feasibility, opts: &BuildOptions) -> Result<BuiltCodes> {
    if opts.target_size == 0 {
        return Err(Error::Config("candidate set size must be at least 1".into()));
    }
    let max_attempts = opts.attempt_factor.saturating_mul(opts.target_size);
    let mut seen = HashSet::with_capacity(opts.target_size);
    let mut codes = Vec::with_capacity(opts.target_size);
    let mut attempts = 0usize;
    let cache = WeightCache { lattice, feasible, map: Mutex::new(HashMap::new()) };
    while codes.len() < opts.target_size && attempts < max_attempts {
        let needed = opts.target_size - codes.len();
        let chunk = (needed + needed / 8 + 16).min(max_attempts - attempts);
        let base = attempts as u64;
        let drawn: Vec<Result<Vec<u32>>> = opts.exec.map_range(chunk, |k| {
            let mut r = rng::substream(opts.seed, TAG_CANDIDATES, base + k as u64);
            let raw = sample_weighted(lattice, |p, i, out| cache.weights(p, i, out), &mut r, opts.max_restarts)?;
            Ok(maximize_code(lattice, feasible, &raw, &mut r))
        });
        for d in drawn {
            attempts += 1;
            let code: Vec<u32> = d?;
            if seen.insert(code.clone()) {
                codes.push(code);
                if codes.len() == opts.target_size {
                    break;
                }
            }
        }
    }
    let diversity_exhausted = codes.len() < opts.target_size;
    if diversity_exhausted {
        log::warn!(
            "candidate set exhausted: {} distinct codes after {attempts} draws (target {})",
            codes.len(),
            opts.target_size
        );
    }
    Ok(BuiltCodes { codes, attempts, diversity_exhausted })
}

/// The candidate set Ω: distinct maximal feasible codes plus their Z-score
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub codes: Vec<Bssc>,
    pub stats: StandardizationStats,
    pub constraint: Constraint,
    pub seed: u64,
    pub diversity_exhausted: bool,
}

impl CandidateSet {
    pub fn build(
        space: &SearchSpace,
        constraint: Constraint,
        target_size: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let lattice = Lattice::from_space(space);
        let budget = CostBudget { space, constraint };
        let mut opts = BuildOptions::new(target_size, seed);
        opts.exec = exec;
        let built = build_codes(&lattice, &budget, &opts)?;
        Ok(Self::from_codes(built.codes.into_iter().map(Bssc).collect(), constraint, seed, built.diversity_exhausted))
    }

    pub fn from_codes(codes: Vec<Bssc>, constraint: Constraint, seed: u64, diversity_exhausted: bool) -> Self {
        let stats = StandardizationStats::from_codes(&codes);
        Self { codes, stats, constraint, seed, diversity_exhausted }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn standardized(&self) -> Vec<Vec<f64>> {
        self.codes.iter().map(|c| self.stats.standardize(c)).collect()
    }

    /// Line-oriented text: a `#` header recording family, constraint and
    /// seed, then one comma-joined code per line.
    pub fn write_to<W: Write>(&self, family: &str, mut out: W) -> Result<()> {
        writeln!(out, "# family={family}")?;
        writeln!(out, "# constraint={}", self.constraint)?;
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# size={}", self.codes.len())?;
        for c in &self.codes {
            writeln!(out, "{c}")?;
        }
        Ok(())
    }

    pub fn save(&self, family: &str, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(family, &mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads codes written by [`write_to`](Self::write_to). Header lines
    /// other than `seed` are informational.
    pub fn read_from<R: BufRead>(input: R, constraint: Constraint) -> Result<Self> {
        let mut codes = Vec::new();
        let mut seed = 0;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some(s) = h.trim().strip_prefix("seed=") {
                    seed = s
                        .parse()
                        .map_err(|e| Error::MalformedCandidates { line: i + 1, reason: format!("bad seed: {e}") })?;
                }
                continue;
            }
            codes.push(
                line.parse::<Bssc>().map_err(|e| Error::MalformedCandidates { line: i + 1, reason: e.to_string() })?,
            );
        }
        Ok(Self::from_codes(codes, constraint, seed, false))
    }

    /// SHA-256 over the codes in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.codes {
            h.update(c.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
