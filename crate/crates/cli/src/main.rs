use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use autobss::cost::{self, Cost};
use autobss::evaluator::{Evaluator, ExternalEvaluator, SyntheticOracle};
use autobss::journal::Journal;
use autobss::search::{self, SearchConfig};
use autobss::{Bssc, CandidateSet, Constraint, Error, Metric, NetworkPlan, Preset};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod config;

use config::{EvaluatorKind, FileConfig};

/// Block stacking style search.
#[derive(Debug, Parser)]
#[command(name = "autobss", version)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// FLOPs (MACs) and parameters of one code.
    Cost(CostArgs),
    /// Build a candidate set and write it to a file.
    Candidates(CandidatesArgs),
    /// Run a search.
    Search(SearchArgs),
    /// AutoBSS against random search on the synthetic oracle, one row per seed.
    Bench(BenchArgs),
    /// Print the value grid of each code dimension.
    Space(SpaceArgs),
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    family: Preset,
    /// Comma-separated code; defaults to the family's original network.
    #[arg(long)]
    code: Option<Bssc>,
    /// Input resolution in pixels.
    #[arg(long)]
    resolution: Option<u32>,
    /// Multiplier for the widths the code does not cover (stem, fixed stages).
    #[arg(long)]
    fixed_width: Option<f64>,
    /// Cost a code whose values are off the family's grid.
    #[arg(long)]
    off_grid: bool,
    /// Write the per-stage profile CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CandidatesArgs {
    #[arg(long)]
    family: Preset,
    #[arg(long, default_value_t = 10_000)]
    size: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Flops)]
    metric: MetricArg,
    /// Budget; defaults to the cost of the family's original code.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output file (standard output if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Flops,
    Params,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Flops => Metric::Flops,
            MetricArg::Params => Metric::Params,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's family.
    #[arg(long)]
    family: Option<Preset>,
    /// Continue the search recorded in this journal.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run a baseline instead of AutoBSS.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Directory for the journal and trajectory (overrides the config's paths).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's family.
    #[arg(long)]
    family: Option<Preset>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// CSV output (standard output if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpaceArgs {
    #[arg(long)]
    family: Preset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidCode(_) | Error::Config(_) => 2,
                Error::InfeasibleSpace { .. } => 3,
                Error::Evaluator(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<autobss::error::EvalError>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Cost(a) => cmd_cost(a),
        Command::Candidates(a) => cmd_candidates(a, cli.seed.unwrap_or(0)),
        Command::Search(a) => cmd_search(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed.unwrap_or(0)),
        Command::Space(a) => cmd_space(a),
    }
}

fn scaled(v: u64) -> String {
    let v = v as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

fn stdout_or_file(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn cmd_cost(a: CostArgs) -> anyhow::Result<()> {
    let mut space = a.family.space();
    if let Some(r) = a.resolution {
        space = space.with_resolution(r);
    }
    if let Some(m) = a.fixed_width {
        space = space.with_fixed_width_multiplier(m);
    }
    let code = a.code.unwrap_or_else(|| a.family.original_code());
    let plan = if a.off_grid {
        if code.len() != space.dim_count() {
            bail!(Error::InvalidCode(space.validate(&code).unwrap_err()));
        }
        NetworkPlan::from_values(&space, &code.0)
    } else {
        NetworkPlan::decode(&code, &space)?
    };
    let report = cost::count(&plan);
    let mut out = std::io::stdout().lock();
    writeln!(out, "family      {}", a.family)?;
    writeln!(out, "code        {code}")?;
    writeln!(out, "resolution  {}", space.input_resolution)?;
    writeln!(out, "flops       {} ({} MACs)", scaled(report.flops), report.flops)?;
    writeln!(out, "params      {} ({})", scaled(report.params), report.params)?;
    if let Some(p) = a.out {
        let f = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        cost::write_profile_csv(&cost::profile_of(&report), f)?;
    }
    Ok(())
}

fn cmd_candidates(a: CandidatesArgs, seed: u64) -> anyhow::Result<()> {
    if a.size == 0 {
        return Err(Usage("--size must be at least 1".into()).into());
    }
    let space = a.family.space();
    let metric = a.metric.into();
    let constraint = match a.threshold {
        Some(t) => Constraint::new(metric, t)?,
        None => Constraint::from_code(metric, &a.family.original_code(), &space),
    };
    let set = CandidateSet::build(&space, constraint, a.size, seed, autobss::Exec::default())?;
    if set.diversity_exhausted {
        log::warn!("only {} distinct maximal codes found", set.len());
    }
    let mut out = stdout_or_file(a.out.as_deref())?;
    set.write_to(a.family.name(), &mut out)?;
    out.flush()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p).map_err(|e| Usage(format!("bad config: {e:#}")).into()),
        None => Ok(FileConfig::default()),
    }
}

fn make_evaluator(file: &FileConfig, cfg: &SearchConfig, set: &CandidateSet) -> anyhow::Result<Box<dyn Evaluator>> {
    Ok(match file.evaluator.kind {
        EvaluatorKind::Synthetic => Box::new(SyntheticOracle::new(set, file.oracle.oracle_config(cfg.seed))),
        EvaluatorKind::External => {
            let Some(ext) = file.external.clone() else {
                return Err(Usage("evaluator.kind = \"external\" needs an [external] section".into()).into());
            };
            Box::new(ExternalEvaluator::new(ext, cfg.family.name(), set.constraint.to_string()))
        }
    })
}

fn cmd_search(a: SearchArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let file = load_config(a.config.as_deref())?;
    let cfg = file.search_config(a.family, seed);
    cfg.validate()?;
    let (journal_path, trajectory_path) = match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            (dir.join("journal.jsonl"), dir.join("trajectory.csv"))
        }
        None => (file.output.journal.clone(), file.output.trajectory.clone()),
    };
    let journal_path = a.resume.clone().unwrap_or(journal_path);

    log::info!("building {} candidates for {}", cfg.candidate_size, cfg.family);
    let set = cfg.build_candidates()?;
    if let Some(p) = &file.output.candidates {
        set.save(cfg.family.name(), p)?;
    }
    let evaluator = make_evaluator(&file, &cfg, &set)?;
    let mut journal =
        if a.resume.is_some() { Journal::resume(&journal_path)? } else { Journal::create(&journal_path)? };
    let result = match a.baseline {
        None => search::run(&cfg, &set, evaluator.as_ref(), Some(&mut journal))?,
        Some(Baseline::Random) => search::random_search(&cfg, &set, evaluator.as_ref(), Some(&mut journal))?,
    };
    journal.finish()?;
    let f = BufWriter::new(
        File::create(&trajectory_path).with_context(|| format!("creating {}", trajectory_path.display()))?,
    );
    result.write_trajectory(f)?;

    let summary = json!({
        "mode": if a.baseline.is_some() { "random" } else { "autobss" },
        "family": cfg.family.name(),
        "seed": cfg.seed,
        "evaluations": result.history.len(),
        "best_code": result.best.code.to_string(),
        "best_accuracy": result.best.accuracy,
        "per_iteration_best": result.per_iteration_best,
        "candidates_digest": result.candidates_digest,
        "journal": journal_path,
        "trajectory": trajectory_path,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_bench(a: BenchArgs, base_seed: u64) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(Usage("--seeds must be at least 1".into()).into());
    }
    let file = load_config(a.config.as_deref())?;
    let mut out = stdout_or_file(a.out.as_deref())?;
    writeln!(out, "seed,autobss_best,random_best,autobss_rank,random_rank,candidates")?;
    for i in 0..a.seeds {
        let cfg = file.search_config(a.family, Some(base_seed + i));
        let set = cfg.build_candidates()?;
        let oracle = SyntheticOracle::new(&set, file.oracle.oracle_config(cfg.seed));
        let auto = search::run(&cfg, &set, &oracle, None)?;
        let random = search::random_search(&cfg, &set, &oracle, None)?;
        let scores = oracle.scan(&set)?;
        let rank = |acc: f64| scores.iter().filter(|&&s| s > acc).count();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            cfg.seed,
            auto.best.accuracy,
            random.best.accuracy,
            rank(auto.best.accuracy),
            rank(random.best.accuracy),
            set.len()
        )?;
        out.flush()?;
        log::info!("seed {}: autobss {:.4}, random {:.4}", cfg.seed, auto.best.accuracy, random.best.accuracy);
    }
    Ok(())
}

fn cmd_space(a: SpaceArgs) -> anyhow::Result<()> {
    let space = a.family.space();
    let mut out = std::io::stdout().lock();
    writeln!(out, "family {} ({} dimensions)", a.family, space.dim_count())?;
    for d in &space.dims {
        let values: Vec<String> = d.values.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{:<4} {}", d.label(), values.join(","))?;
    }
    let orig = a.family.original_code();
    let c = Cost::of_values(&space, &orig.0);
    writeln!(out, "original {orig}: {} MACs, {} params", scaled(c.flops), scaled(c.params))?;
    Ok(())
}
