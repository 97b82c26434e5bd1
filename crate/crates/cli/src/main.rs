//! `feelab`: simulate fee markets, ingest mempool records and run the
//! two-stage fee estimator stage by stage or end to end.
//!
//! Failures exit nonzero and print one JSON object with the error category
//! on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use feelab::delay::{DelayFit, ScheduleMode};
use feelab::estimate::{bootstrap, Dataset};
use feelab::fee::SplineSpec;
use feelab::io::{ingest, read_json, write_json, InputPaths};
use feelab::pipeline::{
    coefficient_table, counterfactual_summary, diagnose, fit_delay, fit_fee, rank_table, run_pipeline,
    simulate_to_dir, slope_table, vcg_check, RunConfig, SimulationSpec,
};
use feelab::sim::{FeePolicy, SimConfig, StructuralConfig};
use feelab::{Error, Result};

#[derive(Parser)]
#[command(name = "feelab", version, about = "Fee-market simulation and two-stage fee estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a market and write transaction, snapshot and ground-truth files.
    Simulate(SimulateArgs),
    /// Validate and join input files into an epoch-assigned dataset.
    Ingest(IngestArgs),
    /// Tie-aware fee-rate percentiles within epochs.
    Rank(RankArgs),
    /// Cross-fit the delay technology (stage 1).
    FitDelay(FitDelayArgs),
    /// Per-transaction delay gradients from a stage-1 fit.
    Slopes(SlopesArgs),
    /// Fit the log-fee equation (stage 2) and print the coefficient table.
    FitFee(FitFeeArgs),
    /// Epoch-block bootstrap re-running both stages.
    Bootstrap(BootstrapArgs),
    /// Temporal-stability diagnostics.
    Diagnose(DiagnoseArgs),
    /// Check discrete VCG payments and the continuous schedule against their oracles.
    VcgCheck(VcgCheckArgs),
    /// Expected fee rates at a fixed mempool state.
    Counterfactual(CounterfactualArgs),
    /// Full pipeline from input files to report, plots and manifest.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    Queue,
    Structural,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec (JSON); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<SimKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Queue: simulated minutes.
    #[arg(long)]
    horizon: Option<f64>,
    /// Queue: arrivals per minute.
    #[arg(long)]
    arrival_rate: Option<f64>,
    /// Structural: number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Structural: transactions per epoch.
    #[arg(long)]
    per_epoch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    transactions: Option<PathBuf>,
    #[arg(long)]
    snapshots: Option<PathBuf>,
    #[arg(long)]
    links: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    window_secs: Option<f64>,
    #[arg(long)]
    max_gap_secs: Option<f64>,
    #[arg(long)]
    max_error_fraction: Option<f64>,
    #[arg(long)]
    eps_resp: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Run configuration supplying defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for dataset.json and ingest_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

/// Estimation settings; mirrors the `estimate` section of the run config.
#[derive(Args)]
struct EstimateArgs {
    /// Run configuration supplying defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    feature_subsample: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    forest_seed: Option<u64>,
    /// Priority grid points.
    #[arg(long)]
    grid: Option<usize>,
    /// Finite-difference half-width.
    #[arg(long)]
    delta: Option<f64>,
    /// Priority clipping bound.
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    slope_floor: Option<f64>,
    /// One schedule per transaction instead of per epoch.
    #[arg(long)]
    per_observation: bool,
    /// Relay minimum in sat/vB for the fee equation.
    #[arg(long)]
    fee_floor: Option<f64>,
    /// Add the monotone impatience spline.
    #[arg(long)]
    spline: bool,
    /// Interior knot quantiles, comma separated (implies --spline).
    #[arg(long, value_delimiter = ',')]
    knots: Option<Vec<f64>>,
    /// Single intercept instead of epoch fixed effects.
    #[arg(long)]
    no_fixed_effects: bool,
}

#[derive(Args)]
struct FitDelayArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    est: EstimateArgs,
    /// JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SlopesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    delay_fit: PathBuf,
    #[arg(long)]
    fee_floor: Option<f64>,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitFeeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    delay_fit: PathBuf,
    #[command(flatten)]
    est: EstimateArgs,
    /// Output directory for fee_fit.json and table2.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    est: EstimateArgs,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    est: EstimateArgs,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<f64>>,
    /// JSON output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VcgCheckArgs {
    #[arg(long, default_value_t = 10_000)]
    instances: usize,
    /// Largest instance size.
    #[arg(long, default_value_t = 12)]
    max_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size for the continuous schedule.
    #[arg(long, default_value_t = 1000)]
    grid: usize,
}

#[derive(Args)]
struct CounterfactualArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    delay_fit: PathBuf,
    #[command(flatten)]
    est: EstimateArgs,
    /// Mempool state, comma separated in state-control order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    state: Vec<f64>,
    /// Probability of paying at least the fee floor (default: sample share).
    #[arg(long)]
    pi: Option<f64>,
    /// Mean sub-floor fee rate (default: sample mean).
    #[arg(long)]
    below_floor_mean: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    est: EstimateArgs,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_input(cfg: &mut RunConfig, a: &InputArgs) {
    if let Some(p) = &a.transactions {
        cfg.inputs.transactions = p.clone();
    }
    if let Some(p) = &a.snapshots {
        cfg.inputs.snapshots = p.clone();
    }
    if a.links.is_some() {
        cfg.inputs.links = a.links.clone();
    }
    if a.weights.is_some() {
        cfg.inputs.external_weights = a.weights.clone();
    }
    set(&mut cfg.ingest.epoch.window_secs, a.window_secs);
    set(&mut cfg.ingest.epoch.max_gap_secs, a.max_gap_secs);
    set(&mut cfg.ingest.max_error_fraction, a.max_error_fraction);
    set(&mut cfg.ingest.eps_resp, a.eps_resp);
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_estimate(cfg: &mut RunConfig, a: &EstimateArgs) {
    let e = &mut cfg.estimate;
    let f = &mut e.delay.forest;
    set(&mut f.n_trees, a.trees);
    set(&mut f.max_depth, a.max_depth);
    set(&mut f.min_leaf, a.min_leaf);
    set(&mut f.feature_subsample, a.feature_subsample);
    set(&mut f.n_folds, a.folds);
    set(&mut f.seed, a.forest_seed);
    set(&mut e.delay.grid_m, a.grid);
    set(&mut e.delay.slope.delta, a.delta);
    set(&mut e.delay.slope.trim, a.trim);
    set(&mut e.delay.slope_floor, a.slope_floor);
    if a.per_observation {
        e.delay.mode = ScheduleMode::PerObservation;
    }
    set(&mut e.fee_floor, a.fee_floor);
    if a.spline || a.knots.is_some() {
        let mut s = e.fee.spline.clone().unwrap_or_default();
        set(&mut s.knot_quantiles, a.knots.clone());
        e.fee.spline = Some::<SplineSpec>(s);
    }
    if a.no_fixed_effects {
        e.fee.fixed_effects = false;
    }
}

fn estimate_config(a: &EstimateArgs) -> Result<RunConfig> {
    let mut cfg = base_config(a.config.as_deref())?;
    apply_estimate(&mut cfg, a);
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_text(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_text(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    feelab::io::write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_json(path)
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec: SimulationSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SimulationSpec::default(),
    };
    match a.kind {
        Some(SimKind::Queue) if !matches!(spec, SimulationSpec::Queue { .. }) => {
            spec = SimulationSpec::Queue { config: SimConfig::default(), policy: FeePolicy::default() }
        }
        Some(SimKind::Structural) if !matches!(spec, SimulationSpec::Structural { .. }) => {
            spec = SimulationSpec::Structural { config: StructuralConfig::default() }
        }
        _ => {}
    }
    match &mut spec {
        SimulationSpec::Queue { config, .. } => {
            set(&mut config.seed, a.seed);
            set(&mut config.horizon, a.horizon);
            set(&mut config.arrival_rate_lambda, a.arrival_rate);
        }
        SimulationSpec::Structural { config } => {
            set(&mut config.seed, a.seed);
            set(&mut config.n_epochs, a.epochs);
            set(&mut config.per_epoch, a.per_epoch);
        }
    }
    let files = simulate_to_dir(&spec, &a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    print_json(&files)
}

fn ingest_cmd(a: &IngestArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    apply_input(&mut cfg, &a.input);
    require_inputs(&cfg.inputs)?;
    let (ds, report) = ingest(&cfg.inputs, &cfg.ingest)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("dataset.json"), &ds)?;
    write_json(&a.out.join("ingest_report.json"), &report)?;
    print_json(&report)
}

fn require_inputs(p: &InputPaths) -> Result<()> {
    if p.transactions.as_os_str().is_empty() || p.snapshots.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("--transactions and --snapshots are required".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Ingest(a) => ingest_cmd(&a),
        Command::Rank(a) => write_csv(&a.out, &rank_table(&load_dataset(&a.dataset)?)),
        Command::FitDelay(a) => {
            let cfg = estimate_config(&a.est)?;
            let (s, fit) = fit_delay(&load_dataset(&a.dataset)?, &cfg.estimate)?;
            write_json(&a.out, &fit)?;
            print_json(&serde_json::json!({
                "rows": s.delay_rows.len(),
                "fee_rows": s.fee_rows.len(),
                "unconfirmed": s.unconfirmed,
                "below_floor": s.below_floor,
                "metrics": fit.metrics,
                "trivial_share": fit.regimes.trivial_share,
            }))
        }
        Command::Slopes(a) => {
            let ds = load_dataset(&a.dataset)?;
            let delay: DelayFit = read_json(&a.delay_fit)?;
            let floor = a.fee_floor.unwrap_or(RunConfig::default().estimate.fee_floor);
            let s = feelab::estimate::sample(&ds, floor)?;
            write_csv(&a.out, &slope_table(&ds, &s, &delay)?)
        }
        Command::FitFee(a) => {
            let cfg = estimate_config(&a.est)?;
            let ds = load_dataset(&a.dataset)?;
            let delay: DelayFit = read_json(&a.delay_fit)?;
            let (_, _, fit) = fit_fee(&ds, &cfg.estimate, &delay)?;
            std::fs::create_dir_all(&a.out)?;
            write_json(&a.out.join("fee_fit.json"), &fit)?;
            let table = coefficient_table(&fit, None);
            std::fs::write(a.out.join("table2.tsv"), &table)?;
            print_text(&table)
        }
        Command::Bootstrap(a) => {
            let mut cfg = estimate_config(&a.est)?;
            set(&mut cfg.bootstrap.replicates, a.replicates);
            set(&mut cfg.bootstrap.seed, a.seed);
            let b = bootstrap(&load_dataset(&a.dataset)?, &cfg.estimate, cfg.bootstrap.replicates, cfg.bootstrap.seed)?;
            write_json(&a.out, &b)?;
            let summary: Vec<_> = b
                .names
                .iter()
                .enumerate()
                .map(|(j, n)| serde_json::json!({ "term": n, "boot_se": b.sd_se[j], "ci": b.percentile_ci[j] }))
                .collect();
            print_json(&serde_json::json!({ "replicates": b.b, "failed": b.failed, "terms": summary }))
        }
        Command::Diagnose(a) => {
            let mut cfg = estimate_config(&a.est)?;
            set(&mut cfg.diagnostics.rolling_windows, a.windows);
            set(&mut cfg.diagnostics.oos_splits, a.splits);
            let ds = load_dataset(&a.dataset)?;
            let (_, delay) = fit_delay(&ds, &cfg.estimate)?;
            let (_, data, fit) = fit_fee(&ds, &cfg.estimate, &delay)?;
            let report = diagnose(&ds, &cfg.estimate, &cfg.diagnostics, &delay, &data, &fit)?;
            write_json(&a.out, &report)
        }
        Command::VcgCheck(a) => {
            let r = vcg_check(a.instances, a.max_n, a.seed, a.grid)?;
            print_json(&r)?;
            if r.mismatches > 0 {
                return Err(Error::Undefined(format!("{} VCG payments differ from the brute-force externality", r.mismatches)));
            }
            Ok(())
        }
        Command::Counterfactual(a) => {
            let cfg = estimate_config(&a.est)?;
            let ds = load_dataset(&a.dataset)?;
            let delay: DelayFit = read_json(&a.delay_fit)?;
            let (s, data, fit) = fit_fee(&ds, &cfg.estimate, &delay)?;
            print_json(&counterfactual_summary(&ds, &s, &data, &fit, &a.state, a.pi, a.below_floor_mean)?)
        }
        Command::Run(a) => {
            let mut cfg = base_config(a.est.config.as_deref())?;
            apply_input(&mut cfg, &a.input);
            apply_estimate(&mut cfg, &a.est);
            set(&mut cfg.bootstrap.replicates, a.replicates);
            set(&mut cfg.bootstrap.seed, a.bootstrap_seed);
            set(&mut cfg.diagnostics.rolling_windows, a.windows);
            set(&mut cfg.diagnostics.oos_splits, a.splits);
            if let Some(o) = a.out {
                cfg.output_dir = o;
            } else if cfg.output_dir.as_os_str().is_empty() {
                cfg.output_dir = PathBuf::from("feelab-run");
            }
            if a.print_config {
                return print_json(&cfg);
            }
            let manifest = run_pipeline(&cfg)?;
            print_json(&manifest)
        }
    }
}

/// Exit code per error category.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "input" => 4,
        "io" => 5,
        _ => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("{}", serde_json::json!({ "error": category, "message": e.to_string() }));
            ExitCode::from(exit_code(category))
        }
    }
}
