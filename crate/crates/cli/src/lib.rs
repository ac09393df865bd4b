//! Command-line harness. `dispatch` parses an argument vector, runs one
//! subcommand and returns the process exit code: 0 on success, 2 on a
//! configuration or usage error, 1 on a runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use p2diff::checkpoint::{self, Checkpoint};
use p2diff::data::{self, DatasetKind};
use p2diff::diffusion::sample_many;
use p2diff::eval;
use p2diff::rng::{self, streams};
use p2diff::schedule::ScheduleFamily;
use p2diff::trainer;
use p2diff::weighting::weights_csv;
use p2diff::{Error, Result, RunConfig, SamplerKind, VarianceMode, WeightingConfig};

#[derive(Debug, Parser)]
#[command(
    name = "p2diff",
    version,
    about = "Diffusion training and sampling with SNR-based loss weighting"
)]
pub struct Cli {
    /// Seed for all randomness; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-step schedule quantities as CSV.
    ScheduleExport(ScheduleExportArgs),
    /// Baseline and P2 weight curves as CSV.
    WeightsExport(WeightsExportArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Stochastic reconstruction distances over a grid of start steps.
    Recon(ReconArgs),
    /// Same-source vs different-source distances of corrupted points.
    CorruptionDistance(CorruptionArgs),
    /// Two-sample scores of a checkpoint against held-out data.
    Eval(EvalArgs),
    /// Compare a baseline-weighted and a P2-weighted checkpoint.
    Compare(CompareArgs),
    /// Dump dataset samples as JSON lines.
    DataExport(DataExportArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArg {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ScheduleArgs {
    #[arg(long, value_parser = parse_family)]
    pub schedule: Option<ScheduleFamily>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub cosine_s: Option<f64>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct SamplerArgs {
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_parser = parse_var_mode)]
    pub var_mode: Option<VarianceMode>,
    /// Number of respaced sampling steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct DataArgs {
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScheduleExportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct WeightsExportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Override the number of training steps.
    #[arg(long)]
    pub train_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Comma-separated start steps; defaults to 0 plus log-SNR bin centres.
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct CorruptionArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = eval::DEFAULT_TRIPLETS)]
    pub n_triplets: usize,
    /// Comma-separated steps; defaults to log-SNR bin centres.
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub p2: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct DataExportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
}

fn parse_family(s: &str) -> std::result::Result<ScheduleFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_var_mode(s: &str) -> std::result::Result<VarianceMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetKind, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| {
        format!("unknown dataset `{s}` (expected ring_of_gaussians, swiss_roll, checkerboard or tiny_bars)")
    })
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.schedule;
        if let Some(f) = self.schedule {
            s.family = f;
        }
        if let Some(t) = self.timesteps {
            s.num_timesteps = t;
        }
        if let Some(b) = self.beta_start {
            s.beta_start = b;
        }
        if let Some(b) = self.beta_end {
            s.beta_end = b;
        }
        if let Some(c) = self.cosine_s {
            s.cosine_s = c;
        }
    }
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sampler;
        if let Some(k) = self.sampler {
            s.sampler = k;
        }
        if let Some(e) = self.eta {
            s.eta = e;
        }
        if let Some(v) = self.var_mode {
            s.var_mode = v;
        }
        if self.steps.is_some() {
            s.num_steps = self.steps;
        }
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        if let Some(k) = self.dataset {
            d.kind = k;
        }
        if let Some(m) = self.modes {
            d.modes = m;
        }
        if let Some(n) = self.noise {
            d.noise = n;
        }
        if let Some(s) = self.data_seed {
            d.seed = s;
        }
        cfg.model.input_dim = d.dim();
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        // Fails only if a pool already exists, e.g. in tests calling
        // `dispatch` repeatedly; the thread count never affects results.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let out = &cli.out;
    match &cli.command {
        Command::ScheduleExport(a) => schedule_export(cli, a, out),
        Command::WeightsExport(a) => weights_export(cli, a, out),
        Command::Train(a) => train(cli, a, out),
        Command::Sample(a) => sample(cli, a, out),
        Command::Recon(a) => recon(cli, a, out),
        Command::CorruptionDistance(a) => corruption(cli, a, out),
        Command::Eval(a) => evaluate(cli, a, out),
        Command::Compare(a) => compare(cli, a, out),
        Command::DataExport(a) => data_export(cli, a, out),
    }
}

fn base_config(cli: &Cli, arg: &ConfigArg) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Run config whose schedule, weighting, model and data come from a
/// checkpoint header.
fn config_from_checkpoint(cli: &Cli, arg: &ConfigArg, ck: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = base_config(cli, arg)?;
    cfg.schedule = ck.header.schedule.clone();
    cfg.weighting = ck.header.weighting;
    cfg.model = ck.header.spec.clone();
    cfg.data = ck.header.data.clone();
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    args: Value,
    outputs: Vec<&'a str>,
}

fn write_meta(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    args: Value,
    outputs: Vec<&str>,
) -> Result<()> {
    let meta = Meta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        args,
        outputs,
    };
    write(
        dir,
        "meta.json",
        serde_json::to_string_pretty(&meta)? + "\n",
    )
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn schedule_export(cli: &Cli, a: &ScheduleExportArgs, out: &Path) -> Result<()> {
    let mut cfg = base_config(cli, &a.config)?;
    a.schedule.apply(&mut cfg);
    let sched = cfg.schedule.build()?;
    write(out, "schedule.csv", sched.to_csv())?;
    write_meta(
        out,
        "schedule-export",
        &cfg,
        json!({}),
        vec!["schedule.csv"],
    )
}

fn weights_export(cli: &Cli, a: &WeightsExportArgs, out: &Path) -> Result<()> {
    let mut cfg = base_config(cli, &a.config)?;
    a.schedule.apply(&mut cfg);
    cfg.weighting = WeightingConfig::p2(a.gamma, a.k);
    cfg.weighting.validate()?;
    let sched = cfg.schedule.build()?;
    write(out, "weights.csv", weights_csv(&sched, a.gamma, a.k)?)?;
    write_meta(
        out,
        "weights-export",
        &cfg,
        json!({"gamma": a.gamma, "k": a.k}),
        vec!["weights.csv"],
    )
}

fn train(cli: &Cli, a: &TrainArgs, out: &Path) -> Result<()> {
    let mut cfg = base_config(cli, &a.config)?;
    if let Some(steps) = a.train_steps {
        cfg.trainer.steps = steps;
    }
    cfg.validate()?;
    let path = trainer::train(&cfg.train_config(), &cfg.model, &cfg.data, out)?;
    log::info!("wrote {}", path.display());
    write_meta(
        out,
        "train",
        &cfg,
        json!({}),
        vec!["metrics.csv", "checkpoint.bin"],
    )
}

fn sample(cli: &Cli, a: &SampleArgs, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = config_from_checkpoint(cli, &a.config, &ck)?;
    a.sampler.apply(&mut cfg);
    cfg.sampler.validate()?;
    let sched = ck.schedule()?;
    let model = ck.ema_denoiser()?;
    let points = sample_many(&model, &sched, &cfg.sampler, a.n, cfg.seed)?;
    let steps = cfg.sampler.steps_from(sched.num_timesteps())?;
    write(out, "samples.jsonl", data::to_json_lines(&points))?;
    write_meta(
        out,
        "sample",
        &cfg,
        json!({
            "checkpoint": a.checkpoint,
            "n": a.n,
            "schedule": cfg.schedule,
            "sampler": cfg.sampler.sampler,
            "eta": cfg.sampler.eta,
            "var_mode": cfg.sampler.var_mode,
            "steps": steps,
        }),
        vec!["samples.jsonl"],
    )
}

fn recon(cli: &Cli, a: &ReconArgs, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = config_from_checkpoint(cli, &a.config, &ck)?;
    a.sampler.apply(&mut cfg);
    let sched = ck.schedule()?;
    let grid = match &a.t_grid {
        Some(g) => g.clone(),
        None => std::iter::once(0)
            .chain(eval::snr_bin_grid(&sched, 2))
            .collect(),
    };
    let model = ck.ema_denoiser()?;
    let rep = eval::reconstruction_study(
        &model,
        &cfg.data,
        &sched,
        &grid,
        a.n,
        &cfg.sampler,
        cfg.seed,
    )?;
    write(out, "recon.csv", rep.report.to_csv())?;
    write(out, "recon.json", pretty(&rep)?)?;
    write_meta(
        out,
        "recon",
        &cfg,
        json!({"checkpoint": a.checkpoint, "n": a.n, "t_grid": grid}),
        vec!["recon.csv", "recon.json"],
    )
}

fn corruption(cli: &Cli, a: &CorruptionArgs, out: &Path) -> Result<()> {
    let mut cfg = base_config(cli, &a.config)?;
    a.schedule.apply(&mut cfg);
    a.data.apply(&mut cfg);
    let sched = cfg.schedule.build()?;
    let grid = match &a.t_grid {
        Some(g) => g.clone(),
        None => eval::snr_bin_grid(&sched, 2),
    };
    let mut r = rng::stream(cfg.seed, streams::EVAL);
    let study = eval::corruption_distance_study(&cfg.data, &sched, &grid, a.n_triplets, &mut r)?;
    write(out, "corruption.csv", study.to_csv())?;
    write(out, "same_source.csv", study.same_source.to_csv())?;
    write(out, "different_source.csv", study.different_source.to_csv())?;
    write(out, "corruption.json", pretty(&study)?)?;
    write_meta(
        out,
        "corruption-distance",
        &cfg,
        json!({"n_triplets": a.n_triplets, "t_grid": grid, "distance": "rms"}),
        vec![
            "corruption.csv",
            "same_source.csv",
            "different_source.csv",
            "corruption.json",
        ],
    )
}

fn evaluate(cli: &Cli, a: &EvalArgs, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = config_from_checkpoint(cli, &a.config, &ck)?;
    a.sampler.apply(&mut cfg);
    let summary = eval::evaluate_checkpoint(&ck, &cfg.sampler, a.n, cfg.seed)?;
    write(out, "eval.json", pretty(&summary)?)?;
    write_meta(
        out,
        "eval",
        &cfg,
        json!({"checkpoint": a.checkpoint, "n": a.n}),
        vec!["eval.json"],
    )
}

fn compare(cli: &Cli, a: &CompareArgs, out: &Path) -> Result<()> {
    let base = load_checkpoint(&a.baseline)?;
    let p2 = load_checkpoint(&a.p2)?;
    let mut cfg = config_from_checkpoint(cli, &a.config, &p2)?;
    a.sampler.apply(&mut cfg);
    let report = eval::compare_runs(&base, &p2, &cfg.sampler, a.n, cfg.seed)?;
    write(out, "compare.json", pretty(&report)?)?;
    write_meta(
        out,
        "compare",
        &cfg,
        json!({"baseline": a.baseline, "p2": a.p2, "n": a.n}),
        vec!["compare.json"],
    )
}

fn data_export(cli: &Cli, a: &DataExportArgs, out: &Path) -> Result<()> {
    let mut cfg = base_config(cli, &a.config)?;
    a.data.apply(&mut cfg);
    let points = data::generate(&cfg.data, a.n, &mut rng::stream(cfg.seed, streams::DATA))?;
    write(out, "data.jsonl", data::to_json_lines(&points))?;
    write_meta(
        out,
        "data-export",
        &cfg,
        json!({"n": a.n}),
        vec!["data.jsonl"],
    )
}
