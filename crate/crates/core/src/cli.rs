//! Command-line front end: `gen`, `train`, `eval`, `probe` and `stats`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 solver failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alpha::{alpha_softargmax_with_tau, AlphaParams, LogitVector, ReferenceMeasure};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    det_points, frr_at_far, load_trials, make_trials, save_trials, score_trials, sparsity_report,
    write_det_csv, FarOutcome,
};
use crate::losses::fy_loss;
use crate::model::Model;
use crate::synthdata::{self, SampleCounts, SynthSpec};
use crate::trainer::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "alpha-margin",
    version,
    about = "Margin-equipped alpha-divergence losses and verification tooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic identity dataset (and optionally a trial list).
    Gen(GenArgs),
    /// Train an embedder and prototype head from a run config.
    Train(TrainArgs),
    /// Score a trial list and report FRR at the requested FAR levels.
    Eval(EvalArgs),
    /// Solve a single α-softargmax problem and print τ*, p and the loss.
    Probe(ProbeArgs),
    /// Posterior sparsity and misalignment statistics of a checkpoint.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub d: usize,
    /// Samples per identity (or per regular identity with --fraction-few).
    #[arg(long, default_value_t = 10)]
    pub per_id: usize,
    /// Fraction of identities that receive only --n-few samples.
    #[arg(long)]
    pub fraction_few: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub n_few: usize,
    #[arg(long, default_value_t = 20.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a trial list here.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n_genuine: usize,
    #[arg(long, default_value_t = 10000)]
    pub n_impostor: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML with [data], [output] and [train] sections).
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Comma-separated FAR targets.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.001")]
    pub far: Vec<f64>,
    /// Directory for det.csv and report.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Comma-separated logits.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    pub theta: Vec<f64>,
    /// Comma-separated reference weights (default: all ones).
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: f64,
    /// Target class for the reported loss.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run config supplying the loss and solver settings.
    #[arg(long)]
    pub config: PathBuf,
}

/// Maps an error onto the documented exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Solver(_) | Error::NonFiniteGradient(_) => EXIT_SOLVER,
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, writing reports to `out` and errors to
/// `err`. Returns the process exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Prefixes I/O errors with the path they concern.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            at(dir, fs::create_dir_all(dir).map_err(Error::from))
        }
        _ => Ok(()),
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a.config, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Probe(a) => cmd_probe(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let samples = match a.fraction_few {
        Some(fraction_few) => SampleCounts::LongTail {
            n_many: a.per_id,
            fraction_few,
            n_few: a.n_few,
        },
        None => SampleCounts::Fixed { per_id: a.per_id },
    };
    let spec = SynthSpec {
        k: a.k,
        d: a.d,
        samples,
        noise_kappa: a.kappa,
        seed: a.seed,
    };
    let ds = synthdata::generate(&spec)?;
    ensure_parent(&a.out)?;
    at(&a.out, synthdata::save(&ds, &a.out))?;
    writeln!(
        out,
        "wrote {} rows (d={}, k={}) to {}",
        ds.len(),
        ds.dim(),
        ds.num_ids(),
        a.out.display()
    )?;
    if let Some(path) = &a.trials {
        let trials = make_trials(ds.labels(), a.n_genuine, a.n_impostor, a.seed)?;
        ensure_parent(path)?;
        at(path, save_trials(&trials, path))?;
        writeln!(out, "wrote {} trials to {}", trials.len(), path.display())?;
    }
    Ok(())
}

/// Trains from a config file and writes `checkpoint.bin`, `metrics.csv`,
/// `events.log` and the effective `config.toml` into the output directory.
pub fn cmd_train(config_path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = at(config_path, RunConfig::load(config_path))?;
    let data = at(&cfg.data.dataset, synthdata::load(&cfg.data.dataset))?;
    let (model, log) = train(&data, &cfg.train)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    model.save(&dir.join("checkpoint.bin"))?;
    fs::write(dir.join("metrics.csv"), log.to_csv())?;
    let mut events = String::new();
    for e in &log.events {
        events.push_str(e);
        events.push('\n');
    }
    fs::write(dir.join("events.log"), &events)?;
    write!(out, "{events}")?;
    if let Some(last) = log.epochs.last() {
        writeln!(
            out,
            "trained {} epochs: loss {} misaligned_images {} posterior_sparsity {}",
            last.epoch,
            last.loss,
            last.report.misaligned_image_fraction,
            last.report.posterior_sparsity
        )?;
    }
    writeln!(out, "run directory: {}", dir.display())?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = at(&a.checkpoint, Model::load(&a.checkpoint))?;
    let data = at(&a.dataset, synthdata::load(&a.dataset))?;
    let trials = at(&a.trials, load_trials(&a.trials))?;
    let scores = score_trials(&data, &model.embedder, &trials)?;
    let det = det_points(&scores)?;
    fs::create_dir_all(&a.out_dir)?;
    write_det_csv(&det, &a.out_dir.join("det.csv"))?;

    let mut report = format!(
        "genuine_trials = {}\nimpostor_trials = {}\n",
        scores.genuine.len(),
        scores.impostor.len()
    );
    for &far in &a.far {
        match frr_at_far(&scores, far)? {
            FarOutcome::Attained { frr, threshold, .. } => {
                report.push_str(&format!("frr@far={far} = {frr} (threshold {threshold})\n"));
            }
            FarOutcome::Unattainable { min_far } => {
                report.push_str(&format!(
                    "frr@far={far} = unattainable (min_far {min_far})\n"
                ));
            }
        }
    }
    fs::write(a.out_dir.join("report.txt"), &report)?;
    write!(out, "{report}")?;
    Ok(())
}

pub fn cmd_probe(a: &ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let params = AlphaParams::new(a.alpha)?;
    let theta = LogitVector::new(a.theta.clone())?;
    let q = match &a.q {
        Some(w) => ReferenceMeasure::new(w.clone())?,
        None => ReferenceMeasure::ones(theta.len()),
    };
    let (tau, p) = alpha_softargmax_with_tau(&theta, &q, &params)?;
    let loss = fy_loss(&theta, a.label, &q, &params)?;
    let dense: Vec<String> = p.to_dense().iter().map(|v| v.to_string()).collect();
    writeln!(out, "tau = {tau}")?;
    writeln!(out, "posterior = {}", dense.join(","))?;
    writeln!(out, "support = {}", p.support_len())?;
    writeln!(out, "loss = {}", loss.value)?;
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = at(&a.config, RunConfig::load(&a.config))?;
    let model = at(&a.checkpoint, Model::load(&a.checkpoint))?;
    let data = at(&a.dataset, synthdata::load(&a.dataset))?;
    let report = sparsity_report(
        &data,
        &model.embedder,
        &model.prototypes()?,
        &cfg.train.loss.with_margin(cfg.train.loss.margin),
        &cfg.train.alpha.params()?,
    )?;
    writeln!(out, "{report}")?;
    Ok(())
}
