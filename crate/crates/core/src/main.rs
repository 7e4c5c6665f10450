use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mslds::fit::{fit, score, FitConfig, Mode};
use mslds::io::{load_dataset, read_model, read_trajectory, write_atomic, write_model, write_states_csv, write_trajectory};
use mslds::metrics::coherence_metric;
use mslds::synth::{synth_double_well, WellsSpec};
use mslds::{sample_trajectory, MsldsError};

#[derive(Parser)]
#[command(name = "mslds", version, about = "Metastable switching linear dynamical systems")]
struct Cli {
    /// Flat JSON file with the same options; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a dataset directory or trajectory file.
    Fit(FitArgs),
    /// Sample a trajectory from a model.
    Sample(SampleArgs),
    /// Observed-data log-likelihood of a dataset.
    Score(ScoreArgs),
    /// Generate a piecewise Ornstein-Uhlenbeck trajectory.
    Synth(SynthArgs),
    /// Temporal coherence of a trajectory.
    Coherence(CoherenceArgs),
}

#[derive(Args, Default)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Per-iteration CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SampleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes PREFIX_obs.csv and PREFIX_states.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ScoreArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SynthArgs {
    /// Wells spec: a JSON file, or inline JSON.
    #[arg(long)]
    wells: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory file (.csv or .msld).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV of the well index per frame.
    #[arg(long)]
    states_out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct CoherenceArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
}

/// Every option any command accepts, as read from `--config`.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    data: Option<PathBuf>,
    states: Option<usize>,
    mode: Option<Mode>,
    out: Option<PathBuf>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    eta: Option<f64>,
    seed: Option<u64>,
    threads: Option<usize>,
    trace: Option<PathBuf>,
    model: Option<PathBuf>,
    steps: Option<usize>,
    wells: Option<String>,
    states_out: Option<PathBuf>,
    window: Option<usize>,
}

fn usage(msg: impl Into<String>) -> MsldsError {
    MsldsError::InvalidConfig(msg.into())
}

fn required<T>(v: Option<T>, name: &str) -> Result<T, MsldsError> {
    v.ok_or_else(|| usage(format!("missing required option --{name}")))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, MsldsError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn run_fit(a: FitArgs, c: ConfigFile) -> Result<(), MsldsError> {
    let data = required(a.data.or(c.data), "data")?;
    let out = required(a.out.or(c.out), "out")?;
    let mut cfg = FitConfig {
        n_states: required(a.states.or(c.states), "states")?,
        mode: a.mode.or(c.mode).unwrap_or_default(),
        ..FitConfig::default()
    };
    if let Some(v) = a.max_iters.or(c.max_iters) {
        cfg.max_em_iters = v;
    }
    if let Some(v) = a.tol.or(c.tol) {
        cfg.em_tol = v;
    }
    if let Some(v) = a.eta.or(c.eta) {
        cfg.mstep.eta = v;
    }
    if let Some(v) = a.seed.or(c.seed) {
        cfg.seed = v;
    }
    if let Some(v) = a.threads.or(c.threads) {
        cfg.threads = v;
    }
    cfg.validate()?;
    let dataset = load_dataset(&data)?;
    log::info!("{} trajectories, {} frames, d = {}", dataset.trajectories.len(), dataset.n_frames(), dataset.dim());
    let outcome = fit(&dataset, &cfg)?;
    write_model(&out, &outcome.params)?;
    if let Some(trace) = a.trace.or(c.trace) {
        write_atomic(&trace, |w| outcome.report.write_csv(w))?;
    }
    println!(
        "iterations {} convergence {:?} loglik {:.10e}",
        outcome.report.iterations.len().saturating_sub(1),
        outcome.report.convergence,
        outcome.report.final_loglik()
    );
    Ok(())
}

fn run_sample(a: SampleArgs, c: ConfigFile) -> Result<(), MsldsError> {
    let model = read_model(&required(a.model.or(c.model), "model")?)?;
    let steps = required(a.steps.or(c.steps), "steps")?;
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let prefix = required(a.out.or(c.out), "out")?;
    let path = sample_trajectory(&model, steps, seed, None)?;
    let with_suffix = |s: &str| {
        let mut p = prefix.clone().into_os_string();
        p.push(s);
        PathBuf::from(p)
    };
    write_trajectory(&with_suffix("_obs.csv"), &path.obs)?;
    write_states_csv(&with_suffix("_states.csv"), &path.states)?;
    Ok(())
}

fn run_score(a: ScoreArgs, c: ConfigFile) -> Result<(), MsldsError> {
    let model = read_model(&required(a.model.or(c.model), "model")?)?;
    let dataset = load_dataset(&required(a.data.or(c.data), "data")?)?;
    let (per, total) = score(&model, &dataset)?;
    for (tr, ll) in dataset.trajectories.iter().zip(&per) {
        println!("{}\t{ll:.10e}", tr.source_id());
    }
    println!("total\t{total:.10e}");
    Ok(())
}

fn run_synth(a: SynthArgs, c: ConfigFile) -> Result<(), MsldsError> {
    let wells = required(a.wells.or(c.wells), "wells")?;
    let text = if wells.trim_start().starts_with('{') {
        wells
    } else {
        fs::read_to_string(&wells).map_err(|e| MsldsError::Data(format!("{wells}: {e}")))?
    };
    let spec: WellsSpec = serde_json::from_str(&text).map_err(|e| usage(format!("wells spec: {e}")))?;
    let steps = required(a.steps.or(c.steps), "steps")?;
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let out = required(a.out.or(c.out), "out")?;
    let path = synth_double_well(&spec, steps, seed)?;
    write_trajectory(&out, path.traj.data())?;
    if let Some(s) = a.states_out.or(c.states_out) {
        write_states_csv(&s, &path.states)?;
    }
    Ok(())
}

fn run_coherence(a: CoherenceArgs, c: ConfigFile) -> Result<(), MsldsError> {
    let traj = read_trajectory(&required(a.data.or(c.data), "data")?)?;
    let window = a.window.or(c.window).unwrap_or(1);
    println!("{:.10e}", coherence_metric(traj.data(), window)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = load_config(cli.config.as_deref()).and_then(|c| match cli.command {
        Command::Fit(a) => run_fit(a, c),
        Command::Sample(a) => run_sample(a, c),
        Command::Score(a) => run_score(a, c),
        Command::Synth(a) => run_synth(a, c),
        Command::Coherence(a) => run_coherence(a, c),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
