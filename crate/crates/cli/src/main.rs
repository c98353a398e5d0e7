use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use art_core::artrl::{self, TrainCheckpoint};
use art_core::config::RunConfig;
use art_core::eval::{self, SweepSchedule};
use art_core::formats::{self, ArtifactMeta, ScheduleFile, ThetaFile};
use art_core::par::Execution;
use art_core::sampler::{self, Method};
use art_core::schedule::{self, TimeGrid};

mod run;

use run::RunDir;

#[derive(Parser, Debug)]
#[command(name = "art", version, about = "Adaptive timestep schedules for diffusion samplers")]
struct Cli {
    /// Root directory for run outputs; each run writes into `<root>/<run>`.
    #[arg(long, env = "ART_OUT_DIR", default_value = "runs", global = true)]
    out_root: PathBuf,

    /// Run directory name [default: the subcommand name].
    #[arg(long, global = true)]
    run: Option<String>,

    /// Disable data-parallel batch work.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Train the actor-critic; writes checkpoint.json and history.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Distill a trained policy into theta.json, schedule.json and theta_stats.csv.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit a schedule file.
    Grid {
        #[arg(long, value_enum)]
        kind: GridKind,
        #[arg(long = "T", default_value_t = 3.0)]
        horizon: f64,
        #[arg(long = "K")]
        steps: Option<usize>,
        #[arg(long, default_value_t = 7.0)]
        rho: f64,
        #[arg(long, default_value_t = 0.002)]
        sigma_min: f64,
        /// Defaults to T.
        #[arg(long)]
        sigma_max: Option<f64>,
        /// Rescale the EDM levels onto [0, T] instead of appending s = 0.
        #[arg(long)]
        no_append_zero: bool,
        /// art-theta/1 file for `--kind theta`.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Integrate samples on a schedule; writes samples.csv.
    Sample {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Euler)]
        method: MethodArg,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// W2 of Euler sampling on a schedule.
    Eval {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// W2 against K for Uniform, EDM rows and an optional learned schedule.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// art-theta/1 or art-sched/1 file for the learned row.
        #[arg(long)]
        learned: Option<PathBuf>,
    },
    /// Local-error probe of the one-step Euler residual.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.05, 0.025, 0.0125])]
        h: Vec<f64>,
    },
    /// Log-linear resampling of a schedule to a new step count.
    Resample {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long = "K")]
        steps: usize,
        /// Defaults to 1e-4 T.
        #[arg(long)]
        floor: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GridKind {
    Uniform,
    Edm,
    Theta,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Euler,
    Heun,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Euler => Method::Euler,
            MethodArg::Heun => Method::Heun,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Distill { .. } => "distill",
            Command::Grid { .. } => "grid",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Probe { .. } => "probe",
            Command::Resample { .. } => "resample",
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Train { config }
            | Command::Distill { config, .. }
            | Command::Sample { config, .. }
            | Command::Eval { config, .. }
            | Command::Sweep { config, .. }
            | Command::Probe { config, .. } => config.as_deref(),
            Command::Grid { .. } | Command::Resample { .. } => None,
        }
    }
}

/// The resolved invocation, echoed next to the outputs and hashed into every artifact.
#[derive(Serialize)]
struct Resolved<'a> {
    #[serde(flatten)]
    command: &'a Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn execute(cli: &Cli) -> Result<()> {
    let config = match cli.command.config_path() {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let root = config.output_dir.clone().unwrap_or_else(|| cli.out_root.clone());
    let name = cli.run.clone().unwrap_or_else(|| cli.command.name().to_string());
    let uses_config = !matches!(cli.command, Command::Grid { .. } | Command::Resample { .. });
    let resolved = Resolved { command: &cli.command, config: uses_config.then_some(&config) };
    let meta = ArtifactMeta { config_hash: formats::config_hash(&resolved)?, seed: config.seed };
    let dir = RunDir::create(&root.join(name))?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = dir
        .write_json("config.resolved.json", &serde_json::json!({ "resolved": resolved, "meta": meta }))
        .and_then(|_| dispatch(&cli.command, &config, &meta, &dir, exec));
    dir.finish(result)
}

fn dispatch(cmd: &Command, cfg: &RunConfig, meta: &ArtifactMeta, dir: &RunDir, exec: Execution) -> Result<()> {
    let (spec, score) = cfg.spec.build()?;
    let score = score.as_ref();
    match cmd {
        Command::Train { .. } => {
            let tc = cfg.train_config();
            let out = artrl::train(&spec, score, &tc)?;
            let ck = out.checkpoint(&tc);
            dir.write_json("checkpoint.json", &CheckpointFile { meta: meta.clone(), checkpoint: ck })?;
            dir.write_with("history.csv", |w| Ok(out.write_history_csv(w)?))?;
            println!(
                "trained {} iterations: gamma {:.6}, tail |psi_K - T| {:.6}, aborted {}",
                out.state.iteration,
                out.state.gamma,
                out.tail_abs_gap(0.1),
                out.state.aborted
            );
        }
        Command::Distill { checkpoint, .. } => {
            let file: CheckpointFile = formats::read_json(checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let policy = file.checkpoint.policy()?;
            let dc = cfg.distill_config();
            let out = artrl::distill(&policy, &spec, score, &dc, exec)?;
            if let Some(w) = &out.warning {
                eprintln!("warning: {w}");
            }
            let grid = schedule::grid_from_theta(&out.curve)?;
            dir.write_json("theta.json", &ThetaFile::from_curve(&out.curve, Some(meta.clone())))?;
            dir.write_json("schedule.json", &ScheduleFile::from_grid(&grid, Some(meta.clone())))?;
            dir.write_with("theta_stats.csv", |w| Ok(out.stats.write_csv(w)?))?;
            dir.write_json(
                "distill.json",
                &serde_json::json!({
                    "meta": meta,
                    "rollouts": out.stats.count,
                    "dropped": out.dropped,
                    "budget": out.curve.budget(),
                    "median_iqr_ratio": out.stats.median_iqr_ratio(),
                    "max_ci_ratio": out.stats.max_ci_ratio(),
                }),
            )?;
            println!("distilled {} rollouts into a {}-step curve", out.stats.count, out.curve.steps());
        }
        Command::Grid { kind, horizon, steps, rho, sigma_min, sigma_max, no_append_zero, theta } => {
            let need_k = || steps.context("--K is required for this grid kind");
            let grid = match kind {
                GridKind::Uniform => schedule::uniform_grid(*horizon, need_k()?)?,
                GridKind::Edm => schedule::edm_grid(
                    *horizon,
                    need_k()?,
                    *rho,
                    *sigma_min,
                    sigma_max.unwrap_or(*horizon),
                    !no_append_zero,
                )?,
                GridKind::Theta => {
                    let path = theta.as_ref().context("--theta is required for --kind theta")?;
                    let file: ThetaFile = formats::read_json(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let grid = schedule::grid_from_theta(&file.to_curve()?)?;
                    match steps {
                        Some(k) if *k != grid.steps() => schedule::loglinear_resample(
                            &grid,
                            *k,
                            schedule::default_resample_floor(grid.horizon()),
                        )?,
                        _ => grid,
                    }
                }
            };
            write_schedule(dir, &grid, meta)?;
        }
        Command::Sample { schedule, method, n, .. } => {
            let grid = load_grid(schedule)?;
            let batch = sampler::sample_batch(&spec, score, &grid, (*method).into(), *n, cfg.seed, exec)?;
            dir.write_with("samples.csv", |w| Ok(batch.write_csv(w)?))?;
            dir.write_json(
                "sample.json",
                &serde_json::json!({ "meta": meta, "method": method, "n": n, "K": grid.steps(), "nfe": batch.nfe }),
            )?;
            println!("NFE {}", batch.nfe);
        }
        Command::Eval { schedule, .. } => {
            let grid = load_grid(schedule)?;
            let w2 = eval::w2_of_grid(&spec, score, &grid, cfg.w2, cfg.seed, exec)?;
            let report = serde_json::json!({ "meta": meta, "K": grid.steps(), "w2": w2, "mode": cfg.w2 });
            dir.write_json("eval.json", &report)?;
            println!("W2 {w2}");
        }
        Command::Sweep { learned, .. } => {
            let mut rows = vec![SweepSchedule::Uniform];
            rows.extend(cfg.edm.iter().cloned());
            if let Some(path) = learned {
                rows.push(SweepSchedule::Learned { name: "art-rl".into(), grid: load_grid(path)? });
            }
            let report = eval::w2_sweep(&spec, score, &rows, &cfg.sweep_config(), exec)?;
            dir.write_with("sweep.csv", |w| Ok(report.write_csv(w)?))?;
            dir.write_json("sweep.json", &serde_json::json!({ "meta": meta, "rows": report.rows }))?;
            for r in &report.rows {
                println!("{:<8} K={:<4} W2={:.6}", r.schedule, r.k, r.w2);
            }
        }
        Command::Probe { states, h, .. } => {
            let rows = sampler::local_error_study(&spec, score, *states, h, cfg.seed, exec)?;
            dir.write_with("probe.csv", |w| {
                let body = rows.iter().map(|r| {
                    vec![
                        r.state.to_string(),
                        r.psi.to_string(),
                        r.theta.to_string(),
                        r.h.to_string(),
                        r.residual.to_string(),
                        r.predicted.to_string(),
                        r.ratio().to_string(),
                    ]
                });
                Ok(formats::write_csv(w, &["state", "psi", "theta", "h", "residual", "predicted", "ratio"], body)?)
            })?;
            for (i, hv) in h.iter().enumerate() {
                let sel: Vec<f64> = rows.iter().skip(i).step_by(h.len()).map(|r| r.ratio()).collect();
                let mean = sel.iter().sum::<f64>() / sel.len().max(1) as f64;
                println!("h={hv} mean residual/predicted={mean:.6}");
            }
        }
        Command::Resample { schedule: path, steps, floor } => {
            let grid = load_grid(path)?;
            let floor = floor.unwrap_or_else(|| schedule::default_resample_floor(grid.horizon()));
            let out = schedule::loglinear_resample(&grid, *steps, floor)?;
            write_schedule(dir, &out, meta)?;
        }
    }
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct CheckpointFile {
    meta: ArtifactMeta,
    checkpoint: TrainCheckpoint,
}

fn load_grid(path: &Path) -> Result<TimeGrid> {
    formats::load_grid(path).with_context(|| format!("reading schedule {}", path.display()))
}

fn write_schedule(dir: &RunDir, grid: &TimeGrid, meta: &ArtifactMeta) -> Result<()> {
    dir.write_json("schedule.json", &ScheduleFile::from_grid(grid, Some(meta.clone())))?;
    let report = schedule::validate_grid(grid);
    if !report.is_valid() {
        bail!("schedule failed validation: {report:?}");
    }
    println!("K={} valid={} monotone={}", grid.steps(), report.is_valid(), report.monotone);
    Ok(())
}
