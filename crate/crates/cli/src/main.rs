//! Command-line entry point: data generation, training, evaluation,
//! gradient checking and ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harmony::baselines::{ablation_csv, run_ablation, standard_plan, AblationRow};
use harmony::checkpoint;
use harmony::config::RunConfig;
use harmony::data::{generate_dataset, Dataset};
use harmony::evaluation::evaluate;
use harmony::gradcheck::{gradcheck_all, GradcheckConfig};
use harmony::trainer::Trainer;
use harmony::HarmonyError;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "harmony",
    version,
    about = "Train and evaluate tiny joint vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded loading with per-sample seeding.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus to disk.
    GenData(Common),
    /// Train a model, then evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen-data`; rendered in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a micro model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate each row of an ablation plan.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// JSON list of rows; the standard seven-row plan if absent.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> harmony::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= c.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> harmony::Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => Dataset::in_memory(&cfg.data),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> harmony::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| HarmonyError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> harmony::Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarmonyError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> harmony::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let m = generate_dataset(&cfg.data, &c.out)?;
            println!("{}", json!({"samples": m.records.len(), "out": c.out}));
        }
        Command::Train { common, data, resume } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg, data.as_deref())?;
            create_dir(&common.out)?;
            fs::write(common.out.join("config.json"), cfg.to_json()).map_err(|e| HarmonyError::Io {
                path: common.out.join("config.json"),
                source: e,
            })?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(cfg.clone(), ds.clone(), checkpoint::load(&p)?)?,
                None => Trainer::new(cfg.clone(), ds.clone())?,
            };
            let summary = trainer.train(&common.out)?;
            let report = evaluate(&trainer.state.bundle, &ds, &cfg.data, &cfg.eval, trainer.state.step)?;
            report.write(&common.out)?;
            println!(
                "{}",
                json!({
                    "steps": trainer.state.step,
                    "seconds": summary.seconds,
                    "final_loss": summary.history.last().map(|b| b.total),
                    "zero_shot": report.zero_shot,
                    "linear_probe": report.linear_probe.best_accuracy,
                    "checkpoint": summary.final_checkpoint,
                })
            );
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            data,
        } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&cfg, data.as_deref())?;
            let trainer = Trainer::resume(cfg.clone(), ds.clone(), checkpoint::load(&ckpt)?)?;
            let report = evaluate(&trainer.state.bundle, &ds, &cfg.data, &cfg.eval, trainer.state.step)?;
            report.write(&common.out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Gradcheck { common } => {
            let mut gc = match &common.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| HarmonyError::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    serde_json::from_str::<GradcheckConfig>(&text).map_err(|e| HarmonyError::Config(e.to_string()))?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(s) = common.seed {
                gc.seed = s;
            }
            create_dir(&common.out)?;
            let report = gradcheck_all(&gc)?;
            write_json(&common.out.join("gradcheck.json"), &report)?;
            for c in &report.checks {
                println!(
                    "{:<16} max_rel_err {:.3e} (tol {:.0e}) worst {} {}",
                    c.component,
                    c.max_relative_error,
                    c.tolerance,
                    c.worst_param,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            if !report.passed() {
                return Err(HarmonyError::InvalidArgument(
                    "gradient check exceeded tolerance".into(),
                ));
            }
        }
        Command::Ablate { common, plan, data } => {
            let cfg = load_config(&common)?;
            let rows: Vec<AblationRow> = match plan {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| HarmonyError::Io { path: p, source: e })?;
                    serde_json::from_str(&text).map_err(|e| HarmonyError::Config(format!("ablation plan: {e}")))?
                }
                None => standard_plan(),
            };
            let ds = load_data(&cfg, data.as_deref())?;
            let results = run_ablation(&rows, &cfg, &ds, &common.out)?;
            print!("{}", ablation_csv(&results));
            if let Some(r) = results.iter().find(|r| r.failure.is_some()) {
                return Err(HarmonyError::Data(format!(
                    "ablation row {} failed: {}",
                    r.label,
                    r.failure.as_deref().unwrap_or_default()
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &HarmonyError) -> u8 {
    match e {
        HarmonyError::Config(_) => 2,
        HarmonyError::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({"error": e.kind(), "message": e.to_string()});
            if let HarmonyError::NonFinite { component, step } = &e {
                body["component"] = json!(component);
                body["step"] = json!(step);
            }
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}
