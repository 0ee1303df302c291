use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use cbrl::bank::build_bank;
use cbrl::config;
use cbrl::experiments::{self, RunOptions, PRESET_NAMES};
use cbrl::policy::checkpoint::{load_policy, save_policy};
use cbrl::schedule::ScheduleParams;
use cbrl::tasks::{self, TaskConfig, TaskKind};
use cbrl::trainer::{evaluate_policy, TrainConfig, Trainer};
use cbrl::warmstart::{warmstart, WarmstartConfig};
use cbrl::CbrlError;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "cbrl", version, about = "Exemplar-injection RL experiments on procedural reasoning tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task instances as JSON lines.
    Gen {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an exemplar bank file.
    Bank {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 20)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint without exemplars.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-response records as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the injection schedule as CSV.
    Schedule {
        #[arg(long)]
        p_start: f64,
        #[arg(long)]
        p_end: f64,
        #[arg(long)]
        steps: usize,
    },
    /// Supervised warm start on the synthetic rewrite corpus.
    Warmstart {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its default value.
    Config {
        /// Show warm-start keys instead of training keys.
        #[arg(long)]
        warmstart: bool,
    },
    /// Run and judge preset experiments.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// List presets.
    List,
    /// Run every arm and seed of a preset, then judge it.
    Run {
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Keep finished runs found in the output directory.
        #[arg(long)]
        reuse: bool,
        /// Shorter training, for smoke runs.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        warmstart_steps: Option<usize>,
    },
    /// Recompute a verdict from the metrics files of an earlier run.
    Check {
        preset: String,
        #[arg(long)]
        dir: PathBuf,
    },
}

enum Failure {
    Error(CbrlError),
    Rejected(String),
}

impl From<CbrlError> for Failure {
    fn from(e: CbrlError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn exit_code(e: &CbrlError) -> u8 {
    match e {
        CbrlError::InvalidConfig(_)
        | CbrlError::UnknownPreset(_)
        | CbrlError::Parse { .. }
        | CbrlError::EmptyBank
        | CbrlError::GroupTooSmall(_)
        | CbrlError::InvalidCounts { .. }
        | CbrlError::StepOutOfRange { .. } => 2,
        _ => 3,
    }
}

fn load_config<T>(base: &T, args: &ConfigArgs) -> cbrl::Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut cfg = match &args.config {
        Some(p) => config::load_file(base, p)?,
        None => serde_json::from_value(serde_json::to_value(base)?)?,
    };
    let sets = args
        .set
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<cbrl::Result<Vec<_>>>()?;
    cfg = config::apply(&cfg, &sets)?;
    Ok(cfg)
}

fn task_config(set: &[String]) -> cbrl::Result<TaskConfig> {
    let sets = set
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<cbrl::Result<Vec<_>>>()?;
    config::apply(&TaskConfig::default(), &sets)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(Sha256::digest(fs::read(path)?)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Hashes of the regular files under `dir`, keyed by relative path.
fn artifact_hashes(dir: &Path) -> std::io::Result<serde_json::Map<String, Value>> {
    fn walk(root: &Path, dir: &Path, out: &mut serde_json::Map<String, Value>) -> std::io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
                out.insert(rel, Value::String(sha256_file(&p)?));
            }
        }
        Ok(())
    }
    let mut out = serde_json::Map::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn write_manifest(dir: &Path, command: &str, config: Value, seed: u64, started: u64) -> std::io::Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "started_unix": started,
        "finished_unix": now(),
        "artifacts": artifact_hashes(dir)?,
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
}

fn output(out: Option<&Path>) -> std::io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = now();
    match cli.command {
        Command::Gen {
            task,
            seed,
            count,
            set,
            out,
        } => {
            let cfg = task_config(&set)?;
            cfg.validate(task)?;
            let mut w = output(out.as_deref())?;
            for i in 0..count {
                let inst = tasks::generate(task, seed + i as u64, &cfg)?;
                writeln!(w, "{}", serde_json::to_string(&inst)?)?;
            }
            w.flush()?;
        }
        Command::Bank {
            task,
            size,
            seed,
            set,
            out,
        } => {
            let cfg = task_config(&set)?;
            build_bank(task, size, seed, &cfg)?.save(&out)?;
        }
        Command::Train { cfg, out, resume } => {
            let mut tc = load_config(&TrainConfig::default(), &cfg)?;
            tc.out_dir = Some(out.clone());
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), config::render(&tc)?)?;
            let trainer = match &resume {
                Some(ck) => Trainer::resume(tc.clone(), ck)?,
                None => Trainer::new(tc.clone())?,
            };
            let outcome = trainer.run()?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "trained to step {}: mean reward {:.4}, success {:.4}",
                    last.step, last.mean_reward, last.success_rate
                );
            }
            if let Some(e) = outcome.evals.last() {
                println!("eval after step {}: success {:.4}", e.step, e.success_rate);
            }
            write_manifest(&out, "train", serde_json::to_value(&tc)?, tc.master_seed, started)?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            out,
        } => {
            let tc = load_config(&TrainConfig::default(), &cfg)?;
            tc.validate()?;
            let params = load_policy(&checkpoint)?;
            let report = evaluate_policy(&params, &tc.eval_spec(), &tc.eval.sampling, tc.parallel())?;
            if let Some(p) = out {
                let mut w = output(Some(&p))?;
                for r in &report.records {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
                w.flush()?;
            }
            println!("{}", json!({ "success_rate": report.success_rate, "responses": report.records.len() }));
        }
        Command::Schedule {
            p_start,
            p_end,
            steps,
        } => {
            let params = ScheduleParams::new(p_start, p_end, steps)?;
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record(["step", "p_inject"]).map_err(std::io::Error::other)?;
            for (t, p) in params.table() {
                w.write_record([t.to_string(), p.to_string()])
                    .map_err(std::io::Error::other)?;
            }
            w.flush()?;
        }
        Command::Warmstart { cfg, out } => {
            let wc = load_config(&WarmstartConfig::default(), &cfg)?;
            let params = warmstart(&wc, |_| {})?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            save_policy(&params, &out)?;
        }
        Command::Config { warmstart } => {
            let text = if warmstart {
                config::render(&WarmstartConfig::default())?
            } else {
                config::render(&TrainConfig::default())?
            };
            print!("{text}");
        }
        Command::Experiment(cmd) => match cmd {
            ExperimentCmd::List => {
                for name in PRESET_NAMES {
                    let p = experiments::preset(name)?;
                    let arms: Vec<&str> = p.arms.iter().map(|a| a.name.as_str()).collect();
                    println!("{name}: arms {}", arms.join(", "));
                }
            }
            ExperimentCmd::Run {
                preset,
                out,
                jobs,
                reuse,
                steps,
                warmstart_steps,
            } => {
                let p = experiments::preset(&preset)?;
                let opts = RunOptions {
                    out_dir: out.clone(),
                    jobs: jobs.max(1),
                    reuse,
                    total_steps: steps,
                    warmstart_steps,
                };
                let v = experiments::run_preset(&p, &opts)?;
                report_verdict(&v);
                write_manifest(&out, "experiment", serde_json::to_value(&p)?, 0, started)?;
                if !v.pass {
                    return Err(Failure::Rejected(format!("preset {preset} failed")));
                }
            }
            ExperimentCmd::Check { preset, dir } => {
                let mut p = experiments::preset(&preset)?;
                let recorded = dir.join("preset.json");
                if recorded.exists() {
                    p = serde_json::from_str(&fs::read_to_string(recorded)?)?;
                }
                let v = experiments::verdict_from_dir(&p, &dir)?;
                report_verdict(&v);
                if !v.pass {
                    return Err(Failure::Rejected(format!("preset {preset} failed")));
                }
            }
        },
    }
    Ok(())
}

fn report_verdict(v: &experiments::Verdict) {
    for r in &v.runs {
        println!(
            "{} seed {}: early reward {:.4}, final eval {}",
            r.arm,
            r.seed,
            r.early_reward,
            r.final_eval.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    for c in &v.checks {
        println!(
            "{}: {} ({}/{} seeds)",
            c.label,
            if c.pass { "pass" } else { "fail" },
            c.wins,
            c.needed
        );
    }
    for f in &v.failures {
        println!("failure: {f}");
    }
    println!("verdict: {}", if v.pass { "pass" } else { "fail" });
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Rejected(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(4)
        }
    }
}
