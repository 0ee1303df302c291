//! Packaged comparisons between injection schedules, with majority-of-seeds
//! verdicts computed from the metrics files each run leaves behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{CbrlError, Result};
use crate::policy::checkpoint::{load_policy, save_policy};
use crate::prompting::SHORT_SYSTEM_PROMPT;
use crate::tasks::TaskKind;
use crate::trainer::{EvalPoint, StepMetrics, TrainConfig, Trainer};
use crate::warmstart::{warmstart, WarmstartConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// Config assignments applied on top of the preset's base config.
    pub deltas: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    /// Mean training reward over the first `window` fraction of steps.
    EarlyReward { arm: String, over: String, window: f64 },
    /// Final no-injection evaluation, `arm` at least `over`.
    FinalEval { arm: String, over: Vec<String> },
}

impl Check {
    pub fn label(&self) -> String {
        match self {
            Check::EarlyReward { arm, over, .. } => format!("early reward {arm} > {over}"),
            Check::FinalEval { arm, over } => format!("final eval {arm} >= {}", over.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub base: TrainConfig,
    /// Supervised warm start shared by every arm; none trains from a seeded
    /// initialization.
    pub warmstart: Option<WarmstartConfig>,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub checks: Vec<Check>,
    /// Seeds that must satisfy a check for it to pass.
    pub min_wins: usize,
}

fn arm(name: &str, deltas: &[(&str, &str)]) -> Arm {
    Arm {
        name: name.into(),
        deltas: deltas.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

/// Base training config of the spell-backward presets.
pub fn spell_backward_base() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.task = TaskKind::SpellBackward;
    cfg.task_config.spell_backward.min_word_len = 3;
    cfg.task_config.spell_backward.max_word_len = 5;
    cfg.batch_size = 16;
    cfg.rl.group_size = 8;
    cfg.schedule.total_steps = 300;
    cfg.schedule.p_start = 0.5;
    cfg.schedule.p_end = 0.0;
    cfg.k_examples = 2;
    cfg.bank_size = 20;
    cfg.system_prompt = SHORT_SYSTEM_PROMPT.to_string();
    cfg.policy.context = 512;
    cfg.rl.lr = 2e-4;
    cfg.sampling.max_new_tokens = 48;
    cfg.eval.every = 50;
    cfg.eval.problems = 100;
    cfg.eval.repeats = 3;
    cfg.eval.sampling.max_new_tokens = 48;
    cfg
}

const BASELINE: &[(&str, &str)] = &[("p_start", "0"), ("p_end", "0")];
const CBRL: &[(&str, &str)] = &[("p_start", "0.5"), ("p_end", "0")];
const HIGH: &[(&str, &str)] = &[("p_start", "1"), ("p_end", "0")];

fn rloo(d: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    let mut v = d.to_vec();
    v.push(("algorithm", "rloo"));
    v
}

fn early(a: &str, b: &str) -> Check {
    Check::EarlyReward {
        arm: a.into(),
        over: b.into(),
        window: 0.2,
    }
}

fn final_eval(a: &str, over: &[&str]) -> Check {
    Check::FinalEval {
        arm: a.into(),
        over: over.iter().map(|s| s.to_string()).collect(),
    }
}

pub const PRESET_NAMES: [&str; 6] = [
    "mechanism",
    "early-reward",
    "anneal-retention",
    "p-sweep",
    "rloo-transfer",
    "word-sorting",
];

pub fn preset(name: &str) -> Result<Preset> {
    let base = spell_backward_base();
    let (arms, checks) = match name {
        "mechanism" => (
            vec![
                arm("baseline", BASELINE),
                arm("cbrl", CBRL),
                arm("high", HIGH),
                arm("rloo-baseline", &rloo(BASELINE)),
                arm("rloo-cbrl", &rloo(CBRL)),
            ],
            vec![
                early("cbrl", "baseline"),
                final_eval("cbrl", &["baseline"]),
                final_eval("cbrl", &["baseline", "high"]),
                early("rloo-cbrl", "rloo-baseline"),
            ],
        ),
        "early-reward" => (
            vec![arm("baseline", BASELINE), arm("cbrl", CBRL)],
            vec![early("cbrl", "baseline")],
        ),
        "anneal-retention" => (
            vec![arm("baseline", BASELINE), arm("cbrl", CBRL)],
            vec![final_eval("cbrl", &["baseline"])],
        ),
        "p-sweep" => (
            vec![arm("baseline", BASELINE), arm("cbrl", CBRL), arm("high", HIGH)],
            vec![final_eval("cbrl", &["baseline", "high"])],
        ),
        "rloo-transfer" => (
            vec![arm("rloo-baseline", &rloo(BASELINE)), arm("rloo-cbrl", &rloo(CBRL))],
            vec![early("rloo-cbrl", "rloo-baseline")],
        ),
        "word-sorting" => {
            let mut p = preset("anneal-retention")?;
            p.name = name.into();
            p.base.task = TaskKind::WordSorting;
            p.base.task_config.word_sorting.min_words = 3;
            p.base.task_config.word_sorting.max_words = 4;
            p.base.task_config.word_sorting.min_word_length = 3;
            p.base.task_config.word_sorting.max_word_length = 5;
            p.base.sampling.max_new_tokens = 96;
            p.base.eval.sampling.max_new_tokens = 96;
            p.checks.insert(0, early("cbrl", "baseline"));
            return Ok(p);
        }
        other => return Err(CbrlError::UnknownPreset(other.to_string())),
    };
    Ok(Preset {
        name: name.into(),
        base,
        warmstart: Some(WarmstartConfig::default()),
        arms,
        seeds: vec![1, 2, 3],
        checks,
        min_wins: 2,
    })
}

impl Preset {
    pub fn arm(&self, name: &str) -> Result<&Arm> {
        self.arms
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CbrlError::config(format!("preset {} has no arm {name:?}", self.name)))
    }

    /// The config of one arm and seed, before output paths are set.
    pub fn run_config(&self, arm: &Arm, seed: u64) -> Result<TrainConfig> {
        let mut cfg = config::apply(&self.base, &arm.deltas)?;
        cfg.master_seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.min_wins == 0 || self.min_wins > self.seeds.len() {
            return Err(CbrlError::config("preset needs seeds and 1 <= min_wins <= seeds"));
        }
        for c in &self.checks {
            match c {
                Check::EarlyReward { arm, over, window } => {
                    self.arm(arm)?;
                    self.arm(over)?;
                    if !(*window > 0.0 && *window <= 1.0) {
                        return Err(CbrlError::config("early window must lie in (0, 1]"));
                    }
                }
                Check::FinalEval { arm, over } => {
                    self.arm(arm)?;
                    for o in over {
                        self.arm(o)?;
                    }
                }
            }
        }
        for a in &self.arms {
            let cfg = self.run_config(a, self.seeds[0])?;
            let diff = config_diff(&self.base, &cfg)?;
            let allowed: Vec<String> = a
                .deltas
                .iter()
                .map(|(k, _)| config::resolve(k).to_string())
                .chain(["master_seed".to_string()])
                .collect();
            if let Some(k) = diff.iter().find(|k| !allowed.contains(k)) {
                return Err(CbrlError::config(format!("arm {} changes undeclared key {k}", a.name)));
            }
        }
        Ok(())
    }
}

/// Keys whose values differ between two configs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    let lines = |c: &TrainConfig| -> Result<BTreeMap<String, String>> {
        Ok(config::render(c)?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect())
    };
    let (la, lb) = (lines(a)?, lines(b)?);
    Ok(la
        .iter()
        .filter(|(k, v)| lb.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub early_reward: f64,
    pub final_eval: Option<f64>,
    pub final_train_reward: f64,
    pub wall_ms: u64,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CbrlError::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Summary of one run directory. The early window covers the first
/// `ceil(window * T)` steps.
pub fn summarize_run(dir: &Path, arm: &str, seed: u64, window: f64) -> Result<RunSummary> {
    let metrics: Vec<StepMetrics> = read_jsonl(&dir.join("metrics.jsonl"))?;
    let evals: Vec<EvalPoint> = read_jsonl(&dir.join("eval.jsonl"))?;
    if metrics.is_empty() {
        return Err(CbrlError::config(format!("{} holds no metrics", dir.display())));
    }
    let early_n = ((window * metrics.len() as f64).ceil() as usize).clamp(1, metrics.len());
    let early_reward = metrics[..early_n].iter().map(|m| m.mean_reward).sum::<f64>() / early_n as f64;
    let tail = (metrics.len() / 10).max(1);
    let final_train_reward =
        metrics[metrics.len() - tail..].iter().map(|m| m.mean_reward).sum::<f64>() / tail as f64;
    let last = metrics.last().unwrap().step;
    Ok(RunSummary {
        arm: arm.into(),
        seed,
        steps: metrics.len(),
        early_reward,
        final_eval: evals.iter().rev().find(|e| e.step == last).map(|e| e.success_rate),
        final_train_reward,
        wall_ms: metrics.iter().map(|m| m.wall_ms).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Check,
    pub label: String,
    /// Per seed: whether the comparison held, or none if a value is missing.
    pub per_seed: Vec<(u64, Option<bool>)>,
    pub wins: usize,
    pub needed: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub preset: String,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub checks: Vec<CheckResult>,
    pub failures: Vec<String>,
    pub inconclusive: bool,
    pub pass: bool,
}

fn run_dir(root: &Path, arm: &str, seed: u64) -> PathBuf {
    root.join(arm).join(format!("seed_{seed}"))
}

fn window_of(preset: &Preset) -> f64 {
    preset
        .checks
        .iter()
        .find_map(|c| match c {
            Check::EarlyReward { window, .. } => Some(*window),
            _ => None,
        })
        .unwrap_or(0.2)
}

/// Evaluates the preset's checks from the run directories under `root`.
pub fn verdict_from_dir(preset: &Preset, root: &Path) -> Result<Verdict> {
    let window = window_of(preset);
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for a in &preset.arms {
        for &s in &preset.seeds {
            match summarize_run(&run_dir(root, &a.name, s), &a.name, s, window) {
                Ok(r) => runs.push(r),
                Err(e) => failures.push(format!("{} seed {s}: {e}", a.name)),
            }
        }
    }
    Ok(verdict(preset, runs, failures))
}

pub fn verdict(preset: &Preset, runs: Vec<RunSummary>, failures: Vec<String>) -> Verdict {
    let find = |arm: &str, seed: u64| runs.iter().find(|r| r.arm == arm && r.seed == seed);
    let checks: Vec<CheckResult> = preset
        .checks
        .iter()
        .map(|c| {
            let per_seed: Vec<(u64, Option<bool>)> = preset
                .seeds
                .iter()
                .map(|&s| {
                    let held = match c {
                        Check::EarlyReward { arm, over, .. } => match (find(arm, s), find(over, s)) {
                            (Some(a), Some(b)) => Some(a.early_reward > b.early_reward),
                            _ => None,
                        },
                        Check::FinalEval { arm, over } => {
                            let mine = find(arm, s).and_then(|r| r.final_eval);
                            let others: Option<Vec<f64>> =
                                over.iter().map(|o| find(o, s).and_then(|r| r.final_eval)).collect();
                            match (mine, others) {
                                (Some(m), Some(os)) => Some(os.iter().all(|o| m >= *o)),
                                _ => None,
                            }
                        }
                    };
                    (s, held)
                })
                .collect();
            let wins = per_seed.iter().filter(|(_, h)| *h == Some(true)).count();
            CheckResult {
                label: c.label(),
                check: c.clone(),
                per_seed,
                wins,
                needed: preset.min_wins,
                pass: wins >= preset.min_wins,
            }
        })
        .collect();
    let inconclusive = !failures.is_empty();
    let pass = !inconclusive && checks.iter().all(|c| c.pass);
    Verdict {
        preset: preset.name.clone(),
        arms: preset.arms.clone(),
        seeds: preset.seeds.clone(),
        runs,
        checks,
        failures,
        inconclusive,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Runs executed concurrently.
    pub jobs: usize,
    /// Reuse completed run directories instead of retraining.
    pub reuse: bool,
    /// Override of the preset's training length, for smoke runs.
    pub total_steps: Option<usize>,
    pub warmstart_steps: Option<usize>,
}

fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Trains (or reuses) the shared warm-start checkpoint.
pub fn base_checkpoint(ws: &WarmstartConfig, cache: &Path) -> Result<PathBuf> {
    let key = hash_hex(serde_json::to_string(ws)?.as_bytes());
    let path = cache.join(format!("base-{key}.ckpt"));
    if path.exists() && load_policy(&path).is_ok() {
        info!("reusing warm start {}", path.display());
        return Ok(path);
    }
    fs::create_dir_all(cache)?;
    info!("warm start: {} steps", ws.steps);
    let params = warmstart(ws, |_| {})?;
    let tmp = path.with_extension("tmp");
    save_policy(&params, &tmp)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// A finished run trained with exactly `config_text`.
fn complete(dir: &Path, total: usize, config_text: &str) -> bool {
    fs::read_to_string(dir.join("config.txt")).is_ok_and(|t| t == config_text)
        && read_jsonl::<StepMetrics>(&dir.join("metrics.jsonl")).is_ok_and(|m| m.len() == total)
        && dir.join("final.ckpt").exists()
}

/// Runs every arm and seed, then writes `verdict.json` under the output
/// directory.
pub fn run_preset(preset: &Preset, opts: &RunOptions) -> Result<Verdict> {
    let mut preset = preset.clone();
    if let Some(t) = opts.total_steps {
        preset.base.schedule.total_steps = t;
        preset.base.eval.every = preset.base.eval.every.min(t);
    }
    if let (Some(ws), Some(s)) = (preset.warmstart.as_mut(), opts.warmstart_steps) {
        ws.steps = s;
        ws.warmup_steps = ws.warmup_steps.min(s);
    }
    preset.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    if let Some(ws) = &preset.warmstart {
        let base = base_checkpoint(ws, &opts.out_dir.join("cache"))?;
        preset.base.init_checkpoint = Some(base);
        preset.base.policy = ws.policy;
    }
    fs::write(
        opts.out_dir.join("preset.json"),
        serde_json::to_string_pretty(&preset)?,
    )?;
    let jobs: Vec<(Arm, u64)> = preset
        .arms
        .iter()
        .flat_map(|a| preset.seeds.iter().map(move |&s| (a.clone(), s)))
        .collect();
    let total = preset.base.schedule.total_steps;
    let one = |(a, s): &(Arm, u64)| -> std::result::Result<(), String> {
        let dir = run_dir(&opts.out_dir, &a.name, *s);
        let run = || -> Result<()> {
            let mut cfg = preset.run_config(a, *s)?;
            cfg.out_dir = Some(dir.clone());
            let text = config::render(&cfg)?;
            if opts.reuse && complete(&dir, total, &text) {
                info!("reusing {}", dir.display());
                return Ok(());
            }
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("config.txt"), text)?;
            info!("run {} seed {s}", a.name);
            Trainer::new(cfg)?.run()?;
            Ok(())
        };
        run().map_err(|e| format!("{} seed {s}: {e}", a.name))
    };
    let results: Vec<std::result::Result<(), String>> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| CbrlError::config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(one).collect())
    } else {
        jobs.iter().map(one).collect()
    };
    let mut v = verdict_from_dir(&preset, &opts.out_dir)?;
    v.failures
        .extend(results.into_iter().filter_map(|r| r.err()));
    v.failures.dedup();
    v.inconclusive = !v.failures.is_empty();
    v.pass = v.pass && !v.inconclusive;
    fs::write(
        opts.out_dir.join("verdict.json"),
        serde_json::to_string_pretty(&v)?,
    )?;
    Ok(v)
}
