//! The training loop, rollout collection and the evaluation protocol.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{build_bank, Bank, EVAL_SEED_OFFSET};
use crate::error::{CbrlError, Result};
use crate::policy::checkpoint::{Checkpoint, POLICY_SECTION};
use crate::policy::optim::Adam;
use crate::policy::vocab::{decode, encode_for_generation};
use crate::policy::{init_policy, sample_group, PolicyConfig, PolicyParams, SamplingConfig};
use crate::prompting::{
    compose_with_layout, extract_answer, total_reward, ChatPrompt, ExemplarLayout, RewardSpec,
    DEEPSEEK_ZERO_SYSTEM_PROMPT,
};
use crate::rl::{policy_update, Rollout, RlConfig};
use crate::rng::{purpose, RngStream};
use crate::schedule::{draw_injection, injection_probability, ScheduleParams};
use crate::tasks::{self, TaskConfig, TaskInstance, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarSampling {
    #[default]
    Uniform,
    /// Prefer entries sharing a tag with the query.
    Tags,
}

impl FromStr for ExemplarSampling {
    type Err = CbrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "tags" => Ok(Self::Tags),
            _ => Err(CbrlError::config(format!("unknown exemplar sampling {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub every: usize,
    pub problems: usize,
    pub repeats: usize,
    pub sampling: SamplingConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 0,
            problems: 100,
            repeats: 3,
            sampling: SamplingConfig {
                temperature: 0.6,
                top_p: 0.9,
                max_new_tokens: 256,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub task_config: TaskConfig,
    pub schedule: ScheduleParams,
    /// Bank file; when absent a bank of `bank_size` is generated from the
    /// master seed.
    pub bank_path: Option<PathBuf>,
    pub bank_size: usize,
    pub k_examples: usize,
    pub exemplar_sampling: ExemplarSampling,
    pub exemplar_layout: ExemplarLayout,
    /// With `false` no exemplar is ever drawn or injected.
    pub injection_enabled: bool,
    pub rl: RlConfig,
    pub policy: PolicyConfig,
    /// Starting parameters; a seeded initialization when absent.
    pub init_checkpoint: Option<PathBuf>,
    pub batch_size: usize,
    pub master_seed: u64,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub system_prompt: String,
    pub reward: RewardSpec,
    pub workers: usize,
    pub strict_sequential: bool,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    pub record_timing: bool,
    /// Stop after this step even if the schedule runs longer; 0 runs to the end.
    pub stop_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::SpellBackward,
            task_config: TaskConfig::default(),
            schedule: ScheduleParams {
                p_start: 0.5,
                p_end: 0.0,
                total_steps: 300,
            },
            bank_path: None,
            bank_size: 20,
            k_examples: 2,
            exemplar_sampling: ExemplarSampling::Uniform,
            exemplar_layout: ExemplarLayout::ChatPairs,
            injection_enabled: true,
            rl: RlConfig::default(),
            policy: PolicyConfig::default(),
            init_checkpoint: None,
            batch_size: 16,
            master_seed: 0,
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
            system_prompt: DEEPSEEK_ZERO_SYSTEM_PROMPT.to_string(),
            reward: RewardSpec::default(),
            workers: 1,
            strict_sequential: true,
            checkpoint_every: 0,
            out_dir: None,
            record_timing: true,
            stop_after: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task_config.validate(self.task)?;
        self.schedule.validate()?;
        self.rl.validate()?;
        self.policy.validate()?;
        self.sampling.validate()?;
        self.eval.sampling.validate()?;
        self.reward.validate()?;
        if self.batch_size == 0 {
            return Err(CbrlError::config("batch_size must be at least 1"));
        }
        if self.bank_path.is_none() && self.bank_size == 0 {
            return Err(CbrlError::config("bank_size must be at least 1"));
        }
        let train_span = (self.schedule.total_steps as u64).saturating_mul(self.batch_size as u64);
        if train_span > crate::bank::BANK_SEED_OFFSET {
            return Err(CbrlError::config(
                "total_steps * batch_size would overlap bank seeds",
            ));
        }
        if self.eval.every > 0 && (self.eval.problems == 0 || self.eval.repeats == 0) {
            return Err(CbrlError::config("eval needs problems and repeats"));
        }
        if self.workers == 0 {
            return Err(CbrlError::config("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn parallel(&self) -> bool {
        self.workers > 1 && !self.strict_sequential
    }

    pub fn train_seed(&self, step: usize, i: usize) -> u64 {
        self.master_seed
            .wrapping_add(((step - 1) * self.batch_size + i) as u64)
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            kind: self.task,
            task_config: self.task_config.clone(),
            problems: self.eval.problems,
            repeats: self.eval.repeats,
            master_seed: self.master_seed,
            system_prompt: self.system_prompt.clone(),
        }
    }
}

/// One record per training step. Field order is the metrics file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub p_inject: f64,
    pub frac_injected: f64,
    pub mean_reward: f64,
    pub mean_reward_injected: Option<f64>,
    pub mean_reward_clean: Option<f64>,
    pub success_rate: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub success_rate: f64,
}

/// What the held-out evaluation draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub kind: TaskKind,
    pub task_config: TaskConfig,
    pub problems: usize,
    pub repeats: usize,
    pub master_seed: u64,
    pub system_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub repeat: usize,
    pub response: String,
    pub extracted: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub records: Vec<EvalRecord>,
}

/// Anything that answers a chat prompt: the policy, or a scripted stand-in.
pub trait CompletionSource: Sync {
    fn complete(&self, prompt: &ChatPrompt, n: usize, rng: &mut RngStream) -> Result<Vec<String>>;
}

pub struct PolicySource<'a> {
    pub params: &'a PolicyParams<f32>,
    pub sampling: SamplingConfig,
}

impl CompletionSource for PolicySource<'_> {
    fn complete(&self, prompt: &ChatPrompt, n: usize, rng: &mut RngStream) -> Result<Vec<String>> {
        let tokens = encode_for_generation(prompt);
        Ok(sample_group(self.params, &tokens, n, &self.sampling, rng)?
            .into_iter()
            .map(|s| decode(&s.tokens))
            .collect())
    }
}

/// Held-out evaluation: `problems` instances from the evaluation seed range,
/// each answered `repeats` times with no exemplars. A response scores the
/// verifier's value on its extracted answer.
pub fn evaluate(source: &dyn CompletionSource, spec: &EvalSpec, parallel: bool) -> Result<EvalReport> {
    spec.task_config.validate(spec.kind)?;
    let one = |j: usize| -> Result<Vec<EvalRecord>> {
        let seed = spec
            .master_seed
            .wrapping_add(EVAL_SEED_OFFSET + j as u64);
        let inst = tasks::generate(spec.kind, seed, &spec.task_config)?;
        let prompt = compose_with_layout(
            &inst.prompt,
            &[],
            false,
            &spec.system_prompt,
            ExemplarLayout::ChatPairs,
        );
        let mut rng = RngStream::derive(spec.master_seed, &[purpose::EVAL, j as u64]);
        let responses = source.complete(&prompt, spec.repeats, &mut rng)?;
        Ok(responses
            .into_iter()
            .enumerate()
            .map(|(repeat, response)| {
                let extracted = extract_answer(&response);
                let score = extracted
                    .as_deref()
                    .map(|a| tasks::verify(&inst, a))
                    .unwrap_or(0.0);
                EvalRecord {
                    seed,
                    repeat,
                    response,
                    extracted,
                    score,
                }
            })
            .collect())
    };
    let per_problem: Vec<Vec<EvalRecord>> = if parallel {
        (0..spec.problems)
            .into_par_iter()
            .map(one)
            .collect::<Result<_>>()?
    } else {
        (0..spec.problems).map(one).collect::<Result<_>>()?
    };
    let records: Vec<EvalRecord> = per_problem.into_iter().flatten().collect();
    let success_rate = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64
    };
    Ok(EvalReport {
        success_rate,
        records,
    })
}

pub fn evaluate_policy(
    params: &PolicyParams<f32>,
    spec: &EvalSpec,
    sampling: &SamplingConfig,
    parallel: bool,
) -> Result<EvalReport> {
    let src = PolicySource {
        params,
        sampling: *sampling,
    };
    evaluate(&src, spec, parallel)
}

/// A composed prompt ready for rollouts.
#[derive(Debug, Clone)]
pub struct PreparedPrompt {
    pub tokens: Vec<u32>,
    pub injected: bool,
    pub rng_key: u64,
}

/// Samples `n` completions per prompt, one group each, scoring responses
/// with `reward(group, text)`. Groups whose prompt overflows the context
/// are dropped whole; their indices are returned.
pub fn rollout_batch<F>(
    params: &PolicyParams<f32>,
    prompts: &[PreparedPrompt],
    n: usize,
    sampling: &SamplingConfig,
    parallel: bool,
    reward: F,
) -> Result<(Vec<Rollout>, Vec<usize>)>
where
    F: Fn(usize, &str) -> f64 + Sync,
{
    if n < 2 {
        return Err(CbrlError::GroupTooSmall(n));
    }
    let one = |g: usize| -> Result<Option<Vec<Rollout>>> {
        let p = &prompts[g];
        let mut rng = RngStream::new(p.rng_key);
        let samples = match sample_group(params, &p.tokens, n, sampling, &mut rng) {
            Ok(s) => s,
            Err(CbrlError::ContextOverflow { len, context }) => {
                warn!("group {g} dropped: prompt needs {len} positions, context is {context}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        Ok(Some(
            samples
                .into_iter()
                .map(|s| {
                    let text = decode(&s.tokens);
                    Rollout {
                        prompt_tokens: p.tokens.clone(),
                        reward: reward(g, &text),
                        response_tokens: s.tokens,
                        behavior_logprobs: s.logps,
                        injected: p.injected,
                        group_id: g,
                    }
                })
                .collect(),
        ))
    };
    let groups: Vec<Option<Vec<Rollout>>> = if parallel {
        (0..prompts.len())
            .into_par_iter()
            .map(one)
            .collect::<Result<_>>()?
    } else {
        (0..prompts.len()).map(one).collect::<Result<_>>()?
    };
    let mut rollouts = Vec::with_capacity(prompts.len() * n);
    let mut dropped = Vec::new();
    for (g, grp) in groups.into_iter().enumerate() {
        match grp {
            Some(r) => rollouts.extend(r),
            None => dropped.push(g),
        }
    }
    Ok((rollouts, dropped))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

struct Sinks {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    eval: BufWriter<File>,
}

fn open_sink(path: &Path, append: bool) -> Result<File> {
    Ok(OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?)
}

impl Sinks {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join("metrics.csv");
        let write_header = !append || !csv_path.exists() || fs::metadata(&csv_path)?.len() == 0;
        let csv = csv::WriterBuilder::new()
            .has_headers(write_header)
            .from_writer(open_sink(&csv_path, append)?);
        Ok(Self {
            jsonl: BufWriter::new(open_sink(&dir.join("metrics.jsonl"), append)?),
            csv,
            eval: BufWriter::new(open_sink(&dir.join("eval.jsonl"), append)?),
        })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.csv
            .serialize(m)
            .map_err(|e| CbrlError::Io(std::io::Error::other(e)))?;
        self.csv.flush()?;
        Ok(())
    }

    fn write_eval(&mut self, e: &EvalPoint) -> Result<()> {
        serde_json::to_writer(&mut self.eval, e)?;
        self.eval.write_all(b"\n")?;
        self.eval.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams<f32>,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

pub struct Trainer {
    cfg: TrainConfig,
    params: PolicyParams<f32>,
    reference: PolicyParams<f32>,
    opt: Adam<f32>,
    bank: Option<Bank>,
    step: usize,
    metrics: Vec<StepMetrics>,
    evals: Vec<EvalPoint>,
    sinks: Option<Sinks>,
    pool: Option<rayon::ThreadPool>,
}

pub fn load_bank(cfg: &TrainConfig) -> Result<Option<Bank>> {
    if !cfg.injection_enabled {
        return Ok(None);
    }
    let bank = match &cfg.bank_path {
        Some(p) => Bank::load(p)?,
        None => build_bank(cfg.task, cfg.bank_size, cfg.master_seed, &cfg.task_config)?,
    };
    if bank.task_kind != cfg.task {
        return Err(CbrlError::config(format!(
            "bank holds {} exemplars but the task is {}",
            bank.task_kind, cfg.task
        )));
    }
    if bank.is_empty() && cfg.k_examples > 0 && cfg.schedule.p_start.max(cfg.schedule.p_end) > 0.0 {
        return Err(CbrlError::EmptyBank);
    }
    Ok(Some(bank))
}

fn initial_params(cfg: &TrainConfig) -> Result<PolicyParams<f32>> {
    match &cfg.init_checkpoint {
        Some(p) => {
            let params = Checkpoint::load(p)?.policy()?;
            if params.config != cfg.policy {
                return Err(CbrlError::config(format!(
                    "checkpoint {} has policy {:?}, config asks for {:?}",
                    p.display(),
                    params.config,
                    cfg.policy
                )));
            }
            Ok(params)
        }
        None => init_policy(cfg.master_seed, cfg.policy),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = initial_params(&cfg)?;
        let reference = params.clone();
        let opt = Adam::new(cfg.rl.adam(), params.len());
        Self::assemble(cfg, params, reference, opt, 0, false)
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    /// Metrics are appended to the existing files in `out_dir`.
    pub fn resume(cfg: TrainConfig, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let ck = Checkpoint::load(checkpoint)?;
        let bad = |what: &str| CbrlError::CorruptCheckpoint {
            path: checkpoint.to_path_buf(),
            reason: format!("missing {what}"),
        };
        let params = ck.policy()?;
        if params.config != cfg.policy {
            return Err(CbrlError::config("checkpoint policy shape differs from config"));
        }
        let reference = ck.params("reference")?;
        let mut opt = Adam::new(cfg.rl.adam(), params.len());
        opt.m = ck.section("adam_m").ok_or_else(|| bad("adam_m"))?.to_vec();
        opt.v = ck.section("adam_v").ok_or_else(|| bad("adam_v"))?.to_vec();
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(bad("optimizer moments of the right length"));
        }
        let num = |k: &str| -> Result<u64> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(k))
        };
        opt.t = num("adam_t")?;
        let step = num("step")? as usize;
        if step > cfg.schedule.total_steps {
            return Err(CbrlError::StepOutOfRange {
                step,
                total: cfg.schedule.total_steps,
            });
        }
        Self::assemble(cfg, params, reference, opt, step, true)
    }

    fn assemble(
        cfg: TrainConfig,
        params: PolicyParams<f32>,
        reference: PolicyParams<f32>,
        opt: Adam<f32>,
        step: usize,
        append: bool,
    ) -> Result<Self> {
        let bank = load_bank(&cfg)?;
        let sinks = match &cfg.out_dir {
            Some(d) => Some(Sinks::open(d, append)?),
            None => None,
        };
        let pool = if cfg.parallel() {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| CbrlError::config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg,
            params,
            reference,
            opt,
            bank,
            step,
            metrics: Vec::new(),
            evals: Vec::new(),
            sinks,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams<f32> {
        &self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    fn last_step(&self) -> usize {
        let total = self.cfg.schedule.total_steps;
        match self.cfg.stop_after {
            0 => total,
            s => s.min(total),
        }
    }

    /// Composes the `i`-th prompt of step `t`.
    fn prepare(&self, t: usize, i: usize, p: f64) -> Result<(TaskInstance, PreparedPrompt)> {
        let cfg = &self.cfg;
        let inst = tasks::generate(cfg.task, cfg.train_seed(t, i), &cfg.task_config)?;
        let (ti, ii) = (t as u64, i as u64);
        let mut exemplars = Vec::new();
        let mut injected = false;
        if let Some(bank) = &self.bank {
            let mut ex_rng = RngStream::derive(cfg.master_seed, &[purpose::EXEMPLARS, ti, ii]);
            exemplars = match cfg.exemplar_sampling {
                ExemplarSampling::Uniform => bank.sample_uniform(cfg.k_examples, &mut ex_rng)?,
                ExemplarSampling::Tags => bank.sample_by_tags(cfg.k_examples, &inst.tags, &mut ex_rng)?,
            };
            let mut inj_rng = RngStream::derive(cfg.master_seed, &[purpose::INJECTION, ti, ii]);
            injected = draw_injection(p, &mut inj_rng) && !exemplars.is_empty();
        }
        let prompt = compose_with_layout(
            &inst.prompt,
            &exemplars,
            injected,
            &cfg.system_prompt,
            cfg.exemplar_layout,
        );
        let prepared = PreparedPrompt {
            tokens: encode_for_generation(&prompt),
            injected,
            rng_key: crate::rng::derive_key(cfg.master_seed, &[purpose::ROLLOUT, ti, ii]),
        };
        Ok((inst, prepared))
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Runs one training step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let t = self.step + 1;
        if t > self.cfg.schedule.total_steps {
            return Err(CbrlError::StepOutOfRange {
                step: t,
                total: self.cfg.schedule.total_steps,
            });
        }
        let p = if self.cfg.injection_enabled {
            injection_probability(t, &self.cfg.schedule)?
        } else {
            0.0
        };
        let mut instances = Vec::with_capacity(self.cfg.batch_size);
        let mut prompts = Vec::with_capacity(self.cfg.batch_size);
        for i in 0..self.cfg.batch_size {
            let (inst, prompt) = self.prepare(t, i, p)?;
            instances.push(inst);
            prompts.push(prompt);
        }
        let parallel = self.cfg.parallel();
        let n = self.cfg.rl.group_size;
        let spec = self.cfg.reward;
        let (rollouts, dropped) = self.in_pool(|| {
            rollout_batch(
                &self.params,
                &prompts,
                n,
                &self.cfg.sampling,
                parallel,
                |g, text| total_reward(&instances[g], text, &spec),
            )
        })?;
        if !dropped.is_empty() {
            debug!("step {t}: dropped groups {dropped:?}");
        }
        let upd = if rollouts.is_empty() {
            Default::default()
        } else {
            let (params, opt, reference, rl) =
                (&mut self.params, &mut self.opt, &self.reference, &self.cfg.rl);
            match &self.pool {
                Some(pool) => pool.install(|| policy_update(params, opt, &rollouts, reference, rl, true, t))?,
                None => policy_update(params, opt, &rollouts, reference, rl, false, t)?,
            }
        };
        self.step = t;

        let groups = rollouts.len() / n.max(1);
        let inj_groups = rollouts.iter().step_by(n).filter(|r| r.injected).count();
        let threshold = self.cfg.reward.answer_reward;
        let metrics = StepMetrics {
            step: t,
            p_inject: p,
            frac_injected: if groups > 0 {
                inj_groups as f64 / groups as f64
            } else {
                0.0
            },
            mean_reward: mean(rollouts.iter().map(|r| r.reward)).unwrap_or(0.0),
            mean_reward_injected: mean(rollouts.iter().filter(|r| r.injected).map(|r| r.reward)),
            mean_reward_clean: mean(rollouts.iter().filter(|r| !r.injected).map(|r| r.reward)),
            success_rate: mean(
                rollouts
                    .iter()
                    .map(|r| if r.reward >= threshold { 1.0 } else { 0.0 }),
            )
            .unwrap_or(0.0),
            loss: upd.loss,
            mean_kl: upd.mean_kl,
            mean_entropy: upd.mean_entropy,
            wall_ms: if self.cfg.record_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        info!(
            "step {t}: p={:.3} injected={:.2} reward={:.3} success={:.3} loss={:.4}",
            p, metrics.frac_injected, metrics.mean_reward, metrics.success_rate, metrics.loss
        );
        if let Some(s) = &mut self.sinks {
            s.write(&metrics)?;
        }
        self.metrics.push(metrics.clone());

        let every = self.cfg.eval.every;
        if every > 0 && (t % every == 0 || t == self.cfg.schedule.total_steps) {
            self.run_eval()?;
        }
        let ck = self.cfg.checkpoint_every;
        if ck > 0 && t % ck == 0 {
            if let Some(dir) = self.cfg.out_dir.clone() {
                let path = dir.join("checkpoints").join(format!("step_{t:06}.ckpt"));
                self.save_checkpoint(&path)?;
            }
        }
        Ok(metrics)
    }

    fn run_eval(&mut self) -> Result<EvalPoint> {
        let spec = self.cfg.eval_spec();
        let parallel = self.cfg.parallel();
        let sampling = self.cfg.eval.sampling;
        let report = self.in_pool(|| evaluate_policy(&self.params, &spec, &sampling, parallel))?;
        let point = EvalPoint {
            step: self.step,
            success_rate: report.success_rate,
        };
        info!("eval after step {}: success {:.3}", self.step, point.success_rate);
        if let Some(s) = &mut self.sinks {
            s.write_eval(&point)?;
        }
        self.evals.push(point.clone());
        Ok(point)
    }

    /// Runs the remaining steps, then writes the final checkpoint if an
    /// output directory is set.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.step < self.last_step() {
            self.step()?;
        }
        if let Some(dir) = self.cfg.out_dir.clone() {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(TrainOutcome {
            params: self.params,
            metrics: self.metrics,
            evals: self.evals,
        })
    }

    /// Policy, reference policy, optimizer moments and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.params.config,
            meta: Default::default(),
            sections: vec![(POLICY_SECTION.to_string(), self.params.data.clone())],
        };
        ck.add_section("reference", self.reference.data.clone());
        ck.add_section("adam_m", self.opt.m.clone());
        ck.add_section("adam_v", self.opt.v.clone());
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("adam_t".into(), self.opt.t.to_string());
        ck.meta.insert("task".into(), self.cfg.task.to_string());
        ck
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.checkpoint().save(path)
    }
}

/// Trains from scratch (or from `init_checkpoint`) to the end of the schedule.
pub fn train(cfg: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg)?.run()
}
