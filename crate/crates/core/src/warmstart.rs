//! Supervised warm start on a synthetic string-rewriting dialogue corpus.
//!
//! Each dialogue asks for one of several word rewrites under an instruction
//! whose wording does not identify the rewrite. Without prior exchanges the
//! assistant answers according to a fixed prior that rarely reverses; with
//! prior exchanges it repeats whatever rewrite they showed. The resulting
//! policy can imitate solved exemplars but seldom reverses a word unprompted.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bank::BankEntry;
use crate::error::{CbrlError, Result};
use crate::policy::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::policy::vocab::{self, encode, encode_for_generation};
use crate::policy::{accumulate_grad, init_policy, sample_group, PolicyConfig, PolicyParams, SamplingConfig, SeqBatch};
use crate::prompting::{compose, exemplar_response, extract_answer, ChatPrompt, Role, Turn, SHORT_SYSTEM_PROMPT};
use crate::rng::{purpose, RngStream};
use crate::tasks::words::{backward_trace, random_word, render_backward, reverse_word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Copy,
    Reverse,
    Rotate,
    Sort,
    Shift,
}

impl Rule {
    pub const ALL: [Rule; 5] = [Rule::Copy, Rule::Reverse, Rule::Rotate, Rule::Sort, Rule::Shift];

    pub fn apply(self, word: &str) -> String {
        let mut c: Vec<char> = word.chars().collect();
        match self {
            Rule::Copy => {}
            Rule::Reverse => c.reverse(),
            Rule::Rotate => c.rotate_left(1),
            Rule::Sort => c.sort_unstable(),
            Rule::Shift => c.rotate_right(1),
        }
        c.into_iter().collect()
    }

    /// Reasoning text. Reversal uses the exemplar bank's trace.
    pub fn think(self, word: &str) -> String {
        match self {
            Rule::Copy => "#copy".into(),
            Rule::Reverse => backward_trace(word),
            Rule::Rotate => "#rotate".into(),
            Rule::Sort => "#order".into(),
            Rule::Shift => "#shift".into(),
        }
    }

    pub fn entry(self, question: String, word: &str) -> BankEntry {
        BankEntry {
            question,
            reasoning: self.think(word),
            answer: self.apply(word),
            tags: Vec::new(),
        }
    }
}

const TEMPLATES: [&str; 6] = [
    "Spell this word backward: ",
    "Rewrite this word: ",
    "Transform the word: ",
    "Apply the rule to: ",
    "Change this word: ",
    "Process: ",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmstartConfig {
    pub policy: PolicyConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Fraction of dialogues with no prior exchange.
    pub zero_shot_frac: f64,
    pub max_demos: usize,
    /// Unprompted rule frequencies, in [`Rule::ALL`] order.
    pub prior: [f64; 5],
    pub system_prompt: String,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig {
                context: 512,
                ..PolicyConfig::default()
            },
            seed: 0,
            steps: 5000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            grad_clip_norm: 1.0,
            min_word_len: 3,
            max_word_len: 5,
            zero_shot_frac: 0.4,
            max_demos: 3,
            prior: [0.5, 0.005, 0.2, 0.15, 0.145],
            system_prompt: SHORT_SYSTEM_PROMPT.to_string(),
        }
    }
}

impl WarmstartConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CbrlError::config("warm start needs steps and batch_size"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(CbrlError::config("lr and grad_clip_norm must be positive"));
        }
        if self.min_word_len < 2 || self.min_word_len > self.max_word_len {
            return Err(CbrlError::config("word lengths must satisfy 2 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.zero_shot_frac) {
            return Err(CbrlError::config("zero_shot_frac must lie in [0, 1]"));
        }
        if self.prior.iter().any(|w| !(*w >= 0.0)) || self.prior.iter().sum::<f64>() <= 0.0 {
            return Err(CbrlError::config("prior weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

/// One training dialogue: tokens plus the positions whose next token is
/// supervised.
#[derive(Debug, Clone)]
pub struct Dialogue {
    pub prompt: ChatPrompt,
    pub tokens: Vec<u32>,
    pub supervised: Vec<usize>,
}

fn pick_prior(prior: &[f64; 5], rng: &mut RngStream) -> Rule {
    let total: f64 = prior.iter().sum();
    let mut u = rng.uniform() * total;
    for (r, w) in Rule::ALL.iter().zip(prior) {
        if u < *w {
            return *r;
        }
        u -= w;
    }
    Rule::ALL[prior.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
}

pub fn sample_dialogue(cfg: &WarmstartConfig, rng: &mut RngStream) -> Dialogue {
    let template = TEMPLATES[rng.below(TEMPLATES.len())];
    let demos = if rng.uniform() < cfg.zero_shot_frac || cfg.max_demos == 0 {
        0
    } else {
        1 + rng.below(cfg.max_demos)
    };
    let rule = if demos == 0 {
        pick_prior(&cfg.prior, rng)
    } else {
        Rule::ALL[rng.below(Rule::ALL.len())]
    };
    let mut turns = vec![Turn {
        role: Role::System,
        content: cfg.system_prompt.clone(),
    }];
    for _ in 0..=demos {
        let word = random_word(rng, cfg.min_word_len, cfg.max_word_len);
        let e = rule.entry(format!("{template}{word}"), &word);
        turns.push(Turn {
            role: Role::User,
            content: e.question.clone(),
        });
        turns.push(Turn {
            role: Role::Assistant,
            content: exemplar_response(&e),
        });
    }
    let prompt = ChatPrompt { turns };
    let tokens = encode(&prompt);
    // Supervise every assistant turn except the first of a demonstration
    // dialogue, whose rule is unpredictable.
    let mut supervised = Vec::new();
    let mut seen = 0;
    let mut inside = false;
    for (i, &t) in tokens.iter().enumerate() {
        if t == vocab::AST {
            seen += 1;
            inside = demos == 0 || seen > 1;
        } else if matches!(t, vocab::USR | vocab::SYS | vocab::EOS) {
            inside = false;
        }
        if inside && i + 1 < tokens.len() {
            supervised.push(i);
        }
    }
    Dialogue {
        prompt,
        tokens,
        supervised,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmstartStep {
    pub step: usize,
    pub loss: f64,
    pub tokens: usize,
}

fn lr_at(cfg: &WarmstartConfig, step: usize) -> f64 {
    let warm = if cfg.warmup_steps > 0 {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let progress = step as f64 / cfg.steps as f64;
    cfg.lr * warm * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Cross-entropy training on freshly sampled dialogues. `on_step` sees every
/// step's loss.
pub fn warmstart(cfg: &WarmstartConfig, mut on_step: impl FnMut(&WarmstartStep)) -> Result<PolicyParams<f32>> {
    cfg.validate()?;
    let mut params = init_policy::<f32>(cfg.seed, cfg.policy)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let mut grad = vec![0f32; params.len()];
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let mut rng = RngStream::derive(cfg.seed, &[purpose::WARMSTART, step as u64]);
        let mut batch = SeqBatch::new();
        let mut targets = Vec::new();
        for _ in 0..cfg.batch_size {
            let d = sample_dialogue(cfg, &mut rng);
            if d.tokens.len() > cfg.policy.context {
                continue;
            }
            let base = batch.push_sequence(&d.tokens);
            targets.extend(d.supervised.iter().map(|&i| (base + i, d.tokens[i + 1])));
        }
        if targets.is_empty() {
            continue;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = targets.len();
        let scale = 1.0 / n as f32;
        let loss = accumulate_grad(
            &params,
            &batch,
            &targets,
            |stats| {
                let loss = -stats.iter().map(|s| s.logp).sum::<f32>() * scale;
                (loss, vec![(-scale, 0.0); stats.len()])
            },
            &mut grad,
        )?;
        if !loss.is_finite() {
            return Err(CbrlError::NonFiniteLoss(step));
        }
        clip_grad_norm(&mut grad, cfg.grad_clip_norm);
        opt.config.lr = lr_at(cfg, step);
        opt.step(&mut params.data, &grad);
        let rec = WarmstartStep {
            step,
            loss: loss as f64,
            tokens: n,
        };
        if step % 100 == 0 || step == cfg.steps {
            info!(
                "warm start step {step}: loss {:.4} ({:.0}s)",
                rec.loss,
                start.elapsed().as_secs_f64()
            );
        }
        on_step(&rec);
    }
    Ok(params)
}

/// Success of a policy on backward spelling with and without `k` reversal
/// exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub zero_shot: f64,
    pub with_exemplars: f64,
}

pub fn probe(
    params: &PolicyParams<f32>,
    system_prompt: &str,
    words: (usize, usize),
    problems: usize,
    samples: usize,
    k: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let mut rng = RngStream::derive(seed, &[purpose::EVAL, u64::MAX]);
    let (mut zero, mut icl) = (0usize, 0usize);
    for _ in 0..problems {
        let word = random_word(&mut rng, words.0, words.1);
        let demos: Vec<BankEntry> = (0..k)
            .map(|_| {
                let w = random_word(&mut rng, words.0, words.1);
                Rule::Reverse.entry(render_backward(&w), &w)
            })
            .collect();
        let refs: Vec<&BankEntry> = demos.iter().collect();
        let want = reverse_word(&word);
        for inject in [false, true] {
            let prompt = compose(&render_backward(&word), &refs, inject, system_prompt);
            let toks = encode_for_generation(&prompt);
            let out = sample_group(params, &toks, samples, sampling, &mut rng)?;
            let hits = out
                .iter()
                .filter(|s| {
                    extract_answer(&vocab::decode(&s.tokens)).as_deref() == Some(want.as_str())
                })
                .count();
            if inject {
                icl += hits;
            } else {
                zero += hits;
            }
        }
    }
    let total = (problems * samples).max(1) as f64;
    Ok(ProbeReport {
        zero_shot: zero as f64 / total,
        with_exemplars: icl as f64 / total,
    })
}
