//! Group-relative policy-gradient objectives and the parameter update.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::policy::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::policy::{accumulate_grad, logprobs, PolicyParams, Scalar, SeqBatch, TokenStat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Rloo,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Rloo => "rloo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = CbrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Algorithm::Grpo),
            "rloo" => Ok(Algorithm::Rloo),
            _ => Err(CbrlError::config(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// Divide by the group's population standard deviation.
    Std,
    /// Subtract the group mean only.
    MeanOnly,
}

impl FromStr for AdvantageNorm {
    type Err = CbrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(AdvantageNorm::Std),
            "mean_only" => Ok(AdvantageNorm::MeanOnly),
            _ => Err(CbrlError::config(format!("unknown advantage_norm {s:?}"))),
        }
    }
}

impl fmt::Display for AdvantageNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvantageNorm::Std => "std",
            AdvantageNorm::MeanOnly => "mean_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub entropy_coef: f64,
    pub grad_clip_norm: f64,
    pub ppo_epochs: usize,
    /// Rollouts per gradient step; 0 means the whole batch.
    pub minibatch_size: usize,
    pub std_eps: f64,
    pub advantage_norm: AdvantageNorm,
    pub lr: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            group_size: 8,
            clip_eps: 0.2,
            kl_coef: 0.001,
            entropy_coef: 0.001,
            grad_clip_norm: 1.0,
            ppo_epochs: 1,
            minibatch_size: 0,
            std_eps: 1e-6,
            advantage_norm: AdvantageNorm::Std,
            lr: 3e-4,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(CbrlError::config("group_size must be at least 2"));
        }
        let coefs = [
            ("clip_eps", self.clip_eps),
            ("kl_coef", self.kl_coef),
            ("entropy_coef", self.entropy_coef),
            ("grad_clip_norm", self.grad_clip_norm),
            ("std_eps", self.std_eps),
            ("lr", self.lr),
        ];
        for (name, v) in coefs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CbrlError::config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.ppo_epochs == 0 {
            return Err(CbrlError::config("ppo_epochs must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One sampled completion of a composed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    pub behavior_logprobs: Vec<f32>,
    pub reward: f64,
    pub injected: bool,
    pub group_id: usize,
}

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(CbrlError::GroupTooSmall(rewards.len()));
    }
    Ok(())
}

/// `(r_i - mean) / (std + std_eps)` with the population standard deviation,
/// or `r_i - mean` under [`AdvantageNorm::MeanOnly`]. A group of equal
/// rewards yields exact zeros.
pub fn grpo_advantages_with(rewards: &[f64], std_eps: f64, norm: AdvantageNorm) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let denom = match norm {
        AdvantageNorm::Std => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            var.sqrt() + std_eps
        }
        AdvantageNorm::MeanOnly => 1.0,
    };
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    grpo_advantages_with(rewards, RlConfig::default().std_eps, AdvantageNorm::Std)
}

/// `r_i` minus the mean of the other rewards in the group.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let n = rewards.len();
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; n]);
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|&r| (n as f64 * r - total) / (n - 1) as f64)
        .collect())
}

pub fn advantages(rewards: &[f64], cfg: &RlConfig) -> Result<Vec<f64>> {
    match cfg.algorithm {
        Algorithm::Grpo => grpo_advantages_with(rewards, cfg.std_eps, cfg.advantage_norm),
        Algorithm::Rloo => rloo_advantages(rewards),
    }
}

/// `min(ρA, clip(ρ, 1-eps, 1+eps) A)` with `ρ = exp(logp_new - logp_behavior)`.
pub fn clipped_term(logp_new: f64, logp_behavior: f64, advantage: f64, eps: f64) -> f64 {
    let rho = (logp_new - logp_behavior).exp();
    (rho * advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `exp(Δ) - Δ - 1` with `Δ = logp_ref - logp_new`.
pub fn kl_lowvar(logp_new: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_new;
    delta.exp() - delta - 1.0
}

/// Clipped term and its derivative with respect to `logp_new`.
fn clipped_with_grad<T: Scalar>(logp_new: T, logp_behavior: T, adv: T, eps: T) -> (T, T) {
    let rho = (logp_new - logp_behavior).exp();
    let clipped = rho.max(T::one() - eps).min(T::one() + eps);
    let (a, b) = (rho * adv, clipped * adv);
    if a <= b {
        (a, a)
    } else {
        (b, T::zero())
    }
}

/// Per-step aggregates of an update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub loss: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_ratio: f64,
    pub grad_norm: f64,
}

/// Consecutive rollouts of one minibatch that share a prompt.
struct Segment<'a> {
    prompt: &'a [u32],
    members: Vec<usize>,
}

fn segments<'a>(rollouts: &'a [Rollout], idx: &[usize]) -> Vec<Segment<'a>> {
    let mut out: Vec<Segment<'a>> = Vec::new();
    for &i in idx {
        let r = &rollouts[i];
        match out.last_mut() {
            Some(s) if rollouts[s.members[0]].group_id == r.group_id => s.members.push(i),
            _ => out.push(Segment {
                prompt: &r.prompt_tokens,
                members: vec![i],
            }),
        }
    }
    out
}

fn segment_batch(rollouts: &[Rollout], seg: &Segment<'_>) -> (SeqBatch, Vec<(usize, u32)>) {
    let conts: Vec<&[u32]> = seg
        .members
        .iter()
        .map(|&i| rollouts[i].response_tokens.as_slice())
        .collect();
    let (batch, targets) = SeqBatch::shared_prefix(seg.prompt, &conts);
    (batch, targets.into_iter().flatten().collect())
}

/// Checks that rollouts form complete groups of `n` consecutive members
/// sharing one prompt.
pub fn check_groups(rollouts: &[Rollout], n: usize) -> Result<()> {
    for (g, chunk) in rollouts.chunks(n).enumerate() {
        let first = &chunk[0];
        let ok = chunk.len() == n
            && chunk
                .iter()
                .all(|r| r.group_id == first.group_id && r.prompt_tokens == first.prompt_tokens);
        if !ok {
            let found = chunk
                .iter()
                .filter(|r| r.group_id == first.group_id && r.prompt_tokens == first.prompt_tokens)
                .count();
            return Err(CbrlError::IncompleteGroup {
                group: g,
                expected: n,
                found,
            });
        }
        for r in chunk {
            if r.behavior_logprobs.len() != r.response_tokens.len() {
                return Err(CbrlError::ShapeMismatch(
                    "behavior log-probabilities do not match response length".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Advantages of every rollout, computed per group.
pub fn batch_advantages(rollouts: &[Rollout], cfg: &RlConfig) -> Result<Vec<f64>> {
    check_groups(rollouts, cfg.group_size)?;
    let mut out = Vec::with_capacity(rollouts.len());
    for chunk in rollouts.chunks(cfg.group_size) {
        let rewards: Vec<f64> = chunk.iter().map(|r| r.reward).collect();
        out.extend(advantages(&rewards, cfg)?);
    }
    Ok(out)
}

/// Per-token log-probabilities of every rollout's response under `params`.
pub fn response_logprobs<T: Scalar>(params: &PolicyParams<T>, rollouts: &[Rollout]) -> Result<Vec<Vec<T>>> {
    let all: Vec<usize> = (0..rollouts.len()).collect();
    let mut out = vec![Vec::new(); rollouts.len()];
    for seg in segments(rollouts, &all) {
        let (batch, targets) = segment_batch(rollouts, &seg);
        let lp = logprobs(params, &batch, &targets)?;
        let mut at = 0;
        for &i in &seg.members {
            let len = rollouts[i].response_tokens.len();
            out[i] = lp[at..at + len].to_vec();
            at += len;
        }
    }
    Ok(out)
}

#[derive(Default, Clone, Copy)]
struct Sums {
    loss: f64,
    kl: f64,
    entropy: f64,
    ratio: f64,
}

impl Sums {
    fn add(self, o: Sums) -> Sums {
        Sums {
            loss: self.loss + o.loss,
            kl: self.kl + o.kl,
            entropy: self.entropy + o.entropy,
            ratio: self.ratio + o.ratio,
        }
    }
}

fn segment_grad<T: Scalar>(
    params: &PolicyParams<T>,
    rollouts: &[Rollout],
    seg: &Segment<'_>,
    adv: &[f64],
    ref_lp: &[Vec<T>],
    cfg: &RlConfig,
    inv_tokens: f64,
    grad: &mut [T],
) -> Result<Sums> {
    let (batch, targets) = segment_batch(rollouts, seg);
    let mut sums = Sums::default();
    let eps = T::from_f64(cfg.clip_eps);
    let scale = T::from_f64(inv_tokens);
    let kl_c = T::from_f64(cfg.kl_coef);
    let ent_c = T::from_f64(cfg.entropy_coef);
    let objective = |stats: &[TokenStat<T>]| {
        let mut loss = T::zero();
        let mut parts = Vec::with_capacity(stats.len());
        let mut at = 0;
        for &i in &seg.members {
            let r = &rollouts[i];
            let a = T::from_f64(adv[i]);
            for t in 0..r.response_tokens.len() {
                let s = stats[at];
                at += 1;
                let lb = T::from_f64(r.behavior_logprobs[t] as f64);
                let (term, dterm) = clipped_with_grad(s.logp, lb, a, eps);
                let delta = ref_lp[i][t] - s.logp;
                let ed = delta.exp();
                let kl = ed - delta - T::one();
                loss += scale * (kl_c * kl - term - ent_c * s.entropy);
                parts.push((scale * (kl_c * (T::one() - ed) - dterm), -scale * ent_c));
                sums.kl += kl.as_f64();
                sums.entropy += s.entropy.as_f64();
                sums.ratio += (s.logp - lb).exp().as_f64();
            }
        }
        (loss, parts)
    };
    let loss = accumulate_grad(params, &batch, &targets, objective, grad)?;
    sums.loss = loss.as_f64();
    Ok(sums)
}

/// Loss of one minibatch and its gradient, summed group by group. With
/// `parallel`, groups are differentiated concurrently into separate buffers
/// that are then added in group order.
#[allow(clippy::too_many_arguments)]
fn minibatch_grad<T: Scalar>(
    params: &PolicyParams<T>,
    rollouts: &[Rollout],
    idx: &[usize],
    adv: &[f64],
    ref_lp: &[Vec<T>],
    cfg: &RlConfig,
    parallel: bool,
    grad: &mut [T],
) -> Result<(Sums, usize)> {
    let tokens: usize = idx.iter().map(|&i| rollouts[i].response_tokens.len()).sum();
    let inv = if tokens > 0 { 1.0 / tokens as f64 } else { 0.0 };
    let segs = segments(rollouts, idx);
    let mut total = Sums::default();
    if parallel {
        let parts: Vec<Result<(Sums, Vec<T>)>> = segs
            .par_iter()
            .map(|seg| {
                let mut g = vec![T::zero(); params.len()];
                let s = segment_grad(params, rollouts, seg, adv, ref_lp, cfg, inv, &mut g)?;
                Ok((s, g))
            })
            .collect();
        for part in parts {
            let (s, g) = part?;
            total = total.add(s);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += *b;
            }
        }
    } else {
        for seg in &segs {
            let s = segment_grad(params, rollouts, seg, adv, ref_lp, cfg, inv, grad)?;
            total = total.add(s);
        }
    }
    Ok((total, tokens))
}

/// Full surrogate loss over `rollouts` (one minibatch) and its gradient.
pub fn surrogate_loss_and_grad<T: Scalar>(
    params: &PolicyParams<T>,
    rollouts: &[Rollout],
    ref_params: &PolicyParams<T>,
    cfg: &RlConfig,
) -> Result<(f64, Vec<T>)> {
    let adv = batch_advantages(rollouts, cfg)?;
    let ref_lp = response_logprobs(ref_params, rollouts)?;
    let idx: Vec<usize> = (0..rollouts.len()).collect();
    let mut grad = vec![T::zero(); params.len()];
    let (sums, _) = minibatch_grad(params, rollouts, &idx, &adv, &ref_lp, cfg, false, &mut grad)?;
    Ok((sums.loss, grad))
}

/// One policy update: advantages per group, then `ppo_epochs` passes over
/// minibatches of the rollouts in order, each a clipped Adam step.
pub fn policy_update(
    params: &mut PolicyParams<f32>,
    opt: &mut Adam<f32>,
    rollouts: &[Rollout],
    ref_params: &PolicyParams<f32>,
    cfg: &RlConfig,
    parallel: bool,
    step: usize,
) -> Result<UpdateMetrics> {
    cfg.validate()?;
    let adv = batch_advantages(rollouts, cfg)?;
    let ref_lp = response_logprobs(ref_params, rollouts)?;
    let mb = if cfg.minibatch_size == 0 {
        rollouts.len().max(1)
    } else {
        cfg.minibatch_size
    };
    let order: Vec<usize> = (0..rollouts.len()).collect();
    let mut total = Sums::default();
    let mut tokens = 0usize;
    let mut losses = Vec::new();
    let mut grad_norm = 0.0;
    for _ in 0..cfg.ppo_epochs {
        for idx in order.chunks(mb) {
            let mut grad = vec![0.0f32; params.len()];
            let (s, n) = minibatch_grad(params, rollouts, idx, &adv, &ref_lp, cfg, parallel, &mut grad)?;
            if !s.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CbrlError::NonFiniteLoss(step));
            }
            grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip_norm);
            opt.step(&mut params.data, &grad);
            if !params.is_finite() {
                return Err(CbrlError::NonFiniteLoss(step));
            }
            losses.push(s.loss);
            total = total.add(s);
            tokens += n;
        }
    }
    let per_tok = |v: f64| if tokens > 0 { v / tokens as f64 } else { 0.0 };
    Ok(UpdateMetrics {
        loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        mean_kl: per_tok(total.kl),
        mean_entropy: per_tok(total.entropy),
        mean_ratio: per_tok(total.ratio),
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(close(&grpo_advantages(&[1.0, 0.0]).unwrap(), &[1.0, -1.0], 1e-5));
        let a = grpo_advantages(&[1.2, 0.2, 0.2, 0.2]).unwrap();
        assert!(close(&a, &[1.732, -0.577, -0.577, -0.577], 1e-3));
        assert!(matches!(grpo_advantages(&[1.0]), Err(CbrlError::GroupTooSmall(1))));
    }

    #[test]
    fn rloo_examples() {
        let a = rloo_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(&a, &[1.0, -1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0], 1e-12));
        assert_eq!(rloo_advantages(&[2.0, 1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(rloo_advantages(&[0.7; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn clip_and_kl_examples() {
        assert_eq!(clipped_term(-0.3, -0.3, 0.8, 0.2), 0.8);
        assert!((clipped_term(2f64.ln(), 0.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_term(0.5f64.ln(), 0.0, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(kl_lowvar(-1.0, -1.0), 0.0);
        assert!((kl_lowvar(0.0, 2f64.ln()) - (1.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mean_only_skips_scaling() {
        let a = grpo_advantages_with(&[3.0, 1.0], 1e-6, AdvantageNorm::MeanOnly).unwrap();
        assert_eq!(a, vec![1.0, -1.0]);
    }
}
