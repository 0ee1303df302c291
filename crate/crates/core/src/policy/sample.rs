//! Temperature and nucleus sampling from the policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::log_softmax;
use super::vocab::{EOS, PAD};
use super::{Decoder, PolicyParams, Scalar};
use crate::error::{CbrlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 256,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CbrlError::config("temperature must be finite and >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CbrlError::config("top_p must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(CbrlError::config("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// A sampled continuation. `logps[i]` is the log-probability of `tokens[i]`
/// under the untempered policy. A trailing EOS is kept in `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub tokens: Vec<u32>,
    pub logps: Vec<T>,
    pub finished: bool,
}

/// Sampling distribution over token ids after temperature and top-p.
/// Temperature 0 puts all mass on the first maximal logit.
pub fn sampling_distribution<T: Scalar>(logits: &[T], temperature: f64, top_p: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let mut probs = vec![0.0; z.len()];
    if temperature == 0.0 {
        let best = z
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > z[b] { i } else { b });
        probs[best] = 1.0;
        return probs;
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &v) in probs.iter_mut().zip(&z) {
        *p = ((v - m) / temperature).exp();
        total += *p;
    }
    for p in &mut probs {
        *p /= total;
    }
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (i, &k) in order.iter().enumerate() {
            cum += probs[k];
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
        let kept: f64 = order[..keep].iter().map(|&k| probs[k]).sum();
        for &k in &order[keep..] {
            probs[k] = 0.0;
        }
        for &k in &order[..keep] {
            probs[k] /= kept;
        }
    }
    probs
}

pub fn choose<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> u32 {
    let probs = sampling_distribution(logits, temperature, top_p);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            cum += p;
            if u < cum {
                return i as u32;
            }
        }
    }
    last as u32
}

pub fn sample<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    prompt: &[u32],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Sample<T>> {
    Ok(sample_group(params, prompt, 1, cfg, rng)?.remove(0))
}

/// Draws `n` continuations of one prompt. The prompt is encoded once and the
/// continuations advance together; streams that hit EOS idle on padding.
pub fn sample_group<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    prompt: &[u32],
    n: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<Sample<T>>> {
    cfg.validate()?;
    let mut out: Vec<Sample<T>> = (0..n)
        .map(|_| Sample {
            tokens: Vec::new(),
            logps: Vec::new(),
            finished: false,
        })
        .collect();
    if n == 0 {
        return Ok(out);
    }
    if prompt.len() >= params.config.context {
        return Err(CbrlError::ContextOverflow {
            len: prompt.len() + 1,
            context: params.config.context,
        });
    }
    let mut dec = Decoder::new(params);
    let first = dec.feed(prompt)?;
    dec.fork(n)?;
    let mut logits = vec![first; n];
    let ctx = dec.context();
    loop {
        let mut next = vec![PAD; n];
        let mut live = false;
        for (j, s) in out.iter_mut().enumerate() {
            if s.finished || s.tokens.len() >= cfg.max_new_tokens {
                continue;
            }
            let tok = choose(&logits[j], cfg.temperature, cfg.top_p, rng);
            s.logps.push(log_softmax(&logits[j])[tok as usize]);
            s.tokens.push(tok);
            if tok == EOS {
                s.finished = true;
            } else if s.tokens.len() < cfg.max_new_tokens {
                next[j] = tok;
                live = true;
            }
        }
        if !live || dec.len() + 1 >= ctx {
            break;
        }
        logits = dec.step(&next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_smallest_covering_set() {
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.15f64.ln(), 0.05f64.ln()];
        let p = sampling_distribution(&logits, 1.0, 0.75);
        assert!((p[0] - 0.625).abs() < 1e-12);
        assert!((p[1] - 0.375).abs() < 1e-12);
        assert_eq!(&p[2..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let p = sampling_distribution(&[0.1f32, 2.0, 2.0, -1.0], 0.0, 1.0);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
    }
}
