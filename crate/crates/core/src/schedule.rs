//! Linear annealing of the exemplar-injection probability.

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::instrument;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub p_start: f64,
    pub p_end: f64,
    pub total_steps: usize,
}

impl ScheduleParams {
    pub fn new(p_start: f64, p_end: f64, total_steps: usize) -> Result<Self> {
        let params = Self {
            p_start,
            p_end,
            total_steps,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_start", self.p_start), ("p_end", self.p_end)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CbrlError::config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.total_steps == 0 {
            return Err(CbrlError::config("total_steps must be at least 1"));
        }
        Ok(())
    }

    /// `(t, p_t)` for every step.
    pub fn table(&self) -> Vec<(usize, f64)> {
        (1..=self.total_steps)
            .map(|t| (t, injection_probability(t, self).expect("t in range")))
            .collect()
    }
}

/// `p_t = p_start + (t-1)/(T-1) * (p_end - p_start)` for `1 <= t <= T`.
///
/// A single-step budget returns `p_start`. Both endpoints are returned
/// exactly.
pub fn injection_probability(t: usize, params: &ScheduleParams) -> Result<f64> {
    instrument::note_schedule_lookup();
    let total = params.total_steps;
    if t == 0 || t > total {
        return Err(CbrlError::StepOutOfRange { step: t, total });
    }
    let (a, b) = (params.p_start, params.p_end);
    if total == 1 || t == 1 {
        return Ok(a);
    }
    if t == total {
        return Ok(b);
    }
    let w = (t - 1) as f64 / (total - 1) as f64;
    Ok((a + w * (b - a)).clamp(a.min(b), a.max(b)))
}

/// One Bernoulli(p) draw; the trainer calls this once per prompt.
pub fn draw_injection(p: f64, rng: &mut RngStream) -> bool {
    rng.bernoulli(p)
}
