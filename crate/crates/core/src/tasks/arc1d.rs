//! One-dimensional ARC: infer a single array rewrite rule from examples.

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arc1dRule {
    ShiftLeft(usize),
    ShiftRight(usize),
    Mirror,
    /// Swap two colors everywhere.
    Remap(u8, u8),
    /// Fill the cells between two identical markers with their color.
    FillGap,
    /// Repeat the single colored block immediately after itself.
    DuplicateBlock,
}

impl Arc1dRule {
    pub fn name(&self) -> &'static str {
        match self {
            Arc1dRule::ShiftLeft(_) | Arc1dRule::ShiftRight(_) => "shift",
            Arc1dRule::Mirror => "mirror",
            Arc1dRule::Remap(..) => "remap",
            Arc1dRule::FillGap => "fill_gap",
            Arc1dRule::DuplicateBlock => "duplicate_block",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Arc1dRule::ShiftLeft(k) => format!("shift everything left by {k}"),
            Arc1dRule::ShiftRight(k) => format!("shift everything right by {k}"),
            Arc1dRule::Mirror => "mirror the array".into(),
            Arc1dRule::Remap(a, b) => format!("swap colors {a} and {b}"),
            Arc1dRule::FillGap => "fill between the two matching markers".into(),
            Arc1dRule::DuplicateBlock => "repeat the block right after itself".into(),
        }
    }

    pub fn apply(&self, input: &[u8]) -> Vec<u8> {
        let n = input.len();
        match *self {
            Arc1dRule::ShiftLeft(k) => (0..n).map(|i| input.get(i + k).copied().unwrap_or(0)).collect(),
            Arc1dRule::ShiftRight(k) => (0..n).map(|i| if i >= k { input[i - k] } else { 0 }).collect(),
            Arc1dRule::Mirror => input.iter().rev().copied().collect(),
            Arc1dRule::Remap(a, b) => input
                .iter()
                .map(|&v| if v == a { b } else if v == b { a } else { v })
                .collect(),
            Arc1dRule::FillGap => {
                let mut out = input.to_vec();
                let marks: Vec<usize> = (0..n).filter(|&i| input[i] != 0).collect();
                if let (Some(&lo), Some(&hi)) = (marks.first(), marks.last()) {
                    if input[lo] == input[hi] {
                        out[lo..=hi].fill(input[lo]);
                    }
                }
                out
            }
            Arc1dRule::DuplicateBlock => {
                let mut out = input.to_vec();
                let cells: Vec<usize> = (0..n).filter(|&i| input[i] != 0).collect();
                if let (Some(&lo), Some(&hi)) = (cells.first(), cells.last()) {
                    let len = hi - lo + 1;
                    for i in 0..len {
                        if hi + 1 + i < n {
                            out[hi + 1 + i] = input[lo + i];
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc1dConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub num_train: usize,
}

impl Default for Arc1dConfig {
    fn default() -> Self {
        Self {
            min_size: 10,
            max_size: 30,
            num_train: 3,
        }
    }
}

impl Arc1dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size > self.max_size {
            return Err(CbrlError::config(format!(
                "arc1d: min_size {} > max_size {}",
                self.min_size, self.max_size
            )));
        }
        if self.min_size < 8 {
            return Err(CbrlError::config("arc1d: min_size must be at least 8"));
        }
        if !(2..=3).contains(&self.num_train) {
            return Err(CbrlError::config("arc1d: num_train must be 2 or 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc1dData {
    pub rule: Arc1dRule,
    pub train: Vec<(Vec<u8>, Vec<u8>)>,
    pub test_input: Vec<u8>,
}

fn color(rng: &mut RngStream) -> u8 {
    rng.range_inclusive(1, 9) as u8
}

fn draw_rule(rng: &mut RngStream) -> Arc1dRule {
    match rng.below(6) {
        0 => Arc1dRule::ShiftLeft(rng.range_inclusive(1, 3) as usize),
        1 => Arc1dRule::ShiftRight(rng.range_inclusive(1, 3) as usize),
        2 => Arc1dRule::Mirror,
        3 => {
            let a = color(rng);
            let mut b = color(rng);
            while b == a {
                b = color(rng);
            }
            Arc1dRule::Remap(a, b)
        }
        4 => Arc1dRule::FillGap,
        _ => Arc1dRule::DuplicateBlock,
    }
}

/// Draws an input on which `rule` acts non-trivially.
fn draw_input(rng: &mut RngStream, rule: Arc1dRule, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    match rule {
        Arc1dRule::ShiftLeft(k) | Arc1dRule::ShiftRight(k) => {
            let len = rng.range_inclusive(1, (n / 3) as i64) as usize;
            let start = rng.range_inclusive(k as i64, (n - len - k) as i64) as usize;
            for cell in &mut v[start..start + len] {
                *cell = color(rng);
            }
        }
        Arc1dRule::Mirror => loop {
            for cell in v.iter_mut() {
                *cell = if rng.bernoulli(0.4) { color(rng) } else { 0 };
            }
            let rev: Vec<u8> = v.iter().rev().copied().collect();
            if rev != v {
                break;
            }
        },
        Arc1dRule::Remap(a, b) => {
            let other = color(rng);
            for cell in v.iter_mut() {
                *cell = match rng.below(4) {
                    0 => 0,
                    1 => a,
                    2 => b,
                    _ => other,
                };
            }
            v[rng.below(n)] = a;
        }
        Arc1dRule::FillGap => {
            let c = color(rng);
            let lo = rng.below(n - 2);
            let hi = rng.range_inclusive(lo as i64 + 2, n as i64 - 1) as usize;
            v[lo] = c;
            v[hi] = c;
        }
        Arc1dRule::DuplicateBlock => {
            let len = rng.range_inclusive(1, (n / 4) as i64) as usize;
            let start = rng.range_inclusive(0, (n - 2 * len) as i64) as usize;
            for cell in &mut v[start..start + len] {
                *cell = color(rng);
            }
        }
    }
    v
}

pub fn generate(rng: &mut RngStream, cfg: &Arc1dConfig) -> Result<Arc1dData> {
    let n = rng.range_inclusive(cfg.min_size as i64, cfg.max_size as i64) as usize;
    let rule = draw_rule(rng);
    let train = (0..cfg.num_train)
        .map(|_| {
            let input = draw_input(rng, rule, n);
            let output = rule.apply(&input);
            (input, output)
        })
        .collect();
    let test_input = draw_input(rng, rule, n);
    Ok(Arc1dData {
        rule,
        train,
        test_input,
    })
}

pub fn render_array(v: &[u8]) -> String {
    v.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
}

pub fn render(data: &Arc1dData) -> String {
    let mut s = String::from("Find the rule that maps each input to its output, then apply it to the test input.");
    for (i, (input, output)) in data.train.iter().enumerate() {
        s.push_str(&format!(
            "\nExample {}:\nInput: {}\nOutput: {}",
            i + 1,
            render_array(input),
            render_array(output)
        ));
    }
    s.push_str(&format!("\nTest input: {}", render_array(&data.test_input)));
    s
}

pub fn answer(data: &Arc1dData) -> String {
    render_array(&data.rule.apply(&data.test_input))
}

pub fn trace(data: &Arc1dData) -> String {
    format!(
        "Every example follows one rule: {}. Applying it to the test input.",
        data.rule.describe()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_on_fixed_arrays() {
        let x = [0, 3, 4, 0, 0, 0];
        assert_eq!(Arc1dRule::ShiftRight(2).apply(&x), vec![0, 0, 0, 3, 4, 0]);
        assert_eq!(Arc1dRule::ShiftLeft(1).apply(&x), vec![3, 4, 0, 0, 0, 0]);
        assert_eq!(Arc1dRule::Mirror.apply(&x), vec![0, 0, 0, 4, 3, 0]);
        assert_eq!(Arc1dRule::Remap(3, 4).apply(&x), vec![0, 4, 3, 0, 0, 0]);
        assert_eq!(Arc1dRule::FillGap.apply(&[0, 5, 0, 0, 5, 0]), vec![0, 5, 5, 5, 5, 0]);
        assert_eq!(Arc1dRule::DuplicateBlock.apply(&x), vec![0, 3, 4, 3, 4, 0]);
    }

    #[test]
    fn generated_instances_respect_config() {
        let cfg = Arc1dConfig::default();
        for seed in 0..200 {
            let mut rng = RngStream::new(seed);
            let d = generate(&mut rng, &cfg).unwrap();
            assert_eq!(d.train.len(), 3);
            let n = d.test_input.len();
            assert!((10..=30).contains(&n));
            for (i, o) in &d.train {
                assert_eq!(i.len(), n);
                assert_eq!(o, &d.rule.apply(i));
                assert_ne!(i, o, "rule {:?} acted trivially", d.rule);
                assert!(i.iter().chain(o).all(|&v| v <= 9));
            }
        }
    }
}
