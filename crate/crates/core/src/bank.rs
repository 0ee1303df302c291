//! The few-shot bank: solved exemplars and how they are drawn.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::instrument;
use crate::rng::RngStream;
use crate::tasks::{self, TaskConfig, TaskKind};

/// Seed offset for bank instances relative to the master seed. Training
/// instances use offsets below this value.
pub const BANK_SEED_OFFSET: u64 = 1_000_000;
/// Seed offset for held-out evaluation instances.
pub const EVAL_SEED_OFFSET: u64 = 2_000_000;

/// A solved exemplar. Field order is the bank file line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub question: String,
    pub reasoning: String,
    pub answer: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bank {
    pub task_kind: TaskKind,
    pub entries: Vec<BankEntry>,
}

/// Builds `size` solved entries from seeds `seed + BANK_SEED_OFFSET + j`.
pub fn build_bank(kind: TaskKind, size: usize, seed: u64, cfg: &TaskConfig) -> Result<Bank> {
    if size == 0 {
        return Err(CbrlError::config("bank size must be at least 1"));
    }
    let entries = (0..size as u64)
        .map(|j| {
            let inst_seed = seed.wrapping_add(BANK_SEED_OFFSET + j);
            let data = tasks::generate_data(kind, inst_seed, cfg)?;
            let inst = tasks::instance_from_data(inst_seed, &data)?;
            Ok(BankEntry {
                question: inst.prompt,
                reasoning: tasks::reasoning_trace(&data),
                answer: inst.answer,
                tags: inst.tags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bank {
        task_kind: kind,
        entries,
    })
}

impl Bank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn draw<'a>(pool: &[&'a BankEntry], k: usize, rng: &mut RngStream) -> Vec<&'a BankEntry> {
        let amount = k.min(pool.len());
        index::sample(rng, pool.len(), amount)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }

    /// `min(k, len)` distinct entries, uniformly without replacement.
    pub fn sample_uniform(&self, k: usize, rng: &mut RngStream) -> Result<Vec<&BankEntry>> {
        instrument::note_bank_sample();
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.is_empty() {
            return Err(CbrlError::EmptyBank);
        }
        let all: Vec<&BankEntry> = self.entries.iter().collect();
        Ok(Self::draw(&all, k, rng))
    }

    /// Like [`Bank::sample_uniform`] but restricted to entries that share at
    /// least one tag with `query_tags`. With no such entry, falls back to the
    /// whole bank.
    pub fn sample_by_tags(
        &self,
        k: usize,
        query_tags: &[String],
        rng: &mut RngStream,
    ) -> Result<Vec<&BankEntry>> {
        let candidates: Vec<&BankEntry> = self
            .entries
            .iter()
            .filter(|e| e.tags.iter().any(|t| query_tags.contains(t)))
            .collect();
        if candidates.is_empty() {
            return self.sample_uniform(k, rng);
        }
        instrument::note_bank_sample();
        Ok(Self::draw(&candidates, k, rng))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a bank file. The task kind is read from the first tag of the
    /// first entry.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: BankEntry = serde_json::from_str(&line).map_err(|e| CbrlError::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                reason: e.to_string(),
            })?;
            if entry.answer.is_empty() {
                return Err(CbrlError::Parse {
                    location: format!("{}:{}", path.display(), lineno + 1),
                    reason: "empty answer".into(),
                });
            }
            entries.push(entry);
        }
        let task_kind = entries
            .first()
            .and_then(|e| e.tags.first())
            .ok_or(CbrlError::EmptyBank)?
            .parse()?;
        Ok(Bank { task_kind, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskInstance;

    fn entry(name: &str, tags: &[&str]) -> BankEntry {
        BankEntry {
            question: name.into(),
            reasoning: String::new(),
            answer: name.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn spell_backward_bank_has_reverse_traces() {
        let bank = build_bank(TaskKind::SpellBackward, 20, 0, &TaskConfig::default()).unwrap();
        assert_eq!(bank.len(), 20);
        for e in &bank.entries {
            let word = e.question.rsplit(' ').next().unwrap();
            let expected: Vec<String> = word.chars().rev().map(String::from).collect();
            assert_eq!(e.reasoning, expected.join(","));
            let inst = TaskInstance {
                kind: TaskKind::SpellBackward,
                seed: 0,
                prompt: e.question.clone(),
                answer: e.answer.clone(),
                tags: e.tags.clone(),
            };
            assert_eq!(tasks::verify(&inst, &e.answer), 1.0);
        }
    }

    #[test]
    fn word_sorting_traces_list_code_points() {
        let bank = build_bank(TaskKind::WordSorting, 20, 0, &TaskConfig::default()).unwrap();
        for e in &bank.entries {
            assert!(e.reasoning.contains("code points"));
            let first = e.question.rsplit(": ").next().unwrap().chars().next().unwrap();
            assert!(e.reasoning.contains(&format!("{first}={}", first as u32)));
        }
    }

    #[test]
    fn single_entry_bank_caps_sample() {
        let bank = build_bank(TaskKind::Puzzle24, 1, 3, &TaskConfig::default()).unwrap();
        let mut rng = RngStream::new(0);
        let got = bank.sample_uniform(2, &mut rng).unwrap();
        assert_eq!(got, vec![&bank.entries[0]]);
    }

    #[test]
    fn zero_k_and_empty_bank() {
        let empty = Bank {
            task_kind: TaskKind::SpellBackward,
            entries: vec![],
        };
        let mut rng = RngStream::new(0);
        assert!(empty.sample_uniform(0, &mut rng).unwrap().is_empty());
        assert!(matches!(empty.sample_uniform(2, &mut rng), Err(CbrlError::EmptyBank)));
        assert!(matches!(
            empty.sample_by_tags(2, &["x".into()], &mut rng),
            Err(CbrlError::EmptyBank)
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let bank = build_bank(TaskKind::SpellBackward, 20, 1, &TaskConfig::default()).unwrap();
        let a = bank.sample_uniform(2, &mut RngStream::new(5)).unwrap();
        let b = bank.sample_uniform(2, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let bank = build_bank(TaskKind::SpellBackward, 20, 2, &TaskConfig::default()).unwrap();
        let mut rng = RngStream::new(77);
        let mut counts = [0usize; 20];
        let draws = 10_000;
        for _ in 0..draws {
            let e = bank.sample_uniform(1, &mut rng).unwrap()[0];
            let i = bank.entries.iter().position(|x| std::ptr::eq(x, e)).unwrap();
            counts[i] += 1;
        }
        let p = 1.0 / 20.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn tag_filtering() {
        let bank = Bank {
            task_kind: TaskKind::SpellBackward,
            entries: vec![
                entry("a", &["Array"]),
                entry("b", &["Graph"]),
                entry("c", &["Array", "Dynamic Programming"]),
                entry("d", &["Array"]),
                entry("e", &["String"]),
            ],
        };
        let q = vec!["Array".to_string()];
        for seed in 0..50 {
            let got = bank.sample_by_tags(2, &q, &mut RngStream::new(seed)).unwrap();
            assert_eq!(got.len(), 2);
            assert!(got.iter().all(|e| e.tags.contains(&"Array".to_string())));
        }
        let all = bank.sample_by_tags(10, &q, &mut RngStream::new(1)).unwrap();
        assert_eq!(all.len(), 3);
        let fallback = bank
            .sample_by_tags(2, &["Unseen".to_string()], &mut RngStream::new(1))
            .unwrap();
        assert_eq!(fallback.len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let bank = build_bank(TaskKind::ManipulateMatrix, 7, 9, &TaskConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        bank.save(&path).unwrap();
        assert_eq!(Bank::load(&path).unwrap(), bank);
    }

    #[test]
    fn bank_seeds_disjoint_from_train_and_eval() {
        let cfg = TaskConfig::default();
        let bank = build_bank(TaskKind::WordSorting, 20, 0, &cfg).unwrap();
        let train: Vec<String> = (0..200)
            .map(|s| tasks::generate(TaskKind::WordSorting, s, &cfg).unwrap().prompt)
            .collect();
        let eval: Vec<String> = (0..200)
            .map(|s| tasks::generate(TaskKind::WordSorting, EVAL_SEED_OFFSET + s, &cfg).unwrap().prompt)
            .collect();
        for e in &bank.entries {
            assert!(!train.contains(&e.question));
            assert!(!eval.contains(&e.question));
        }
    }
}
