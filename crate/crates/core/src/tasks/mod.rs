//! Procedurally generated, exactly verifiable reasoning tasks.
//!
//! Five environments: ARC-1D, matrix manipulation, word sorting, backward
//! spelling and the 24 game. Each instance is a pure function of
//! `(kind, seed, config)`; the canonical answer is computed by the same
//! code the verifier trusts.

pub mod arc1d;
pub mod matrix;
pub mod puzzle24;
pub mod words;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::{purpose, RngStream};

pub use arc1d::{Arc1dConfig, Arc1dData, Arc1dRule};
pub use matrix::{apply_matrix_ops, Matrix, MatrixConfig, MatrixData, MatrixOp};
pub use puzzle24::{solve_puzzle24_oracle, Operator, Puzzle24Config, Puzzle24Data};
pub use words::{SpellBackwardConfig, WordSortingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arc1d,
    ManipulateMatrix,
    WordSorting,
    SpellBackward,
    Puzzle24,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Arc1d,
        TaskKind::ManipulateMatrix,
        TaskKind::WordSorting,
        TaskKind::SpellBackward,
        TaskKind::Puzzle24,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Arc1d => "arc1d",
            TaskKind::ManipulateMatrix => "manipulate_matrix",
            TaskKind::WordSorting => "word_sorting",
            TaskKind::SpellBackward => "spell_backward",
            TaskKind::Puzzle24 => "puzzle24",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = CbrlError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CbrlError::config(format!("unknown task kind `{s}`")))
    }
}

/// Generator parameters for every kind; only the bundle for the requested
/// kind is consulted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub arc1d: Arc1dConfig,
    pub matrix: MatrixConfig,
    pub word_sorting: WordSortingConfig,
    pub spell_backward: SpellBackwardConfig,
    pub puzzle24: Puzzle24Config,
}

impl TaskConfig {
    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        match kind {
            TaskKind::Arc1d => self.arc1d.validate(),
            TaskKind::ManipulateMatrix => self.matrix.validate(),
            TaskKind::WordSorting => self.word_sorting.validate(),
            TaskKind::SpellBackward => self.spell_backward.validate(),
            TaskKind::Puzzle24 => self.puzzle24.validate(),
        }
    }
}

/// Structured problem payload, before rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskData {
    Arc1d(Arc1dData),
    Matrix(MatrixData),
    WordSorting { words: Vec<String> },
    SpellBackward { word: String },
    Puzzle24 { data: Puzzle24Data, solution: String, steps: Vec<String> },
}

impl TaskData {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::Arc1d(_) => TaskKind::Arc1d,
            TaskData::Matrix(_) => TaskKind::ManipulateMatrix,
            TaskData::WordSorting { .. } => TaskKind::WordSorting,
            TaskData::SpellBackward { .. } => TaskKind::SpellBackward,
            TaskData::Puzzle24 { .. } => TaskKind::Puzzle24,
        }
    }
}

/// One generated problem. Field order is the dataset line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub seed: u64,
    pub prompt: String,
    pub answer: String,
    pub tags: Vec<String>,
}

pub fn generate_data(kind: TaskKind, seed: u64, cfg: &TaskConfig) -> Result<TaskData> {
    cfg.validate(kind)?;
    let mut rng = RngStream::derive(seed, &[purpose::TASK, kind.stream_id()]);
    Ok(match kind {
        TaskKind::Arc1d => TaskData::Arc1d(arc1d::generate(&mut rng, &cfg.arc1d)?),
        TaskKind::ManipulateMatrix => TaskData::Matrix(matrix::generate(&mut rng, &cfg.matrix)?),
        TaskKind::WordSorting => TaskData::WordSorting {
            words: words::generate_word_list(&mut rng, &cfg.word_sorting),
        },
        TaskKind::SpellBackward => TaskData::SpellBackward {
            word: words::random_word(
                &mut rng,
                cfg.spell_backward.min_word_len,
                cfg.spell_backward.max_word_len,
            ),
        },
        TaskKind::Puzzle24 => {
            let (data, sol) = puzzle24::generate(&mut rng, &cfg.puzzle24)?;
            TaskData::Puzzle24 {
                data,
                solution: sol.expression,
                steps: sol.steps,
            }
        }
    })
}

/// Generates one instance; deterministic in `(kind, seed, cfg)`.
pub fn generate(kind: TaskKind, seed: u64, cfg: &TaskConfig) -> Result<TaskInstance> {
    let data = generate_data(kind, seed, cfg)?;
    instance_from_data(seed, &data)
}

pub fn instance_from_data(seed: u64, data: &TaskData) -> Result<TaskInstance> {
    Ok(TaskInstance {
        kind: data.kind(),
        seed,
        prompt: render_prompt(data),
        answer: canonical_answer(data)?,
        tags: tags(data),
    })
}

/// The textual problem statement. Everything needed to solve the problem is
/// in the returned text.
pub fn render_prompt(data: &TaskData) -> String {
    match data {
        TaskData::Arc1d(d) => arc1d::render(d),
        TaskData::Matrix(d) => matrix::render(d),
        TaskData::WordSorting { words } => words::render_sorting(words),
        TaskData::SpellBackward { word } => words::render_backward(word),
        TaskData::Puzzle24 { data, .. } => puzzle24::render(data),
    }
}

pub fn canonical_answer(data: &TaskData) -> Result<String> {
    Ok(match data {
        TaskData::Arc1d(d) => arc1d::answer(d),
        TaskData::Matrix(d) => matrix::answer(d)?,
        TaskData::WordSorting { words } => words::sort_words(words),
        TaskData::SpellBackward { word } => words::reverse_word(word),
        TaskData::Puzzle24 { solution, .. } => solution.clone(),
    })
}

/// Deterministic worked-solution text used for few-shot exemplars.
pub fn reasoning_trace(data: &TaskData) -> String {
    match data {
        TaskData::Arc1d(d) => arc1d::trace(d),
        TaskData::Matrix(d) => matrix::trace(d),
        TaskData::WordSorting { words } => words::sorting_trace(words),
        TaskData::SpellBackward { word } => words::backward_trace(word),
        TaskData::Puzzle24 { steps, solution, .. } => puzzle24::trace(&puzzle24::Solution {
            expression: solution.clone(),
            steps: steps.clone(),
        }),
    }
}

fn bucket(n: usize, small: usize) -> &'static str {
    if n <= small {
        "short"
    } else {
        "long"
    }
}

/// Kind name plus coarse structural tags.
pub fn tags(data: &TaskData) -> Vec<String> {
    let kind = data.kind().name().to_string();
    let extra = match data {
        TaskData::Arc1d(d) => format!("rule:{}", d.rule.name()),
        TaskData::Matrix(d) => format!("ops:{}", bucket(d.ops.len(), 3)),
        TaskData::WordSorting { words } => format!("words:{}", bucket(words.len(), 5)),
        TaskData::SpellBackward { word } => format!("length:{}", bucket(word.chars().count(), 5)),
        TaskData::Puzzle24 { solution, .. } => {
            if solution.contains('/') {
                "uses:division".to_string()
            } else {
                "uses:no_division".to_string()
            }
        }
    };
    vec![kind, extra]
}

/// Trim, normalize line endings, and collapse runs of spaces on every line.
pub fn normalize_answer(s: &str) -> String {
    s.replace("\r\n", "\n")
        .trim()
        .lines()
        .map(|line| line.split([' ', '\t']).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// 1.0 for a correct answer and 0.0 otherwise.
///
/// Matching is exact after [`normalize_answer`] and case-sensitive. The 24
/// game accepts any expression over the four numbers that evaluates to 24.
pub fn verify(instance: &TaskInstance, answer_text: &str) -> f64 {
    let given = normalize_answer(answer_text);
    let ok = match instance.kind {
        TaskKind::Puzzle24 => puzzle24::numbers_from_prompt(&instance.prompt)
            .map(|nums| puzzle24::check_expression(&nums, &given))
            .unwrap_or(false),
        _ => given == normalize_answer(&instance.answer),
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_self_verifies() {
        let cfg = TaskConfig::default();
        for kind in TaskKind::ALL {
            for seed in 0..50 {
                let inst = generate(kind, seed, &cfg).unwrap();
                assert_eq!(inst.kind, kind);
                assert_eq!(verify(&inst, &inst.answer), 1.0, "{kind} seed {seed}");
                assert_eq!(inst.tags[0], kind.name());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig::default();
        for kind in TaskKind::ALL {
            let a = serde_json::to_string(&generate(kind, 42, &cfg).unwrap()).unwrap();
            let b = serde_json::to_string(&generate(kind, 42, &cfg).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = TaskConfig::default();
        cfg.word_sorting.min_words = 11;
        assert!(matches!(
            generate(TaskKind::WordSorting, 0, &cfg),
            Err(CbrlError::InvalidConfig(_))
        ));
        let mut cfg = TaskConfig::default();
        cfg.arc1d.num_train = 4;
        assert!(generate(TaskKind::Arc1d, 0, &cfg).is_err());
        let mut cfg = TaskConfig::default();
        cfg.puzzle24.min_value = 9;
        cfg.puzzle24.max_value = 2;
        assert!(generate(TaskKind::Puzzle24, 0, &cfg).is_err());
    }

    #[test]
    fn impossible_puzzle_range_exhausts_budget() {
        let mut cfg = TaskConfig::default();
        cfg.puzzle24.min_value = 1;
        cfg.puzzle24.max_value = 1;
        assert!(matches!(
            generate(TaskKind::Puzzle24, 0, &cfg),
            Err(CbrlError::ExhaustedResample { .. })
        ));
    }

    #[test]
    fn spell_backward_cat() {
        let data = TaskData::SpellBackward { word: "cat".into() };
        let inst = instance_from_data(0, &data).unwrap();
        assert_eq!(inst.answer, "tac");
        assert!(inst.prompt.contains("cat") && inst.prompt.contains("backward"));
        assert_eq!(verify(&inst, "tac"), 1.0);
        assert_eq!(verify(&inst, "  tac \n"), 1.0);
        assert_eq!(verify(&inst, "cat"), 0.0);
        assert_eq!(verify(&inst, "TAC"), 0.0);
    }

    #[test]
    fn worked_word_list_answers() {
        let words: Vec<String> = "violates, yes, already, completing, pages, duty, his, EXPRESS, duly"
            .split(", ")
            .map(String::from)
            .collect();
        let inst = instance_from_data(0, &TaskData::WordSorting { words: words.clone() }).unwrap();
        assert!(words.iter().all(|w| inst.prompt.contains(w.as_str())));
        assert_eq!(
            verify(&inst, "EXPRESS, already, completing, duly, duty, his, pages, violates, yes"),
            1.0
        );
        assert_eq!(
            verify(&inst, "EXPRESS, already, completing, duty, his, violates, pages, duly, yes"),
            0.0
        );
    }

    #[test]
    fn transpose_instance_verifies_rendered_matrix() {
        let data = TaskData::Matrix(MatrixData {
            grid: vec![vec![1, 2], vec![3, 4]],
            ops: vec![MatrixOp::Transpose],
        });
        let inst = instance_from_data(0, &data).unwrap();
        assert_eq!(verify(&inst, "1 3\n2 4"), 1.0);
        assert_eq!(verify(&inst, "1  3 \n 2 4\n"), 1.0);
        assert_eq!(verify(&inst, "1 2\n3 4"), 0.0);
    }

    #[test]
    fn arc_prompt_lists_pairs_then_test_input() {
        let mut cfg = TaskConfig::default();
        cfg.arc1d.num_train = 2;
        let data = generate_data(TaskKind::Arc1d, 5, &cfg).unwrap();
        let text = render_prompt(&data);
        assert_eq!(text.matches("Input:").count(), 2);
        assert_eq!(text.matches("Output:").count(), 2);
        let test_at = text.find("Test input:").unwrap();
        assert!(text.rfind("Output:").unwrap() < test_at);
    }

    #[test]
    fn puzzle_answers_checked_by_value() {
        let cfg = TaskConfig::default();
        let inst = generate(TaskKind::Puzzle24, 3, &cfg).unwrap();
        assert_eq!(verify(&inst, &inst.answer), 1.0);
        assert_eq!(verify(&inst, "24"), 0.0);
    }
}
