//! Chat composition with and without exemplars, answer extraction, and
//! reward shaping.

use serde::{Deserialize, Serialize};

use crate::bank::BankEntry;
use crate::error::{CbrlError, Result};
use crate::tasks::{self, TaskInstance};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// The DeepSeek-Zero developer prompt.
pub const DEEPSEEK_ZERO_SYSTEM_PROMPT: &str = "A conversation between User and Assistant. The user asks a
question, and the Assistant solves it. The assistant first
thinks about the reasoning process in the mind and then
provides the user with the answer. The reasoning process
and answer are enclosed within <think> </think> and
<answer> </answer> tags, respectively, i.e.,

<think> reasoning process here </think>
<answer>answer here</answer>

Do not explain your reasoning inside the answer tags,
provide only the final answer. When an example is provided,
you should strictly follow the format of the output/answer
in that example.";

/// A one-line format instruction for small context windows.
pub const SHORT_SYSTEM_PROMPT: &str = "Reason in <think> </think>, then answer in <answer> </answer>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub turns: Vec<Turn>,
}

impl ChatPrompt {
    /// The final user turn.
    pub fn query(&self) -> Option<&str> {
        self.turns
            .last()
            .filter(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
    }

    pub fn exemplar_count(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }
}

/// How exemplars are laid out in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarLayout {
    /// Prior user/assistant exchanges.
    #[default]
    ChatPairs,
    /// Exemplars concatenated ahead of the query inside the single user turn.
    RawConcat,
}

/// The assistant text of a solved exemplar.
pub fn exemplar_response(entry: &BankEntry) -> String {
    format!(
        "{THINK_OPEN}{}{THINK_CLOSE}\n{ANSWER_OPEN}{}{ANSWER_CLOSE}",
        entry.reasoning, entry.answer
    )
}

pub fn compose(query: &str, exemplars: &[&BankEntry], inject: bool, system_prompt: &str) -> ChatPrompt {
    compose_with_layout(query, exemplars, inject, system_prompt, ExemplarLayout::ChatPairs)
}

pub fn compose_with_layout(
    query: &str,
    exemplars: &[&BankEntry],
    inject: bool,
    system_prompt: &str,
    layout: ExemplarLayout,
) -> ChatPrompt {
    let mut turns = vec![Turn {
        role: Role::System,
        content: system_prompt.to_string(),
    }];
    let use_exemplars = inject && !exemplars.is_empty();
    match layout {
        ExemplarLayout::ChatPairs => {
            if use_exemplars {
                for e in exemplars {
                    turns.push(Turn {
                        role: Role::User,
                        content: e.question.clone(),
                    });
                    turns.push(Turn {
                        role: Role::Assistant,
                        content: exemplar_response(e),
                    });
                }
            }
            turns.push(Turn {
                role: Role::User,
                content: query.to_string(),
            });
        }
        ExemplarLayout::RawConcat => {
            let mut content = String::new();
            if use_exemplars {
                for e in exemplars {
                    content.push_str(&e.question);
                    content.push('\n');
                    content.push_str(&exemplar_response(e));
                    content.push_str("\n\n");
                }
            }
            content.push_str(query);
            turns.push(Turn {
                role: Role::User,
                content,
            });
        }
    }
    ChatPrompt { turns }
}

/// Contents of the last `<answer>...</answer>` block, trimmed.
pub fn extract_answer(response: &str) -> Option<String> {
    let close = response.rfind(ANSWER_CLOSE)?;
    let open = response[..close].rfind(ANSWER_OPEN)?;
    Some(response[open + ANSWER_OPEN.len()..close].trim().to_string())
}

/// Exactly one think block then exactly one answer block, with only
/// whitespace around and between them.
pub fn is_well_formatted(response: &str) -> bool {
    let tags = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
    if tags.iter().any(|t| response.matches(t).count() != 1) {
        return false;
    }
    let pos: Vec<usize> = tags.iter().map(|t| response.find(t).unwrap()).collect();
    if !pos.windows(2).all(|w| w[0] < w[1]) {
        return false;
    }
    let before = &response[..pos[0]];
    let between = &response[pos[1] + THINK_CLOSE.len()..pos[2]];
    let after = &response[pos[3] + ANSWER_CLOSE.len()..];
    [before, between, after].iter().all(|s| s.trim().is_empty())
}

/// Reward weights. Components are additive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub format_bonus: f64,
    pub answer_reward: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            format_bonus: 0.2,
            answer_reward: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.format_bonus < 0.0 || self.answer_reward < 0.0 {
            return Err(CbrlError::config("reward components must be non-negative"));
        }
        Ok(())
    }
}

/// 0.2 for a well-formatted response, else 0.0.
pub fn format_reward(response: &str) -> f64 {
    if is_well_formatted(response) {
        RewardSpec::default().format_bonus
    } else {
        0.0
    }
}

/// Format bonus plus answer reward. The answer is only read from a
/// well-formatted response, so the reachable values under the default spec
/// are 0.0, 0.2 and 1.2.
pub fn total_reward(instance: &TaskInstance, response: &str, spec: &RewardSpec) -> f64 {
    if !is_well_formatted(response) {
        return 0.0;
    }
    let correct = extract_answer(response)
        .map(|a| tasks::verify(instance, &a))
        .unwrap_or(0.0);
    spec.format_bonus + spec.answer_reward * correct
}

/// Partial credit for passing tests plus a bonus when all pass.
pub fn test_pass_reward(passed: usize, total: usize, base_weight: f64, perfect_bonus: f64) -> Result<f64> {
    if total == 0 || passed > total {
        return Err(CbrlError::InvalidCounts { passed, total });
    }
    let bonus = if passed == total { perfect_bonus } else { 0.0 };
    Ok(passed as f64 / total as f64 * base_weight + bonus)
}

/// Runs a candidate against test cases and counts passes.
pub trait TestExecutor {
    fn run(&self, candidate: &str) -> (usize, usize);
}

/// [`test_pass_reward`] over whatever an executor reports.
pub fn execution_reward(
    executor: &dyn TestExecutor,
    candidate: &str,
    base_weight: f64,
    perfect_bonus: f64,
) -> Result<f64> {
    let (passed, total) = executor.run(candidate);
    test_pass_reward(passed, total, base_weight, perfect_bonus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{instance_from_data, TaskData};

    fn entry(q: &str, r: &str, a: &str) -> BankEntry {
        BankEntry {
            question: q.into(),
            reasoning: r.into(),
            answer: a.into(),
            tags: vec![],
        }
    }

    #[test]
    fn composition_shapes() {
        let e1 = entry("Spell this word backward: sun", "n,u,s", "nus");
        let e2 = entry("Spell this word backward: dog", "g,o,d", "god");
        let plain = compose("q", &[&e1, &e2], false, "sys");
        assert_eq!(plain.turns.len(), 2);
        let inj = compose("q", &[&e1, &e2], true, "sys");
        assert_eq!(inj.turns.len(), 6);
        let roles: Vec<Role> = inj.turns.iter().map(|t| t.role).collect();
        assert_eq!(
            roles,
            [Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User]
        );
        assert_eq!(inj.turns[2].content, "<think>n,u,s</think>\n<answer>nus</answer>");
        assert_eq!(inj.query(), Some("q"));
        assert_eq!(compose("q", &[], true, "sys"), plain);
    }

    #[test]
    fn raw_layout_keeps_one_user_turn() {
        let e1 = entry("Q1", "r", "a");
        let p = compose_with_layout("target", &[&e1], true, "sys", ExemplarLayout::RawConcat);
        assert_eq!(p.turns.len(), 2);
        assert!(p.turns[1].content.starts_with("Q1\n"));
        assert!(p.turns[1].content.ends_with("target"));
    }

    #[test]
    fn extraction() {
        assert_eq!(extract_answer("<think>x</think><answer>42</answer>").as_deref(), Some("42"));
        assert_eq!(extract_answer("no tags here"), None);
        assert_eq!(extract_answer("<answer>a</answer><answer>b</answer>").as_deref(), Some("b"));
        assert_eq!(extract_answer("<answer>a</answer><answer>b").as_deref(), Some("a"));
        assert_eq!(extract_answer("</answer><answer>"), None);
    }

    #[test]
    fn formatting_rules() {
        assert_eq!(format_reward("<think>r</think><answer>a</answer>"), 0.2);
        assert_eq!(format_reward(" <think>r</think>\n<answer>a</answer>\n"), 0.2);
        assert_eq!(format_reward("<answer>a</answer>"), 0.0);
        assert_eq!(format_reward("<think>r</think><answer>a</answer> trailing"), 0.0);
        assert_eq!(format_reward("<answer>a</answer><think>r</think>"), 0.0);
        assert_eq!(format_reward("<think>r</think>x<answer>a</answer>"), 0.0);
        assert_eq!(format_reward("<think>r</think><answer>a</answer><answer>b</answer>"), 0.0);
    }

    #[test]
    fn total_reward_cases() {
        let inst = instance_from_data(0, &TaskData::SpellBackward { word: "cat".into() }).unwrap();
        let spec = RewardSpec::default();
        assert!((total_reward(&inst, "<think>t,a,c</think><answer>tac</answer>", &spec) - 1.2).abs() < 1e-12);
        assert_eq!(total_reward(&inst, "<think>hm</think><answer>cat</answer>", &spec), 0.2);
        assert_eq!(total_reward(&inst, "tac", &spec), 0.0);
        assert_eq!(total_reward(&inst, "<answer>tac</answer>", &spec), 0.0);
    }

    #[test]
    fn test_pass_values() {
        assert!((test_pass_reward(2, 5, 1.0, 2.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(test_pass_reward(5, 5, 1.0, 2.0).unwrap(), 3.0);
        assert_eq!(test_pass_reward(0, 5, 1.0, 2.0).unwrap(), 0.0);
        assert!(test_pass_reward(6, 5, 1.0, 2.0).is_err());
        assert!(test_pass_reward(0, 0, 1.0, 2.0).is_err());
    }

    struct Fixed(usize, usize);

    impl TestExecutor for Fixed {
        fn run(&self, _candidate: &str) -> (usize, usize) {
            (self.0, self.1)
        }
    }

    #[test]
    fn executor_feeds_combinator() {
        assert_eq!(execution_reward(&Fixed(5, 5), "solve:{x}", 1.0, 2.0).unwrap(), 3.0);
        assert!((execution_reward(&Fixed(2, 5), "", 1.0, 2.0).unwrap() - 0.4).abs() < 1e-15);
    }
}
