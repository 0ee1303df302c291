//! Word sorting and backward spelling over random words.

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::RngStream;

/// Probability that a generated word starts with an uppercase letter.
pub const CAPITALIZE_PROB: f64 = 0.1;

/// Uniform random lowercase letters; the first letter is uppercased with
/// probability [`CAPITALIZE_PROB`].
pub fn random_word(rng: &mut RngStream, min_len: usize, max_len: usize) -> String {
    let len = rng.range_inclusive(min_len as i64, max_len as i64) as usize;
    let mut w: Vec<u8> = (0..len).map(|_| b'a' + rng.below(26) as u8).collect();
    if rng.bernoulli(CAPITALIZE_PROB) {
        w[0] = w[0].to_ascii_uppercase();
    }
    String::from_utf8(w).expect("ascii")
}

fn check_range(task: &str, name: &str, lo: usize, hi: usize) -> Result<()> {
    if lo > hi {
        return Err(CbrlError::config(format!("{task}: min_{name} {lo} > max_{name} {hi}")));
    }
    if lo == 0 {
        return Err(CbrlError::config(format!("{task}: min_{name} must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSortingConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_length: usize,
    pub max_word_length: usize,
}

impl Default for WordSortingConfig {
    fn default() -> Self {
        Self {
            min_words: 3,
            max_words: 10,
            min_word_length: 3,
            max_word_length: 12,
        }
    }
}

impl WordSortingConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("word_sorting", "words", self.min_words, self.max_words)?;
        check_range("word_sorting", "word_length", self.min_word_length, self.max_word_length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpellBackwardConfig {
    pub min_word_len: usize,
    pub max_word_len: usize,
}

impl Default for SpellBackwardConfig {
    fn default() -> Self {
        Self {
            min_word_len: 3,
            max_word_len: 10,
        }
    }
}

impl SpellBackwardConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("spell_backward", "word_len", self.min_word_len, self.max_word_len)
    }
}

pub fn generate_word_list(rng: &mut RngStream, cfg: &WordSortingConfig) -> Vec<String> {
    let n = rng.range_inclusive(cfg.min_words as i64, cfg.max_words as i64) as usize;
    (0..n)
        .map(|_| random_word(rng, cfg.min_word_length, cfg.max_word_length))
        .collect()
}

/// Ascending code-point order (what `str`'s `Ord` gives for UTF-8).
pub fn sort_words(words: &[String]) -> String {
    let mut sorted = words.to_vec();
    sorted.sort();
    sorted.join(", ")
}

pub fn render_sorting(words: &[String]) -> String {
    format!("Sort these words in ascending ASCII order: {}", words.join(", "))
}

pub fn sorting_trace(words: &[String]) -> String {
    let firsts: Vec<String> = words
        .iter()
        .map(|w| {
            let c = w.chars().next().unwrap_or(' ');
            format!("{c}={}", c as u32)
        })
        .collect();
    let mut codes: Vec<u32> = words
        .iter()
        .filter_map(|w| w.chars().next().map(|c| c as u32))
        .collect();
    codes.sort_unstable();
    format!(
        "Compare by code points, left to right. First characters: {}. Ascending: {}. Ties are broken by the next character.",
        firsts.join(", "),
        codes.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
    )
}

pub fn reverse_word(word: &str) -> String {
    word.chars().rev().collect()
}

pub fn render_backward(word: &str) -> String {
    format!("Spell this word backward: {word}")
}

/// The characters of the word from last to first, comma separated.
pub fn backward_trace(word: &str) -> String {
    word.chars()
        .rev()
        .map(String::from)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_case_list_sorts_by_code_point() {
        let words: Vec<String> = "violates yes already completing pages duty his EXPRESS duly"
            .split(' ')
            .map(String::from)
            .collect();
        assert_eq!(
            sort_words(&words),
            "EXPRESS, already, completing, duly, duty, his, pages, violates, yes"
        );
    }

    #[test]
    fn backward() {
        assert_eq!(reverse_word("cat"), "tac");
        assert_eq!(backward_trace("cat"), "t,a,c");
    }

    #[test]
    fn words_respect_lengths() {
        let mut rng = RngStream::new(3);
        let mut caps = 0;
        for _ in 0..2000 {
            let w = random_word(&mut rng, 3, 5);
            assert!((3..=5).contains(&w.len()));
            assert!(w[1..].chars().all(|c| c.is_ascii_lowercase()));
            caps += w.chars().next().unwrap().is_ascii_uppercase() as usize;
        }
        // 10% of 2000 with a generous band
        assert!((120..=280).contains(&caps), "{caps}");
    }
}
