//! Character-level vocabulary with structural and tag tokens.
//!
//! Token ids, in order:
//!
//! | ids      | symbols                                      |
//! |----------|----------------------------------------------|
//! | 0..=6    | PAD, BOS, EOS, UNK, SYS, USR, AST            |
//! | 7..=10   | `<think>`, `</think>`, `<answer>`, `</answer>` |
//! | 11       | newline                                      |
//! | 12..=106 | printable ASCII 0x20..=0x7E                  |
//!
//! The four tag strings always encode to their single tokens.

use crate::prompting::{ChatPrompt, Role, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SYS: TokenId = 4;
pub const USR: TokenId = 5;
pub const AST: TokenId = 6;
const TAG_BASE: TokenId = 7;
const NEWLINE: TokenId = 11;
const ASCII_BASE: TokenId = 12;

pub const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
pub const VOCAB_SIZE: usize = ASCII_BASE as usize + 95;

pub fn role_token(role: Role) -> TokenId {
    match role {
        Role::System => SYS,
        Role::User => USR,
        Role::Assistant => AST,
    }
}

pub fn is_structural(t: TokenId) -> bool {
    t < TAG_BASE
}

/// Encodes free text.
pub fn encode_text(text: &str, out: &mut Vec<TokenId>) {
    let mut rest = text;
    'outer: while let Some(c) = rest.chars().next() {
        if c == '<' {
            for (i, tag) in TAGS.iter().enumerate() {
                if rest.starts_with(tag) {
                    out.push(TAG_BASE + i as TokenId);
                    rest = &rest[tag.len()..];
                    continue 'outer;
                }
            }
        }
        out.push(match c {
            '\n' => NEWLINE,
            ' '..='~' => ASCII_BASE + (c as u32 - 0x20),
            _ => UNK,
        });
        rest = &rest[c.len_utf8()..];
    }
}

/// BOS, then each turn as its role token followed by its content. Assistant
/// turns with content end in EOS; an empty assistant turn is the bare role
/// token.
pub fn encode(prompt: &ChatPrompt) -> Vec<TokenId> {
    let mut out = vec![BOS];
    for turn in &prompt.turns {
        out.push(role_token(turn.role));
        encode_text(&turn.content, &mut out);
        if turn.role == Role::Assistant && !turn.content.is_empty() {
            out.push(EOS);
        }
    }
    out
}

/// The prompt followed by an open assistant turn.
pub fn encode_for_generation(prompt: &ChatPrompt) -> Vec<TokenId> {
    let mut out = encode(prompt);
    out.push(AST);
    out
}

/// Text of the content tokens; structural tokens are dropped.
pub fn decode(tokens: &[TokenId]) -> String {
    let mut s = String::new();
    for &t in tokens {
        match t {
            UNK => s.push('\u{FFFD}'),
            t if is_structural(t) => {}
            t if t < NEWLINE => s.push_str(TAGS[(t - TAG_BASE) as usize]),
            NEWLINE => s.push('\n'),
            t if (t as usize) < VOCAB_SIZE => s.push(char::from_u32(0x20 + t - ASCII_BASE).unwrap()),
            _ => s.push('\u{FFFD}'),
        }
    }
    s
}

pub fn symbol(t: TokenId) -> String {
    match t {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        UNK => "<unk>".into(),
        SYS => "<sys>".into(),
        USR => "<usr>".into(),
        AST => "<ast>".into(),
        _ => decode(&[t]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::Turn;
    use proptest::prelude::*;

    fn prompt(turns: &[(Role, &str)]) -> ChatPrompt {
        ChatPrompt {
            turns: turns
                .iter()
                .map(|(r, c)| Turn {
                    role: *r,
                    content: c.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn symbols_are_a_bijection() {
        let all: Vec<String> = (0..VOCAB_SIZE as TokenId).map(symbol).collect();
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), VOCAB_SIZE);
        for t in 7..VOCAB_SIZE as TokenId {
            let mut v = Vec::new();
            encode_text(&symbol(t), &mut v);
            assert_eq!(v, vec![t]);
        }
    }

    #[test]
    fn tags_are_single_tokens() {
        let mut v = Vec::new();
        encode_text("<think>a</think><answer>b</answer>", &mut v);
        assert_eq!(v.len(), 6);
        assert_eq!(decode(&v), "<think>a</think><answer>b</answer>");
    }

    #[test]
    fn empty_assistant_turn_is_role_token_only() {
        let p = prompt(&[(Role::System, "s"), (Role::User, "q"), (Role::Assistant, "")]);
        let toks = encode(&p);
        assert_eq!(*toks.last().unwrap(), AST);
        assert_eq!(toks, encode_for_generation(&prompt(&[(Role::System, "s"), (Role::User, "q")])));
    }

    #[test]
    fn golden_encoding() {
        let p = prompt(&[(Role::System, "S"), (Role::User, "ab"), (Role::Assistant, "<answer>c</answer>"), (Role::User, "d\n")]);
        assert_eq!(
            encode(&p),
            vec![BOS, SYS, 12 + 51, USR, 12 + 65, 12 + 66, AST, 9, 12 + 67, 10, EOS, USR, 12 + 68, NEWLINE]
        );
    }

    proptest! {
        #[test]
        fn decode_recovers_content(contents in proptest::collection::vec("[ -~\n]{0,20}", 1..5)) {
            let roles = [Role::System, Role::User, Role::Assistant];
            let turns: Vec<(Role, &str)> = contents.iter().enumerate().map(|(i, c)| (roles[i % 3], c.as_str())).collect();
            let p = prompt(&turns);
            prop_assert_eq!(decode(&encode(&p)), contents.concat());
        }

        #[test]
        fn encoding_is_prefix_stable(contents in proptest::collection::vec("[ -~]{0,12}", 1..5), extra in "[ -~]{0,12}") {
            let roles = [Role::User, Role::Assistant];
            let mut turns: Vec<(Role, &str)> = vec![(Role::System, "sys")];
            turns.extend(contents.iter().enumerate().map(|(i, c)| (roles[i % 2], c.as_str())));
            let base = encode(&prompt(&turns));
            turns.push((Role::User, extra.as_str()));
            let longer = encode(&prompt(&turns));
            prop_assert!(longer.starts_with(&base));
        }
    }
}
