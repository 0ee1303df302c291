//! The 24 game: exact rational search, expression rendering and checking.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::RngStream;

pub const TARGET: i64 = 24;
const RESAMPLE_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];

    pub fn symbol(self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
            Operator::Div => '/',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Operator::Add),
            '-' | '−' => Some(Operator::Sub),
            '*' | '×' | 'x' => Some(Operator::Mul),
            '/' | '÷' => Some(Operator::Div),
            _ => None,
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Operator::Add | Operator::Sub => 1,
            Operator::Mul | Operator::Div => 2,
        }
    }

    fn commutative(self) -> bool {
        matches!(self, Operator::Add | Operator::Mul)
    }

    fn apply(self, a: Rational64, b: Rational64) -> Option<Rational64> {
        match self {
            Operator::Add => Some(a + b),
            Operator::Sub => Some(a - b),
            Operator::Mul => Some(a * b),
            Operator::Div if b.is_zero() => None,
            Operator::Div => Some(a / b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle24Config {
    pub operators: Vec<Operator>,
    pub min_value: i64,
    pub max_value: i64,
}

impl Default for Puzzle24Config {
    fn default() -> Self {
        Self {
            operators: Operator::ALL.to_vec(),
            min_value: 1,
            max_value: 10,
        }
    }
}

impl Puzzle24Config {
    pub fn validate(&self) -> Result<()> {
        if self.min_value > self.max_value {
            return Err(CbrlError::config(format!(
                "puzzle24: min_value {} > max_value {}",
                self.min_value, self.max_value
            )));
        }
        if self.min_value < 0 || self.max_value > 1000 {
            return Err(CbrlError::config("puzzle24: values must lie in [0, 1000]"));
        }
        if self.operators.is_empty() {
            return Err(CbrlError::config("puzzle24: operator set is empty"));
        }
        Ok(())
    }
}

/// An expression tree over the four input numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Num(i64),
    Bin(Operator, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Num(_) => 3,
            Expr::Bin(op, _, _) => op.precedence(),
        }
    }

    fn eval(&self) -> Option<Rational64> {
        match self {
            Expr::Num(n) => Some(Rational64::from_integer(*n)),
            Expr::Bin(op, a, b) => op.apply(a.eval()?, b.eval()?),
        }
    }

    fn literals(&self, out: &mut Vec<i64>) {
        match self {
            Expr::Num(n) => out.push(*n),
            Expr::Bin(_, a, b) => {
                a.literals(out);
                b.literals(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                if a.precedence() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, "{}", op.symbol())?;
                let wrap_right =
                    b.precedence() < p || (b.precedence() == p && !op.commutative());
                if wrap_right {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

/// A found solution: the expression and the intermediate steps that build it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub expression: String,
    pub steps: Vec<String>,
}

fn fmt_ratio(r: Rational64) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn search(
    items: &mut Vec<(Rational64, Expr)>,
    ops: &[Operator],
    steps: &mut Vec<String>,
) -> Option<Expr> {
    if items.len() == 1 {
        return (items[0].0 == Rational64::from_integer(TARGET)).then(|| items[0].1.clone());
    }
    let n = items.len();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for &op in ops {
                if op.commutative() && j < i {
                    continue;
                }
                let (a, ea) = items[i].clone();
                let (b, eb) = items[j].clone();
                let Some(v) = op.apply(a, b) else { continue };
                let mut rest: Vec<(Rational64, Expr)> = items
                    .iter()
                    .enumerate()
                    .filter(|&(idx, _)| idx != i && idx != j)
                    .map(|(_, it)| it.clone())
                    .collect();
                rest.push((v, Expr::Bin(op, Box::new(ea), Box::new(eb))));
                steps.push(format!(
                    "{}{}{}={}",
                    fmt_ratio(a),
                    op.symbol(),
                    fmt_ratio(b),
                    fmt_ratio(v)
                ));
                if let Some(e) = search(&mut rest, ops, steps) {
                    return Some(e);
                }
                steps.pop();
            }
        }
    }
    None
}

/// Exhaustive search over operand orders, operator choices and groupings.
pub fn solve(numbers: &[i64], ops: &[Operator]) -> Option<Solution> {
    let mut items: Vec<(Rational64, Expr)> = numbers
        .iter()
        .map(|&n| (Rational64::from_integer(n), Expr::Num(n)))
        .collect();
    let mut steps = Vec::new();
    let expr = search(&mut items, ops, &mut steps)?;
    Some(Solution {
        expression: expr.to_string(),
        steps,
    })
}

/// Returns an expression using each number exactly once that evaluates to
/// 24 under exact rational arithmetic, or `None` when the numbers admit none.
pub fn solve_puzzle24_oracle(numbers: &[i64; 4]) -> Option<String> {
    solve(numbers, &Operator::ALL).map(|s| s.expression)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle24Data {
    pub numbers: [i64; 4],
}

pub fn generate(rng: &mut RngStream, cfg: &Puzzle24Config) -> Result<(Puzzle24Data, Solution)> {
    for _ in 0..RESAMPLE_BUDGET {
        let numbers = [(); 4].map(|_| rng.range_inclusive(cfg.min_value, cfg.max_value));
        if let Some(sol) = solve(&numbers, &cfg.operators) {
            return Ok((Puzzle24Data { numbers }, sol));
        }
    }
    Err(CbrlError::ExhaustedResample {
        attempts: RESAMPLE_BUDGET,
    })
}

pub fn render(data: &Puzzle24Data) -> String {
    let [a, b, c, d] = data.numbers;
    format!("Make 24 from {a}, {b}, {c}, {d} using + - * / and each number once.")
}

/// Recovers the four numbers from a rendered prompt.
pub fn numbers_from_prompt(prompt: &str) -> Option<[i64; 4]> {
    let body = prompt.strip_prefix("Make 24 from ")?;
    let body = &body[..body.find(" using")?];
    let nums: Vec<i64> = body
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect::<Option<_>>()?;
    nums.try_into().ok()
}

pub fn trace(sol: &Solution) -> String {
    format!("{}. So {}=24", sol.steps.join(", "), sol.expression)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Self {
        Self {
            chars: src.chars().filter(|c| !c.is_whitespace()).collect(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Option<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek().and_then(Operator::from_symbol) {
            if op.precedence() != 1 {
                break;
            }
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expr> {
        let mut lhs = self.atom()?;
        while let Some(op) = self.peek().and_then(Operator::from_symbol) {
            if op.precedence() != 2 {
                break;
            }
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn atom(&mut self) -> Option<Expr> {
        match self.peek()? {
            '(' => {
                self.pos += 1;
                let e = self.expr()?;
                (self.peek()? == ')').then(|| self.pos += 1)?;
                Some(e)
            }
            c if c.is_ascii_digit() => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                if self.pos - start > 4 {
                    return None;
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                s.parse().ok().map(Expr::Num)
            }
            _ => None,
        }
    }
}

/// True iff `answer` is an arithmetic expression over exactly the given
/// numbers (as a multiset) that evaluates to 24.
pub fn check_expression(numbers: &[i64; 4], answer: &str) -> bool {
    let mut p = Parser::new(answer);
    let Some(expr) = p.expr() else { return false };
    if p.pos != p.chars.len() {
        return false;
    }
    let mut lits = Vec::new();
    expr.literals(&mut lits);
    let count = |xs: &[i64]| {
        let mut m = BTreeMap::new();
        for &x in xs {
            *m.entry(x).or_insert(0usize) += 1;
        }
        m
    };
    if count(&lits) != count(numbers) {
        return false;
    }
    expr.eval() == Some(Rational64::from_integer(TARGET))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_are_unsolvable() {
        assert_eq!(solve_puzzle24_oracle(&[1, 1, 1, 1]), None);
    }

    #[test]
    fn sixes_are_solvable() {
        let e = solve_puzzle24_oracle(&[6, 6, 6, 6]).unwrap();
        assert!(check_expression(&[6, 6, 6, 6], &e), "{e}");
    }

    #[test]
    fn needs_fractions() {
        let e = solve_puzzle24_oracle(&[3, 3, 8, 8]).unwrap();
        assert!(check_expression(&[3, 3, 8, 8], &e), "{e}");
        assert!(check_expression(&[3, 3, 8, 8], "8/(3-8/3)"));
    }

    #[test]
    fn checker_rejects_wrong_numbers_and_garbage() {
        assert!(!check_expression(&[6, 6, 6, 6], "6+6+6+6+0"));
        assert!(!check_expression(&[6, 6, 6, 6], "6*4"));
        assert!(!check_expression(&[6, 6, 6, 6], "6+6+6+"));
        assert!(!check_expression(&[6, 6, 6, 6], "hello"));
        assert!(!check_expression(&[1, 2, 3, 4], "4/(2-2)"));
        assert!(check_expression(&[1, 2, 3, 4], "1 × 2 × 3 × 4"));
    }

    #[test]
    fn rendering_uses_minimal_parentheses() {
        let e = Expr::Bin(
            Operator::Div,
            Box::new(Expr::Num(8)),
            Box::new(Expr::Bin(
                Operator::Sub,
                Box::new(Expr::Num(3)),
                Box::new(Expr::Bin(
                    Operator::Div,
                    Box::new(Expr::Num(8)),
                    Box::new(Expr::Num(3)),
                )),
            )),
        );
        assert_eq!(e.to_string(), "8/(3-8/3)");
    }

    #[test]
    fn prompt_numbers_round_trip() {
        let d = Puzzle24Data { numbers: [3, 10, 8, 1] };
        assert_eq!(numbers_from_prompt(&render(&d)), Some([3, 10, 8, 1]));
    }
}
