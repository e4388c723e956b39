//! Infix arithmetic expressions over `+`, `-`, `*` with standard precedence
//! and left association, no parentheses. Used by the micro-Countdown task:
//! the verifier parses a completion's expression segment, and the generator
//! brute-forces all expressions over a number multiset.

use crate::vocab::{TokenId, Vocab};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprTok {
    Num(i64),
    Plus,
    Minus,
    Star,
}

/// A successfully parsed expression: the numeric literals in source order and
/// the evaluated value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExpr {
    pub literals: Vec<i64>,
    pub value: i64,
}

/// Lex an expression from token ids; digit runs form multi-digit literals.
/// Returns `None` on any non-digit, non-operator token.
pub fn lex_ids(ids: &[TokenId], vocab: &Vocab) -> Option<Vec<ExprTok>> {
    let plus = vocab.lookup("+")?;
    let minus = vocab.lookup("-")?;
    let star = vocab.lookup("*")?;
    let mut toks = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if let Some(d) = vocab.as_digit(ids[i]) {
            let mut value: i64 = d as i64;
            let mut len = 1;
            i += 1;
            while i < ids.len() {
                match vocab.as_digit(ids[i]) {
                    Some(d2) if len < 18 => {
                        value = value * 10 + d2 as i64;
                        len += 1;
                        i += 1;
                    }
                    Some(_) => return None, // literal too long
                    None => break,
                }
            }
            toks.push(ExprTok::Num(value));
        } else if ids[i] == plus {
            toks.push(ExprTok::Plus);
            i += 1;
        } else if ids[i] == minus {
            toks.push(ExprTok::Minus);
            i += 1;
        } else if ids[i] == star {
            toks.push(ExprTok::Star);
            i += 1;
        } else {
            return None;
        }
    }
    Some(toks)
}

/// Lex an expression from a string like `"2*3+4"`.
pub fn lex_str(s: &str) -> Option<Vec<ExprTok>> {
    let mut toks = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            '0'..='9' => {
                let mut value: i64 = 0;
                let mut len = 0;
                while let Some(&d) = chars.peek() {
                    if let Some(v) = d.to_digit(10) {
                        if len >= 18 {
                            return None;
                        }
                        value = value * 10 + v as i64;
                        len += 1;
                        chars.next();
                    } else {
                        break;
                    }
                }
                toks.push(ExprTok::Num(value));
            }
            '+' => {
                toks.push(ExprTok::Plus);
                chars.next();
            }
            '-' => {
                toks.push(ExprTok::Minus);
                chars.next();
            }
            '*' => {
                toks.push(ExprTok::Star);
                chars.next();
            }
            _ => return None,
        }
    }
    Some(toks)
}

/// Evaluate a lexed expression. `*` binds tighter than `+`/`-`; both levels
/// associate left. All arithmetic is checked; overflow parses as invalid.
pub fn eval_toks(toks: &[ExprTok]) -> Option<ParsedExpr> {
    let mut iter = toks.iter().copied().peekable();
    let mut literals = Vec::new();

    let next_num = |iter: &mut std::iter::Peekable<std::iter::Copied<std::slice::Iter<ExprTok>>>,
                        literals: &mut Vec<i64>|
     -> Option<i64> {
        match iter.next() {
            Some(ExprTok::Num(n)) => {
                literals.push(n);
                Some(n)
            }
            _ => None,
        }
    };

    let mut total: i64 = 0;
    let mut pending = ExprTok::Plus;
    let mut term = next_num(&mut iter, &mut literals)?;
    loop {
        match iter.next() {
            None => {
                total = apply(total, pending, term)?;
                return Some(ParsedExpr { literals, value: total });
            }
            Some(ExprTok::Star) => {
                let n = next_num(&mut iter, &mut literals)?;
                term = term.checked_mul(n)?;
            }
            Some(op @ (ExprTok::Plus | ExprTok::Minus)) => {
                total = apply(total, pending, term)?;
                pending = op;
                term = next_num(&mut iter, &mut literals)?;
            }
            Some(ExprTok::Num(_)) => return None, // two numbers in a row
        }
    }
}

fn apply(total: i64, op: ExprTok, term: i64) -> Option<i64> {
    match op {
        ExprTok::Plus => total.checked_add(term),
        ExprTok::Minus => total.checked_sub(term),
        _ => None,
    }
}

/// Parse and evaluate an expression given as token ids.
pub fn parse_ids(ids: &[TokenId], vocab: &Vocab) -> Option<ParsedExpr> {
    let toks = lex_ids(ids, vocab)?;
    eval_toks(&toks)
}

/// Parse and evaluate an expression given as a string.
pub fn parse_str(s: &str) -> Option<ParsedExpr> {
    let toks = lex_str(s)?;
    eval_toks(&toks)
}

/// Brute-force every expression that uses each of `numbers` exactly once with
/// operators `+`, `-`, `*`: all permutations times all operator assignments.
/// Returns value -> sorted set of expression strings.
pub fn enumerate_solutions(numbers: &[u8]) -> BTreeMap<i64, BTreeSet<String>> {
    let mut out: BTreeMap<i64, BTreeSet<String>> = BTreeMap::new();
    let mut perm: Vec<u8> = numbers.to_vec();
    permute(&mut perm, 0, &mut |p| {
        let k = p.len();
        let ops = ['+', '-', '*'];
        let slots = k - 1;
        let combos = 3usize.pow(slots as u32);
        for mask in 0..combos {
            let mut s = String::new();
            let mut m = mask;
            for (i, &n) in p.iter().enumerate() {
                if i > 0 {
                    s.push(ops[m % 3]);
                    m /= 3;
                }
                s.push_str(&n.to_string());
            }
            if let Some(parsed) = parse_str(&s) {
                out.entry(parsed.value).or_default().insert(s);
            }
        }
    });
    out
}

fn permute(xs: &mut Vec<u8>, k: usize, f: &mut impl FnMut(&[u8])) {
    if k == xs.len() {
        f(xs);
        return;
    }
    // dedupe repeated values at each position so identical permutations of a
    // multiset are visited once
    let mut seen = BTreeSet::new();
    for i in k..xs.len() {
        if !seen.insert(xs[i]) {
            continue;
        }
        xs.swap(k, i);
        permute(xs, k + 1, f);
        xs.swap(k, i);
    }
}
