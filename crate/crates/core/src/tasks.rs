//! Synthetic task suite: a multi-solution micro-Countdown target task plus
//! copy/reverse/parity retention tasks, with deterministic generators,
//! verifiers, answer extraction, and greedy benchmark scoring.
//!
//! Sequence formats over the shared lab vocabulary:
//!
//! - countdown prompt: `t1 t2 .. = n1 .. nk` (the target's digits, the goal
//!   separator, then the single-digit given numbers); completion: `<ans>`,
//!   an infix expression over the given numbers, `<eos>`. The extracted
//!   answer is the solution expression itself, so answer diversity measures
//!   how many distinct solutions a policy still covers. Ending the prompt
//!   with the numbers keeps the completion's early context windows keyed by
//!   the quantity that determines which expressions are valid.
//! - retention prompt: a task marker (`C`/`R`/`P`) followed by content
//!   digits; completion: `<ans>`, the answer digits, `<eos>`.

use crate::error::{LabError, Result};
use crate::expr;
use crate::policy::{DecodePolicy, Policy, PromptSet};
use crate::rng;
use crate::vocab::{TokenId, TokenSeq, Vocab};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

const GEN_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    CountdownMicro,
    Copy,
    Reverse,
    Parity,
}

impl TaskKind {
    pub fn id(&self) -> &'static str {
        match self {
            TaskKind::CountdownMicro => "countdown_micro",
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Parity => "parity",
        }
    }

    pub fn from_id(s: &str) -> Option<TaskKind> {
        match s {
            "countdown_micro" => Some(TaskKind::CountdownMicro),
            "copy" => Some(TaskKind::Copy),
            "reverse" => Some(TaskKind::Reverse),
            "parity" => Some(TaskKind::Parity),
            _ => None,
        }
    }

    fn marker(&self) -> Option<&'static str> {
        match self {
            TaskKind::Copy => Some("C"),
            TaskKind::Reverse => Some("R"),
            TaskKind::Parity => Some("P"),
            TaskKind::CountdownMicro => None,
        }
    }
}

/// Generation parameters for one task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: Arc<Vocab>,
    pub size: usize,
    pub seed: u64,
    /// Countdown only: how many given numbers per instance.
    pub numbers_per_instance: usize,
    /// Countdown only: inclusive range of the given numbers.
    pub value_range: (u8, u8),
    /// Retention tasks only: content digits per instance.
    pub content_len: usize,
}

impl TaskSpec {
    pub fn countdown(vocab: Arc<Vocab>, size: usize, seed: u64, numbers_per_instance: usize) -> Self {
        TaskSpec {
            kind: TaskKind::CountdownMicro,
            vocab,
            size,
            seed,
            numbers_per_instance,
            value_range: (1, 9),
            content_len: 0,
        }
    }

    pub fn retention(kind: TaskKind, vocab: Arc<Vocab>, size: usize, seed: u64, content_len: usize) -> Self {
        TaskSpec { kind, vocab, size, seed, numbers_per_instance: 0, value_range: (1, 9), content_len }
    }

    fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return Err(LabError::InvalidParameter("task size must be >= 3 (one per split)".into()));
        }
        match self.kind {
            TaskKind::CountdownMicro => {
                if !(2..=4).contains(&self.numbers_per_instance) {
                    return Err(LabError::InvalidParameter(
                        "numbers_per_instance must be in [2,4]".into(),
                    ));
                }
                let (lo, hi) = self.value_range;
                if lo < 1 || hi > 9 || lo > hi {
                    return Err(LabError::InvalidParameter("value_range must lie within [1,9]".into()));
                }
            }
            _ => {
                if !(1..=6).contains(&self.content_len) {
                    return Err(LabError::InvalidParameter("content_len must be in [1,6]".into()));
                }
            }
        }
        Ok(())
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub task_id: String,
    pub prompt: TokenSeq,
    pub reference: TokenSeq,
    pub gold_answer: String,
}

/// Train/val/test splits, pairwise disjoint by prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[Example] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            _ => &[],
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    /// Prompts of a split with ids assigned by position.
    pub fn prompt_set(examples: &[Example]) -> PromptSet {
        PromptSet::from_prompts(examples.iter().map(|e| e.prompt.clone()).collect())
    }

    /// `(prompt, reference)` pairs of a split, the SFT batch format.
    pub fn pairs(examples: &[Example]) -> Vec<(TokenSeq, TokenSeq)> {
        examples.iter().map(|e| (e.prompt.clone(), e.reference.clone())).collect()
    }

    /// Newline-delimited TSV: `task_id, split, prompt ids, reference ids, gold`.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (split, examples) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for e in examples {
                writeln!(
                    f,
                    "{}\t{}\t{}\t{}\t{}",
                    e.task_id,
                    split,
                    e.prompt.to_id_string(),
                    e.reference.to_id_string(),
                    e.gold_answer
                )?;
            }
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut task_id = String::new();
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                return Err(LabError::BadFormat(format!("expected 5 tab-separated fields: {line:?}")));
            }
            let e = Example {
                task_id: parts[0].to_string(),
                prompt: TokenSeq::from_id_string(parts[2])?,
                reference: TokenSeq::from_id_string(parts[3])?,
                gold_answer: parts[4].to_string(),
            };
            if task_id.is_empty() {
                task_id = e.task_id.clone();
            }
            match parts[1] {
                "train" => train.push(e),
                "val" => val.push(e),
                "test" => test.push(e),
                other => return Err(LabError::BadFormat(format!("unknown split {other:?}"))),
            }
        }
        Ok(Dataset { task_id, train, val, test })
    }
}

/// Canonical answer form: integers lose leading zeros (and `-0` collapses to
/// `0`); anything else is the raw symbol concatenation.
pub fn canonicalize_answer(raw: &str) -> String {
    let (sign, digits) = match raw.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", raw),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return raw.to_string();
    }
    let stripped = digits.trim_start_matches('0');
    if stripped.is_empty() {
        return "0".to_string();
    }
    if sign == "-" {
        format!("-{stripped}")
    } else {
        stripped.to_string()
    }
}

/// The token span between the last `<ans>` marker and EOS, canonicalized.
/// `None` when the completion has no marker.
pub fn extract_answer(completion: &TokenSeq, vocab: &Vocab) -> Option<String> {
    let ans = vocab.ans();
    let start = completion.ids.iter().rposition(|&id| id == ans)? + 1;
    let mut raw = String::new();
    for &id in &completion.ids[start..] {
        if id == vocab.eos() {
            break;
        }
        raw.push_str(vocab.symbol(id).unwrap_or("?"));
    }
    Some(canonicalize_answer(&raw))
}

/// Deterministic task verifier. The check is a pure function of
/// `(prompt, completion)` and always returns 0 or 1; malformed input scores
/// 0, never an error.
#[derive(Debug, Clone)]
pub struct Verifier {
    pub task_id: String,
    kind: TaskKind,
    vocab: Arc<Vocab>,
}

impl Verifier {
    pub fn new(kind: TaskKind, vocab: Arc<Vocab>) -> Self {
        Verifier { task_id: kind.id().to_string(), kind, vocab }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn check(&self, prompt: &TokenSeq, completion: &TokenSeq) -> bool {
        match self.kind {
            TaskKind::CountdownMicro => self.check_countdown(prompt, completion),
            _ => self.check_retention(prompt, completion),
        }
    }

    /// `check` as a bounded score in `{0.0, 1.0}`.
    pub fn score(&self, prompt: &TokenSeq, completion: &TokenSeq) -> f64 {
        if self.check(prompt, completion) {
            1.0
        } else {
            0.0
        }
    }

    fn check_countdown(&self, prompt: &TokenSeq, completion: &TokenSeq) -> bool {
        let Some((numbers, target)) = parse_countdown_prompt(prompt, &self.vocab) else {
            return false;
        };
        // expression segment: the span after the last answer marker (from the
        // start when no marker is present), up to EOS
        let start = completion
            .ids
            .iter()
            .rposition(|&id| id == self.vocab.ans())
            .map(|i| i + 1)
            .unwrap_or(0);
        let end = completion.ids[start..]
            .iter()
            .position(|&id| id == self.vocab.eos())
            .map(|i| start + i)
            .unwrap_or(completion.len());
        let Some(parsed) = expr::parse_ids(&completion.ids[start..end], &self.vocab) else {
            return false;
        };
        // each given number used exactly once
        let mut used: Vec<i64> = parsed.literals.clone();
        let mut given: Vec<i64> = numbers.iter().map(|&n| n as i64).collect();
        used.sort_unstable();
        given.sort_unstable();
        used == given && parsed.value == target
    }

    fn check_retention(&self, prompt: &TokenSeq, completion: &TokenSeq) -> bool {
        let Some(gold) = retention_gold(self.kind, prompt, &self.vocab) else {
            return false;
        };
        extract_answer(completion, &self.vocab) == Some(gold)
    }
}

/// Parse a countdown prompt into (given numbers, target value).
pub fn parse_countdown_prompt(prompt: &TokenSeq, vocab: &Vocab) -> Option<(Vec<u8>, i64)> {
    let eq = vocab.lookup("=")?;
    let sep = prompt.ids.iter().position(|&id| id == eq)?;
    if sep == 0 || sep + 1 >= prompt.len() {
        return None;
    }
    let mut target: i64 = 0;
    for &id in &prompt.ids[..sep] {
        let d = vocab.as_digit(id)?;
        target = target.checked_mul(10)?.checked_add(d as i64)?;
    }
    let mut numbers = Vec::with_capacity(prompt.len() - sep - 1);
    for &id in &prompt.ids[sep + 1..] {
        numbers.push(vocab.as_digit(id)?);
    }
    Some((numbers, target))
}

/// The unique correct answer of a retention prompt, derived from the prompt
/// itself: copy repeats the content, reverse reverses it, parity answers the
/// digit-sum mod 2.
pub fn retention_gold(kind: TaskKind, prompt: &TokenSeq, vocab: &Vocab) -> Option<String> {
    let marker = kind.marker()?;
    if prompt.is_empty() || vocab.symbol(prompt.ids[0]) != Some(marker) {
        return None;
    }
    let mut digits = Vec::new();
    for &id in &prompt.ids[1..] {
        digits.push(vocab.as_digit(id)?);
    }
    if digits.is_empty() {
        return None;
    }
    let raw = match kind {
        TaskKind::Copy => digits.iter().map(|d| d.to_string()).collect::<String>(),
        TaskKind::Reverse => digits.iter().rev().map(|d| d.to_string()).collect::<String>(),
        TaskKind::Parity => ((digits.iter().map(|&d| d as u32).sum::<u32>()) % 2).to_string(),
        TaskKind::CountdownMicro => return None,
    };
    Some(canonicalize_answer(&raw))
}

/// Generate a dataset: a pure function of `(kind, seed, size)` plus the
/// kind-specific knobs. Prompts are globally unique, so the three splits are
/// pairwise disjoint.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let examples = match spec.kind {
        TaskKind::CountdownMicro => gen_countdown(spec)?,
        _ => gen_retention(spec)?,
    };
    let n = examples.len();
    let n_val = (n / 5).max(1);
    let n_test = (n / 5).max(1);
    let n_train = n - n_val - n_test;
    let mut it = examples.into_iter();
    let train: Vec<Example> = it.by_ref().take(n_train).collect();
    let val: Vec<Example> = it.by_ref().take(n_val).collect();
    let test: Vec<Example> = it.collect();
    Ok(Dataset { task_id: spec.kind.id().to_string(), train, val, test })
}

fn digits_to_ids(s: &str, vocab: &Vocab) -> Vec<TokenId> {
    s.chars().map(|c| vocab.lookup(&c.to_string()).expect("symbol in vocab")).collect()
}

fn gen_countdown(spec: &TaskSpec) -> Result<Vec<Example>> {
    use rand::Rng;
    let vocab = &spec.vocab;
    let (lo, hi) = spec.value_range;
    let mut out = Vec::with_capacity(spec.size);
    let mut seen: HashSet<TokenSeq> = HashSet::new();
    for attempt in 0..GEN_ATTEMPTS {
        if out.len() == spec.size {
            break;
        }
        let mut r = rng::stream(spec.seed, "gen/countdown", &[attempt as u64]);
        let numbers: Vec<u8> = (0..spec.numbers_per_instance).map(|_| r.gen_range(lo..=hi)).collect();
        let solutions = expr::enumerate_solutions(&numbers);
        // multi-solution instances only, with positive targets
        let eligible: Vec<(&i64, &std::collections::BTreeSet<String>)> =
            solutions.iter().filter(|(v, exprs)| **v >= 1 && exprs.len() >= 2).collect();
        if eligible.is_empty() {
            continue;
        }
        let (target, exprs) = eligible[r.gen_range(0..eligible.len())];
        let target_str = target.to_string();

        let mut prompt_ids: Vec<TokenId> = digits_to_ids(&target_str, vocab);
        prompt_ids.push(vocab.lookup("=").unwrap());
        prompt_ids.extend(numbers.iter().map(|&n| vocab.digit(n)));
        let prompt = TokenSeq::new(prompt_ids);
        if !seen.insert(prompt.clone()) {
            continue;
        }

        let reference_expr = exprs.iter().next().unwrap(); // lexicographically smallest
        let mut ref_ids = vec![vocab.ans()];
        ref_ids.extend(digits_to_ids_mixed(reference_expr, vocab));
        ref_ids.push(vocab.eos());
        let reference = TokenSeq::new(ref_ids);

        out.push(Example {
            task_id: spec.kind.id().to_string(),
            gold_answer: extract_answer(&reference, vocab).expect("reference carries a marker"),
            prompt,
            reference,
        });
    }
    if out.len() < spec.size {
        return Err(LabError::InfeasibleSpec { attempts: GEN_ATTEMPTS });
    }
    Ok(out)
}

fn digits_to_ids_mixed(s: &str, vocab: &Vocab) -> Vec<TokenId> {
    s.chars().map(|c| vocab.lookup(&c.to_string()).expect("expression symbol in vocab")).collect()
}

fn gen_retention(spec: &TaskSpec) -> Result<Vec<Example>> {
    use rand::Rng;
    let vocab = &spec.vocab;
    let marker = spec.kind.marker().expect("retention kind");
    let marker_id = vocab.lookup(marker).unwrap();
    let mut out = Vec::with_capacity(spec.size);
    let mut seen: HashSet<TokenSeq> = HashSet::new();
    for attempt in 0..GEN_ATTEMPTS {
        if out.len() == spec.size {
            break;
        }
        let mut r = rng::stream(spec.seed, &format!("gen/{}", spec.kind.id()), &[attempt as u64]);
        // content digits are 1..9 so canonicalization never rewrites answers
        let content: Vec<u8> = (0..spec.content_len).map(|_| r.gen_range(1..=9)).collect();
        let mut prompt_ids = vec![marker_id];
        prompt_ids.extend(content.iter().map(|&d| vocab.digit(d)));
        let prompt = TokenSeq::new(prompt_ids);
        if !seen.insert(prompt.clone()) {
            continue;
        }
        let gold = retention_gold(spec.kind, &prompt, vocab).expect("well-formed prompt");
        let mut ref_ids = vec![vocab.ans()];
        ref_ids.extend(digits_to_ids(&gold, vocab));
        ref_ids.push(vocab.eos());
        let reference = TokenSeq::new(ref_ids);
        out.push(Example { task_id: spec.kind.id().to_string(), prompt, reference, gold_answer: gold });
    }
    if out.len() < spec.size {
        return Err(LabError::InfeasibleSpec { attempts: GEN_ATTEMPTS });
    }
    Ok(out)
}

/// Mean verifier score over one greedy-decoded completion per prompt.
/// Scoring always decodes greedily; sampling is reserved for the diversity
/// metrics.
pub fn score_benchmark(
    policy: &Policy,
    bench: &[Example],
    verifier: &Verifier,
    decode: &DecodePolicy,
) -> Result<f64> {
    if bench.is_empty() {
        return Err(LabError::EmptyBenchmark);
    }
    let greedy = DecodePolicy::greedy(decode.max_len);
    let mut stream = rng::stream(decode.seed, "score", &[]);
    let mut total = 0.0;
    for e in bench {
        let y = policy.sample(&e.prompt, &greedy, &mut stream);
        total += verifier.score(&e.prompt, &y);
    }
    Ok(total / bench.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<Vocab> {
        Vocab::lab_default()
    }

    fn countdown_prompt(numbers: &[u8], target: i64, vocab: &Vocab) -> TokenSeq {
        let mut ids: Vec<TokenId> =
            target.to_string().chars().map(|c| vocab.lookup(&c.to_string()).unwrap()).collect();
        ids.push(vocab.lookup("=").unwrap());
        ids.extend(numbers.iter().map(|&n| vocab.digit(n)));
        TokenSeq::new(ids)
    }

    fn completion_from(text_toks: &[&str], vocab: &Vocab) -> TokenSeq {
        TokenSeq::new(text_toks.iter().map(|s| vocab.lookup(s).unwrap()).collect())
    }

    #[test]
    fn extract_answer_cases() {
        let v = vocab();
        let c = completion_from(&["2", "*", "3", "<ans>", "1", "0", "<eos>"], &v);
        assert_eq!(extract_answer(&c, &v), Some("10".to_string()));

        let no_marker = completion_from(&["2", "*", "3", "<eos>"], &v);
        assert_eq!(extract_answer(&no_marker, &v), None);

        let leading_zero = completion_from(&["<ans>", "0", "7", "<eos>"], &v);
        assert_eq!(extract_answer(&leading_zero, &v), Some("7".to_string()));

        let zero = completion_from(&["<ans>", "0", "0", "<eos>"], &v);
        assert_eq!(extract_answer(&zero, &v), Some("0".to_string()));
    }

    #[test]
    fn countdown_verifier_accepts_valid_solution() {
        let v = vocab();
        let verifier = Verifier::new(TaskKind::CountdownMicro, v.clone());
        let prompt = countdown_prompt(&[2, 3, 4], 10, &v);
        for sol in [
            vec!["<ans>", "2", "*", "3", "+", "4", "<eos>"],
            vec!["<ans>", "3", "*", "4", "-", "2", "<eos>"],
            vec!["4", "+", "2", "*", "3", "<eos>"], // no marker: segment starts at the front
        ] {
            let c = completion_from(&sol, &v);
            assert!(verifier.check(&prompt, &c), "{sol:?} should verify");
        }
    }

    #[test]
    fn countdown_verifier_enforces_multiset_and_value() {
        let v = vocab();
        let verifier = Verifier::new(TaskKind::CountdownMicro, v.clone());
        let prompt = countdown_prompt(&[2, 3, 4], 10, &v);
        // reuses 3, omits 4
        let reuse = completion_from(&["<ans>", "2", "*", "3", "+", "3", "<eos>"], &v);
        assert!(!verifier.check(&prompt, &reuse));
        // right numbers, wrong value
        let wrong = completion_from(&["<ans>", "2", "+", "3", "+", "4", "<eos>"], &v);
        assert!(!verifier.check(&prompt, &wrong));
        // unparseable expression segment
        let garbage = completion_from(&["<ans>", "+", "*", "2", "<eos>"], &v);
        assert!(!verifier.check(&prompt, &garbage));
        // empty expression (all-EOS completion)
        let empty = TokenSeq::new(vec![v.eos()]);
        assert!(!verifier.check(&prompt, &empty));
    }

    #[test]
    fn retention_verifiers_compute_gold_from_prompt() {
        let v = vocab();
        let copy = Verifier::new(TaskKind::Copy, v.clone());
        let prompt = completion_from(&["C", "4", "7"], &v);
        assert!(copy.check(&prompt, &completion_from(&["<ans>", "4", "7", "<eos>"], &v)));
        assert!(!copy.check(&prompt, &completion_from(&["<ans>", "7", "4", "<eos>"], &v)));
        assert!(!copy.check(&prompt, &completion_from(&["4", "7", "<eos>"], &v)), "no marker fails");

        let rev = Verifier::new(TaskKind::Reverse, v.clone());
        let rprompt = completion_from(&["R", "4", "7"], &v);
        assert!(rev.check(&rprompt, &completion_from(&["<ans>", "7", "4", "<eos>"], &v)));

        let par = Verifier::new(TaskKind::Parity, v.clone());
        let pprompt = completion_from(&["P", "4", "7"], &v);
        assert!(par.check(&pprompt, &completion_from(&["<ans>", "1", "<eos>"], &v)));
        assert!(!par.check(&pprompt, &completion_from(&["<ans>", "0", "<eos>"], &v)));
        // wrong marker for the task
        assert!(!par.check(&prompt, &completion_from(&["<ans>", "1", "<eos>"], &v)));
    }

    #[test]
    fn gen_countdown_instances_are_multi_solution_and_verified() {
        let spec = TaskSpec::countdown(vocab(), 15, 77, 3);
        let ds = gen_task(&spec).unwrap();
        let v = vocab();
        let verifier = Verifier::new(TaskKind::CountdownMicro, v.clone());
        for e in ds.all() {
            let (numbers, target) = parse_countdown_prompt(&e.prompt, &v).unwrap();
            let sols = expr::enumerate_solutions(&numbers);
            assert!(sols[&target].len() >= 2, "instance must have >= 2 solutions");
            assert!(verifier.check(&e.prompt, &e.reference), "reference must verify");
            assert_eq!(extract_answer(&e.reference, &v), Some(e.gold_answer.clone()));
            assert!(e.reference.is_terminal(&v));
            // reference carries the lexicographically smallest solution
            assert_eq!(e.reference.ids[0], v.ans());
            let rendered: String = e.reference.ids[1..e.reference.len() - 1]
                .iter()
                .map(|&id| v.symbol(id).unwrap())
                .collect();
            assert_eq!(&rendered, sols[&target].iter().next().unwrap());
            assert_eq!(e.gold_answer, rendered);
        }
    }

    #[test]
    fn gen_copy_reference_format() {
        let spec = TaskSpec::retention(TaskKind::Copy, vocab(), 6, 3, 2);
        let ds = gen_task(&spec).unwrap();
        let v = vocab();
        for e in ds.all() {
            assert_eq!(e.reference.ids[0], v.ans());
            assert!(e.reference.is_terminal(&v));
            let body: Vec<TokenId> = e.prompt.ids[1..].to_vec();
            assert_eq!(&e.reference.ids[1..1 + body.len()], body.as_slice());
            assert_eq!(e.gold_answer.len(), 2);
        }
    }

    #[test]
    fn gen_is_deterministic_and_splits_disjoint() {
        for seed in [1u64, 9, 1234] {
            let spec = TaskSpec::countdown(vocab(), 12, seed, 2);
            let a = gen_task(&spec).unwrap();
            let b = gen_task(&spec).unwrap();
            assert_eq!(a, b);

            let dir = tempfile::tempdir().unwrap();
            let (pa, pb) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
            a.save_tsv(&pa).unwrap();
            b.save_tsv(&pb).unwrap();
            assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

            let sets: Vec<HashSet<TokenSeq>> = [&a.train, &a.val, &a.test]
                .iter()
                .map(|s| s.iter().map(|e| e.prompt.clone()).collect())
                .collect();
            assert!(sets[0].is_disjoint(&sets[1]));
            assert!(sets[0].is_disjoint(&sets[2]));
            assert!(sets[1].is_disjoint(&sets[2]));
        }
    }

    #[test]
    fn tsv_round_trip() {
        let spec = TaskSpec::retention(TaskKind::Parity, vocab(), 8, 5, 2);
        let ds = gen_task(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        ds.save_tsv(&path).unwrap();
        let loaded = Dataset::load_tsv(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn infeasible_spec_errors_out() {
        // only 9 distinct single-digit copy prompts exist
        let spec = TaskSpec::retention(TaskKind::Copy, vocab(), 10, 0, 1);
        assert!(matches!(gen_task(&spec), Err(LabError::InfeasibleSpec { .. })));
    }

    #[test]
    fn score_benchmark_boundary_cases() {
        let v = vocab();
        let spec = TaskSpec::countdown(v.clone(), 8, 42, 2);
        let ds = gen_task(&spec).unwrap();
        let verifier = Verifier::new(TaskKind::CountdownMicro, v.clone());
        let decode = DecodePolicy::ancestral(12, 0);

        // a policy saturated on the reference tokens of one example scores 1.0
        let one = &ds.train[..1];
        let e = &one[0];
        let mut sat = Policy::new(3, v.clone()).unwrap();
        let mut toks = e.prompt.ids.clone();
        for &tok in &e.reference.ids {
            let ctx = sat.context_window(&toks);
            let mut logits = vec![-1e3; v.size()];
            logits[tok as usize] = 1e3;
            sat.set_row(ctx, logits).unwrap();
            toks.push(tok);
        }
        assert_eq!(score_benchmark(&sat, one, &verifier, &decode).unwrap(), 1.0);

        // an all-EOS policy emits an empty expression and scores 0.0
        let mut eos_pol = Policy::new(1, v.clone()).unwrap();
        for id in 0..v.size() as u32 {
            let mut logits = vec![0.0; v.size()];
            logits[v.eos() as usize] = 1e9;
            eos_pol.set_row(vec![id], logits).unwrap();
        }
        assert_eq!(score_benchmark(&eos_pol, &ds.train, &verifier, &decode).unwrap(), 0.0);

        // accuracy equals a hand count of verify outcomes on a 5-example split
        let five = &ds.train[..5];
        let greedy = DecodePolicy::greedy(decode.max_len);
        let mut s = rng::stream(decode.seed, "score", &[]);
        let mut hand = 0.0;
        for e in five {
            let y = sat.sample(&e.prompt, &greedy, &mut s);
            hand += verifier.score(&e.prompt, &y);
        }
        let auto = score_benchmark(&sat, five, &verifier, &decode).unwrap();
        assert!((auto - hand / 5.0).abs() < 1e-12);

        assert!(matches!(
            score_benchmark(&sat, &[], &verifier, &decode),
            Err(LabError::EmptyBenchmark)
        ));
    }

    #[test]
    fn same_seed_same_bytes_for_retention_tasks() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Parity] {
            let spec = TaskSpec::retention(kind, vocab(), 7, 11, 2);
            assert_eq!(gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
        }
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonicalize_answer("007"), "7");
        assert_eq!(canonicalize_answer("0"), "0");
        assert_eq!(canonicalize_answer("-05"), "-5");
        assert_eq!(canonicalize_answer("-0"), "0");
        assert_eq!(canonicalize_answer("2+3"), "2+3");
        assert_eq!(canonicalize_answer(""), "");
    }
}
