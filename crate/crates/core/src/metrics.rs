//! Quantitative diagnostics: policy-label divergence (exact and the
//! validation-NLL proxy), KL-to-base, total variation, the Pinsker and
//! KL-drift bound checks, forgetting and cross-task transfer scores, and the
//! Pass@K / SC-Acc / answer-entropy mode-collapse suite.

use crate::error::{LabError, Result};
use crate::policy::{kl_policies, DecodePolicy, KlMode, Policy, PromptSet, SeqDist};
use crate::rng;
use crate::tasks::{extract_answer, Example, Verifier};
use crate::vocab::TokenSeq;
use serde::Serialize;
use std::collections::BTreeMap;

/// Expected forward KL from a supervision distribution `q(.|x)` to the
/// policy: `E_x[ sum_y q(y|x) (log q(y|x) - log pi(y|x)) ]`, with sequence
/// log-probabilities taken in the forced-termination measure at `max_len`.
/// A policy assigning zero mass on q's support yields `f64::INFINITY`.
pub fn pld_exact(
    policy: &Policy,
    q_dists: &BTreeMap<u32, SeqDist>,
    prompts: &PromptSet,
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(LabError::EmptyBenchmark);
    }
    let mut total = 0.0;
    for (pid, prompt) in prompts.iter() {
        let q = q_dists
            .get(&pid)
            .ok_or_else(|| LabError::KeyMismatch(format!("no supervision distribution for prompt {pid}")))?;
        let mut pld_x = 0.0;
        for (seq, qp) in q.iter() {
            let lp = policy.seq_logprob_measure(prompt, seq, max_len);
            // zero policy mass (including exp underflow) on q's support
            if lp.exp() == 0.0 {
                return Ok(f64::INFINITY);
            }
            pld_x += qp * (qp.ln() - lp);
        }
        total += pld_x;
    }
    Ok(total / prompts.len() as f64)
}

/// Held-out proxy for PLD under single-reference supervision: mean reference
/// NLL over the split. Identical, bit for bit, to [`pld_exact`] with a delta
/// distribution on each reference.
pub fn pld_val(policy: &Policy, val_split: &[Example], max_len: usize) -> Result<f64> {
    if val_split.is_empty() {
        return Err(LabError::EmptyBenchmark);
    }
    let mut total = 0.0;
    for e in val_split {
        total -= policy.seq_logprob_measure(&e.prompt, &e.reference, max_len);
    }
    Ok(total / val_split.len() as f64)
}

/// Mean of clamped-negative deltas: `(1/n) * sum min(delta, 0)`. Never
/// positive; invariant to permutation of the benchmarks.
pub fn forgetting_score(deltas: &[f64]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    Ok(deltas.iter().map(|d| d.min(0.0)).sum::<f64>() / deltas.len() as f64)
}

/// Signed mean of per-benchmark deltas `post - base`. Negative means
/// degradation.
pub fn xfer_score(base: &BTreeMap<String, f64>, post: &BTreeMap<String, f64>) -> Result<f64> {
    if base.len() != post.len() || base.keys().any(|k| !post.contains_key(k)) {
        return Err(LabError::KeyMismatch("base and post benchmark sets differ".into()));
    }
    if base.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let sum: f64 = base.iter().map(|(k, b)| post[k] - b).sum();
    Ok(sum / base.len() as f64)
}

/// Total variation distance between two finite distributions on the same
/// support universe: `(1/2) * sum |P - Q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
}

/// `KL(P || Q)` for finite distributions, `f64::INFINITY` on support
/// mismatch, with the usual `0 log 0 = 0` convention.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            kl += a * (a.ln() - b.ln());
        }
    }
    kl
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PinskerCheck {
    pub tv: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Pinsker's inequality: `TV(P,Q) <= sqrt(KL(P||Q)/2)`. An infinite KL makes
/// the bound hold trivially.
pub fn pinsker_check(p: &[f64], q: &[f64]) -> PinskerCheck {
    let tv = tv_distance(p, q);
    let bound = (kl_div(p, q) / 2.0).sqrt();
    PinskerCheck { tv, bound, holds: tv <= bound + 1e-12 }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftBoundReport {
    /// `|E_x E_pi f - E_x E_base f|`, computed by exact enumeration.
    pub lhs: f64,
    /// `E_x[ sqrt(2 KL(pi || base)) ]`.
    pub rhs: f64,
    /// `sqrt(2 E_x[KL])`, one Jensen step looser.
    pub corollary_rhs: f64,
    pub holds: bool,
}

/// Check the KL-drift bound on expected score change, together with its
/// Jensen-relaxed corollary, against exact enumeration. `score(pid, y)` must
/// take values in `[0, 1]`.
pub fn theorem1_check_fn(
    policy: &Policy,
    base: &Policy,
    score: impl Fn(u32, &TokenSeq) -> f64,
    prompts: &PromptSet,
    max_len: usize,
    budget: Option<f64>,
) -> Result<DriftBoundReport> {
    if prompts.is_empty() {
        return Err(LabError::EmptyBenchmark);
    }
    let n = prompts.len() as f64;
    let mut mean_policy = 0.0;
    let mut mean_base = 0.0;
    let mut mean_sqrt_kl = 0.0;
    let mut mean_kl = 0.0;
    for (pid, prompt) in prompts.iter() {
        let dp = policy.enumerate_dist(prompt, max_len, budget)?;
        let db = base.enumerate_dist(prompt, max_len, budget)?;
        mean_policy += dp.expectation(|y| score(pid, y)) / n;
        mean_base += db.expectation(|y| score(pid, y)) / n;
        let mut kl_x = 0.0;
        for (seq, prob) in dp.iter() {
            let qb = db.prob(seq);
            if qb <= 0.0 {
                kl_x = f64::INFINITY;
                break;
            }
            kl_x += prob * (prob.ln() - qb.ln());
        }
        // exact self-enumeration can leave a tiny negative residue
        let kl_x = kl_x.max(0.0);
        mean_sqrt_kl += (2.0 * kl_x).sqrt() / n;
        mean_kl += kl_x / n;
    }
    let lhs = (mean_policy - mean_base).abs();
    let rhs = mean_sqrt_kl;
    let corollary_rhs = (2.0 * mean_kl).sqrt();
    let holds = lhs <= rhs + 1e-9 && rhs <= corollary_rhs + 1e-9;
    Ok(DriftBoundReport { lhs, rhs, corollary_rhs, holds })
}

/// [`theorem1_check_fn`] with a task verifier as the bounded score.
pub fn theorem1_check(
    policy: &Policy,
    base: &Policy,
    verifier: &Verifier,
    prompts: &PromptSet,
    max_len: usize,
    budget: Option<f64>,
) -> Result<DriftBoundReport> {
    let score = |pid: u32, y: &TokenSeq| {
        let prompt = prompts.get(pid).expect("prompt id from the same set");
        verifier.score(prompt, y)
    };
    theorem1_check_fn(policy, base, score, prompts, max_len, budget)
}

/// Expected sequence KL from a fine-tuned policy to the frozen base over
/// evaluation prompts.
pub fn kl_to_base(policy: &Policy, base: &Policy, prompts: &PromptSet, mode: &KlMode) -> Result<f64> {
    kl_policies(policy, base, prompts, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKEstimator {
    /// `1 - C(n-c, k) / C(n, k)`.
    Unbiased,
    /// Fraction of prompts whose first `k` samples contain a correct one.
    AnyOf,
}

/// Unbiased pass@k estimate for one prompt from `n` samples with `c` correct.
pub fn pass_at_k_unbiased(n: usize, c: usize, k: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    if n - c < k {
        return 1.0;
    }
    1.0 - (1..=k).fold(1.0_f64, |acc, i| acc * (n - c - k + i) as f64 / (n - k + i) as f64)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DiversityReport {
    /// k -> mean pass@k over prompts.
    pub pass_at: BTreeMap<usize, f64>,
    /// Majority-vote accuracy over the K samples, ties broken by earliest
    /// sample index.
    pub sc_acc: f64,
    /// Mean Shannon entropy (nats) of the empirical answer distribution;
    /// unextractable answers pool into one bucket.
    pub ans_entropy: f64,
    pub n_samples: usize,
}

/// Draw `k_samples` completions per prompt under one fixed decode policy and
/// compute the coverage/diversity diagnostics. The decode policy is the same
/// regardless of which trainer produced `policy`.
pub fn diversity_suite(
    policy: &Policy,
    bench: &[Example],
    verifier: &Verifier,
    decode: &DecodePolicy,
    k_samples: usize,
    ks: &[usize],
    estimator: PassKEstimator,
) -> Result<DiversityReport> {
    if bench.is_empty() {
        return Err(LabError::EmptyBenchmark);
    }
    if k_samples < 1 {
        return Err(LabError::InvalidParameter("k_samples must be >= 1".into()));
    }
    for &k in ks {
        if k > k_samples || k == 0 {
            return Err(LabError::EstimatorDomain { k, n: k_samples });
        }
    }
    let vocab = policy.vocab().clone();
    let mut pass_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut sc_total = 0.0;
    let mut ent_total = 0.0;
    for (pid, e) in bench.iter().enumerate() {
        let mut correct_flags = Vec::with_capacity(k_samples);
        // answer bucket -> (count, first sample index); None = unextractable
        let mut buckets: BTreeMap<Option<String>, (usize, usize)> = BTreeMap::new();
        for i in 0..k_samples {
            let mut stream = rng::stream(decode.seed, "diversity", &[pid as u64, i as u64]);
            let y = policy.sample(&e.prompt, decode, &mut stream);
            correct_flags.push(verifier.check(&e.prompt, &y));
            let ans = extract_answer(&y, &vocab);
            let entry = buckets.entry(ans).or_insert((0, i));
            entry.0 += 1;
        }
        let c = correct_flags.iter().filter(|&&b| b).count();
        for (&k, acc) in pass_at.iter_mut() {
            *acc += match estimator {
                PassKEstimator::Unbiased => pass_at_k_unbiased(k_samples, c, k),
                PassKEstimator::AnyOf => {
                    if correct_flags[..k].iter().any(|&b| b) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        // majority vote with earliest-first tie-breaking
        let majority = buckets
            .iter()
            .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)))
            .map(|(ans, _)| ans.clone())
            .unwrap();
        if majority.as_deref() == Some(e.gold_answer.as_str()) {
            sc_total += 1.0;
        }
        let n = k_samples as f64;
        ent_total += buckets
            .values()
            .map(|&(count, _)| {
                let p = count as f64 / n;
                -p * p.ln()
            })
            .sum::<f64>();
    }
    let n_prompts = bench.len() as f64;
    for acc in pass_at.values_mut() {
        *acc /= n_prompts;
    }
    Ok(DiversityReport {
        pass_at,
        sc_acc: sc_total / n_prompts,
        ans_entropy: ent_total / n_prompts,
        n_samples: k_samples,
    })
}

/// Per-cell evaluation report. Serialized as the `report.json` document; the
/// flat Pareto row comes from [`EvalReport::pareto_row`]. Non-finite KL
/// serializes as JSON `null` and the CSV sentinel `inf` (censored, plottable).
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub target: BTreeMap<String, f64>,
    pub retention: BTreeMap<String, f64>,
    pub deltas: BTreeMap<String, f64>,
    pub forgetting: f64,
    pub xfer: f64,
    pub kl_to_base: f64,
    pub pld_val: f64,
    /// PLD is computed against SFT-style supervision; for RL-trained
    /// policies it is comparable only within the SFT family.
    pub pld_sft_family_only: bool,
    pub diversity: DiversityReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn target_avg(&self) -> f64 {
        if self.target.is_empty() {
            return 0.0;
        }
        self.target.values().sum::<f64>() / self.target.len() as f64
    }

    pub const PARETO_HEADER: &'static str = "method,seed,target_avg,forgetting,kl_to_base,pld_val";

    pub fn pareto_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.target_avg(),
            self.forgetting,
            csv_float(self.kl_to_base),
            csv_float(self.pld_val)
        )
    }
}

fn csv_float(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        "inf".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tasks::TaskKind;
    use crate::vocab::{TokenId, Vocab};
    use rand::Rng;
    use std::sync::Arc;

    fn tiny_vocab(n_extra: usize) -> Arc<Vocab> {
        let mut toks: Vec<String> =
            ["<bos>", "<eos>", "<ans>", "<pad>"].iter().map(|s| s.to_string()).collect();
        for i in 0..n_extra {
            toks.push(format!("t{i}"));
        }
        Arc::new(Vocab::new(toks, 0, 1, 2, 3).unwrap())
    }

    fn random_policy(order: usize, vocab: &Arc<Vocab>, seed: u64, n_rows: usize) -> Policy {
        let mut p = Policy::new(order, vocab.clone()).unwrap();
        let mut r = stream(seed, "rand_policy", &[]);
        let v = vocab.size();
        for _ in 0..n_rows {
            let ctx: Vec<TokenId> = (0..order).map(|_| r.gen_range(0..v as u32)).collect();
            let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-2.0..2.0)).collect();
            p.set_row(ctx, logits).unwrap();
        }
        p
    }

    fn random_simplex(dim: usize, r: &mut crate::rng::Stream) -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| -(r.gen::<f64>().max(1e-12)).ln()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    }

    #[test]
    fn pld_delta_reduces_to_reference_nll() {
        // uniform policy over V=5, reference = one content token plus EOS
        let vocab = tiny_vocab(1);
        let policy = Policy::new(2, vocab.clone()).unwrap();
        let prompt = TokenSeq::empty();
        let reference = TokenSeq::new(vec![4, 1]);
        let mut q = SeqDist::new();
        q.add(reference.clone(), 1.0);
        let mut q_dists = BTreeMap::new();
        q_dists.insert(0u32, q);
        let prompts = PromptSet::from_prompts(vec![prompt]);
        let pld = pld_exact(&policy, &q_dists, &prompts, 8).unwrap();
        assert!((pld - 2.0 * 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pld_of_own_distribution_is_zero() {
        let vocab = tiny_vocab(1);
        let policy = random_policy(2, &vocab, 4, 30);
        let prompt = TokenSeq::new(vec![4]);
        let q = policy.enumerate_dist(&prompt, 3, None).unwrap();
        let mut q_dists = BTreeMap::new();
        q_dists.insert(0u32, q);
        let prompts = PromptSet::from_prompts(vec![prompt]);
        let pld = pld_exact(&policy, &q_dists, &prompts, 3).unwrap();
        assert!(pld.abs() < 1e-10, "self-PLD should vanish, got {pld}");
    }

    #[test]
    fn pld_of_two_atom_mixture_matches_hand_sum() {
        let vocab = tiny_vocab(2);
        let policy = random_policy(1, &vocab, 8, 12);
        let prompt = TokenSeq::empty();
        let a = TokenSeq::new(vec![4, 1]);
        let b = TokenSeq::new(vec![5, 5, 1]);
        let mut q = SeqDist::new();
        q.add(a.clone(), 0.5);
        q.add(b.clone(), 0.5);
        let mut q_dists = BTreeMap::new();
        q_dists.insert(0u32, q);
        let prompts = PromptSet::from_prompts(vec![prompt.clone()]);
        let max_len = 4;
        let hand = 0.5 * (0.5f64.ln() - policy.seq_logprob_measure(&prompt, &a, max_len))
            + 0.5 * (0.5f64.ln() - policy.seq_logprob_measure(&prompt, &b, max_len));
        let pld = pld_exact(&policy, &q_dists, &prompts, max_len).unwrap();
        assert!((pld - hand).abs() < 1e-10);
    }

    #[test]
    fn pld_val_is_bitwise_identical_to_delta_pld() {
        let vocab = Vocab::lab_default();
        let spec = crate::tasks::TaskSpec::countdown(vocab.clone(), 10, 5, 2);
        let ds = crate::tasks::gen_task(&spec).unwrap();
        let policy = random_policy(3, &vocab, 17, 200);
        let max_len = 12;
        let val = pld_val(&policy, &ds.val, max_len).unwrap();
        let prompts = crate::tasks::Dataset::prompt_set(&ds.val);
        let mut q_dists = BTreeMap::new();
        for (i, e) in ds.val.iter().enumerate() {
            let mut q = SeqDist::new();
            q.add(e.reference.clone(), 1.0);
            q_dists.insert(i as u32, q);
        }
        let exact = pld_exact(&policy, &q_dists, &prompts, max_len).unwrap();
        assert_eq!(val.to_bits(), exact.to_bits(), "definitional identity must be exact");
    }

    #[test]
    fn pld_val_vanishes_on_saturated_policy() {
        let vocab = Vocab::lab_default();
        let spec = crate::tasks::TaskSpec::retention(TaskKind::Copy, vocab.clone(), 5, 2, 2);
        let ds = crate::tasks::gen_task(&spec).unwrap();
        let mut policy = Policy::new(3, vocab.clone()).unwrap();
        for e in ds.all() {
            let mut toks = e.prompt.ids.clone();
            for &tok in &e.reference.ids {
                let ctx = policy.context_window(&toks);
                let mut logits = vec![-2e3; vocab.size()];
                logits[tok as usize] = 2e3;
                policy.set_row(ctx, logits).unwrap();
                toks.push(tok);
            }
        }
        let val = pld_val(&policy, &ds.val, 12).unwrap();
        assert!(val.abs() < 1e-9, "saturated policy should have ~0 val NLL, got {val}");
    }

    #[test]
    fn forgetting_score_oracle_values() {
        let f = forgetting_score(&[-24.6, -23.7, -3.7]).unwrap();
        assert!((f - (-17.333333333333332)).abs() < 5e-4);
        let f = forgetting_score(&[-0.2, -1.1, 1.3]).unwrap();
        assert!((f - (-0.43333333333333335)).abs() < 5e-4);
        assert_eq!(forgetting_score(&[0.5, 2.0]).unwrap(), 0.0);
        assert!(forgetting_score(&[]).is_err());
        // permutation invariance and non-positivity
        let f1 = forgetting_score(&[-1.0, 2.0, -3.0]).unwrap();
        let f2 = forgetting_score(&[2.0, -3.0, -1.0]).unwrap();
        assert_eq!(f1, f2);
        assert!(f1 <= 0.0);
    }

    #[test]
    fn xfer_score_cases() {
        let m = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        let base = m(&[("a", 60.0), ("b", 80.0)]);
        let post = m(&[("a", 58.0), ("b", 79.0)]);
        assert!((xfer_score(&base, &post).unwrap() - (-1.5)).abs() < 1e-12);
        assert_eq!(xfer_score(&base, &base).unwrap(), 0.0);
        let single_base = m(&[("a", 10.0)]);
        let single_post = m(&[("a", 12.0)]);
        assert!((xfer_score(&single_base, &single_post).unwrap() - 2.0).abs() < 1e-12);
        let mismatched = m(&[("z", 1.0), ("b", 2.0)]);
        assert!(matches!(xfer_score(&base, &mismatched), Err(LabError::KeyMismatch(_))));
    }

    #[test]
    fn tv_distance_cases() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((tv_distance(&[1.0, 0.0], &[0.5, 0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pinsker_hand_case_and_identity() {
        let same = pinsker_check(&[0.4, 0.6], &[0.4, 0.6]);
        assert_eq!(same.tv, 0.0);
        assert_eq!(same.bound, 0.0);
        assert!(same.holds);

        let hand = pinsker_check(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((hand.tv - 0.5).abs() < 1e-12);
        assert!((hand.bound - (2.0f64.ln() / 2.0).sqrt()).abs() < 5e-5); // 0.5887 to 4 decimals
        assert!(hand.holds);

        // infinite KL: bound holds trivially
        let inf = pinsker_check(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(inf.bound.is_infinite() && inf.holds);
    }

    #[test]
    fn pinsker_random_sweep() {
        let mut r = stream(99, "pinsker", &[]);
        for _ in 0..2000 {
            let dim = r.gen_range(2..=16);
            let p = random_simplex(dim, &mut r);
            let q = random_simplex(dim, &mut r);
            let c = pinsker_check(&p, &q);
            assert!(c.holds, "tv {} > bound {}", c.tv, c.bound);
        }
    }

    #[test]
    fn drift_bound_zero_at_base() {
        let vocab = tiny_vocab(0);
        let p = random_policy(1, &vocab, 3, 10);
        let prompts = PromptSet::from_prompts(vec![TokenSeq::empty()]);
        let rep = theorem1_check_fn(&p, &p, |_, y| (y.len() % 2) as f64, &prompts, 3, None).unwrap();
        assert!(rep.lhs.abs() < 1e-12);
        assert!(rep.rhs.abs() < 1e-6);
        assert!(rep.holds);
    }

    #[test]
    fn drift_bound_random_sweep() {
        let vocab = tiny_vocab(0); // V = 4
        for trial in 0..100u64 {
            let mut r = stream(1000 + trial, "t1", &[]);
            let policy = random_policy(1, &vocab, 2000 + trial, 8);
            let base = random_policy(1, &vocab, 3000 + trial, 8);
            let prompt_len = r.gen_range(0..3);
            let prompt =
                TokenSeq::new((0..prompt_len).map(|_| r.gen_range(0..4u32)).collect());
            let prompts = PromptSet::from_prompts(vec![prompt]);
            let probe: u32 = r.gen_range(0..4);
            let rep = theorem1_check_fn(
                &policy,
                &base,
                |_, y| if y.ids.contains(&probe) { 1.0 } else { 0.0 },
                &prompts,
                3,
                None,
            )
            .unwrap();
            assert!(rep.holds, "bound must hold: {rep:?}");
            assert!(rep.rhs <= rep.corollary_rhs + 1e-9, "Jensen direction: {rep:?}");
        }
    }

    #[test]
    fn kl_to_base_basics() {
        let vocab = tiny_vocab(0);
        let p = random_policy(1, &vocab, 5, 10);
        let prompts = PromptSet::from_prompts(vec![TokenSeq::empty()]);
        let mode = KlMode::Exact { max_len: 3, budget: None };
        assert!(kl_to_base(&p, &p, &prompts, &mode).unwrap().abs() < 1e-10);
        for s in 0..50 {
            let q = random_policy(1, &vocab, 600 + s, 10);
            assert!(kl_to_base(&p, &q, &prompts, &mode).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn pass_at_k_estimator_values() {
        assert_eq!(pass_at_k_unbiased(4, 4, 1), 1.0);
        assert_eq!(pass_at_k_unbiased(4, 0, 2), 0.0);
        assert!((pass_at_k_unbiased(4, 2, 2) - 5.0 / 6.0).abs() < 1e-12);
        // k = n reduces to the "any correct" indicator
        assert_eq!(pass_at_k_unbiased(10, 3, 10), 1.0);
        assert_eq!(pass_at_k_unbiased(10, 0, 10), 0.0);
        // monotone non-decreasing in k
        for c in 0..=10 {
            let mut last = 0.0;
            for k in 1..=10 {
                let v = pass_at_k_unbiased(10, c, k);
                assert!(v >= last - 1e-12, "pass@k must be monotone in k");
                last = v;
            }
        }
    }

    fn delta_policy(vocab: &Arc<Vocab>, prompt: &TokenSeq, seqs: &[(Vec<TokenId>, f64)]) -> Policy {
        // order-large policy putting the given mass on full completions of
        // one prompt, by saturating rows along each completion prefix
        assert!(seqs.len() <= 2);
        let mut p = Policy::new(6, vocab.clone()).unwrap();
        if seqs.len() == 1 {
            let (seq, _) = &seqs[0];
            let mut toks = prompt.ids.clone();
            for &tok in seq {
                let ctx = p.context_window(&toks);
                let mut logits = vec![-1e3; vocab.size()];
                logits[tok as usize] = 1e3;
                p.set_row(ctx, logits).unwrap();
                toks.push(tok);
            }
        } else {
            // two completions, branching on their distinct first tokens
            let (a, pa) = &seqs[0];
            let (b, _) = &seqs[1];
            assert_ne!(a[0], b[0]);
            let ctx0 = p.context_window(&prompt.ids);
            let mut logits = vec![-1e3; vocab.size()];
            logits[a[0] as usize] = (pa / (1.0 - pa)).ln();
            logits[b[0] as usize] = 0.0;
            p.set_row(ctx0, logits).unwrap();
            for (seq, _) in seqs {
                let mut toks = prompt.ids.clone();
                toks.push(seq[0]);
                for &tok in &seq[1..] {
                    let ctx = p.context_window(&toks);
                    let mut l = vec![-1e3; vocab.size()];
                    l[tok as usize] = 1e3;
                    p.set_row(ctx, l).unwrap();
                    toks.push(tok);
                }
            }
        }
        p
    }

    #[test]
    fn diversity_entropy_boundaries() {
        let vocab = Vocab::lab_default();
        let verifier = Verifier::new(TaskKind::Copy, vocab.clone());
        let prompt = TokenSeq::new(vec![vocab.lookup("C").unwrap(), vocab.digit(5)]);
        let example = Example {
            task_id: "copy".into(),
            prompt: prompt.clone(),
            reference: TokenSeq::new(vec![vocab.ans(), vocab.digit(5), vocab.eos()]),
            gold_answer: "5".into(),
        };
        let decode = DecodePolicy::ancestral(6, 31);

        // all samples identical: entropy 0, sc correct, pass@k(correct) = 1
        let correct_seq = vec![vocab.ans(), vocab.digit(5), vocab.eos()];
        let p1 = delta_policy(&vocab, &prompt, &[(correct_seq.clone(), 1.0)]);
        let rep =
            diversity_suite(&p1, &[example.clone()], &verifier, &decode, 64, &[1, 64], PassKEstimator::Unbiased)
                .unwrap();
        assert!(rep.ans_entropy.abs() < 1e-12);
        assert_eq!(rep.sc_acc, 1.0);
        assert_eq!(rep.pass_at[&1], 1.0);
        assert_eq!(rep.pass_at[&64], 1.0);

        // an even split over two answers approaches ln 2
        let wrong_seq = vec![vocab.digit(7), vocab.ans(), vocab.digit(7), vocab.eos()];
        let p2 = delta_policy(&vocab, &prompt, &[(correct_seq, 0.5), (wrong_seq, 0.5)]);
        let rep = diversity_suite(
            &p2,
            &[example],
            &verifier,
            &decode,
            2000,
            &[1, 2000],
            PassKEstimator::Unbiased,
        )
        .unwrap();
        assert!((rep.ans_entropy - 2.0f64.ln()).abs() < 0.01, "entropy {}", rep.ans_entropy);
        assert_eq!(rep.pass_at[&2000], 1.0, "coverage indicator at k = n");
        // entropy never exceeds ln(number of distinct answers)
        assert!(rep.ans_entropy <= 2.0f64.ln() + 1e-9);
    }

    #[test]
    fn diversity_estimator_domain_error() {
        let vocab = Vocab::lab_default();
        let verifier = Verifier::new(TaskKind::Copy, vocab.clone());
        let e = Example {
            task_id: "copy".into(),
            prompt: TokenSeq::new(vec![vocab.lookup("C").unwrap(), vocab.digit(5)]),
            reference: TokenSeq::new(vec![vocab.ans(), vocab.digit(5), vocab.eos()]),
            gold_answer: "5".into(),
        };
        let p = Policy::new(2, vocab.clone()).unwrap();
        let decode = DecodePolicy::ancestral(4, 0);
        let err = diversity_suite(&p, &[e], &verifier, &decode, 4, &[8], PassKEstimator::Unbiased);
        assert!(matches!(err, Err(LabError::EstimatorDomain { k: 8, n: 4 })));
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let rep = EvalReport {
            method: "sft".into(),
            seed: 1,
            target: [("countdown_micro".to_string(), 0.75)].into_iter().collect(),
            retention: [("copy".to_string(), 0.5)].into_iter().collect(),
            deltas: [("copy".to_string(), -0.25)].into_iter().collect(),
            forgetting: -0.25,
            xfer: -0.25,
            kl_to_base: f64::INFINITY,
            pld_val: 1.5,
            pld_sft_family_only: false,
            diversity: DiversityReport {
                pass_at: [(1, 0.5)].into_iter().collect(),
                sc_acc: 0.5,
                ans_entropy: 0.3,
                n_samples: 10,
            },
        };
        let a = rep.to_json();
        let b = rep.to_json();
        assert_eq!(a, b);
        assert!(a.contains("\"kl_to_base\": null"), "infinite KL is censored to null");
        assert!(rep.pareto_row().contains("inf"));
        assert_eq!(EvalReport::PARETO_HEADER.split(',').count(), rep.pareto_row().split(',').count());
    }
}
