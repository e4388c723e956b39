//! Randomized verification of the KL-drift bound and Pinsker's inequality on
//! exactly enumerable instances.

use rand::Rng;
use std::sync::Arc;
use tmslab_core::metrics::{pinsker_check, theorem1_check_fn};
use tmslab_core::policy::{Policy, PromptSet};
use tmslab_core::rng::{self, Stream};
use tmslab_core::vocab::{TokenId, TokenSeq, Vocab};
use tmslab_core::Result;

pub struct TheoryOutcome {
    pub trials: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` over all trials (negative when the bound holds).
    pub max_bound_gap: f64,
    /// Largest `rhs - corollary_rhs` (Jensen direction).
    pub max_jensen_gap: f64,
    /// Largest `tv - sqrt(KL/2)`.
    pub max_pinsker_gap: f64,
    pub first_violation: Option<String>,
}

fn theory_vocab() -> Arc<Vocab> {
    // four-token alphabet: the smallest legal vocabulary, everything special
    let toks = vec!["<bos>".into(), "<eos>".into(), "<ans>".into(), "<pad>".into()];
    Arc::new(Vocab::new(toks, 0, 1, 2, 3).expect("theory vocab"))
}

fn random_policy(vocab: &Arc<Vocab>, order: usize, rows: usize, r: &mut Stream) -> Policy {
    let mut p = Policy::new(order, vocab.clone()).unwrap();
    let v = vocab.size();
    for _ in 0..rows {
        let ctx: Vec<TokenId> = (0..order).map(|_| r.gen_range(0..v as u32)).collect();
        let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-3.0..3.0)).collect();
        p.set_row(ctx, logits).unwrap();
    }
    p
}

fn random_simplex(dim: usize, r: &mut Stream) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| -(r.gen::<f64>().max(1e-12)).ln()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Run `trials` random instances; each checks the expected-score drift bound
/// (both the per-prompt and Jensen forms) by exact enumeration, plus one
/// random Pinsker pair.
pub fn verify_theory(seed: u64, trials: usize) -> Result<TheoryOutcome> {
    let vocab = theory_vocab();
    let mut out = TheoryOutcome {
        trials,
        violations: 0,
        max_bound_gap: f64::NEG_INFINITY,
        max_jensen_gap: f64::NEG_INFINITY,
        max_pinsker_gap: f64::NEG_INFINITY,
        first_violation: None,
    };
    for trial in 0..trials {
        let mut r = rng::stream(seed, "theory", &[trial as u64]);
        let order = r.gen_range(1..=2);
        let max_len = r.gen_range(2..=3);
        let policy = random_policy(&vocab, order, r.gen_range(3..=12), &mut r);
        let base = random_policy(&vocab, order, r.gen_range(3..=12), &mut r);
        let n_prompts = r.gen_range(1..=3);
        let prompts: Vec<TokenSeq> = (0..n_prompts)
            .map(|_| {
                let len = r.gen_range(0..=2);
                TokenSeq::new((0..len).map(|_| r.gen_range(0..4u32)).collect())
            })
            .collect();
        let prompts = PromptSet::from_prompts(prompts);
        let probe: u32 = r.gen_range(0..4);
        let family = r.gen_range(0..3);
        let score = |_: u32, y: &TokenSeq| -> f64 {
            match family {
                0 => y.ids.contains(&probe) as u8 as f64,
                1 => (y.ids[0] == probe) as u8 as f64,
                _ => (y.len() % 2 == 0) as u8 as f64,
            }
        };
        let rep = theorem1_check_fn(&policy, &base, score, &prompts, max_len, None)?;
        if rep.lhs.is_finite() && rep.rhs.is_finite() {
            out.max_bound_gap = out.max_bound_gap.max(rep.lhs - rep.rhs);
        }
        if rep.rhs.is_finite() && rep.corollary_rhs.is_finite() {
            out.max_jensen_gap = out.max_jensen_gap.max(rep.rhs - rep.corollary_rhs);
        }
        if !rep.holds {
            out.violations += 1;
            out.first_violation.get_or_insert_with(|| {
                format!(
                    "drift bound violated: seed={seed} trial={trial} lhs={} rhs={} corollary={}",
                    rep.lhs, rep.rhs, rep.corollary_rhs
                )
            });
        }

        let dim = r.gen_range(2..=16);
        let p = random_simplex(dim, &mut r);
        let q = random_simplex(dim, &mut r);
        let pk = pinsker_check(&p, &q);
        if pk.bound.is_finite() {
            out.max_pinsker_gap = out.max_pinsker_gap.max(pk.tv - pk.bound);
        }
        if !pk.holds {
            out.violations += 1;
            out.first_violation.get_or_insert_with(|| {
                format!(
                    "pinsker violated: seed={seed} trial={trial} tv={} bound={}",
                    pk.tv, pk.bound
                )
            });
        }
    }
    Ok(out)
}
