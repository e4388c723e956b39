//! Post-training procedures: standard SFT, distillation (self/final), the
//! trajectory-mixed student, REINFORCE, and GRPO.
//!
//! Every trainer runs the same loop skeleton: pick a batch, build a gradient,
//! take one step, snapshot checkpoints at uniformly spaced steps, and log
//! drift points. Budget-matched comparisons therefore differ only in how the
//! per-step gradient is constructed. Batch selection always draws from the
//! stream `(cfg.seed, "batch", [step])`, so two supervised trainers with the
//! same seed and the same effective targets produce bit-identical policies.

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};
use crate::metrics;
use crate::policy::{DecodePolicy, GradTable, KlMode, Policy, PromptSet};
use crate::rng;
use crate::tasks::{score_benchmark, Dataset, Example, Verifier};
use crate::trajectory::{sample_target, MixtureSpec, TrajectoryBuffer};
use crate::vocab::TokenSeq;
use rand::Rng;

/// Optimizer settings shared by all trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate. Zero is allowed and makes every step a no-op.
    pub lr: f64,
    pub steps: usize,
    /// Examples per step; 0 means full batch.
    pub batch_size: usize,
    /// Number of checkpoints T, saved at uniformly spaced steps.
    pub ckpt_count: usize,
    /// Drift-log cadence; 0 logs only at step 0 and the final step.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(LabError::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.ckpt_count < 1 {
            return Err(LabError::InvalidParameter("ckpt_count must be >= 1".into()));
        }
        if self.steps < self.ckpt_count {
            return Err(LabError::InvalidParameter(format!(
                "steps ({}) must be >= ckpt_count ({})",
                self.steps, self.ckpt_count
            )));
        }
        Ok(())
    }

    /// Checkpoint steps `floor(i * steps / T)` for `i = 1..=T`; strictly
    /// increasing whenever `steps >= T`, and always ending at `steps`.
    pub fn ckpt_steps(&self) -> Vec<usize> {
        (1..=self.ckpt_count).map(|i| i * self.steps / self.ckpt_count).collect()
    }
}

/// Settings specific to the RL trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    /// GRPO group size G.
    pub group_size: usize,
    /// REINFORCE moving-average baseline decay rho.
    pub baseline_decay: f64,
    /// Weight of the KL-to-base penalty.
    pub kl_beta: f64,
    /// Denominator guard in group normalization.
    pub std_eps: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig { group_size: 4, baseline_decay: 0.9, kl_beta: 0.01, std_eps: 1e-8 }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(LabError::InvalidParameter("group_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(LabError::InvalidParameter("baseline_decay must be in [0,1)".into()));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(LabError::InvalidParameter("kl_beta must be >= 0".into()));
        }
        if !(self.std_eps > 0.0) {
            return Err(LabError::InvalidParameter("std_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// One drift-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPoint {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub kl_to_base: f64,
    pub target_acc: f64,
    pub retention_acc: f64,
}

pub const DRIFT_CSV_HEADER: &str = "step,train_nll,val_nll,kl_to_base,target_acc,retention_acc";

pub fn drift_csv(points: &[DriftPoint]) -> String {
    let mut out = String::from(DRIFT_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.step, p.train_nll, p.val_nll, p.kl_to_base, p.target_acc, p.retention_acc
        ));
    }
    out
}

/// Evaluation context for drift logging. The Monte-Carlo KL estimate is
/// clamped at zero so the logged drift satisfies `kl_to_base >= 0`.
pub struct DriftProbe<'a> {
    pub base: &'a Policy,
    /// Pairs whose mean token NLL is reported as `train_nll`.
    pub train_pairs: &'a [(TokenSeq, TokenSeq)],
    pub val_split: &'a [Example],
    pub target_bench: &'a [Example],
    pub target_verifier: &'a Verifier,
    pub retention: Vec<(&'a Verifier, &'a [Example])>,
    pub kl_prompts: &'a PromptSet,
    pub kl_samples: usize,
    pub decode: DecodePolicy,
}

impl DriftProbe<'_> {
    pub fn measure(&self, policy: &Policy, step: usize) -> Result<DriftPoint> {
        let train_nll = policy.nll(self.train_pairs)?;
        let val_nll = metrics::pld_val(policy, self.val_split, self.decode.max_len)?;
        let kl_seed = rng::derive_seed(self.decode.seed, "drift_kl");
        let kl = metrics::kl_to_base(
            policy,
            self.base,
            self.kl_prompts,
            &KlMode::MonteCarlo {
                max_len: self.decode.max_len,
                n_samples: self.kl_samples,
                seed: kl_seed,
            },
        )?;
        let target_acc = score_benchmark(policy, self.target_bench, self.target_verifier, &self.decode)?;
        let mut retention_acc = 0.0;
        if !self.retention.is_empty() {
            for (verifier, bench) in &self.retention {
                retention_acc += score_benchmark(policy, bench, verifier, &self.decode)?;
            }
            retention_acc /= self.retention.len() as f64;
        }
        Ok(DriftPoint { step, train_nll, val_nll, kl_to_base: kl.max(0.0), target_acc, retention_acc })
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct SftRun {
    pub policy: Policy,
    pub checkpoints: Vec<Checkpoint>,
    pub drift: Vec<DriftPoint>,
}

enum Targets<'a> {
    Fixed(&'a [(TokenSeq, TokenSeq)]),
    Mixture { data: &'a [Example], buffer: &'a TrajectoryBuffer, mix: &'a MixtureSpec },
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Fixed(pairs) => pairs.len(),
            Targets::Mixture { data, .. } => data.len(),
        }
    }

    /// Materialize `(prompt, target)` pairs for one step. Mixture targets are
    /// redrawn on every visit from `(seed, "tms_select", [step, index])`.
    fn pairs_for(&self, seed: u64, step: usize, indices: &[usize]) -> Result<Vec<(TokenSeq, TokenSeq)>> {
        match self {
            Targets::Fixed(pairs) => Ok(indices.iter().map(|&i| pairs[i].clone()).collect()),
            Targets::Mixture { data, buffer, mix } => indices
                .iter()
                .map(|&i| {
                    let e = &data[i];
                    let mut stream = rng::stream(seed, "tms_select", &[step as u64, i as u64]);
                    let target = sample_target(buffer, i as u32, &e.reference, mix, &mut stream)?;
                    Ok((e.prompt.clone(), target))
                })
                .collect(),
        }
    }
}

fn batch_indices(n: usize, cfg: &TrainConfig, step: usize) -> Vec<usize> {
    if cfg.batch_size == 0 || cfg.batch_size >= n {
        return (0..n).collect();
    }
    // partial Fisher-Yates over (seed, "batch", [step])
    let mut stream = rng::stream(cfg.seed, "batch", &[step as u64]);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..cfg.batch_size {
        let j = stream.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(cfg.batch_size);
    pool
}

struct Recorder<'a> {
    ckpt_steps: Vec<usize>,
    tag: &'a str,
    checkpoints: Vec<Checkpoint>,
    drift: Vec<DriftPoint>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &TrainConfig, tag: &'a str, probe: Option<&DriftProbe>, init: &Policy) -> Result<Self> {
        let mut drift = Vec::new();
        if let Some(p) = probe {
            drift.push(p.measure(init, 0)?);
        }
        Ok(Recorder { ckpt_steps: cfg.ckpt_steps(), tag, checkpoints: Vec::new(), drift })
    }

    fn after_step(
        &mut self,
        policy: &Policy,
        step: usize,
        cfg: &TrainConfig,
        probe: Option<&DriftProbe>,
    ) -> Result<()> {
        if self.ckpt_steps.contains(&step) {
            self.checkpoints.push(Checkpoint {
                step: step as u64,
                params: policy.clone(),
                tag: self.tag.to_string(),
            });
        }
        if let Some(p) = probe {
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
                self.drift.push(p.measure(policy, step)?);
            }
        }
        Ok(())
    }
}

fn run_supervised(
    init: &Policy,
    targets: Targets<'_>,
    cfg: &TrainConfig,
    probe: Option<&DriftProbe>,
    tag: &str,
) -> Result<SftRun> {
    cfg.validate()?;
    let n = targets.len();
    if n == 0 {
        return Err(LabError::EmptyBatch);
    }
    let mut policy = init.clone();
    let mut rec = Recorder::new(cfg, tag, probe, &policy)?;
    for step in 1..=cfg.steps {
        let indices = batch_indices(n, cfg, step);
        let pairs = targets.pairs_for(cfg.seed, step, &indices)?;
        let loss = policy.nll(&pairs)?;
        if !loss.is_finite() {
            let last_good = rec.checkpoints.last().map(|c| c.params.clone()).unwrap_or_else(|| init.clone());
            return Err(LabError::TrainingDiverged { step, last_good: Box::new(last_good) });
        }
        if cfg.lr > 0.0 {
            let grad = policy.nll_grad(&pairs)?;
            policy = policy.sgd_step(&grad, cfg.lr)?;
        }
        rec.after_step(&policy, step, cfg, probe)?;
    }
    Ok(SftRun { policy, checkpoints: rec.checkpoints, drift: rec.drift })
}

/// Standard SFT: minimize mean token NLL of the references.
pub fn train_sft(
    init: &Policy,
    train: &[Example],
    cfg: &TrainConfig,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    let pairs = Dataset::pairs(train);
    run_supervised(init, Targets::Fixed(&pairs), cfg, probe, "sft")
}

/// Distillation: the SFT loop on externally generated `(prompt, target)`
/// pairs. Self-distillation passes samples from the initial policy;
/// final-distillation passes samples from a converged SFT policy.
pub fn distill(
    init: &Policy,
    teacher_outputs: &[(TokenSeq, TokenSeq)],
    cfg: &TrainConfig,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    run_supervised(init, Targets::Fixed(teacher_outputs), cfg, probe, "distill")
}

/// Trajectory-mixed student: per example visit, train on the reference with
/// probability `mix.alpha`, otherwise on `buffer[t, x]` with `t ~ p(t)`.
/// The student should start from the same initialization as the harvesting
/// run.
pub fn train_tms_student(
    init: &Policy,
    data: &[Example],
    buffer: &TrajectoryBuffer,
    mix: &MixtureSpec,
    cfg: &TrainConfig,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    if mix.t_count != buffer.t_count() {
        return Err(LabError::InvalidParameter(format!(
            "mixture T={} does not match buffer T={}",
            mix.t_count,
            buffer.t_count()
        )));
    }
    // fail fast on holes instead of mid-training
    let prompts = Dataset::prompt_set(data);
    buffer.check_complete(&prompts)?;
    run_supervised(init, Targets::Mixture { data, buffer, mix }, cfg, probe, "tms")
}

/// One completion per prompt from a frozen teacher, for the distillation
/// baselines. Streams are `(seed, tag, [prompt index])`.
pub fn generate_teacher_outputs(
    teacher: &Policy,
    data: &[Example],
    decode: &DecodePolicy,
    seed: u64,
    tag: &str,
) -> Vec<(TokenSeq, TokenSeq)> {
    data.iter()
        .enumerate()
        .map(|(i, e)| {
            let mut stream = rng::stream(seed, tag, &[i as u64]);
            let y = teacher.sample(&e.prompt, decode, &mut stream);
            (e.prompt.clone(), y)
        })
        .collect()
}

/// Moving-average baseline update, applied after the batch used the old
/// value: `b <- rho * b + (1 - rho) * mean_batch_reward`.
pub fn reinforce_baseline_update(b: f64, rho: f64, mean_reward: f64) -> f64 {
    rho * b + (1.0 - rho) * mean_reward
}

/// Group-normalized advantages: `(r_i - mean) / (population std + eps)`.
pub fn grpo_advantages(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + std_eps;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Gradient of `log pi(rollout | prompt)` over the sampled positions only:
/// `onehot - softmax` at each visited context, skipping the forced final EOS.
fn rollout_logprob_grad(policy: &Policy, prompt: &TokenSeq, rollout: &TokenSeq, max_len: usize) -> GradTable {
    let v = policy.vocab().size();
    let mut grad = GradTable::default();
    let mut toks = prompt.ids.clone();
    for (j, &tok) in rollout.ids.iter().enumerate() {
        if j == max_len - 1 {
            break;
        }
        let ctx = policy.context_window(&toks);
        let probs = policy.probs(&ctx);
        let row = grad.rows.entry(ctx).or_insert_with(|| vec![0.0; v]);
        for (r, p) in row.iter_mut().zip(&probs) {
            *r -= p;
        }
        row[tok as usize] += 1.0;
        toks.push(tok);
    }
    grad
}

/// Gradient (w.r.t. this policy's logits) of the token-level KL penalty
/// accumulated over the contexts a rollout visited. The forced final EOS
/// position is not a sampled token and contributes nothing.
fn kl_penalty_grad(policy: &Policy, base: &Policy, prompt: &TokenSeq, rollout: &TokenSeq, max_len: usize) -> GradTable {
    let mut grad = GradTable::default();
    let mut toks = prompt.ids.clone();
    for (j, &tok) in rollout.ids.iter().enumerate() {
        if j == max_len - 1 {
            break;
        }
        let ctx = policy.context_window(&toks);
        let (_, g) = policy.row_kl_to_base(base, &ctx);
        let row = grad.rows.entry(ctx).or_insert_with(|| vec![0.0; g.len()]);
        for (r, gi) in row.iter_mut().zip(&g) {
            *r += gi;
        }
        toks.push(tok);
    }
    grad
}

/// Token-level KL penalty value along a rollout (sampled positions only);
/// its expectation over rollouts equals the exact sequence KL.
pub fn rollout_kl_estimate(policy: &Policy, base: &Policy, prompt: &TokenSeq, rollout: &TokenSeq, max_len: usize) -> f64 {
    let mut total = 0.0;
    let mut toks = prompt.ids.clone();
    for (j, &tok) in rollout.ids.iter().enumerate() {
        if j == max_len - 1 {
            break;
        }
        let ctx = policy.context_window(&toks);
        let (kl, _) = policy.row_kl_to_base(base, &ctx);
        total += kl;
        toks.push(tok);
    }
    total
}

/// REINFORCE with a closure reward bounded in `[0, 1]`.
pub fn train_reinforce_with(
    init: &Policy,
    prompts: &PromptSet,
    reward: impl Fn(u32, &TokenSeq, &TokenSeq) -> f64,
    cfg: &TrainConfig,
    rl: &RlConfig,
    decode: &DecodePolicy,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    cfg.validate()?;
    rl.validate()?;
    if prompts.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let items: Vec<(u32, &TokenSeq)> = prompts.iter().collect();
    let base = init.clone();
    let mut policy = init.clone();
    let mut baseline = 0.0;
    let mut rec = Recorder::new(cfg, "reinforce", probe, &policy)?;
    for step in 1..=cfg.steps {
        let indices = batch_indices(items.len(), cfg, step);
        let b = indices.len() as f64;
        let mut ascent = GradTable::default();
        let mut reward_sum = 0.0;
        for &i in &indices {
            let (pid, prompt) = items[i];
            let mut stream = rng::stream(cfg.seed, "rollout", &[step as u64, pid as u64]);
            let y = policy.sample(prompt, decode, &mut stream);
            let r = reward(pid, prompt, &y);
            reward_sum += r;
            let adv = r - baseline;
            if adv != 0.0 {
                ascent.add_scaled(&rollout_logprob_grad(&policy, prompt, &y, decode.max_len), adv / b);
            }
            if rl.kl_beta > 0.0 {
                let kl_grad = kl_penalty_grad(&policy, &base, prompt, &y, decode.max_len);
                ascent.add_scaled(&kl_grad, -rl.kl_beta / b);
            }
        }
        baseline = reinforce_baseline_update(baseline, rl.baseline_decay, reward_sum / b);
        if cfg.lr > 0.0 && !ascent.rows.is_empty() {
            ascent.scale(-1.0); // descent on the negated objective
            policy = policy.sgd_step(&ascent, cfg.lr)?;
        }
        rec.after_step(&policy, step, cfg, probe)?;
    }
    Ok(SftRun { policy, checkpoints: rec.checkpoints, drift: rec.drift })
}

/// REINFORCE with a task verifier as the binary reward.
pub fn train_reinforce(
    init: &Policy,
    prompts: &PromptSet,
    verifier: &Verifier,
    cfg: &TrainConfig,
    rl: &RlConfig,
    decode: &DecodePolicy,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    train_reinforce_with(init, prompts, |_, p, y| verifier.score(p, y), cfg, rl, decode, probe)
}

/// GRPO with a closure reward bounded in `[0, 1]`.
pub fn train_grpo_with(
    init: &Policy,
    prompts: &PromptSet,
    reward: impl Fn(u32, &TokenSeq, &TokenSeq) -> f64,
    cfg: &TrainConfig,
    rl: &RlConfig,
    decode: &DecodePolicy,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    cfg.validate()?;
    rl.validate()?;
    if prompts.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let items: Vec<(u32, &TokenSeq)> = prompts.iter().collect();
    let base = init.clone();
    let mut policy = init.clone();
    let g = rl.group_size;
    let mut rec = Recorder::new(cfg, "grpo", probe, &policy)?;
    for step in 1..=cfg.steps {
        let indices = batch_indices(items.len(), cfg, step);
        let b = indices.len() as f64;
        let mut ascent = GradTable::default();
        for &i in &indices {
            let (pid, prompt) = items[i];
            let mut rollouts = Vec::with_capacity(g);
            let mut rewards = Vec::with_capacity(g);
            for gi in 0..g {
                let mut stream =
                    rng::stream(cfg.seed, "rollout", &[step as u64, pid as u64, gi as u64]);
                let y = policy.sample(prompt, decode, &mut stream);
                rewards.push(reward(pid, prompt, &y));
                rollouts.push(y);
            }
            let advantages = grpo_advantages(&rewards, rl.std_eps);
            for (y, adv) in rollouts.iter().zip(&advantages) {
                if *adv != 0.0 {
                    ascent.add_scaled(
                        &rollout_logprob_grad(&policy, prompt, y, decode.max_len),
                        adv / (g as f64 * b),
                    );
                }
                if rl.kl_beta > 0.0 {
                    let kl_grad = kl_penalty_grad(&policy, &base, prompt, y, decode.max_len);
                    ascent.add_scaled(&kl_grad, -rl.kl_beta / (g as f64 * b));
                }
            }
        }
        if cfg.lr > 0.0 && !ascent.rows.is_empty() {
            ascent.scale(-1.0);
            policy = policy.sgd_step(&ascent, cfg.lr)?;
        }
        rec.after_step(&policy, step, cfg, probe)?;
    }
    Ok(SftRun { policy, checkpoints: rec.checkpoints, drift: rec.drift })
}

/// GRPO with a task verifier as the binary reward.
pub fn train_grpo(
    init: &Policy,
    prompts: &PromptSet,
    verifier: &Verifier,
    cfg: &TrainConfig,
    rl: &RlConfig,
    decode: &DecodePolicy,
    probe: Option<&DriftProbe>,
) -> Result<SftRun> {
    train_grpo_with(init, prompts, |_, p, y| verifier.score(p, y), cfg, rl, decode, probe)
}
