//! End-to-end experiment orchestration: generate data, pretrain the base
//! policy on the retention suite, post-train every configured method from
//! that shared base, and evaluate each cell into drift logs and reports.
//!
//! Layout under the working directory:
//!
//! ```text
//! data/<task>.tsv
//! base/<seed>/{base.bin, report.json}
//! <method>/<seed>/{ckpt_###.bin, drift.csv, report.json, buffer.txt}
//! pareto.csv
//! sweep_<axis>.csv
//! ```
//!
//! Every artifact is a pure function of `(config, seed)`: rerunning a config
//! rewrites byte-identical files.

use crate::config::{LabConfig, Method};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tmslab_core::checkpoint;
use tmslab_core::metrics::{self, DiversityReport, EvalReport, PassKEstimator};
use tmslab_core::policy::{DecodePolicy, KlMode, Policy, PromptSet};
use tmslab_core::rng::derive_seed;
use tmslab_core::tasks::{gen_task, score_benchmark, Dataset, Example, TaskKind, TaskSpec, Verifier};
use tmslab_core::trainers::{
    distill, drift_csv, generate_teacher_outputs, train_grpo, train_reinforce, train_sft,
    train_tms_student, DriftProbe, SftRun, TrainConfig,
};
use tmslab_core::trajectory::{CheckpointDist, DistKind, MixtureSpec, TrajectoryBuffer};
use tmslab_core::vocab::{TokenSeq, Vocab};
use tmslab_core::{LabError, Result};

/// Generated datasets for one config: the countdown target task, the
/// retention tasks listed as benchmarks, and the disjoint countdown pool
/// used only during base pretraining.
pub struct Suite {
    pub vocab: Arc<Vocab>,
    pub target: Dataset,
    pub retention: Vec<(TaskKind, Dataset)>,
    pub pretrain_pool: Vec<Example>,
}

pub fn build_suite(cfg: &LabConfig) -> Result<Suite> {
    let vocab = Vocab::lab_default();
    let mut spec = TaskSpec::countdown(vocab.clone(), cfg.task.size, cfg.task.seed, cfg.task.numbers_per_instance);
    spec.value_range = (cfg.task.value_min, cfg.task.value_max);
    let target = gen_task(&spec)?;
    let mut retention = Vec::new();
    for kind in &cfg.eval.benchmarks {
        let rcfg = match kind {
            TaskKind::Copy => &cfg.task.copy,
            TaskKind::Reverse => &cfg.task.reverse,
            TaskKind::Parity => &cfg.task.parity,
            TaskKind::CountdownMicro => unreachable!("validated at load"),
        };
        let spec = TaskSpec::retention(*kind, vocab.clone(), rcfg.size, cfg.task.seed, rcfg.content_len);
        retention.push((*kind, gen_task(&spec)?));
    }
    let pretrain_pool = build_pretrain_pool(cfg, &vocab, &target, &retention)?;
    Ok(Suite { vocab, target, retention, pretrain_pool })
}

/// Solutions kept per pool instance; several per prompt give the base broad
/// support over valid solution modes instead of one memorized reference.
const POOL_SOLUTIONS: usize = 4;

/// Countdown instances used only to pretrain the task FORMAT into the base.
///
/// The pool is filtered so that it never claims context windows the
/// retention tasks rely on: instances are disjoint by prompt from the target
/// splits, their numbers are strictly ascending and free of 1 (so harvested
/// first tokens cannot shadow reverse/parity answer rows), and their trailing
/// number pair never coincides with a copy-train content pair. Post-training
/// on the real target split is what collides with retention, not the base.
fn build_pretrain_pool(
    cfg: &LabConfig,
    vocab: &Arc<Vocab>,
    target: &Dataset,
    retention: &[(TaskKind, Dataset)],
) -> Result<Vec<Example>> {
    use tmslab_core::expr::enumerate_solutions;
    use tmslab_core::tasks::{extract_answer, parse_countdown_prompt};

    if cfg.pretrain.countdown_pool == 0 {
        return Ok(Vec::new());
    }
    let mut pool_spec = TaskSpec::countdown(
        vocab.clone(),
        cfg.pretrain.countdown_pool,
        derive_seed(cfg.task.seed, "pretrain_pool"),
        cfg.task.numbers_per_instance,
    );
    pool_spec.value_range = (cfg.task.value_min, cfg.task.value_max);
    let pool = gen_task(&pool_spec)?;

    let target_prompts: std::collections::HashSet<_> = target.all().map(|e| &e.prompt).collect();
    let copy_pairs: std::collections::HashSet<(u8, u8)> = retention
        .iter()
        .filter(|(k, _)| *k == TaskKind::Copy)
        .flat_map(|(_, ds)| ds.train.iter())
        .filter_map(|e| {
            let c1 = vocab.as_digit(*e.prompt.ids.get(1)?)?;
            let c2 = vocab.as_digit(*e.prompt.ids.get(2)?)?;
            Some((c1, c2))
        })
        .collect();

    let mut out = Vec::new();
    for e in pool.all() {
        if target_prompts.contains(&e.prompt) {
            continue;
        }
        let Some((numbers, target_value)) = parse_countdown_prompt(&e.prompt, vocab) else {
            continue;
        };
        let ascending = numbers.windows(2).all(|w| w[0] < w[1]);
        if !ascending || numbers.contains(&1) {
            continue;
        }
        let n = numbers.len();
        if n >= 2 && copy_pairs.contains(&(numbers[n - 2], numbers[n - 1])) {
            continue;
        }
        let solutions = enumerate_solutions(&numbers);
        for expr_str in solutions[&target_value].iter().take(POOL_SOLUTIONS) {
            let mut ids = vec![vocab.ans()];
            ids.extend(expr_str.chars().map(|c| vocab.lookup(&c.to_string()).expect("expr symbol")));
            ids.push(vocab.eos());
            let reference = tmslab_core::TokenSeq::new(ids);
            out.push(Example {
                task_id: e.task_id.clone(),
                prompt: e.prompt.clone(),
                gold_answer: extract_answer(&reference, vocab).expect("marker present"),
                reference,
            });
        }
    }
    Ok(out)
}

/// The working directory, with the `TMSLAB_WORKDIR` override applied.
pub fn effective_workdir(cfg: &LabConfig) -> PathBuf {
    match std::env::var("TMSLAB_WORKDIR") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.workdir),
    }
}

pub fn write_datasets(suite: &Suite, workdir: &Path) -> Result<()> {
    let data_dir = workdir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    suite.target.save_tsv(&data_dir.join("countdown_micro.tsv"))?;
    for (kind, ds) in &suite.retention {
        ds.save_tsv(&data_dir.join(format!("{}.tsv", kind.id())))?;
    }
    Ok(())
}

pub struct CellSummary {
    pub method: String,
    pub seed: u64,
    pub report: EvalReport,
}

pub struct RunSummary {
    pub workdir: PathBuf,
    pub cells: Vec<CellSummary>,
}

/// One seed's shared state: the pretrained base, its scores, and the memoized
/// harvesting SFT run.
struct SeedLab<'a> {
    cfg: &'a LabConfig,
    suite: &'a Suite,
    seed: u64,
    base: Policy,
    target_verifier: Verifier,
    retention_verifiers: Vec<(TaskKind, Verifier)>,
    train_pairs: Vec<(TokenSeq, TokenSeq)>,
    val_prompts: PromptSet,
    base_retention: BTreeMap<String, f64>,
    sft_run: Option<SftRun>,
}

/// Default tabular context length. Order three is the smallest window that
/// lets the marker-prefixed retention tasks coexist while their answer
/// regions still collide with countdown supervision.
pub const POLICY_ORDER: usize = 3;

impl<'a> SeedLab<'a> {
    fn new(cfg: &'a LabConfig, suite: &'a Suite, seed: u64) -> Result<Self> {
        let vocab = suite.vocab.clone();
        let init = Policy::new(POLICY_ORDER, vocab.clone())?;

        // pretraining: SFT on the concatenated retention train splits gives
        // the base policy the capabilities that post-training can erode; the
        // countdown pool adds the target task's output format without
        // touching its actual splits
        let mut pretrain_data: Vec<Example> = Vec::new();
        for (_, ds) in &suite.retention {
            pretrain_data.extend(ds.train.iter().cloned());
        }
        pretrain_data.extend(suite.pretrain_pool.iter().cloned());
        let pre_cfg = TrainConfig {
            lr: cfg.pretrain.lr,
            steps: cfg.pretrain.steps,
            batch_size: 0,
            ckpt_count: 1,
            eval_every: 0,
            seed: derive_seed(seed, "pretrain"),
        };
        let base = train_sft(&init, &pretrain_data, &pre_cfg, None)?.policy;

        let target_verifier = Verifier::new(TaskKind::CountdownMicro, vocab.clone());
        let retention_verifiers: Vec<(TaskKind, Verifier)> = suite
            .retention
            .iter()
            .map(|(kind, _)| (*kind, Verifier::new(*kind, vocab.clone())))
            .collect();

        let decode = eval_decode(cfg, seed);
        let mut base_retention = BTreeMap::new();
        for ((kind, ds), (_, verifier)) in suite.retention.iter().zip(&retention_verifiers) {
            base_retention
                .insert(kind.id().to_string(), score_benchmark(&base, &ds.train, verifier, &decode)?);
        }

        Ok(SeedLab {
            cfg,
            suite,
            seed,
            base,
            target_verifier,
            retention_verifiers,
            train_pairs: Dataset::pairs(&suite.target.train),
            val_prompts: Dataset::prompt_set(&suite.target.val),
            base_retention,
            sft_run: None,
        })
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.cfg.train.lr,
            steps: self.cfg.train.steps,
            batch_size: self.cfg.train.batch_size,
            ckpt_count: self.cfg.train.ckpt_count,
            eval_every: self.cfg.train.eval_every,
            seed: self.seed,
        }
    }

    fn probe(&self) -> DriftProbe<'_> {
        DriftProbe {
            base: &self.base,
            train_pairs: &self.train_pairs,
            val_split: &self.suite.target.val,
            target_bench: &self.suite.target.train,
            target_verifier: &self.target_verifier,
            retention: self
                .retention_verifiers
                .iter()
                .zip(&self.suite.retention)
                .map(|((_, v), (_, ds))| (v, ds.train.as_slice()))
                .collect(),
            kl_prompts: &self.val_prompts,
            kl_samples: self.cfg.eval.kl_samples,
            decode: eval_decode(self.cfg, self.seed),
        }
    }

    /// The baseline SFT run, shared by the `sft` cell, final-distillation
    /// teacher, and trajectory harvesting (stage 1).
    fn ensure_sft(&mut self) -> Result<&SftRun> {
        if self.sft_run.is_none() {
            let run = train_sft(&self.base, &self.suite.target.train, &self.train_config(), Some(&self.probe()))?;
            self.sft_run = Some(run);
        }
        Ok(self.sft_run.as_ref().unwrap())
    }

    fn harvest_buffer(&mut self) -> Result<TrajectoryBuffer> {
        let c = self.cfg;
        let decode = DecodePolicy::new(c.eval.temperature, c.eval.top_p, c.eval.max_len, self.seed)?;
        let prompts = Dataset::prompt_set(&self.suite.target.train);
        let run = self.ensure_sft()?;
        TrajectoryBuffer::harvest(&run.checkpoints, &prompts, &decode)
    }

    fn run_method(&mut self, method: Method, workdir: &Path) -> Result<EvalReport> {
        let cfg = self.train_config();
        let dir = workdir.join(method.id()).join(self.seed.to_string());
        std::fs::create_dir_all(&dir)?;
        let decode = eval_decode(self.cfg, self.seed);
        let rl_decode = DecodePolicy::ancestral(self.cfg.eval.max_len, self.seed);
        let train = &self.suite.target.train;

        let run: SftRun = match method {
            Method::Sft => self.ensure_sft()?.clone(),
            Method::SelfSft => {
                let outputs =
                    generate_teacher_outputs(&self.base, train, &decode, self.seed, "selfgen");
                distill(&self.base, &outputs, &cfg, Some(&self.probe()))?
            }
            Method::FinalSft => {
                let teacher = self.ensure_sft()?.policy.clone();
                let outputs = generate_teacher_outputs(&teacher, train, &decode, self.seed, "finalgen");
                distill(&self.base, &outputs, &cfg, Some(&self.probe()))?
            }
            Method::Reinforce => {
                let prompts = Dataset::prompt_set(train);
                train_reinforce(
                    &self.base,
                    &prompts,
                    &self.target_verifier,
                    &cfg,
                    &self.cfg.rl,
                    &rl_decode,
                    Some(&self.probe()),
                )?
            }
            Method::Grpo => {
                let prompts = Dataset::prompt_set(train);
                train_grpo(
                    &self.base,
                    &prompts,
                    &self.target_verifier,
                    &cfg,
                    &self.cfg.rl,
                    &rl_decode,
                    Some(&self.probe()),
                )?
            }
            Method::Tms => {
                let buffer = self.harvest_buffer()?;
                buffer.save(&dir.join("buffer.txt"))?;
                let mix = MixtureSpec::new(
                    self.cfg.mixture.alpha,
                    CheckpointDist::make(self.cfg.mixture.ckpt_dist, self.cfg.train.ckpt_count)?,
                )?;
                train_tms_student(&self.base, train, &buffer, &mix, &cfg, Some(&self.probe()))?
            }
        };

        for (i, ckpt) in run.checkpoints.iter().enumerate() {
            checkpoint::save_policy(&dir.join(format!("ckpt_{:03}.bin", i + 1)), &ckpt.params)?;
        }
        std::fs::write(dir.join("drift.csv"), drift_csv(&run.drift))?;

        let report = self.evaluate(&run.policy, method.id(), method.is_rl())?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        Ok(report)
    }

    fn evaluate(&self, policy: &Policy, method: &str, is_rl: bool) -> Result<EvalReport> {
        let cfg = self.cfg;
        let decode = eval_decode(cfg, self.seed);
        let mut target = BTreeMap::new();
        target.insert(
            self.suite.target.task_id.clone(),
            score_benchmark(policy, &self.suite.target.train, &self.target_verifier, &decode)?,
        );
        let mut retention = BTreeMap::new();
        for ((kind, ds), (_, verifier)) in self.suite.retention.iter().zip(&self.retention_verifiers) {
            retention
                .insert(kind.id().to_string(), score_benchmark(policy, &ds.train, verifier, &decode)?);
        }
        let deltas: BTreeMap<String, f64> = retention
            .iter()
            .map(|(k, v)| (k.clone(), v - self.base_retention[k]))
            .collect();
        let delta_vals: Vec<f64> = deltas.values().copied().collect();
        let forgetting = metrics::forgetting_score(&delta_vals)?;
        let xfer = metrics::xfer_score(&self.base_retention, &retention)?;
        let kl = metrics::kl_to_base(
            policy,
            &self.base,
            &self.val_prompts,
            &KlMode::MonteCarlo {
                max_len: cfg.eval.max_len,
                n_samples: cfg.eval.kl_samples,
                seed: derive_seed(self.seed, "report_kl"),
            },
        )?;
        let pld_val = metrics::pld_val(policy, &self.suite.target.val, cfg.eval.max_len)?;
        let estimator = if cfg.eval.pass_estimator_any_of {
            PassKEstimator::AnyOf
        } else {
            PassKEstimator::Unbiased
        };
        let diversity: DiversityReport = metrics::diversity_suite(
            policy,
            &self.suite.target.train,
            &self.target_verifier,
            &decode,
            cfg.eval.k,
            &cfg.eval.pass_ks,
            estimator,
        )?;
        Ok(EvalReport {
            method: method.to_string(),
            seed: self.seed,
            target,
            retention,
            deltas,
            forgetting,
            xfer,
            kl_to_base: kl.max(0.0),
            pld_val,
            pld_sft_family_only: is_rl,
            diversity,
        })
    }
}

fn eval_decode(cfg: &LabConfig, seed: u64) -> DecodePolicy {
    DecodePolicy {
        temperature: cfg.eval.temperature,
        top_p: cfg.eval.top_p,
        max_len: cfg.eval.max_len,
        seed: derive_seed(seed, "eval"),
    }
}

/// Execute the full pipeline for every `(method, seed)` cell.
pub fn cmd_run(cfg: &LabConfig) -> Result<RunSummary> {
    let workdir = effective_workdir(cfg);
    std::fs::create_dir_all(&workdir)?;
    std::fs::write(workdir.join("config.txt"), cfg.serialize())?;
    let suite = build_suite(cfg)?;
    write_datasets(&suite, &workdir)?;

    let mut cells = Vec::new();
    let mut pareto = String::from(EvalReport::PARETO_HEADER);
    pareto.push('\n');
    for &seed in &cfg.run.seeds {
        let mut lab = SeedLab::new(cfg, &suite, seed)?;

        // the frozen starting point, reported like any other cell
        let base_dir = workdir.join("base").join(seed.to_string());
        std::fs::create_dir_all(&base_dir)?;
        checkpoint::save_policy(&base_dir.join("base.bin"), &lab.base)?;
        let base_report = lab.evaluate(&lab.base, "base", false)?;
        std::fs::write(base_dir.join("report.json"), base_report.to_json())?;
        pareto.push_str(&base_report.pareto_row());
        pareto.push('\n');
        cells.push(CellSummary { method: "base".into(), seed, report: base_report });

        for &method in &cfg.run.methods {
            let report = lab.run_method(method, &workdir)?;
            pareto.push_str(&report.pareto_row());
            pareto.push('\n');
            cells.push(CellSummary { method: method.id().into(), seed, report });
        }
    }
    std::fs::write(workdir.join("pareto.csv"), pareto)?;
    Ok(RunSummary { workdir, cells })
}

/// Generate and write the datasets only.
pub fn cmd_gen_data(cfg: &LabConfig) -> Result<PathBuf> {
    let workdir = effective_workdir(cfg);
    std::fs::create_dir_all(&workdir)?;
    let suite = build_suite(cfg)?;
    write_datasets(&suite, &workdir)?;
    Ok(workdir.join("data"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    T,
    Alpha,
    CkptDist,
}

impl SweepAxis {
    pub fn from_id(s: &str) -> Option<SweepAxis> {
        match s {
            "T" | "t" => Some(SweepAxis::T),
            "alpha" => Some(SweepAxis::Alpha),
            "ckpt_dist" => Some(SweepAxis::CkptDist),
            _ => None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            SweepAxis::T => "T",
            SweepAxis::Alpha => "alpha",
            SweepAxis::CkptDist => "ckpt_dist",
        }
    }
}

pub struct SweepRow {
    pub axis_value: String,
    pub target_avg: f64,
    pub xfer: f64,
    pub forgetting: f64,
    pub kl_to_base: f64,
}

pub const SWEEP_HEADER: &str = "axis_value,target_avg,xfer,forgetting,kl_to_base";

/// Run the trajectory-mixed student once per axis value at a fixed total
/// step budget, on the first configured seed.
pub fn cmd_sweep(cfg: &LabConfig, axis: SweepAxis, values: &[String]) -> Result<(PathBuf, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(LabError::InvalidParameter("sweep needs at least one value".into()));
    }
    let workdir = effective_workdir(cfg);
    std::fs::create_dir_all(&workdir)?;
    let suite = build_suite(cfg)?;
    let seed = cfg.run.seeds[0];

    let mut rows = Vec::new();
    for value in values {
        let mut vcfg = cfg.clone();
        match axis {
            SweepAxis::T => {
                let t: usize = value
                    .parse()
                    .map_err(|_| LabError::InvalidParameter(format!("bad T value {value:?}")))?;
                if t < 1 || vcfg.train.steps < t {
                    return Err(LabError::InvalidParameter(format!(
                        "T={t} incompatible with steps={}",
                        vcfg.train.steps
                    )));
                }
                vcfg.train.ckpt_count = t;
            }
            SweepAxis::Alpha => {
                let a: f64 = value
                    .parse()
                    .map_err(|_| LabError::InvalidParameter(format!("bad alpha value {value:?}")))?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(LabError::InvalidParameter(format!("alpha {a} outside [0,1]")));
                }
                vcfg.mixture.alpha = a;
            }
            SweepAxis::CkptDist => match DistKind::from_id(value) {
                Some(kind) if kind != DistKind::Custom => vcfg.mixture.ckpt_dist = kind,
                _ => return Err(LabError::InvalidParameter(format!("bad ckpt_dist {value:?}"))),
            },
        }
        let mut lab = SeedLab::new(&vcfg, &suite, seed)?;
        let buffer = lab.harvest_buffer()?;
        let mix = MixtureSpec::new(
            vcfg.mixture.alpha,
            CheckpointDist::make(vcfg.mixture.ckpt_dist, vcfg.train.ckpt_count)?,
        )?;
        let run = train_tms_student(
            &lab.base,
            &suite.target.train,
            &buffer,
            &mix,
            &lab.train_config(),
            None,
        )?;
        let report = lab.evaluate(&run.policy, "tms", false)?;
        rows.push(SweepRow {
            axis_value: value.clone(),
            target_avg: report.target_avg(),
            xfer: report.xfer,
            forgetting: report.forgetting,
            kl_to_base: report.kl_to_base,
        });
    }

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        let kl = if r.kl_to_base.is_finite() { r.kl_to_base.to_string() } else { "inf".into() };
        csv.push_str(&format!("{},{},{},{},{}\n", r.axis_value, r.target_avg, r.xfer, r.forgetting, kl));
    }
    let path = workdir.join(format!("sweep_{}.csv", axis.id()));
    std::fs::write(&path, csv)?;
    Ok((path, rows))
}

