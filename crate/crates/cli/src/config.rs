//! Experiment configuration: plain-text `key = value` sections. Unknown
//! sections or keys are load errors, every value is validated against its
//! type's invariants at load, and `load -> serialize -> load` is an identity.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use tmslab_core::tasks::TaskKind;
use tmslab_core::trainers::RlConfig;
use tmslab_core::trajectory::DistKind;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Sft,
    SelfSft,
    FinalSft,
    Reinforce,
    Grpo,
    Tms,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Sft, Method::SelfSft, Method::FinalSft, Method::Reinforce, Method::Grpo, Method::Tms];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::SelfSft => "self_sft",
            Method::FinalSft => "final_sft",
            Method::Reinforce => "reinforce",
            Method::Grpo => "grpo",
            Method::Tms => "tms",
        }
    }

    pub fn from_id(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.id() == s)
    }

    pub fn is_rl(&self) -> bool {
        matches!(self, Method::Reinforce | Method::Grpo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionTaskCfg {
    pub kind: TaskKind,
    pub size: usize,
    pub content_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub size: usize,
    pub seed: u64,
    pub numbers_per_instance: usize,
    pub value_min: u8,
    pub value_max: u8,
    pub copy: RetentionTaskCfg,
    pub reverse: RetentionTaskCfg,
    pub parity: RetentionTaskCfg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Extra countdown instances (disjoint from the target splits) mixed into
    /// pretraining so the base policy knows the task format; 0 disables.
    pub countdown_pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ckpt_count: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSection {
    pub alpha: f64,
    pub ckpt_dist: DistKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub k: usize,
    pub pass_ks: Vec<usize>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub kl_samples: usize,
    pub benchmarks: Vec<TaskKind>,
    pub pass_estimator_any_of: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub run: RunSection,
    pub task: TaskSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub rl: RlConfig,
    pub mixture: MixtureSection,
    pub eval: EvalSection,
    pub workdir: String,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            run: RunSection { seed: 0, seeds: vec![0], methods: vec![Method::Sft] },
            task: TaskSection {
                size: 20,
                seed: 0,
                numbers_per_instance: 2,
                value_min: 1,
                value_max: 9,
                copy: RetentionTaskCfg { kind: TaskKind::Copy, size: 30, content_len: 2 },
                reverse: RetentionTaskCfg { kind: TaskKind::Reverse, size: 8, content_len: 1 },
                parity: RetentionTaskCfg { kind: TaskKind::Parity, size: 8, content_len: 1 },
            },
            pretrain: PretrainSection { steps: 2000, lr: 0.2, countdown_pool: 20 },
            train: TrainSection { lr: 0.05, steps: 5000, batch_size: 0, ckpt_count: 10, eval_every: 0 },
            rl: RlConfig::default(),
            mixture: MixtureSection { alpha: 0.25, ckpt_dist: DistKind::Uniform },
            eval: EvalSection {
                k: 100,
                pass_ks: vec![1, 10, 100],
                temperature: 1.0,
                top_p: 1.0,
                max_len: 12,
                kl_samples: 32,
                benchmarks: vec![TaskKind::Copy, TaskKind::Reverse, TaskKind::Parity],
                pass_estimator_any_of: false,
            },
            workdir: "runs/out".into(),
        }
    }
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<LabConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        LabConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<LabConfig> {
        let mut cfg = LabConfig::default();
        let mut section = String::new();
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return err(format!("line {}: malformed section header", lineno + 1));
                };
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return err(format!("line {}: unknown section [{section}]", lineno + 1));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", lineno + 1));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if section.is_empty() {
                return err(format!("line {}: key {key:?} outside any section", lineno + 1));
            }
            if !seen.insert((section.clone(), key.clone())) {
                return err(format!("line {}: duplicate key {key:?} in [{section}]", lineno + 1));
            }
            cfg.set(&section, &key, &value)
                .map_err(|e| ConfigError(format!("line {}: {}", lineno + 1, e.0)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "seed") => self.run.seed = parse(value, "run.seed")?,
            ("run", "seeds") => self.run.seeds = parse_list(value, "run.seeds")?,
            ("run", "methods") => {
                let names: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                let mut methods = Vec::new();
                for n in names {
                    match Method::from_id(n) {
                        Some(m) => methods.push(m),
                        None => return err(format!("unknown method {n:?}")),
                    }
                }
                self.run.methods = methods;
            }
            ("task", "size") => self.task.size = parse(value, "task.size")?,
            ("task", "seed") => self.task.seed = parse(value, "task.seed")?,
            ("task", "numbers_per_instance") => {
                self.task.numbers_per_instance = parse(value, "task.numbers_per_instance")?
            }
            ("task", "value_min") => self.task.value_min = parse(value, "task.value_min")?,
            ("task", "value_max") => self.task.value_max = parse(value, "task.value_max")?,
            ("task", "copy_size") => self.task.copy.size = parse(value, "task.copy_size")?,
            ("task", "copy_content_len") => self.task.copy.content_len = parse(value, "task.copy_content_len")?,
            ("task", "reverse_size") => self.task.reverse.size = parse(value, "task.reverse_size")?,
            ("task", "reverse_content_len") => {
                self.task.reverse.content_len = parse(value, "task.reverse_content_len")?
            }
            ("task", "parity_size") => self.task.parity.size = parse(value, "task.parity_size")?,
            ("task", "parity_content_len") => {
                self.task.parity.content_len = parse(value, "task.parity_content_len")?
            }
            ("pretrain", "steps") => self.pretrain.steps = parse(value, "pretrain.steps")?,
            ("pretrain", "lr") => self.pretrain.lr = parse(value, "pretrain.lr")?,
            ("pretrain", "countdown_pool") => {
                self.pretrain.countdown_pool = parse(value, "pretrain.countdown_pool")?
            }
            ("train", "lr") => self.train.lr = parse(value, "train.lr")?,
            ("train", "steps") => self.train.steps = parse(value, "train.steps")?,
            ("train", "batch_size") => self.train.batch_size = parse(value, "train.batch_size")?,
            ("train", "ckpt_count") => self.train.ckpt_count = parse(value, "train.ckpt_count")?,
            ("train", "eval_every") => self.train.eval_every = parse(value, "train.eval_every")?,
            ("rl", "group_size") => self.rl.group_size = parse(value, "rl.group_size")?,
            ("rl", "baseline_decay") => self.rl.baseline_decay = parse(value, "rl.baseline_decay")?,
            ("rl", "kl_beta") => self.rl.kl_beta = parse(value, "rl.kl_beta")?,
            ("rl", "std_eps") => self.rl.std_eps = parse(value, "rl.std_eps")?,
            ("mixture", "alpha") => self.mixture.alpha = parse(value, "mixture.alpha")?,
            ("mixture", "ckpt_dist") => match DistKind::from_id(value) {
                Some(DistKind::Custom) | None => return err(format!("unknown ckpt_dist {value:?}")),
                Some(kind) => self.mixture.ckpt_dist = kind,
            },
            ("eval", "k") => self.eval.k = parse(value, "eval.k")?,
            ("eval", "pass_ks") => self.eval.pass_ks = parse_list(value, "eval.pass_ks")?,
            ("eval", "temperature") => self.eval.temperature = parse(value, "eval.temperature")?,
            ("eval", "top_p") => self.eval.top_p = parse(value, "eval.top_p")?,
            ("eval", "max_len") => self.eval.max_len = parse(value, "eval.max_len")?,
            ("eval", "kl_samples") => self.eval.kl_samples = parse(value, "eval.kl_samples")?,
            ("eval", "benchmarks") => {
                let mut kinds = Vec::new();
                for n in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match TaskKind::from_id(n) {
                        Some(TaskKind::CountdownMicro) | None => {
                            return err(format!("invalid retention benchmark {n:?}"))
                        }
                        Some(k) => kinds.push(k),
                    }
                }
                self.eval.benchmarks = kinds;
            }
            ("eval", "pass_estimator") => match value {
                "unbiased" => self.eval.pass_estimator_any_of = false,
                "any_of" => self.eval.pass_estimator_any_of = true,
                other => return err(format!("unknown pass_estimator {other:?}")),
            },
            ("paths", "workdir") => self.workdir = value.to_string(),
            _ => return err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return err("run.seeds must list at least one seed");
        }
        let uniq: BTreeSet<_> = self.run.seeds.iter().collect();
        if uniq.len() != self.run.seeds.len() {
            return err("run.seeds must be distinct");
        }
        if self.run.methods.is_empty() {
            return err("run.methods must list at least one method");
        }
        let uniq: BTreeSet<_> = self.run.methods.iter().collect();
        if uniq.len() != self.run.methods.len() {
            return err("run.methods must be distinct");
        }
        if self.task.size < 3 {
            return err("task.size must be >= 3");
        }
        if !(2..=4).contains(&self.task.numbers_per_instance) {
            return err("task.numbers_per_instance must be in [2,4]");
        }
        if self.task.value_min < 1 || self.task.value_max > 9 || self.task.value_min > self.task.value_max {
            return err("task value range must lie within [1,9]");
        }
        for r in [&self.task.copy, &self.task.reverse, &self.task.parity] {
            if r.size < 3 {
                return err(format!("{} size must be >= 3", r.kind.id()));
            }
            if !(1..=6).contains(&r.content_len) {
                return err(format!("{} content_len must be in [1,6]", r.kind.id()));
            }
        }
        if !(self.pretrain.lr >= 0.0) || self.pretrain.steps < 1 {
            return err("pretrain needs steps >= 1 and lr >= 0");
        }
        if self.pretrain.countdown_pool != 0 && self.pretrain.countdown_pool < 3 {
            return err("pretrain.countdown_pool must be 0 or >= 3");
        }
        if !(self.train.lr >= 0.0) {
            return err("train.lr must be >= 0");
        }
        if self.train.ckpt_count < 1 || self.train.steps < self.train.ckpt_count {
            return err("train.steps must be >= train.ckpt_count >= 1");
        }
        if let Err(e) = self.rl.validate() {
            return err(e.to_string());
        }
        if !(0.0..=1.0).contains(&self.mixture.alpha) {
            return err("mixture.alpha must be in [0,1]");
        }
        if self.mixture.ckpt_dist == DistKind::Early && self.train.ckpt_count < 3 {
            return err("early checkpoint window needs ckpt_count >= 3");
        }
        if self.eval.k < 1 {
            return err("eval.k must be >= 1");
        }
        if self.eval.pass_ks.is_empty() || self.eval.pass_ks.iter().any(|&k| k == 0 || k > self.eval.k) {
            return err("eval.pass_ks must be non-empty with 1 <= k <= eval.k");
        }
        if !(self.eval.temperature > 0.0) {
            return err("eval.temperature must be > 0");
        }
        if !(self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return err("eval.top_p must be in (0,1]");
        }
        if self.eval.max_len < 2 {
            return err("eval.max_len must be >= 2");
        }
        if self.eval.kl_samples < 1 {
            return err("eval.kl_samples must be >= 1");
        }
        if self.eval.benchmarks.is_empty() {
            return err("eval.benchmarks must list at least one retention task");
        }
        let uniq: BTreeSet<_> = self.eval.benchmarks.iter().map(|k| k.id()).collect();
        if uniq.len() != self.eval.benchmarks.len() {
            return err("eval.benchmarks must be distinct");
        }
        if self.workdir.is_empty() {
            return err("paths.workdir must be set");
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let methods: Vec<&str> = self.run.methods.iter().map(|m| m.id()).collect();
        let seeds: Vec<String> = self.run.seeds.iter().map(|s| s.to_string()).collect();
        let pass_ks: Vec<String> = self.eval.pass_ks.iter().map(|k| k.to_string()).collect();
        let benches: Vec<&str> = self.eval.benchmarks.iter().map(|k| k.id()).collect();
        format!(
            "[run]\n\
             seed = {}\n\
             seeds = {}\n\
             methods = {}\n\
             \n\
             [task]\n\
             size = {}\n\
             seed = {}\n\
             numbers_per_instance = {}\n\
             value_min = {}\n\
             value_max = {}\n\
             copy_size = {}\n\
             copy_content_len = {}\n\
             reverse_size = {}\n\
             reverse_content_len = {}\n\
             parity_size = {}\n\
             parity_content_len = {}\n\
             \n\
             [pretrain]\n\
             steps = {}\n\
             lr = {}\n\
             countdown_pool = {}\n\
             \n\
             [train]\n\
             lr = {}\n\
             steps = {}\n\
             batch_size = {}\n\
             ckpt_count = {}\n\
             eval_every = {}\n\
             \n\
             [rl]\n\
             group_size = {}\n\
             baseline_decay = {}\n\
             kl_beta = {}\n\
             std_eps = {}\n\
             \n\
             [mixture]\n\
             alpha = {}\n\
             ckpt_dist = {}\n\
             \n\
             [eval]\n\
             k = {}\n\
             pass_ks = {}\n\
             temperature = {}\n\
             top_p = {}\n\
             max_len = {}\n\
             kl_samples = {}\n\
             benchmarks = {}\n\
             pass_estimator = {}\n\
             \n\
             [paths]\n\
             workdir = {}\n",
            self.run.seed,
            seeds.join(","),
            methods.join(","),
            self.task.size,
            self.task.seed,
            self.task.numbers_per_instance,
            self.task.value_min,
            self.task.value_max,
            self.task.copy.size,
            self.task.copy.content_len,
            self.task.reverse.size,
            self.task.reverse.content_len,
            self.task.parity.size,
            self.task.parity.content_len,
            self.pretrain.steps,
            self.pretrain.lr,
            self.pretrain.countdown_pool,
            self.train.lr,
            self.train.steps,
            self.train.batch_size,
            self.train.ckpt_count,
            self.train.eval_every,
            self.rl.group_size,
            self.rl.baseline_decay,
            self.rl.kl_beta,
            self.rl.std_eps,
            self.mixture.alpha,
            self.mixture.ckpt_dist.id(),
            self.eval.k,
            pass_ks.join(","),
            self.eval.temperature,
            self.eval.top_p,
            self.eval.max_len,
            self.eval.kl_samples,
            benches.join(","),
            if self.eval.pass_estimator_any_of { "any_of" } else { "unbiased" },
            self.workdir,
        )
    }
}

const SECTIONS: [&str; 8] = ["run", "task", "pretrain", "train", "rl", "mixture", "eval", "paths"];

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError(format!("bad value for {what}: {e}")))
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s, what))
        .collect()
}
