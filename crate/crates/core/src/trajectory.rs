//! Trajectory harvesting and mixture supervision.
//!
//! Stage 1 of trajectory-mixed supervision: run a baseline trainer, keep `T`
//! checkpoints, and store one sampled completion per `(checkpoint, prompt)`
//! cell in a [`TrajectoryBuffer`]. Stage 2 draws training targets from the
//! mixture `q_alpha = alpha * delta_reference + (1 - alpha) * sum_t p(t) *
//! delta_buffer[t]`, where `p(t)` is a [`CheckpointDist`].

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};
use crate::policy::{DecodePolicy, PromptSet, SeqDist};
use crate::rng::{self, Stream};
use crate::vocab::TokenSeq;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Uniform,
    Early,
    Late,
    Custom,
}

impl DistKind {
    pub fn id(&self) -> &'static str {
        match self {
            DistKind::Uniform => "uniform",
            DistKind::Early => "early",
            DistKind::Late => "late",
            DistKind::Custom => "custom",
        }
    }

    pub fn from_id(s: &str) -> Option<DistKind> {
        match s {
            "uniform" => Some(DistKind::Uniform),
            "early" => Some(DistKind::Early),
            "late" => Some(DistKind::Late),
            "custom" => Some(DistKind::Custom),
            _ => None,
        }
    }
}

/// A probability distribution over checkpoint indices `1..=T`.
///
/// The built-in kinds: `uniform` puts `1/T` everywhere; `early` is uniform on
/// the first `floor(T/3)` checkpoints; `late` is uniform on checkpoints
/// `ceil(2T/3)..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDist {
    pub kind: DistKind,
    /// `weights[i]` is the probability of checkpoint `t = i + 1`.
    pub weights: Vec<f64>,
}

impl CheckpointDist {
    pub fn make(kind: DistKind, t_count: usize) -> Result<Self> {
        if t_count < 1 {
            return Err(LabError::InvalidParameter("t_count must be >= 1".into()));
        }
        let weights = match kind {
            DistKind::Uniform => vec![1.0 / t_count as f64; t_count],
            DistKind::Early => {
                let m = t_count / 3;
                if m < 1 {
                    return Err(LabError::InfeasibleWindow(format!(
                        "early window needs floor(T/3) >= 1, T={t_count}"
                    )));
                }
                let mut w = vec![0.0; t_count];
                for wi in w.iter_mut().take(m) {
                    *wi = 1.0 / m as f64;
                }
                w
            }
            DistKind::Late => {
                let start = (2 * t_count + 2) / 3; // ceil(2T/3)
                let start = start.max(1);
                let m = t_count - start + 1;
                let mut w = vec![0.0; t_count];
                for wi in w.iter_mut().skip(start - 1) {
                    *wi = 1.0 / m as f64;
                }
                w
            }
            DistKind::Custom => {
                return Err(LabError::InvalidParameter(
                    "custom distributions take explicit weights".into(),
                ))
            }
        };
        Ok(CheckpointDist { kind, weights })
    }

    pub fn custom(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(LabError::InvalidParameter("weights must be non-empty".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(LabError::InvalidParameter("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidParameter(format!("weights must sum to 1, got {total}")));
        }
        Ok(CheckpointDist { kind: DistKind::Custom, weights })
    }

    pub fn t_count(&self) -> usize {
        self.weights.len()
    }

    /// Draw a checkpoint index in `1..=T`.
    pub fn sample_t(&self, rng: &mut Stream) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i + 1;
            }
        }
        // numerical tail: last index with positive mass
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(self.weights.len() - 1) + 1
    }
}

/// The mixture `q_alpha`: reference weight `alpha`, checkpoint law `p(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub alpha: f64,
    pub t_count: usize,
    pub ckpt_dist: CheckpointDist,
}

impl MixtureSpec {
    pub fn new(alpha: f64, ckpt_dist: CheckpointDist) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LabError::InvalidParameter(format!("alpha must be in [0,1], got {alpha}")));
        }
        Ok(MixtureSpec { alpha, t_count: ckpt_dist.t_count(), ckpt_dist })
    }
}

/// The harvested mapping `(t, prompt_id) -> sampled completion`, complete
/// over the declared prompt set times `1..=T` and immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    t_count: usize,
    seed: u64,
    decode: DecodePolicy,
    entries: BTreeMap<(usize, u32), TokenSeq>,
}

impl TrajectoryBuffer {
    /// Sample one completion per `(checkpoint, prompt)` cell. The stream for
    /// cell `(t, x)` is `(decode.seed, "harvest", [t, x])`, so the result is
    /// independent of iteration order.
    pub fn harvest(checkpoints: &[Checkpoint], prompts: &PromptSet, decode: &DecodePolicy) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(LabError::InvalidParameter("harvest needs at least one checkpoint".into()));
        }
        if prompts.is_empty() {
            return Err(LabError::EmptyBenchmark);
        }
        let mut entries = BTreeMap::new();
        for (i, ckpt) in checkpoints.iter().enumerate() {
            let t = i + 1;
            for (pid, prompt) in prompts.iter() {
                let mut stream = rng::stream(decode.seed, "harvest", &[t as u64, pid as u64]);
                let y = ckpt.params.sample(prompt, decode, &mut stream);
                entries.insert((t, pid), y);
            }
        }
        Ok(TrajectoryBuffer {
            t_count: checkpoints.len(),
            seed: decode.seed,
            decode: decode.clone(),
            entries,
        })
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn decode(&self) -> &DecodePolicy {
        &self.decode
    }

    pub fn get(&self, t: usize, prompt_id: u32) -> Result<&TokenSeq> {
        self.entries
            .get(&(t, prompt_id))
            .ok_or(LabError::IncompleteBuffer { t, prompt_id })
    }

    /// Verify completeness over `prompts x {1..T}`.
    pub fn check_complete(&self, prompts: &PromptSet) -> Result<()> {
        for t in 1..=self.t_count {
            for (pid, _) in prompts.iter() {
                if !self.entries.contains_key(&(t, pid)) {
                    return Err(LabError::IncompleteBuffer { t, prompt_id: pid });
                }
            }
        }
        Ok(())
    }

    /// Text format: a header line, then one `t <TAB> prompt_id <TAB> ids`
    /// record per cell in sorted order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n_prompts = self
            .entries
            .keys()
            .map(|&(_, pid)| pid)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "TMSBUF1 T={} prompts={} seed={}", self.t_count, n_prompts, self.seed)?;
        for ((t, pid), seq) in &self.entries {
            writeln!(f, "{t}\t{pid}\t{}", seq.to_id_string())?;
        }
        Ok(())
    }

    pub fn load(path: &Path, decode: DecodePolicy) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LabError::BadFormat("empty buffer file".into()))?;
        let mut t_count = None;
        let mut seed = None;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("TMSBUF1") {
            return Err(LabError::BadFormat("bad buffer header".into()));
        }
        for field in fields {
            if let Some(v) = field.strip_prefix("T=") {
                t_count = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("seed=") {
                seed = v.parse::<u64>().ok();
            }
        }
        let t_count = t_count.ok_or_else(|| LabError::BadFormat("missing T= in header".into()))?;
        let seed = seed.ok_or_else(|| LabError::BadFormat("missing seed= in header".into()))?;
        let mut entries = BTreeMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(LabError::BadFormat(format!("bad buffer record: {line:?}")));
            }
            let t: usize =
                parts[0].parse().map_err(|_| LabError::BadFormat("bad t field".into()))?;
            let pid: u32 =
                parts[1].parse().map_err(|_| LabError::BadFormat("bad prompt id field".into()))?;
            entries.insert((t, pid), TokenSeq::from_id_string(parts[2])?);
        }
        Ok(TrajectoryBuffer { t_count, seed, decode, entries })
    }
}

/// Draw one training target: the reference with probability `alpha`,
/// otherwise the buffer entry at `t ~ p(t)`.
pub fn sample_target(
    buffer: &TrajectoryBuffer,
    prompt_id: u32,
    reference: &TokenSeq,
    mix: &MixtureSpec,
    rng: &mut Stream,
) -> Result<TokenSeq> {
    let u: f64 = rng.gen();
    if u < mix.alpha {
        return Ok(reference.clone());
    }
    let t = mix.ckpt_dist.sample_t(rng);
    Ok(buffer.get(t, prompt_id)?.clone())
}

/// The explicit law of [`sample_target`]: `alpha` on the reference plus
/// `(1 - alpha) * p(t)` on each buffer entry, with identical sequences
/// merged into one atom.
pub fn mixture_dist_exact(
    buffer: &TrajectoryBuffer,
    prompt_id: u32,
    mix: &MixtureSpec,
    reference: &TokenSeq,
) -> Result<SeqDist> {
    let mut dist = SeqDist::new();
    dist.add(reference.clone(), mix.alpha);
    for (i, &w) in mix.ckpt_dist.weights.iter().enumerate() {
        let seq = buffer.get(i + 1, prompt_id)?;
        dist.add(seq.clone(), (1.0 - mix.alpha) * w);
    }
    Ok(dist)
}
