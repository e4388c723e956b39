//! Checkpoint snapshots and their on-disk format.
//!
//! Binary layout (little-endian throughout): magic bytes `"TMSLAB1\0"`,
//! version `u32`, order `u32`, vocab size `u32`, the four special token ids
//! (`u32` each: bos, eos, ans, pad), row count `u64`, then one record per
//! stored context: `order` context ids (`u32`) followed by `V` logits
//! (`f64`). Rows are written in sorted context order, so identical policies
//! serialize to identical bytes.

use crate::error::{LabError, Result};
use crate::policy::Policy;
use crate::vocab::{TokenId, Vocab};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const MAGIC: &[u8; 8] = b"TMSLAB1\0";
pub const VERSION: u32 = 1;

/// A training-step snapshot of a policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub params: Policy,
    pub tag: String,
}

pub fn save_policy(path: &Path, policy: &Policy) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let vocab = policy.vocab();
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(policy.order() as u32).to_le_bytes())?;
    f.write_all(&(vocab.size() as u32).to_le_bytes())?;
    for id in [vocab.bos(), vocab.eos(), vocab.ans(), vocab.pad()] {
        f.write_all(&id.to_le_bytes())?;
    }
    f.write_all(&(policy.row_count() as u64).to_le_bytes())?;
    for (ctx, logits) in policy.rows() {
        for &id in ctx {
            f.write_all(&id.to_le_bytes())?;
        }
        for &l in logits {
            f.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_policy(path: &Path, vocab: Arc<Vocab>) -> Result<Policy> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LabError::BadFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(LabError::BadFormat(format!("unsupported version {version}")));
    }
    let order = read_u32(&mut f)? as usize;
    let v = read_u32(&mut f)? as usize;
    let specials = [read_u32(&mut f)?, read_u32(&mut f)?, read_u32(&mut f)?, read_u32(&mut f)?];
    if v != vocab.size()
        || specials != [vocab.bos(), vocab.eos(), vocab.ans(), vocab.pad()]
    {
        return Err(LabError::BadFormat("checkpoint vocabulary does not match".into()));
    }
    let rows = read_u64(&mut f)?;
    let mut policy = Policy::new(order, vocab)?;
    for _ in 0..rows {
        let mut ctx = Vec::with_capacity(order);
        for _ in 0..order {
            ctx.push(read_u32(&mut f)? as TokenId);
        }
        let mut logits = Vec::with_capacity(v);
        for _ in 0..v {
            logits.push(read_f64(&mut f)?);
        }
        policy.set_row(ctx, logits)?;
    }
    Ok(policy)
}

/// Textual mirror of the binary format, for diffing.
pub fn dump_text(policy: &Policy) -> String {
    let vocab = policy.vocab();
    let mut out = String::new();
    out.push_str("TMSLAB1\n");
    out.push_str(&format!("version {VERSION}\n"));
    out.push_str(&format!("order {}\n", policy.order()));
    out.push_str(&format!("vocab {}\n", vocab.size()));
    out.push_str(&format!(
        "specials bos={} eos={} ans={} pad={}\n",
        vocab.bos(),
        vocab.eos(),
        vocab.ans(),
        vocab.pad()
    ));
    out.push_str(&format!("rows {}\n", policy.row_count()));
    for (ctx, logits) in policy.rows() {
        let c: Vec<String> = ctx.iter().map(|i| i.to_string()).collect();
        let l: Vec<String> = logits.iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&format!("{} | {}\n", c.join(" "), l.join(" ")));
    }
    out
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(f: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
