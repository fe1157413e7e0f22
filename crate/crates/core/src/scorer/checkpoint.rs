//! Versioned binary checkpoints.
//!
//! Layout (little endian): `b"HTSC"`, then `u32` version, feature dim `F`,
//! embedding size `E`, hidden size `H`, neighbor count `M`, flags
//! (bit 0: appearance channels, bit 1: optimizer state follows). The parameter
//! blob follows as `f64` values in [`Layout::tensors`](super::Layout::tensors)
//! order, then the batch-norm running mean and variance (`E` values each).
//! Optimizer state, when present: `u64` step, `f64` lr, β1, β2, ε, then the
//! first and second moments (one value per parameter each).

use std::io::{Read, Write};

use super::{Architecture, OptimizerState, ScorerModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HTSC";
const FLAG_APPEARANCE: u32 = 1;
const FLAG_OPTIMIZER: u32 = 2;

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_checkpoint<W: Write>(mut w: W, model: &ScorerModel, optimizer: Option<&OptimizerState>) -> Result<()> {
    let arch = model.architecture();
    let mut flags = 0;
    if arch.use_appearance {
        flags |= FLAG_APPEARANCE;
    }
    if optimizer.is_some() {
        flags |= FLAG_OPTIMIZER;
    }
    w.write_all(MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        arch.feature_dim() as u32,
        arch.embed_dim as u32,
        arch.hidden as u32,
        arch.neighbors as u32,
        flags,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    put_f64s(&mut w, &model.params)?;
    put_f64s(&mut w, &model.running_mean)?;
    put_f64s(&mut w, &model.running_var)?;
    if let Some(o) = optimizer {
        if o.m.len() != model.params.len() || o.v.len() != model.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        w.write_all(&o.step.to_le_bytes())?;
        put_f64s(&mut w, &[o.lr, o.beta1, o.beta2, o.eps])?;
        put_f64s(&mut w, &o.m)?;
        put_f64s(&mut w, &o.v)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(ScorerModel, Option<OptimizerState>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let f = get_u32(&mut r)? as usize;
    let e = get_u32(&mut r)? as usize;
    let h = get_u32(&mut r)? as usize;
    let m = get_u32(&mut r)? as usize;
    let flags = get_u32(&mut r)?;
    let arch = Architecture {
        neighbors: m,
        use_appearance: flags & FLAG_APPEARANCE != 0,
        embed_dim: e,
        hidden: h,
    };
    if arch.feature_dim() != f {
        return Err(Error::Checkpoint(format!(
            "header feature dim {f} inconsistent with M={m} (expected {})",
            arch.feature_dim()
        )));
    }
    if e == 0 || h == 0 {
        return Err(Error::Checkpoint("zero-sized layer".into()));
    }
    let mut model = ScorerModel::zeros(arch);
    let n = model.param_count();
    model.params = get_f64s(&mut r, n)?;
    model.running_mean = get_f64s(&mut r, e)?;
    model.running_var = get_f64s(&mut r, e)?;
    let optimizer = if flags & FLAG_OPTIMIZER != 0 {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let hyper = get_f64s(&mut r, 4)?;
        Some(OptimizerState {
            step: u64::from_le_bytes(b),
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            m: get_f64s(&mut r, n)?,
            v: get_f64s(&mut r, n)?,
        })
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, optimizer))
}
