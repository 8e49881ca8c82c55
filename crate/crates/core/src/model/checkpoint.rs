//! Little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "RAGTRCK\0"
//! version    u32       1
//! config     u64 x 8   vocab_size d_model n_enc_layers n_dec_layers
//!                      n_heads d_ff max_len seed
//!            u8        tie_output
//!            f64       ln_eps
//! count      u32       number of parameter tensors
//! per tensor u32 name length, name bytes (UTF-8),
//!            u32 rank, u64 x rank extents, f64 x product(extents)
//! ```
//!
//! Parameters appear in the model's declared layout order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{ModelConfig, ModelError, Param, Result, Seq2Seq};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RAGTRCK\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Seq2Seq, w: &mut impl Write) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_enc_layers,
        c.n_dec_layers,
        c.n_heads,
        c.d_ff,
        c.max_len,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&[u8::from(c.tie_output)])?;
    w.write_all(&c.ln_eps.to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| ModelError::Checkpoint(format!("value {v} overflows usize")))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Seq2Seq> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = to_usize(read_u64(r)?)?;
    }
    let seed = read_u64(r)?;
    let mut tie = [0u8; 1];
    r.read_exact(&mut tie)?;
    let ln_eps = read_f64(r)?;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_enc_layers: dims[2],
        n_dec_layers: dims[3],
        n_heads: dims[4],
        d_ff: dims[5],
        max_len: dims[6],
        seed,
        tie_output: tie[0] != 0,
        ln_eps,
    };
    config.validate()?;
    let count = read_u32(r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(ModelError::Checkpoint(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(ModelError::Checkpoint(format!("rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| to_usize(read_u64(r)?))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f64(r)?);
        }
        params.push(Param {
            name,
            value: Arc::new(Tensor::new(&shape, data)?),
        });
    }
    Seq2Seq::from_params(config, params)
}

pub fn save_checkpoint(model: &Seq2Seq, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2Seq> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
