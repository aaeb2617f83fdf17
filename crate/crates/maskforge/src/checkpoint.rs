//! Binary checkpoint format.
//!
//! Layout: magic "MFCK", version u16, then the architecture fields
//! (data_dim, hidden count, hidden dims, cond_vocab, cond_embed_dim,
//! time_embed_dim as u32), then N little-endian f64 parameters.
//! Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::nn::{Architecture, DenoiserParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u16 = 1;

pub fn save(params: &DenoiserParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let arch = &params.arch;
    buf.extend_from_slice(&(arch.data_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.hidden_dims.len() as u32).to_le_bytes());
    for &h in &arch.hidden_dims {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(arch.cond_vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.cond_embed_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.time_embed_dim as u32).to_le_bytes());
    for &v in &params.flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // write to a sibling temp file, then rename over the target
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<DenoiserParams> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let mut ver = [0u8; 2];
    f.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let data_dim = read_u32(&mut f)? as usize;
    let n_hidden = read_u32(&mut f)? as usize;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint("implausible hidden layer count".into()));
    }
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(read_u32(&mut f)? as usize);
    }
    let arch = Architecture {
        data_dim,
        hidden_dims,
        cond_vocab: read_u32(&mut f)? as usize,
        cond_embed_dim: read_u32(&mut f)? as usize,
        time_embed_dim: read_u32(&mut f)? as usize,
    };
    arch.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    let n = arch.param_count();
    let mut params = DenoiserParams::zeros(arch)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = vec![0u8; n * 8];
    f.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        params.flat[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(params)
}
