//! Binary checkpoint: model config, vocabulary and named parameter buffers.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic            8 bytes  "TTARAGCK"
//! format version   u32      currently 1
//! vocab_size       u64
//! embed_dim        u64
//! layers           u64
//! heads            u64
//! context_len      u64
//! seed             u64
//! flags            u64      bit 0: tied embeddings
//! token count      u64
//!   per token:     u32 byte length, UTF-8 bytes          (in id order)
//! tensor count     u64
//!   per tensor:    u32 name length, UTF-8 name,
//!                  u32 rank, rank x u64 dims,
//!                  product(dims) x f64 values             (IEEE-754 LE)
//! ```
//!
//! Tensors appear in model order, so a checkpoint restores bit-exactly.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::{Lm, LmConfig, LmError, ParameterSnapshot};
use super::vocab::{Vocab, VocabError};

pub const MAGIC: &[u8; 8] = b"TTARAGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] LmError),
}

pub fn write_checkpoint<W: Write>(mut w: W, lm: &Lm, vocab: &Vocab) -> Result<(), CheckpointError> {
    let c = lm.config();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.embed_dim, c.layers, c.heads, c.context_len] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&u64::from(c.tied_embeddings).to_le_bytes())?;
    w.write_all(&(vocab.len() as u64).to_le_bytes())?;
    for t in vocab.tokens() {
        write_str(&mut w, t)?;
    }
    let snap = lm.snapshot();
    w.write_all(&(snap.entries().len() as u64).to_le_bytes())?;
    for (name, shape, values) in snap.entries() {
        write_str(&mut w, name)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Lm, Vocab), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = LmConfig {
        vocab_size: read_usize(&mut r)?,
        embed_dim: read_usize(&mut r)?,
        layers: read_usize(&mut r)?,
        heads: read_usize(&mut r)?,
        context_len: read_usize(&mut r)?,
        seed: read_u64(&mut r)?,
        tied_embeddings: match read_u64(&mut r)? {
            0 => false,
            1 => true,
            f => return Err(CheckpointError::Corrupt(format!("unknown flags {f:#x}"))),
        },
    };
    let n_tokens = read_usize(&mut r)?;
    if n_tokens != config.vocab_size {
        return Err(CheckpointError::Corrupt(format!(
            "{n_tokens} tokens for vocab_size {}",
            config.vocab_size
        )));
    }
    let tokens = (0..n_tokens).map(|_| read_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let vocab = Vocab::from_tokens(tokens)?;

    let mut lm = Lm::new(config)?;
    let n_tensors = read_usize(&mut r)?;
    if n_tensors != lm.params().len() {
        return Err(CheckpointError::Corrupt(format!(
            "{n_tensors} tensors, model expects {}",
            lm.params().len()
        )));
    }
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| read_usize(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, shape, values));
    }
    let snap = ParameterSnapshot {
        generation: lm.generation(),
        entries,
    };
    lm.restore(&snap)?;
    Ok((lm, vocab))
}

pub fn save(path: &Path, lm: &Lm, vocab: &Vocab) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(io::BufWriter::new(f), lm, vocab)
}

pub fn load(path: &Path) -> Result<(Lm, Vocab), CheckpointError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(io::BufReader::new(f))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize, CheckpointError> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("value {v} overflows usize")))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
