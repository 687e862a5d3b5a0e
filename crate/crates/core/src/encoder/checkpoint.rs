//! Checkpoint files: encoder tensors plus Adam state, bit-exact.
//!
//! ```text
//! "CRCK" | version u32 | layer_count+1 u32 | widths u32...
//! step u64 | base_lr weight_decay beta1 beta2 epsilon : f64 x 5
//! per tensor (W0, b0, W1, ...): values, first moment, second moment as f64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Adam, EncoderError, EncoderParams};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub optimizer: Adam,
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_checkpoint(ckpt))?;
    w.flush()?;
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let widths = ckpt.params.widths();
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    let opt = &ckpt.optimizer;
    out.extend_from_slice(&opt.step_count().to_le_bytes());
    for v in [opt.base_lr, opt.weight_decay, opt.beta1, opt.beta2, opt.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ((p, m), v) in ckpt.params.tensors().iter().zip(opt.first_moments()).zip(opt.second_moments()) {
        for t in [p, m, v] {
            for x in t.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CheckpointError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_vec(rows, cols, data).expect("sized"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(CheckpointError::Format(format!("implausible width count {n}")));
    }
    let widths = (0..n).map(|_| c.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
    let step = c.u64()?;
    let (base_lr, weight_decay, beta1, beta2, epsilon) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);

    let mut tensors = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for pair in widths.windows(2) {
        for (rows, cols) in [(pair[0], pair[1]), (1, pair[1])] {
            tensors.push(c.matrix(rows, cols)?);
            first.push(c.matrix(rows, cols)?);
            second.push(c.matrix(rows, cols)?);
        }
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    let params = EncoderParams::from_tensors(&widths, tensors)?;
    let optimizer = Adam::from_parts(base_lr, weight_decay, (beta1, beta2), epsilon, step, first, second);
    Ok(Checkpoint { params, optimizer })
}
