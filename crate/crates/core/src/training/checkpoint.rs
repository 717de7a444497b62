//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: `"MATC"`, u32 version, u32 config
//! length, config JSON bytes, u64 step, u32 parameter count, then per
//! parameter: u32 name length, name bytes, u32 rank, u32 dims, row-major
//! f32 values. An optional optimizer section follows: u8 flag, u64 update
//! count, f64 learning rate, then the first and second moments of every
//! parameter as raw f32 in parameter order.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{MatError, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::training::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MATC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&ckpt.config)?;
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, value) in ckpt.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, value.shape().len() as u32);
        for &d in value.shape() {
            put_u32(&mut out, d as u32);
        }
        put_floats(&mut out, value.data());
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.t.to_le_bytes());
            out.extend_from_slice(&adam.lr.to_le_bytes());
            for t in adam.m.iter().chain(&adam.v) {
                put_floats(&mut out, t.data());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(MatError::Length {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(MatError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(MatError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| MatError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.floats(shape.iter().product())?;
        params.add(name, Tensor::new(shape, data)?);
    }
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let lr = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let mut moments = Vec::with_capacity(2 * count);
            for _ in 0..2 {
                for (_, p) in params.iter() {
                    moments.push(Tensor::new(p.shape().to_vec(), r.floats(p.numel())?)?);
                }
            }
            let v = moments.split_off(count);
            Some(Adam {
                lr,
                m: moments,
                v,
                t,
            })
        }
        f => return Err(MatError::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(MatError::Length {
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
