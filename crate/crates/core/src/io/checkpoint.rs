//! Binary checkpoint container: named tensors plus the state needed to resume.

use std::path::Path;

use super::config::ExperimentConfig;
use super::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ParamSet};
use crate::trainer::{AdamState, Checkpoint, Model, RngState};

pub const MAGIC: &[u8; 8] = b"CVTCKPT\0";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub config: ExperimentConfig,
    pub checkpoint: Checkpoint,
}

fn write_tensor(w: &mut ByteWriter, name: &str, t: &DenseTensor<f32>) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(DTYPE_F32);
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

fn read_tensor(r: &mut ByteReader) -> Result<(String, DenseTensor<f32>)> {
    let n = r.u16()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
    }
    let rank = r.u8()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
    let data = r.f32s(len)?;
    Ok((name, DenseTensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?))
}

/// Serializes `ckpt`; `config` is embedded as text and must carry the checkpoint's training settings.
pub fn encode_checkpoint(config: &ExperimentConfig, ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.string(&config.hash());
    w.string(&config.to_text());
    w.u64(ckpt.config.seed);
    w.u64(ckpt.epoch as u64);
    w.u32(ckpt.channels as u32);
    w.u32(ckpt.model.classes as u32);
    w.bytes(&ckpt.rng.seed);
    w.u64(ckpt.rng.stream);
    w.u128(ckpt.rng.word_pos);
    w.u64(ckpt.adam.step);
    w.u32(ckpt.class_weights.len() as u32);
    for &c in &ckpt.class_weights {
        w.f64(c);
    }
    let params: Vec<_> = ckpt.model.params.iter().collect();
    w.u32((params.len() * 3) as u32);
    for p in &params {
        write_tensor(&mut w, &p.name, &p.value);
    }
    for (p, m) in params.iter().zip(&ckpt.adam.m) {
        write_tensor(&mut w, &format!("adam.m.{}", p.name), m);
    }
    for (p, v) in params.iter().zip(&ckpt.adam.v) {
        write_tensor(&mut w, &format!("adam.v.{}", p.name), v);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointFile> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = ByteReader::new(body);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.string()?;
    let text = r.string()?;
    let config = ExperimentConfig::parse(&text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(Error::Format("config hash mismatch".into()));
    }
    let seed = r.u64()?;
    if seed != config.train.seed {
        return Err(Error::Format("recorded seed disagrees with config".into()));
    }
    let epoch = r.u64()? as usize;
    let channels = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let rng = RngState {
        seed: r.take(32)?.try_into().expect("32 bytes"),
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let step = r.u64()?;
    let nw = r.u32()? as usize;
    let class_weights = (0..nw).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    if count % 3 != 0 {
        return Err(Error::Format("tensor table is not params plus two moments".into()));
    }
    let n = count / 3;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let (name, t) = read_tensor(&mut r)?;
        if name.starts_with("adam.") {
            return Err(Error::Format(format!("unexpected moment tensor `{name}`")));
        }
        params.insert(name, t);
    }
    let mut moments = |prefix: &str| -> Result<Vec<DenseTensor<f32>>> {
        params
            .iter()
            .map(|p| {
                let (name, t) = read_tensor(&mut r)?;
                if name != format!("{prefix}{}", p.name) || t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("moment `{name}` does not match `{}`", p.name)));
                }
                Ok(t)
            })
            .collect()
    };
    let m = moments("adam.m.")?;
    let v = moments("adam.v.")?;
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let model = Model::from_params(params, &config.train, channels).map_err(|e| Error::Format(e.to_string()))?;
    if model.classes != classes || class_weights.len() != classes {
        return Err(Error::Format("class count disagrees with tensors".into()));
    }
    Ok(CheckpointFile {
        checkpoint: Checkpoint {
            model,
            adam: AdamState { m, v, step },
            class_weights,
            config: config.train.clone(),
            epoch,
            rng,
            channels,
        },
        config,
    })
}

pub fn write_checkpoint(path: &Path, config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    decode_checkpoint(&std::fs::read(path)?)
}
