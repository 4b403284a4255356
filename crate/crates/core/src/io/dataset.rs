//! Binary dataset container.
//!
//! Header: magic, version, grid, `K`, `C`, class count, record count, frame
//! interval, config hash and config text, then a header CRC32. Each record
//! carries a split tag, payload length and payload CRC32.

use std::path::Path;

use super::config::ExperimentConfig;
use super::{ByteReader, ByteWriter};
use crate::cost_volume::{TemporalWindow, VolumeFeatures};
use crate::error::{Error, Result};
use crate::geometry::{FramePose, GridSpec};
use crate::occupancy::{OccupancyGrid, VisibilityMask};
use crate::synth::{Dataset, FrameSample};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 8] = b"CVTDATA\0";
pub const VERSION: u32 = 1;

const TRAIN: u8 = 0;
const EVAL: u8 = 1;

/// A decoded dataset with the config that produced it.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset: Dataset,
}

fn encode_sample(w: &mut ByteWriter, s: &FrameSample) {
    w.f64(s.ego_speed);
    for frame in s.window.frames() {
        w.f64(frame.frame_pose.timestamp);
        for v in frame.frame_pose.to_row_major() {
            w.f64(v);
        }
        w.f32s(frame.features.data());
    }
    w.bytes(&s.gt.labels);
    w.bytes(&s.mask.visible.iter().map(|&b| b as u8).collect::<Vec<_>>());
}

fn decode_sample(r: &mut ByteReader, grid: &GridSpec, k: usize, c: usize, interval: f64, classes: usize) -> Result<FrameSample> {
    let ego_speed = r.f64()?;
    let shape = grid.spatial_shape();
    let n = grid.voxel_count();
    let mut frames = Vec::with_capacity(k);
    for _ in 0..k {
        let ts = r.f64()?;
        let mut m = [0.0; 16];
        for v in &mut m {
            *v = r.f64()?;
        }
        let pose = FramePose::from_row_major(&m, ts)?;
        let data = r.f32s(n * c)?;
        let features = DenseTensor::new(vec![shape[0], shape[1], shape[2], c], data)?;
        frames.push(VolumeFeatures::new(features, pose, *grid)?);
    }
    let labels = r.take(n)?.to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Format(format!("label {bad} out of range for {classes} classes")));
    }
    let visible = r.take(n)?.iter().map(|&b| b != 0).collect();
    let mut frames = frames.into_iter();
    let current = frames.next().ok_or_else(|| Error::Format("record has no frames".into()))?;
    Ok(FrameSample {
        window: TemporalWindow::new(current, frames.collect(), interval)?,
        gt: OccupancyGrid { shape, labels },
        mask: VisibilityMask { shape, visible },
        ego_speed,
    })
}

pub fn encode_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Vec<u8> {
    let cfg = &dataset.cfg;
    let grid = cfg.grid;
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(grid.height as u32);
    w.u32(grid.width as u32);
    w.u32(grid.depth as u32);
    w.f64(grid.voxel_size);
    for v in grid.center_offset {
        w.f64(v);
    }
    w.u32(cfg.frame_count as u32);
    w.u32(cfg.channels as u32);
    w.u32(cfg.class_set.len() as u32);
    w.u32((dataset.train.len() + dataset.eval.len()) as u32);
    w.f64(cfg.frame_interval);
    w.string(&config.hash());
    w.string(&config.to_text());
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    for (tag, samples) in [(TRAIN, &dataset.train), (EVAL, &dataset.eval)] {
        for s in samples.iter() {
            let mut rec = ByteWriter::default();
            encode_sample(&mut rec, s);
            w.u8(tag);
            w.u64(rec.buf.len() as u64);
            w.u32(crc32fast::hash(&rec.buf));
            w.bytes(&rec.buf);
        }
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (h, wd, z) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let voxel = r.f64()?;
    let offset = [r.f64()?, r.f64()?, r.f64()?];
    let grid = GridSpec::new(h, wd, z, voxel)
        .map_err(|e| Error::Format(e.to_string()))?
        .with_center_offset(offset);
    let k = r.u32()? as usize;
    let c = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = r.u32()? as usize;
    let interval = r.f64()?;
    let hash = r.string()?;
    let text = r.string()?;
    let header_end = r.position();
    let crc = r.u32()?;
    if crc != crc32fast::hash(&bytes[..header_end]) {
        return Err(Error::Format("header checksum mismatch".into()));
    }
    let config = ExperimentConfig::parse(&text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(Error::Format("config hash mismatch".into()));
    }
    let cfg = &config.scene;
    if cfg.grid != grid || cfg.frame_count != k || cfg.channels != c || cfg.class_set.len() != classes || cfg.frame_interval != interval {
        return Err(Error::Format("header disagrees with embedded config".into()));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..count {
        let tag = r.u8()?;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("record too large".into()))?;
        let crc = r.u32()?;
        let payload = r.take(len)?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format(format!("record {i} checksum mismatch")));
        }
        let mut pr = ByteReader::new(payload);
        let sample = decode_sample(&mut pr, &grid, k, c, interval, classes)?;
        if pr.remaining() != 0 {
            return Err(Error::Format(format!("record {i} has trailing bytes")));
        }
        match tag {
            TRAIN => train.push(sample),
            EVAL => eval.push(sample),
            t => return Err(Error::Format(format!("record {i} has unknown split tag {t}"))),
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(DatasetFile {
        dataset: Dataset {
            cfg: config.scene.clone(),
            train,
            eval,
        },
        config_hash: hash,
        config,
    })
}

pub fn write_dataset(path: &Path, config: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(config, dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(&std::fs::read(path)?)
}
