//! Temporal cost volume and the occupancy-aware refinement of volume features.
//!
//! For every voxel of the current frame, `N` points are sampled along its
//! sight ray, carried into each of the `K` frames of the window by the
//! relative ego motion, and trilinearly sampled from that frame's features.
//! The resulting `[H, W, Z, K*N, C]` stack is ordered frame-major (current
//! frame first, then history newest to oldest) and stride-ascending inside
//! each frame.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    relative_transform, sample_sight_points, sight_direction, transform_point, voxel_to_world,
    world_to_voxel, FramePose, GridSpec, RigidTransform, StrideSet, VoxelIndex,
};
use crate::tensor::{
    trilinear_sample_into, DenseTensor, ParamId, ParamSet, Scalar, Tape, Var,
};

/// Dense features of one frame, expressed in that frame's ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFeatures<T = f32> {
    /// `[H, W, Z, C]`.
    pub features: DenseTensor<T>,
    pub frame_pose: FramePose,
    pub grid: GridSpec,
}

impl<T: Scalar> VolumeFeatures<T> {
    pub fn new(features: DenseTensor<T>, frame_pose: FramePose, grid: GridSpec) -> Result<Self> {
        let v = Self {
            features,
            frame_pose,
            grid,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn channels(&self) -> usize {
        self.features.channels()
    }

    fn validate(&self) -> Result<()> {
        let expected = self.grid.spatial_shape();
        let shape = self.features.shape();
        if shape.len() != 4 || shape[..3] != expected || shape[3] == 0 {
            return Err(Error::shape(format!(
                "volume features {:?} inconsistent with grid {:?}",
                shape, expected
            )));
        }
        Ok(())
    }
}

/// Current frame plus `K - 1` past frames, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWindow<T = f32> {
    pub current: VolumeFeatures<T>,
    pub history: Vec<VolumeFeatures<T>>,
    /// Seconds between consecutive frames.
    pub frame_interval: f64,
}

const TIMESTAMP_TOL: f64 = 1e-6;

impl<T: Scalar> TemporalWindow<T> {
    pub fn new(
        current: VolumeFeatures<T>,
        history: Vec<VolumeFeatures<T>>,
        frame_interval: f64,
    ) -> Result<Self> {
        let w = Self {
            current,
            history,
            frame_interval,
        };
        w.validate()?;
        Ok(w)
    }

    /// `K`, including the current frame.
    pub fn frame_count(&self) -> usize {
        1 + self.history.len()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.current.grid
    }

    /// Frames in cost-volume slot order.
    pub fn frames(&self) -> impl Iterator<Item = &VolumeFeatures<T>> {
        std::iter::once(&self.current).chain(self.history.iter())
    }

    /// Keeps the current frame and the newest `frame_count - 1` past frames.
    pub fn truncated(&self, frame_count: usize) -> Result<Self> {
        if frame_count == 0 || frame_count > self.frame_count() {
            return Err(Error::Range(format!(
                "cannot take {frame_count} frames from a window of {}",
                self.frame_count()
            )));
        }
        Ok(Self {
            current: self.current.clone(),
            history: self.history[..frame_count - 1].to_vec(),
            frame_interval: self.frame_interval,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.current.validate()?;
        let c = self.current.channels();
        let now = self.current.frame_pose.timestamp;
        for (k, past) in self.history.iter().enumerate() {
            past.validate()?;
            if past.grid != self.current.grid {
                return Err(Error::config(
                    "grid",
                    format!("history frame {k} uses a different grid than the current frame"),
                ));
            }
            if past.channels() != c {
                return Err(Error::shape(format!(
                    "history frame {k} has {} channels, current has {c}",
                    past.channels()
                )));
            }
            let expected = now - (k + 1) as f64 * self.frame_interval;
            if (past.frame_pose.timestamp - expected).abs() > TIMESTAMP_TOL {
                return Err(Error::config(
                    "frame_interval",
                    format!(
                        "history frame {k} has timestamp {}, expected {expected}",
                        past.frame_pose.timestamp
                    ),
                ));
            }
        }
        if !self.history.is_empty() && !(self.frame_interval > 0.0) {
            return Err(Error::config("frame_interval", "must be positive"));
        }
        Ok(())
    }
}

/// Stacked sight-ray samples over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T = f32> {
    /// `[H, W, Z, K*N, C]`.
    pub features: DenseTensor<T>,
    /// `[H, W, Z, K*N]`, 1 where the sample fell inside its frame.
    pub validity: DenseTensor<T>,
    pub frames: usize,
    pub strides: usize,
}

impl<T: Scalar> CostVolume<T> {
    /// Slot of (frame, stride) on the `K*N` axis.
    pub fn slot(&self, frame: usize, stride: usize) -> usize {
        frame * self.strides + stride
    }

    pub fn channels(&self) -> usize {
        self.features.channels()
    }

    /// Features reshaped to `[H, W, Z, K*N*C]` for the conv head.
    pub fn flattened(&self) -> Result<DenseTensor<T>> {
        let s = self.features.shape();
        self.features
            .clone()
            .reshape(vec![s[0], s[1], s[2], s[3] * s[4]])
    }
}

/// Relative transforms from the current ego frame into each window frame.
fn frame_transforms<T: Scalar>(window: &TemporalWindow<T>) -> Result<Vec<RigidTransform>> {
    let now: &FramePose = &window.current.frame_pose;
    let mut out = vec![RigidTransform::identity()];
    for past in &window.history {
        out.push(relative_transform(now, &past.frame_pose)?);
    }
    Ok(out)
}

pub fn build_cost_volume<T: Scalar>(
    window: &TemporalWindow<T>,
    strides: &StrideSet,
) -> Result<CostVolume<T>> {
    window.validate()?;
    let grid = *window.grid();
    let transforms = frame_transforms(window)?;
    let frames: Vec<&VolumeFeatures<T>> = window.frames().collect();
    let (k, n, c) = (frames.len(), strides.len(), window.current.channels());
    let dims = [grid.height, grid.width, grid.depth, c];
    let per_voxel = k * n * c;
    let row = grid.width * grid.depth;

    let mut features = vec![T::zero(); grid.voxel_count() * per_voxel];
    let mut validity = vec![T::zero(); grid.voxel_count() * k * n];
    features
        .par_chunks_mut(row * per_voxel)
        .zip(validity.par_chunks_mut(row * k * n))
        .enumerate()
        .for_each(|(j, (feat_row, valid_row))| {
            for i in 0..grid.width {
                for kz in 0..grid.depth {
                    let idx = VoxelIndex::new(i, j, kz);
                    let p = voxel_to_world(idx, &grid).expect("index within grid");
                    let samples = sample_sight_points(p, sight_direction(p, &grid), strides, &grid);
                    let local = i * grid.depth + kz;
                    for (f, (frame, m)) in frames.iter().zip(&transforms).enumerate() {
                        for (s, &q) in samples.iter().enumerate() {
                            let slot = f * n + s;
                            let coord = world_to_voxel(transform_point(m, q), &grid);
                            let out = &mut feat_row[(local * k * n + slot) * c..][..c];
                            let ok = trilinear_sample_into(frame.features.data(), dims, coord, out);
                            valid_row[local * k * n + slot] = if ok { T::one() } else { T::zero() };
                        }
                    }
                }
            }
        });

    let [h, w, z] = grid.spatial_shape();
    Ok(CostVolume {
        features: DenseTensor::new(vec![h, w, z, k * n, c], features)?,
        validity: DenseTensor::new(vec![h, w, z, k * n], validity)?,
        frames: k,
        strides: n,
    })
}

/// Straight-line per-voxel reconstruction of [`build_cost_volume`] with its
/// own coordinate, pose-inversion and interpolation arithmetic. Used to check
/// the production path.
pub fn brute_force_cost_volume<T: Scalar>(
    window: &TemporalWindow<T>,
    strides: &StrideSet,
) -> Result<CostVolume<T>> {
    window.validate()?;
    let g = *window.grid();
    let (h, w, z) = (g.height, g.width, g.depth);
    let c = window.current.channels();
    let frames: Vec<&VolumeFeatures<T>> = window.frames().collect();
    let k = frames.len();
    let n = strides.len();
    let s = g.voxel_size;
    let [ox, oy, oz] = g.center_offset;

    let now = reference::to_rows(&window.current.frame_pose);
    let mut rel = Vec::with_capacity(k);
    for frame in &frames {
        let past_inv = reference::invert(reference::to_rows(&frame.frame_pose))
            .ok_or_else(|| Error::InvalidPose("singular pose".into()))?;
        rel.push(reference::mul(past_inv, now));
    }

    let mut feats = vec![T::zero(); h * w * z * k * n * c];
    let mut valid = vec![T::zero(); h * w * z * k * n];
    for j in 0..h {
        for i in 0..w {
            for kk in 0..z {
                let px = (i as f64 - w as f64 / 2.0) * s + ox;
                let py = (j as f64 - h as f64 / 2.0) * s + oy;
                let pz = (kk as f64 - z as f64 / 2.0) * s + oz;
                let (ex, ey, ez) = (px - ox, py - oy, pz - oz);
                let len = (ex * ex + ey * ey + ez * ez).sqrt();
                let (dx, dy, dz) = if len < 1e-9 {
                    (0.0, 0.0, 0.0)
                } else {
                    (ex / len, ey / len, ez / len)
                };
                let voxel = (j * w + i) * z + kk;
                for f in 0..k {
                    let m = if f == 0 { reference::IDENTITY } else { rel[f] };
                    for (si, &stride) in strides.as_slice().iter().enumerate() {
                        let qx = px + dx * stride * s;
                        let qy = py + dy * stride * s;
                        let qz = pz + dz * stride * s;
                        let tx = m[0][0] * qx + m[0][1] * qy + m[0][2] * qz + m[0][3];
                        let ty = m[1][0] * qx + m[1][1] * qy + m[1][2] * qz + m[1][3];
                        let tz = m[2][0] * qx + m[2][1] * qy + m[2][2] * qz + m[2][3];
                        let u = (tx - ox) / s + w as f64 / 2.0;
                        let v = (ty - oy) / s + h as f64 / 2.0;
                        let ww = (tz - oz) / s + z as f64 / 2.0;
                        let slot = f * n + si;
                        let out = &mut feats[(voxel * k * n + slot) * c..][..c];
                        if let Some(vals) = reference::trilinear(frames[f].features.data(), [h, w, z, c], u, v, ww) {
                            out.copy_from_slice(&vals);
                            valid[voxel * k * n + slot] = T::one();
                        }
                    }
                }
            }
        }
    }
    Ok(CostVolume {
        features: DenseTensor::new(vec![h, w, z, k * n, c], feats)?,
        validity: DenseTensor::new(vec![h, w, z, k * n], valid)?,
        frames: k,
        strides: n,
    })
}

mod reference {
    use crate::geometry::FramePose;
    use crate::tensor::Scalar;

    pub(super) type Mat = [[f64; 4]; 4];

    pub(super) const IDENTITY: Mat = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    pub(super) fn to_rows(p: &FramePose) -> Mat {
        let v = p.to_row_major();
        let mut m = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] = v[r * 4 + c];
            }
        }
        m
    }

    pub(super) fn mul(a: Mat, b: Mat) -> Mat {
        let mut out = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                out[r][c] = (0..4).map(|q| a[r][q] * b[q][c]).sum();
            }
        }
        out
    }

    /// Gauss-Jordan with partial pivoting.
    pub(super) fn invert(m: Mat) -> Option<Mat> {
        let mut a = [[0.0; 8]; 4];
        for r in 0..4 {
            a[r][..4].copy_from_slice(&m[r]);
            a[r][4 + r] = 1.0;
        }
        for col in 0..4 {
            let mut pivot = col;
            for r in col + 1..4 {
                if a[r][col].abs() > a[pivot][col].abs() {
                    pivot = r;
                }
            }
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            let d = a[col][col];
            for v in a[col].iter_mut() {
                *v /= d;
            }
            for r in 0..4 {
                if r != col {
                    let f = a[r][col];
                    for q in 0..8 {
                        a[r][q] -= f * a[col][q];
                    }
                }
            }
        }
        let mut out = [[0.0; 4]; 4];
        for r in 0..4 {
            out[r].copy_from_slice(&a[r][4..]);
        }
        Some(out)
    }

    /// Eight-corner blend evaluated corner by corner.
    pub(super) fn trilinear<T: Scalar>(
        data: &[T],
        [h, w, z, c]: [usize; 4],
        u: f64,
        v: f64,
        ww: f64,
    ) -> Option<Vec<T>> {
        let tol = 1e-9;
        let inside = |x: f64, n: usize| x >= -tol && x <= (n - 1) as f64 + tol;
        if !(inside(u, w) && inside(v, h) && inside(ww, z)) {
            return None;
        }
        let (u, v, ww) = (
            u.clamp(0.0, (w - 1) as f64),
            v.clamp(0.0, (h - 1) as f64),
            ww.clamp(0.0, (z - 1) as f64),
        );
        let mut acc = vec![0.0f64; c];
        for corner in 0..8 {
            let (bi, bj, bk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let ci = u.floor() as isize + bi as isize;
            let cj = v.floor() as isize + bj as isize;
            let ck = ww.floor() as isize + bk as isize;
            let weight = (1.0 - (u - ci as f64).abs()).max(0.0)
                * (1.0 - (v - cj as f64).abs()).max(0.0)
                * (1.0 - (ww - ck as f64).abs()).max(0.0);
            if weight == 0.0 {
                continue;
            }
            let base = ((cj as usize * w + ci as usize) * z + ck as usize) * c;
            for ch in 0..c {
                acc[ch] += weight * data[base + ch].f64();
            }
        }
        Some(acc.into_iter().map(T::of).collect())
    }
}

/// Output of the refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedVolume<T = f32> {
    /// `[H, W, Z, C]`, current features scaled per voxel.
    pub v_occ: DenseTensor<T>,
    /// `[H, W, Z]`, in (0, 1).
    pub weights: DenseTensor<T>,
}

/// Shape of the refinement conv stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    /// `K * N * C`.
    pub in_channels: usize,
    pub hidden: usize,
    pub first_kernel: usize,
    pub second_kernel: usize,
}

/// Two-layer conv head mapping the flattened cost volume to one logit per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct CvtHeadParams {
    pub shape: HeadShape,
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
}

/// Taped handles produced by [`CvtHeadParams::forward`].
#[derive(Debug, Clone, Copy)]
pub struct RefinementVars {
    /// Pre-sigmoid weights `[H, W, Z, 1]`.
    pub logits: Var,
    pub weights: Var,
    pub v_occ: Var,
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub(crate) fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> DenseTensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    DenseTensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

impl CvtHeadParams {
    pub fn init<T: Scalar, R: Rng>(params: &mut ParamSet<T>, shape: HeadShape, rng: &mut R) -> Self {
        let (k1, k2) = (shape.first_kernel, shape.second_kernel);
        let fan1 = k1 * k1 * k1 * shape.in_channels;
        let fan2 = k2 * k2 * k2 * shape.hidden;
        let conv1_weight = params.insert(
            "cvt.conv1.weight",
            init_uniform(rng, vec![k1, k1, k1, shape.in_channels, shape.hidden], fan1),
        );
        let conv1_bias = params.insert("cvt.conv1.bias", init_uniform(rng, vec![shape.hidden], fan1));
        let conv2_weight = params.insert(
            "cvt.conv2.weight",
            init_uniform(rng, vec![k2, k2, k2, shape.hidden, 1], fan2),
        );
        // Zero final bias: initial weights sit near 0.5.
        let conv2_bias = params.insert("cvt.conv2.bias", DenseTensor::zeros(vec![1]));
        Self {
            shape,
            conv1_weight,
            conv1_bias,
            conv2_weight,
            conv2_bias,
        }
    }

    /// Looks the head up by parameter name, e.g. after loading a checkpoint.
    pub fn bind<T: Scalar>(params: &ParamSet<T>, in_channels: usize) -> Result<Self> {
        let id = |name: &str| {
            params
                .id_of(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
        };
        let conv1_weight = id("cvt.conv1.weight")?;
        let conv2_weight = id("cvt.conv2.weight")?;
        let w1 = params.get(conv1_weight).value.shape().to_vec();
        let w2 = params.get(conv2_weight).value.shape().to_vec();
        if w1.len() != 5 || w2.len() != 5 || w1[3] != in_channels || w2[3] != w1[4] || w2[4] != 1 {
            return Err(Error::shape(format!(
                "head parameters {w1:?} / {w2:?} do not fit {in_channels} input channels"
            )));
        }
        Ok(Self {
            shape: HeadShape {
                in_channels,
                hidden: w1[4],
                first_kernel: w1[0],
                second_kernel: w2[0],
            },
            conv1_weight,
            conv1_bias: id("cvt.conv1.bias")?,
            conv2_weight,
            conv2_bias: id("cvt.conv2.bias")?,
        })
    }

    /// `v_occ = current * sigmoid(conv2(relu(conv1(F))))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        flat_cost_volume: Var,
        current: Var,
    ) -> Result<RefinementVars> {
        let got = tape.value(flat_cost_volume).channels();
        if got != self.shape.in_channels {
            return Err(Error::shape(format!(
                "cost volume has {got} channels, head expects {}",
                self.shape.in_channels
            )));
        }
        let w1 = tape.param(params, self.conv1_weight);
        let b1 = tape.param(params, self.conv1_bias);
        let hidden = tape.conv3d(flat_cost_volume, w1, b1)?;
        let hidden = tape.relu(hidden);
        let w2 = tape.param(params, self.conv2_weight);
        let b2 = tape.param(params, self.conv2_bias);
        let logits = tape.conv3d(hidden, w2, b2)?;
        let weights = tape.sigmoid(logits)?;
        let v_occ = tape.mul_voxel(current, weights)?;
        Ok(RefinementVars {
            logits,
            weights,
            v_occ,
        })
    }
}

/// Untaped refinement of the current frame of `window`.
pub fn refine_volume<T: Scalar>(
    window: &TemporalWindow<T>,
    cv: &CostVolume<T>,
    head: &CvtHeadParams,
    params: &ParamSet<T>,
) -> Result<RefinedVolume<T>> {
    let current = &window.current.features;
    if cv.features.shape()[..3] != current.shape()[..3] || cv.channels() != current.channels() {
        return Err(Error::shape(format!(
            "cost volume {:?} does not match current features {:?}",
            cv.features.shape(),
            current.shape()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.input(cv.flattened()?)?;
    let cur = tape.input(current.clone())?;
    let vars = head.forward(&mut tape, params, f, cur)?;
    let [h, w, z] = window.grid().spatial_shape();
    Ok(RefinedVolume {
        v_occ: tape.value(vars.v_occ).clone(),
        weights: tape.value(vars.weights).clone().reshape(vec![h, w, z])?,
    })
}
