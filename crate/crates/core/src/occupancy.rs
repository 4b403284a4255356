//! Decoder from refined features to class logits, and the training losses.

use log::warn;
use rand::Rng;

use crate::cost_volume::{init_uniform, RefinedVolume};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ParamId, ParamSet, Scalar, Tape, Var};

/// Label of the empty class.
pub const FREE: u8 = 0;

/// Free at index 0 followed by `M` semantic classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub names: Vec<String>,
    /// Per-class voxel counts from the training split.
    pub frequencies: Vec<u64>,
}

impl ClassSet {
    pub fn new(names: Vec<String>, frequencies: Vec<u64>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::config("classes", "need Free plus at least one class"));
        }
        if frequencies.len() != names.len() {
            return Err(Error::config(
                "classes",
                format!("{} names but {} frequencies", names.len(), frequencies.len()),
            ));
        }
        Ok(Self { names, frequencies })
    }

    /// Free plus `m` classes named `class_1..class_m`, with zero counts.
    pub fn numbered(m: usize) -> Result<Self> {
        let names = std::iter::once("free".to_string())
            .chain((1..=m).map(|c| format!("class_{c}")))
            .collect::<Vec<_>>();
        let n = names.len();
        Self::new(names, vec![0; n])
    }

    /// `M`, excluding Free.
    pub fn semantic_count(&self) -> usize {
        self.names.len() - 1
    }

    /// `M + 1`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Per-voxel labels in `[0, M]`, `[H, W, Z]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub shape: [usize; 3],
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, classes: usize) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} labels for grid {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Range(format!("label {bad} outside [0, {})", classes)));
        }
        Ok(Self { shape, labels })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            labels: vec![FREE; shape.iter().product()],
        }
    }

    pub fn occupied(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != FREE).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Binary visibility over the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    pub shape: [usize; 3],
    pub visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn new(shape: [usize; 3], visible: Vec<bool>) -> Result<Self> {
        if visible.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} mask values for grid {shape:?}",
                visible.len()
            )));
        }
        Ok(Self { shape, visible })
    }

    pub fn all(shape: [usize; 3]) -> Self {
        Self {
            shape,
            visible: vec![true; shape.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// `[H, W, Z, M+1]` class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyLogits<T = f32>(pub DenseTensor<T>);

impl<T: Scalar> OccupancyLogits<T> {
    pub fn new(logits: DenseTensor<T>) -> Result<Self> {
        if logits.rank() != 4 {
            return Err(Error::shape(format!("logits of shape {:?}", logits.shape())));
        }
        logits.check_finite("decode")?;
        Ok(Self(logits))
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> OccupancyGrid {
        let s = self.0.shape();
        let c = self.classes();
        let labels = self
            .0
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        OccupancyGrid {
            shape: [s[0], s[1], s[2]],
            labels,
        }
    }
}

/// `3x3x3 conv C->C`, rectifier, then a per-voxel linear map `C->(M+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub channels: usize,
    pub classes: usize,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub linear_weight: ParamId,
    pub linear_bias: ParamId,
}

impl DecoderParams {
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let fan = 27 * channels;
        let conv_weight = params.insert(
            "decoder.conv.weight",
            init_uniform(rng, vec![3, 3, 3, channels, channels], fan),
        );
        let conv_bias = params.insert("decoder.conv.bias", init_uniform(rng, vec![channels], fan));
        let linear_weight = params.insert(
            "decoder.linear.weight",
            init_uniform(rng, vec![1, 1, 1, channels, classes], channels),
        );
        let linear_bias = params.insert("decoder.linear.bias", init_uniform(rng, vec![classes], channels));
        Self {
            channels,
            classes,
            conv_weight,
            conv_bias,
            linear_weight,
            linear_bias,
        }
    }

    pub fn bind<T: Scalar>(params: &ParamSet<T>) -> Result<Self> {
        let id = |name: &str| {
            params
                .id_of(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))
        };
        let linear_weight = id("decoder.linear.weight")?;
        let s = params.get(linear_weight).value.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("decoder linear weight of shape {s:?}")));
        }
        Ok(Self {
            channels: s[3],
            classes: s[4],
            conv_weight: id("decoder.conv.weight")?,
            conv_bias: id("decoder.conv.bias")?,
            linear_weight,
            linear_bias: id("decoder.linear.bias")?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, features: Var) -> Result<Var> {
        let got = tape.value(features).channels();
        if got != self.channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, got {got}",
                self.channels
            )));
        }
        let w = tape.param(params, self.conv_weight);
        let b = tape.param(params, self.conv_bias);
        let h = tape.conv3d(features, w, b)?;
        let h = tape.relu(h);
        let w = tape.param(params, self.linear_weight);
        let b = tape.param(params, self.linear_bias);
        tape.conv3d(h, w, b)
    }
}

pub fn decode<T: Scalar>(
    refined: &RefinedVolume<T>,
    decoder: &DecoderParams,
    params: &ParamSet<T>,
) -> Result<OccupancyLogits<T>> {
    let mut tape = Tape::new();
    let x = tape.input(refined.v_occ.clone())?;
    let logits = decoder.forward(&mut tape, params, x)?;
    OccupancyLogits::new(tape.value(logits).clone())
}

/// Inverse-frequency weights over `M+1` classes, normalized to mean 1.
pub fn class_weights(freq: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = freq.iter().sum();
    if total == 0 {
        return Err(Error::config("class_frequencies", "all class counts are zero"));
    }
    let n = freq.len() as f64;
    let raw: Vec<Option<f64>> = freq
        .iter()
        .map(|&f| (f > 0).then(|| total as f64 / n / f as f64))
        .collect();
    let max = raw.iter().flatten().copied().fold(f64::MIN, f64::max);
    let filled: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max)).collect();
    let mean = filled.iter().sum::<f64>() / n;
    Ok(filled.into_iter().map(|w| w / mean).collect())
}

/// Scalar loss plus whether it was taken over an empty mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty_mask: bool,
}

fn check_grid(shape: [usize; 3], gt: &OccupancyGrid, mask: &VisibilityMask) -> Result<()> {
    if gt.shape != shape || mask.shape != shape {
        return Err(Error::shape(format!(
            "grid {shape:?}, labels {:?}, mask {:?}",
            gt.shape, mask.shape
        )));
    }
    Ok(())
}

/// Taped class-weighted cross-entropy over visible voxels.
pub fn occupancy_loss_taped<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    gt: &OccupancyGrid,
    weights: &[f64],
    mask: &VisibilityMask,
) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("logits of shape {s:?}")));
    }
    check_grid([s[0], s[1], s[2]], gt, mask)?;
    let w: Vec<T> = weights.iter().map(|&v| T::of(v)).collect();
    tape.cross_entropy(logits, &gt.labels, &w, &mask.visible)
}

pub fn occupancy_loss<T: Scalar>(
    logits: &OccupancyLogits<T>,
    gt: &OccupancyGrid,
    weights: &[f64],
    mask: &VisibilityMask,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let x = tape.input(logits.0.clone())?;
    let l = occupancy_loss_taped(&mut tape, x, gt, weights, mask)?;
    Ok(LossValue {
        value: tape.value(l).item()?.f64(),
        empty_mask: mask.count() == 0,
    })
}

/// Taped binary cross-entropy between `sigmoid(weight_logits)` and occupancy.
pub fn cvt_loss_taped<T: Scalar>(
    tape: &mut Tape<T>,
    weight_logits: Var,
    gt: &OccupancyGrid,
    mask: &VisibilityMask,
) -> Result<Var> {
    let s = tape.value(weight_logits).shape().to_vec();
    if s.len() < 3 {
        return Err(Error::shape(format!("weights of shape {s:?}")));
    }
    check_grid([s[0], s[1], s[2]], gt, mask)?;
    tape.binary_cross_entropy_with_logits(weight_logits, &gt.occupied(), &mask.visible)
}

/// Binary cross-entropy of refinement weights in (0, 1) against occupancy.
pub fn cvt_loss<T: Scalar>(
    weights: &DenseTensor<T>,
    gt: &OccupancyGrid,
    mask: &VisibilityMask,
) -> Result<LossValue> {
    let s = weights.shape();
    if s.len() < 3 || weights.len() != gt.len() {
        return Err(Error::shape(format!("weights of shape {s:?}")));
    }
    check_grid([s[0], s[1], s[2]], gt, mask)?;
    if let Some(bad) = weights.data().iter().find(|w| !(w.f64() > 0.0 && w.f64() < 1.0)) {
        return Err(Error::Domain(format!("refinement weight {bad} outside (0, 1)")));
    }
    let count = mask.count();
    if count == 0 {
        warn!("refinement loss over an empty visibility mask");
        return Ok(LossValue {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut total = 0.0;
    for ((w, &label), &m) in weights.data().iter().zip(&gt.labels).zip(&mask.visible) {
        if m {
            let w = w.f64();
            total -= if label != FREE { w.ln() } else { (1.0 - w).ln() };
        }
    }
    Ok(LossValue {
        value: total / count as f64,
        empty_mask: false,
    })
}

/// `l_occ + lambda * l_cvt`.
pub fn total_loss(l_occ: f64, l_cvt: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", format!("must be nonnegative, got {lambda}")));
    }
    Ok(l_occ + lambda * l_cvt)
}
