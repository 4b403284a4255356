//! End-to-end optimization of the refinement head and decoder.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost_volume::{build_cost_volume, CvtHeadParams, HeadShape};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, StrideSet};
use crate::metrics::{evaluate, EvalReport, EvalSample, EvalScope};
use crate::occupancy::{
    class_weights, cvt_loss_taped, occupancy_loss_taped, DecoderParams, OccupancyGrid, OccupancyLogits,
};
use crate::synth::{derive_seed, FrameSample};
use crate::tensor::{DenseTensor, ParamSet, Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub frame_count: usize,
    pub frame_interval: f64,
    pub strides: StrideSet,
    pub grid: GridSpec,
    pub cvt_supervision: bool,
    /// Decode the current frame directly, with no refinement.
    pub baseline: bool,
    pub head_hidden: usize,
    pub head_first_kernel: usize,
    pub head_second_kernel: usize,
    /// Classes left out of mIoU.
    pub excluded_classes: Vec<u8>,
    pub eval_each_epoch: bool,
    pub log_train_miou: bool,
    /// Keep each training sample's cost volume in memory across epochs.
    pub cache_cost_volumes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 1,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            lambda: 1.0,
            seed: 0,
            frame_count: 7,
            frame_interval: 0.5,
            strides: StrideSet::default(),
            grid: GridSpec::new(32, 32, 8, 0.5).expect("valid default grid"),
            cvt_supervision: true,
            baseline: false,
            head_hidden: 16,
            head_first_kernel: 1,
            head_second_kernel: 3,
            excluded_classes: Vec::new(),
            eval_each_epoch: true,
            log_train_miou: true,
            cache_cost_volumes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a nonnegative number"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be nonnegative"));
        }
        if self.frame_count == 0 {
            return Err(Error::config("frame_count", "must be at least 1"));
        }
        for (key, k) in [
            ("head_first_kernel", self.head_first_kernel),
            ("head_second_kernel", self.head_second_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(key, "kernel size must be odd"));
            }
        }
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden", "must be positive"));
        }
        self.grid.validate()
    }

    /// Frames actually fed to the model.
    pub fn effective_frames(&self) -> usize {
        if self.baseline {
            1
        } else {
            self.frame_count
        }
    }
}

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments, aligned with parameter ids.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<DenseTensor<T>>,
    pub v: Vec<DenseTensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| DenseTensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update using the gradients stored in `params`.
pub fn adamw_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer state for {} tensors, {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (nb1, nb2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (lr_t, eps) = (T::of(lr), T::of(cfg.eps));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::shape(format!("optimizer state mismatch for {}", p.name)));
        }
        let grads = p.grad.data();
        for (((x, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *x *= decay;
            *mi = b1 * *mi + nb1 * g;
            *vi = b2 * *vi + nb2 * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Refinement head (absent in baseline mode) plus decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamSet<f32>,
    pub head: Option<CvtHeadParams>,
    pub decoder: DecoderParams,
    pub strides: StrideSet,
    pub frame_count: usize,
    pub classes: usize,
}

/// Taped outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub weight_logits: Option<Var>,
}

impl Model {
    pub fn init(cfg: &TrainConfig, channels: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1417));
        let mut params = ParamSet::new();
        let head = (!cfg.baseline).then(|| {
            CvtHeadParams::init(
                &mut params,
                HeadShape {
                    in_channels: cfg.frame_count * cfg.strides.len() * channels,
                    hidden: cfg.head_hidden,
                    first_kernel: cfg.head_first_kernel,
                    second_kernel: cfg.head_second_kernel,
                },
                &mut rng,
            )
        });
        let decoder = DecoderParams::init(&mut params, channels, classes, &mut rng);
        Self {
            params,
            head,
            decoder,
            strides: cfg.strides.clone(),
            frame_count: cfg.effective_frames(),
            classes,
        }
    }

    /// Rebinds a model around loaded parameters.
    pub fn from_params(params: ParamSet<f32>, cfg: &TrainConfig, channels: usize) -> Result<Self> {
        let head = if cfg.baseline {
            None
        } else {
            Some(CvtHeadParams::bind(&params, cfg.frame_count * cfg.strides.len() * channels)?)
        };
        let decoder = DecoderParams::bind(&params)?;
        if decoder.channels != channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, data has {channels}",
                decoder.channels
            )));
        }
        Ok(Self {
            classes: decoder.classes,
            params,
            head,
            decoder,
            strides: cfg.strides.clone(),
            frame_count: cfg.effective_frames(),
        })
    }

    /// Flattened cost volume of `sample`, or `None` in baseline mode.
    pub fn cost_volume(&self, sample: &FrameSample) -> Result<Option<DenseTensor<f32>>> {
        if self.head.is_none() {
            return Ok(None);
        }
        if sample.window.frame_count() < self.frame_count {
            return Err(Error::Range(format!(
                "sample holds {} frames, model needs {}",
                sample.window.frame_count(),
                self.frame_count
            )));
        }
        let window = sample.window.truncated(self.frame_count)?;
        Ok(Some(build_cost_volume(&window, &self.strides)?.flattened()?))
    }

    pub fn forward(&self, tape: &mut Tape<f32>, sample: &FrameSample) -> Result<ForwardVars> {
        let cv = self.cost_volume(sample)?;
        self.forward_with(tape, sample, cv)
    }

    /// Forward pass reusing a cost volume from [`Model::cost_volume`].
    pub fn forward_with(
        &self,
        tape: &mut Tape<f32>,
        sample: &FrameSample,
        cost_volume: Option<DenseTensor<f32>>,
    ) -> Result<ForwardVars> {
        let current = tape.input(sample.window.current.features.clone())?;
        match &self.head {
            None => Ok(ForwardVars {
                logits: self.decoder.forward(tape, &self.params, current)?,
                weight_logits: None,
            }),
            Some(head) => {
                let cv = cost_volume.ok_or_else(|| Error::Usage("refinement needs a cost volume".into()))?;
                let f = tape.input(cv)?;
                let r = head.forward(tape, &self.params, f, current)?;
                Ok(ForwardVars {
                    logits: self.decoder.forward(tape, &self.params, r.v_occ)?,
                    weight_logits: Some(r.logits),
                })
            }
        }
    }

    pub fn predict(&self, sample: &FrameSample) -> Result<OccupancyGrid> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, sample)?;
        Ok(OccupancyLogits::new(tape.value(vars.logits).clone())?.argmax())
    }

    pub fn evaluate(&self, samples: &[FrameSample], scope: &EvalScope) -> Result<EvalReport> {
        let preds = samples
            .par_iter()
            .map(|s| self.predict(s))
            .collect::<Result<Vec<_>>>()?;
        let eval: Vec<EvalSample> = samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| EvalSample {
                pred: p,
                gt: &s.gt,
                mask: &s.mask,
                ego_speed: s.ego_speed,
            })
            .collect();
        evaluate(&eval, scope)
    }
}

/// Serializable ChaCha position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub occ_loss: f64,
    /// `lambda * L_cvt`, zero when refinement supervision is off.
    pub cvt_term: f64,
    pub train_miou: Option<f64>,
    pub eval_miou: Option<f64>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState<f32>,
    pub class_weights: Vec<f64>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub channels: usize,
}

/// Class weights from visible-voxel label counts of `samples`.
pub fn dataset_class_weights(samples: &[FrameSample], classes: usize) -> Result<Vec<f64>> {
    let mut freq = vec![0u64; classes];
    for s in samples {
        for (&l, &m) in s.gt.labels.iter().zip(&s.mask.visible) {
            if m {
                freq[l as usize] += 1;
            }
        }
    }
    class_weights(&freq)
}

/// Stateful training loop; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer<'a> {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    train: &'a [FrameSample],
    eval: &'a [FrameSample],
    scope: EvalScope,
    cache: Vec<Option<DenseTensor<f32>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, train: &'a [FrameSample], eval: &'a [FrameSample], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let first = train
            .first()
            .ok_or_else(|| Error::Usage("training set is empty".into()))?;
        let channels = first.window.current.channels();
        let model = Model::init(cfg, channels, classes);
        let adam = AdamState::new(&model.params);
        let checkpoint = Checkpoint {
            adam,
            class_weights: dataset_class_weights(train, classes)?,
            config: cfg.clone(),
            epoch: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5A0F))),
            channels,
            model,
        };
        Self::resume(checkpoint, train, eval)
    }

    pub fn resume(checkpoint: Checkpoint, train: &'a [FrameSample], eval: &'a [FrameSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let scope = EvalScope {
            grid: checkpoint.config.grid,
            classes: checkpoint.model.classes,
            excluded: checkpoint.config.excluded_classes.clone(),
        };
        Ok(Self {
            checkpoint,
            log: Vec::new(),
            train,
            eval,
            scope,
            cache: vec![None; train.len()],
        })
    }

    pub fn scope(&self) -> &EvalScope {
        &self.scope
    }

    pub fn finished(&self) -> bool {
        self.checkpoint.epoch >= self.checkpoint.config.epochs
    }

    fn step_losses(&mut self, index: usize, tape: &mut Tape<f32>) -> Result<(Var, f64, f64)> {
        let sample = &self.train[index];
        let cv = match &self.cache[index] {
            Some(cv) => Some(cv.clone()),
            None => {
                let cv = self.checkpoint.model.cost_volume(sample)?;
                if self.checkpoint.config.cache_cost_volumes {
                    self.cache[index] = cv.clone();
                }
                cv
            }
        };
        let cfg = &self.checkpoint.config;
        let model = &self.checkpoint.model;
        let vars = model.forward_with(tape, sample, cv)?;
        let occ = occupancy_loss_taped(tape, vars.logits, &sample.gt, &self.checkpoint.class_weights, &sample.mask)?;
        let occ_value = tape.value(occ).item()?.f64();
        match vars.weight_logits {
            Some(w) if cfg.cvt_supervision => {
                let l = cvt_loss_taped(tape, w, &sample.gt, &sample.mask)?;
                let scaled = tape.scale(l, cfg.lambda as f32)?;
                let term = tape.value(scaled).item()?.f64();
                Ok((tape.add(occ, scaled)?, occ_value, term))
            }
            _ => Ok((occ, occ_value, 0.0)),
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.checkpoint.epoch;
        let cfg = self.checkpoint.config.clone();
        let n = self.train.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * steps_per_epoch;
        let mut rng = self.checkpoint.rng.restore();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let adam_cfg = AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        let (mut sum, mut sum_occ, mut sum_cvt) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            self.checkpoint.model.params.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let diverged = |loss: f64| Error::Divergence { epoch, step, loss };
                let (loss, occ, term) = self.step_losses(i, &mut tape).map_err(|e| match e {
                    Error::NonFinite(_) => diverged(f64::NAN),
                    e => e,
                })?;
                let value = tape.value(loss).item()?.f64();
                if !value.is_finite() {
                    return Err(diverged(value));
                }
                let loss = if batch.len() > 1 {
                    tape.scale(loss, 1.0 / batch.len() as f32)?
                } else {
                    loss
                };
                tape.backward(loss, &mut self.checkpoint.model.params)?;
                sum += value;
                sum_occ += occ;
                sum_cvt += term;
            }
            let lr = cosine_lr(step, total_steps, cfg.learning_rate);
            adamw_step(&mut self.checkpoint.model.params, &mut self.checkpoint.adam, lr, &adam_cfg)?;
            if self.checkpoint.model.params.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }
        self.checkpoint.rng = RngState::capture(&rng);
        self.checkpoint.epoch += 1;
        let last = self.finished();
        let train_miou = if cfg.log_train_miou && (cfg.eval_each_epoch || last) {
            self.checkpoint.model.evaluate(self.train, &self.scope)?.miou
        } else {
            None
        };
        let eval_miou = if !self.eval.is_empty() && (cfg.eval_each_epoch || last) {
            self.checkpoint.model.evaluate(self.eval, &self.scope)?.miou
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: sum / n as f64,
            occ_loss: sum_occ / n as f64,
            cvt_term: sum_cvt / n as f64,
            train_miou,
            eval_miou,
        };
        info!(
            "epoch {} loss {:.5} occ {:.5} cvt {:.5} train mIoU {:?} eval mIoU {:?}",
            entry.epoch, entry.loss, entry.occ_loss, entry.cvt_term, entry.train_miou, entry.eval_miou
        );
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn run(mut self) -> Result<(Checkpoint, Vec<EpochLog>)> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok((self.checkpoint, self.log))
    }
}

/// Trains from scratch on `train`, logging per-epoch metrics on `eval`.
pub fn train(
    cfg: &TrainConfig,
    train: &[FrameSample],
    eval: &[FrameSample],
    classes: usize,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    Trainer::new(cfg, train, eval, classes)?.run()
}
