//! Reverse-mode differentiation over a linear tape.
//!
//! Every taped op appends one node holding its output and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse execution order and
//! adds parameter gradients into the owning [`ParamSet`].

use log::warn;

use crate::error::{Error, Result};

use super::ops::{self, conv3d_backward, elementwise_mul_backward, sigmoid_scalar};
use super::{DenseTensor, Scalar};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    /// Stable identifier used in checkpoints.
    pub name: String,
    pub value: DenseTensor<T>,
    pub grad: DenseTensor<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: DenseTensor<T>) -> Self {
        let grad = DenseTensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseTensor<T>) -> ParamId {
        self.params.push(ParamTensor::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv3d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    MulVoxel { a: Var, w: Var },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    CrossEntropy { logits: Var, saved: Box<CrossEntropySaved<T>> },
    BinaryCrossEntropy { logits: Var, saved: Box<BinarySaved> },
}

#[derive(Debug)]
struct CrossEntropySaved<T> {
    labels: Vec<u8>,
    mask: Vec<bool>,
    class_weights: Vec<T>,
    count: usize,
}

#[derive(Debug)]
struct BinarySaved {
    occupied: Vec<bool>,
    mask: Vec<bool>,
    count: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: DenseTensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed differentiable ops.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseTensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: DenseTensor<T>) -> Result<Var> {
        value.check_finite("input")?;
        Ok(self.push(value, Op::Input, false))
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv3d(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(x));
        out.check_finite("sigmoid")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sigmoid(x), needs))
    }

    /// Per-voxel weight `w` broadcast over the channels of `a`.
    pub fn mul_voxel(&mut self, a: Var, w: Var) -> Result<Var> {
        let out = ops::elementwise_mul(self.value(a), self.value(w))?;
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(out, Op::MulVoxel { a, w }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        out.check_finite("add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        out.check_finite("scale")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, factor), needs))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = DenseTensor::scalar(self.value(x).sum());
        out.check_finite("sum")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sum(x), needs))
    }

    /// Class-weighted softmax cross-entropy over the last axis of `logits`,
    /// averaged over voxels where `mask` is set. An empty mask yields 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        class_weights: &[T],
        mask: &[bool],
    ) -> Result<Var> {
        let x = self.value(logits);
        let classes = x.channels();
        let voxels = x.len() / classes.max(1);
        if labels.len() != voxels || mask.len() != voxels || class_weights.len() != classes {
            return Err(Error::shape(format!(
                "cross-entropy: logits {:?}, {} labels, {} mask, {} class weights",
                x.shape(),
                labels.len(),
                mask.len(),
                class_weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::shape(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        for v in (0..voxels).filter(|&v| mask[v]) {
            let row = &x.data()[v * classes..(v + 1) * classes];
            let y = labels[v] as usize;
            total += class_weights[y] * (log_sum_exp(row) - row[y]);
        }
        let value = if count == 0 {
            warn!("cross-entropy over an empty visibility mask");
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let out = DenseTensor::scalar(value);
        out.check_finite("cross_entropy")?;
        let needs = self.needs(logits);
        let saved = CrossEntropySaved {
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            class_weights: class_weights.to_vec(),
            count,
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                saved: Box::new(saved),
            },
            needs,
        ))
    }

    /// Binary cross-entropy of `sigmoid(logits)` against occupancy labels,
    /// averaged over masked voxels. Computed in log-sigmoid form.
    pub fn binary_cross_entropy_with_logits(
        &mut self,
        logits: Var,
        occupied: &[bool],
        mask: &[bool],
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != occupied.len() || x.len() != mask.len() {
            return Err(Error::shape(format!(
                "binary cross-entropy: {} logits, {} labels, {} mask",
                x.len(),
                occupied.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        for v in (0..x.len()).filter(|&v| mask[v]) {
            let z = x.data()[v];
            // -log(sigmoid(z)) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z).
            total += if occupied[v] { softplus(-z) } else { softplus(z) };
        }
        let value = if count == 0 {
            warn!("binary cross-entropy over an empty visibility mask");
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let out = DenseTensor::scalar(value);
        out.check_finite("binary_cross_entropy")?;
        let needs = self.needs(logits);
        let saved = BinarySaved {
            occupied: occupied.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(
            out,
            Op::BinaryCrossEntropy {
                logits,
                saved: Box::new(saved),
            },
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss`, adding gradients into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::filled(
            self.value(loss).shape().to_vec(),
            T::one(),
        ));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.get_mut(*id).grad.add_assign(&g)?,
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                } => {
                    let cg = conv3d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        &g,
                        self.needs(*input),
                    )?;
                    if let Some(di) = cg.input {
                        accumulate(&mut grads, *input, di)?;
                    }
                    if self.needs(*kernel) {
                        accumulate(&mut grads, *kernel, cg.kernel)?;
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, cg.bias)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (o, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, d)?;
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (o, &s) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= s * (T::one() - s);
                    }
                    accumulate(&mut grads, *x, d)?;
                }
                Op::MulVoxel { a, w } => {
                    let (da, dw) = elementwise_mul_backward(self.value(*a), self.value(*w), &g)?;
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f))?;
                }
                Op::Sum(x) => {
                    let seed = g.item()?;
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, DenseTensor::filled(shape, seed))?;
                }
                Op::CrossEntropy { logits, saved } => {
                    let seed = g.item()?;
                    let x = self.value(*logits);
                    let classes = x.channels();
                    let mut d = DenseTensor::zeros(x.shape().to_vec());
                    if saved.count > 0 {
                        let scale = seed / T::of(saved.count as f64);
                        for v in (0..saved.labels.len()).filter(|&v| saved.mask[v]) {
                            let row = &x.data()[v * classes..(v + 1) * classes];
                            let y = saved.labels[v] as usize;
                            let lse = log_sum_exp(row);
                            let wy = saved.class_weights[y] * scale;
                            let out = &mut d.data_mut()[v * classes..(v + 1) * classes];
                            for (c, o) in out.iter_mut().enumerate() {
                                let p = (row[c] - lse).exp();
                                let target = if c == y { T::one() } else { T::zero() };
                                *o = wy * (p - target);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
                Op::BinaryCrossEntropy { logits, saved } => {
                    let seed = g.item()?;
                    let x = self.value(*logits);
                    let mut d = DenseTensor::zeros(x.shape().to_vec());
                    if saved.count > 0 {
                        let scale = seed / T::of(saved.count as f64);
                        for v in (0..x.len()).filter(|&v| saved.mask[v]) {
                            let target = if saved.occupied[v] { T::one() } else { T::zero() };
                            d.data_mut()[v] = scale * (sigmoid_scalar(x.data()[v]) - target);
                        }
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<DenseTensor<T>>],
    target: Var,
    g: DenseTensor<T>,
) -> Result<()> {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
