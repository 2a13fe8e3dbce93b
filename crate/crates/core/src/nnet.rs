//! A small dense neural-network engine: affine layers with relu / linear /
//! sigmoid activations, inverted dropout, exact reverse-mode gradients, MSE
//! loss, SGD and Adam, and seeded mini-batch training.
//!
//! Batches are column-major: a `DMatrix` of shape `(features, batch)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
    /// Dropout rate applied to this layer's output during training, in [0, 1).
    pub dropout: f64,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

/// Stack of dense layers. `generation` counts parameter updates so stale
/// forward records can be detected.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Config(format!("layer {i}: bias length {} != out dim {}", l.bias.len(), l.out_dim())));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!("layer {i}: dropout {} outside [0, 1)", l.dropout)));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Config(format!(
                    "layer {i}: input {} does not chain with previous output {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Uniform fan-in scaled initialization, zero biases.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, 0x1417);
        let layers = specs
            .iter()
            .map(|s| {
                let gain = if s.activation == Activation::Relu { 6.0 } else { 3.0 };
                let a = (gain / s.in_dim.max(1) as f64).sqrt();
                DenseLayer {
                    weights: DMatrix::from_fn(s.out_dim, s.in_dim, |_, _| r.random_range(-a..=a)),
                    bias: DVector::zeros(s.out_dim),
                    activation: s.activation,
                    dropout: s.dropout,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Fully connected stack over `widths` with `hidden` activations and
    /// `hidden_dropout` between layers, `output` activation on the last.
    pub fn mlp(widths: &[usize], hidden: Activation, output: Activation, hidden_dropout: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("mlp needs at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let specs: Vec<LayerSpec> = (0..n)
            .map(|i| LayerSpec {
                in_dim: widths[i],
                out_dim: widths[i + 1],
                activation: if i + 1 == n { output } else { hidden },
                dropout: if i + 1 == n { 0.0 } else { hidden_dropout },
            })
            .collect();
        Self::init(&specs, seed)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable parameter access; bumps the generation counter.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// The first `n` layers as their own network.
    pub fn prefix(&self, n: usize) -> Result<DenseNet> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::Config(format!("cannot take {n} of {} layers", self.layers.len())));
        }
        DenseNet::new(self.layers[..n].to_vec())
    }

    /// Eval-mode forward of a batch.
    pub fn predict_batch(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(self, input)?;
        let mut x = input.clone();
        for l in &self.layers {
            x = affine(l, &x);
            x.apply(|v| *v = l.activation.apply(*v));
        }
        Ok(x)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.predict_batch(&x)?.as_slice().to_vec())
    }
}

fn check_input(net: &DenseNet, input: &DMatrix<f64>) -> Result<()> {
    if input.nrows() != net.in_dim() {
        return Err(Error::input(format!(
            "network expects {} inputs, got {}",
            net.in_dim(),
            input.nrows()
        )));
    }
    Ok(())
}

fn affine(l: &DenseLayer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &l.weights * x;
    for mut col in z.column_iter_mut() {
        col += &l.bias;
    }
    z
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<DMatrix<f64>>,
    /// Inverted-dropout masks (0 or 1/(1-p)) where dropout was active.
    masks: Vec<Option<DMatrix<f64>>>,
    pub output: DMatrix<f64>,
}

impl Activations {
    /// Pre-activation values of every layer, input layer first.
    pub fn pre_activations(&self) -> &[DMatrix<f64>] {
        &self.pre
    }
}

/// Forward pass. In train mode dropout masks are drawn from `rng` and recorded;
/// in eval mode dropout is the identity.
pub fn forward(net: &DenseNet, input: &DMatrix<f64>, mode: Mode, rng: &mut impl RngCore) -> Result<Activations> {
    check_input(net, input)?;
    let n = net.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut x = input.clone();
    for l in &net.layers {
        let z = affine(l, &x);
        let mut a = z.map(|v| l.activation.apply(v));
        let mask = if mode == Mode::Train && l.dropout > 0.0 {
            let keep = 1.0 / (1.0 - l.dropout);
            let m = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| if rng.random::<f64>() < l.dropout { 0.0 } else { keep });
            a.component_mul_assign(&m);
            Some(m)
        } else {
            None
        };
        inputs.push(x);
        pre.push(z);
        masks.push(mask);
        x = a;
    }
    Ok(Activations {
        generation: net.generation,
        inputs,
        pre,
        masks,
        output: x,
    })
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| DMatrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)) && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

/// Reverse-mode gradients of the loss with respect to all parameters, given
/// the loss gradient with respect to the network output. Batch columns are summed.
pub fn backward(net: &DenseNet, acts: &Activations, output_grad: &DMatrix<f64>) -> Result<Gradients> {
    if acts.generation != net.generation || acts.inputs.len() != net.layers.len() {
        return Err(Error::input("activation record is stale: parameters changed since the forward pass"));
    }
    if output_grad.shape() != acts.output.shape() {
        return Err(Error::input(format!(
            "output gradient shape {:?} does not match output {:?}",
            output_grad.shape(),
            acts.output.shape()
        )));
    }
    let n = net.layers.len();
    let mut gw = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    let mut g = output_grad.clone();
    for i in (0..n).rev() {
        let l = &net.layers[i];
        if let Some(m) = &acts.masks[i] {
            g.component_mul_assign(m);
        }
        g.zip_apply(&acts.pre[i], |gv, z| *gv *= l.activation.derivative(z));
        gw.push(&g * acts.inputs[i].transpose());
        gb.push(g.column_sum());
        if i > 0 {
            g = l.weights.transpose() * &g;
        }
    }
    gw.reverse();
    gb.reverse();
    Ok(Gradients { weights: gw, biases: gb })
}

/// Mean squared error and its gradient `2 (pred - target) / n`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::input(format!("mse: lengths {} and {} differ", pred.len(), target.len())));
    }
    let n = pred.len().max(1) as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Batch MSE with optional per-output weights. Returns the sum over columns
/// of per-sample losses and the gradient of their mean.
fn batch_mse(pred: &DMatrix<f64>, target: &DMatrix<f64>, weights: Option<&[f64]>) -> (f64, DMatrix<f64>) {
    let (rows, cols) = pred.shape();
    let mut grad = pred - target;
    let mut total = 0.0;
    let scale = 2.0 / (rows as f64 * cols as f64);
    for c in 0..cols {
        for r in 0..rows {
            let w = weights.map_or(1.0, |w| w[r]);
            let e = grad[(r, c)];
            total += w * e * e;
            grad[(r, c)] = scale * w * e;
        }
    }
    (total / rows as f64, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds weight init, shuffling and dropout.
    pub seed: u64,
    /// Per-output MSE weights; uniform when absent.
    pub loss_weights: Option<Vec<f64>>,
    /// Adam denominator guard. Sparse, small-valued inputs give tiny
    /// gradients, so this sits well below the usual 1e-8.
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            loss_weights: None,
            adam_eps: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    m: Option<Gradients>,
    v: Option<Gradients>,
}

pub fn optimizer_step(net: &mut DenseNet, grads: &Gradients, cfg: &TrainConfig, state: &mut OptimizerState) -> Result<()> {
    if grads.weights.len() != net.layers.len()
        || grads
            .weights
            .iter()
            .zip(&net.layers)
            .any(|(g, l)| g.shape() != l.weights.shape())
    {
        return Err(Error::input("gradient shapes do not match the network"));
    }
    state.step += 1;
    let (lr, eps) = (cfg.learning_rate, cfg.adam_eps);
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (l, (gw, gb)) in net.layers_mut().iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                l.weights -= gw * lr;
                l.bias -= gb * lr;
            }
        }
        OptimizerKind::Adam => {
            let m = state.m.get_or_insert_with(|| Gradients::zeros_like(net));
            let v = state.v.get_or_insert_with(|| Gradients::zeros_like(net));
            let t = state.step as i32;
            let c1 = 1.0 / (1.0 - ADAM_BETA1.powi(t));
            let c2 = 1.0 / (1.0 - ADAM_BETA2.powi(t));
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
                }
            };
            for (i, l) in net.layers_mut().iter_mut().enumerate() {
                update(l.weights.as_mut_slice(), grads.weights[i].as_slice(), m.weights[i].as_mut_slice(), v.weights[i].as_mut_slice());
                update(l.bias.as_mut_slice(), grads.biases[i].as_slice(), m.biases[i].as_mut_slice(), v.biases[i].as_mut_slice());
            }
        }
    }
    Ok(())
}

/// Borrowed (input, target) pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainSet<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub targets: Vec<&'a [f64]>,
}

impl<'a> TrainSet<'a> {
    pub fn push(&mut self, input: &'a [f64], target: &'a [f64]) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured on the training batches.
    pub losses: Vec<f64>,
}

fn gather(rows: usize, idx: &[usize], src: &[&[f64]]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        m.column_mut(c).copy_from_slice(src[i]);
    }
    m
}

/// Seeded mini-batch training with MSE loss.
pub fn train(net: &mut DenseNet, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let (din, dout) = (net.in_dim(), net.out_dim());
    if let Some(i) = (0..data.len()).find(|&i| data.inputs[i].len() != din || data.targets[i].len() != dout) {
        return Err(Error::input(format!(
            "sample {i} has shape ({}, {}), network expects ({din}, {dout})",
            data.inputs[i].len(),
            data.targets[i].len()
        )));
    }
    if let Some(w) = &cfg.loss_weights {
        if w.len() != dout {
            return Err(Error::Config(format!("{} loss weights for {dout} outputs", w.len())));
        }
    }
    let mut r = rng::stream(cfg.seed, 0x7a1);
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather(din, idx, &data.inputs);
            let t = gather(dout, idx, &data.targets);
            let acts = forward(net, &x, Mode::Train, &mut r)?;
            let (loss, grad) = batch_mse(&acts.output, &t, cfg.loss_weights.as_deref());
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            total += loss;
            let g = backward(net, &acts, &grad)?;
            optimizer_step(net, &g, cfg, &mut state)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(TrainReport { losses })
}

const WEIGHTS_MAGIC: &[u8; 4] = b"SBNN";
const WEIGHTS_VERSION: u16 = 1;

/// Serializes to the `SBNN` weights format (little-endian, f32 parameters).
pub fn encode_weights(net: &DenseNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * net.parameter_count() + 13 * net.layers.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u16).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.push(l.activation.code());
        out.extend_from_slice(&(l.dropout as f32).to_le_bytes());
        for r in 0..l.out_dim() {
            for c in 0..l.in_dim() {
                out.extend_from_slice(&(l.weights[(r, c)] as f32).to_le_bytes());
            }
        }
        for &b in l.bias.iter() {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                what: self.what.to_string(),
                offset: self.pos,
                message: format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8], what: &str) -> Result<DenseNet> {
    let mut c = Cursor { bytes, pos: 0, what };
    let magic = c.take(4).map_err(|_| Error::Format {
        what: what.to_string(),
        message: "expected magic \"SBNN\", file too short".into(),
    })?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format {
            what: what.to_string(),
            message: format!("expected magic \"SBNN\", found {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = c.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format {
            what: what.to_string(),
            message: format!("unsupported weights version {version}, expected {WEIGHTS_VERSION}"),
        });
    }
    let count = c.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = c.pos;
        let din = c.u32()? as usize;
        let dout = c.u32()? as usize;
        let act = c.take(1)?[0];
        let activation = Activation::from_code(act).ok_or_else(|| Error::Parse {
            what: what.to_string(),
            offset: at + 8,
            message: format!("unknown activation code {act}"),
        })?;
        let dropout = c.f32()? as f64;
        let mut weights = DMatrix::zeros(dout, din);
        for r in 0..dout {
            for col in 0..din {
                weights[(r, col)] = c.f32()? as f64;
            }
        }
        let mut bias = DVector::zeros(dout);
        for b in bias.iter_mut() {
            *b = c.f32()? as f64;
        }
        layers.push(DenseLayer { weights, bias, activation, dropout });
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: c.pos,
            message: "trailing bytes after last layer".into(),
        });
    }
    DenseNet::new(layers).map_err(|e| Error::Format { what: what.to_string(), message: e.to_string() })
}
