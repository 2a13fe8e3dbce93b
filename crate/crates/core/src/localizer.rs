//! Coarse-to-fine localization: an autoencoder embeds a pooled S-BEV, the
//! nearest stored embedding picks the node, and a regressor fed with the
//! node one-hot and the embedding predicts the pose relative to that node.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{global_from_relative, wrap_angle, Pose2};
use crate::nnet::{self, Activation, DenseNet, LayerSpec, TrainConfig, TrainReport, TrainSet};
use crate::sbev::SBev;
use crate::topomap::TopoMap;

/// Pooling factor from the 352-cell S-BEV to the 44×44 network input.
pub const POOL_FACTOR: usize = 8;
pub const AE_INPUT_DIM: usize = (crate::sbev::SBEV_SIZE / POOL_FACTOR) * (crate::sbev::SBEV_SIZE / POOL_FACTOR);

/// What the autoencoder learns to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeTarget {
    /// The node-average S-BEV of the sample's node.
    NodeAverage,
    /// The sample itself.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub train: TrainConfig,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            latent: 128,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: 8,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    net: DenseNet,
    encoder: DenseNet,
}

impl AeModel {
    /// Wraps a symmetric autoencoder; the first half of its layers encode.
    pub fn new(net: DenseNet) -> Result<Self> {
        let n = net.layers().len();
        if n < 2 || n % 2 != 0 || net.in_dim() != net.out_dim() {
            return Err(Error::Config(format!(
                "autoencoder needs an even layer count and matching in/out dims, got {n} layers {}->{}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        let encoder = net.prefix(n / 2)?;
        Ok(Self { net, encoder })
    }

    pub fn init(cfg: &AeConfig, input_dim: usize) -> Result<Self> {
        // linear bottleneck: relu latents die off on sparse inputs
        let widths = [input_dim, cfg.hidden, cfg.latent, cfg.hidden, input_dim];
        let acts = [Activation::Relu, Activation::Linear, Activation::Relu, Activation::Linear];
        let specs: Vec<LayerSpec> = acts
            .iter()
            .enumerate()
            .map(|(i, &activation)| LayerSpec { in_dim: widths[i], out_dim: widths[i + 1], activation, dropout: 0.0 })
            .collect();
        Self::new(DenseNet::init(&specs, cfg.train.seed)?)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Side length of the grid the network sees.
    fn pooled_side(&self) -> usize {
        (self.input_dim() as f64).sqrt().round() as usize
    }

    pub fn pool(&self, sbev: &SBev) -> Result<Vec<f64>> {
        let side = self.pooled_side();
        if side == 0 || sbev.size() % side != 0 || side * side != self.input_dim() {
            return Err(Error::Config(format!(
                "S-BEV of size {} cannot be pooled to {} inputs",
                sbev.size(),
                self.input_dim()
            )));
        }
        Ok(sbev.pooled(sbev.size() / side))
    }

    pub fn encode(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(pooled)
    }

    /// Batched encoder forward, in input order.
    pub fn encode_many(&self, pooled: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pooled.len());
        for chunk in pooled.chunks(256) {
            let x = batch_matrix(self.input_dim(), chunk)?;
            let y = self.encoder.predict_batch(&x)?;
            out.extend(y.column_iter().map(|c| c.iter().copied().collect::<Vec<f64>>()));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(pooled)
    }

    pub fn embed(&self, sbev: &SBev) -> Result<Vec<f64>> {
        self.encode(&self.pool(sbev)?)
    }
}

fn batch_matrix(rows: usize, cols: &[&[f64]]) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        if c.len() != rows {
            return Err(Error::input(format!("expected {rows} values, got {}", c.len())));
        }
        x.column_mut(j).copy_from_slice(c);
    }
    Ok(x)
}

/// Per-sample reconstruction targets: node means of `inputs` or the inputs themselves.
pub fn ae_targets(inputs: &[&[f64]], nodes: &[usize], target: AeTarget) -> Result<Vec<Vec<f64>>> {
    if inputs.len() != nodes.len() {
        return Err(Error::input("inputs and node ids differ in length"));
    }
    match target {
        AeTarget::Identity => Ok(inputs.iter().map(|v| v.to_vec()).collect()),
        AeTarget::NodeAverage => {
            let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for (x, &n) in inputs.iter().zip(nodes) {
                let e = sums.entry(n).or_insert_with(|| (vec![0.0; x.len()], 0));
                if e.0.len() != x.len() {
                    return Err(Error::input("inputs differ in length"));
                }
                e.0.iter_mut().zip(x.iter()).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
            let means: BTreeMap<usize, Vec<f64>> = sums
                .into_iter()
                .map(|(n, (s, c))| (n, s.into_iter().map(|v| v / c as f64).collect()))
                .collect();
            Ok(nodes.iter().map(|n| means[n].clone()).collect())
        }
    }
}

pub fn train_autoencoder(inputs: &[&[f64]], targets: &[&[f64]], cfg: &AeConfig) -> Result<(AeModel, TrainReport)> {
    let Some(first) = inputs.first() else {
        return Err(Error::input("autoencoder training set is empty"));
    };
    let model = AeModel::init(cfg, first.len())?;
    train_autoencoder_from(model, inputs, targets, &cfg.train)
}

/// Continues training an existing model.
pub fn train_autoencoder_from(model: AeModel, inputs: &[&[f64]], targets: &[&[f64]], train: &TrainConfig) -> Result<(AeModel, TrainReport)> {
    if inputs.len() != targets.len() {
        return Err(Error::input("inputs and targets differ in length"));
    }
    let data = TrainSet { inputs: inputs.to_vec(), targets: targets.to_vec() };
    let mut net = model.net;
    let report = nnet::train(&mut net, &data, train)?;
    Ok((AeModel::new(net)?, report))
}

/// Flat exact nearest-neighbour index over latent vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingIndex {
    latent_dim: usize,
    nodes: Vec<usize>,
    data: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(latent_dim: usize) -> Self {
        Self { latent_dim, nodes: Vec::new(), data: Vec::new() }
    }

    pub fn push(&mut self, node_id: usize, latent: &[f64]) -> Result<()> {
        if latent.len() != self.latent_dim {
            return Err(Error::input(format!(
                "latent has {} values, index expects {}",
                latent.len(),
                self.latent_dim
            )));
        }
        self.nodes.push(node_id);
        self.data.extend_from_slice(latent);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn entry(&self, i: usize) -> (usize, &[f64]) {
        (self.nodes[i], &self.data[i * self.latent_dim..(i + 1) * self.latent_dim])
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.nodes
    }

    /// Exact 1-NN by Euclidean distance; ties go to the smaller node id,
    /// then to the earlier entry.
    pub fn coarse_localize(&self, latent: &[f64]) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(Error::input("embedding index is empty"));
        }
        if latent.len() != self.latent_dim {
            return Err(Error::input(format!("query has {} values, index expects {}", latent.len(), self.latent_dim)));
        }
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, row) in self.data.chunks_exact(self.latent_dim).enumerate() {
            let d2: f64 = row.iter().zip(latent).map(|(a, b)| (a - b) * (a - b)).sum();
            let node = self.nodes[i];
            if d2 < best.1 || (d2 == best.1 && node < best.0) {
                best = (node, d2);
            }
        }
        Ok((best.0, best.1.sqrt()))
    }

    /// `count u32, latent_dim u32`, then per entry `node_id u32` and f32 latent, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (4 + 4 * self.latent_dim));
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        for i in 0..self.len() {
            let (n, v) = self.entry(i);
            out.extend_from_slice(&(n as u32).to_le_bytes());
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { what: what.to_string(), offset, message };
        if bytes.len() < 8 {
            return Err(parse(0, "index header needs 8 bytes".into()));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let stride = 4 + 4 * dim;
        let expect = count
            .checked_mul(stride)
            .and_then(|v| v.checked_add(8))
            .ok_or_else(|| parse(0, "index header sizes overflow".into()))?;
        if bytes.len() != expect {
            return Err(parse(bytes.len().min(expect), format!("expected {expect} bytes for {count} entries of dim {dim}, found {}", bytes.len())));
        }
        let mut idx = Self::new(dim);
        idx.nodes.reserve(count);
        idx.data.reserve(count * dim);
        for e in bytes[8..].chunks_exact(stride) {
            idx.nodes.push(u32::from_le_bytes(e[0..4].try_into().unwrap()) as usize);
            idx.data.extend(e[4..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64));
        }
        Ok(idx)
    }
}

/// `[one_hot(node_id) ⊕ latent]`.
pub fn regressor_input(node_id: usize, n_nodes: usize, latent: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; n_nodes + latent.len()];
    v[node_id] = 1.0;
    v[n_nodes..].copy_from_slice(latent);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub train: TrainConfig,
    /// Accept node-imbalanced training sets.
    pub allow_unbalanced: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            dropout: 0.2,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: 150,
                ..Default::default()
            },
            allow_unbalanced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegModel {
    net: DenseNet,
    n_nodes: usize,
}

impl RegModel {
    pub fn new(net: DenseNet, n_nodes: usize) -> Result<Self> {
        if net.out_dim() != 3 || net.in_dim() <= n_nodes {
            return Err(Error::Config(format!(
                "regressor shape {}->{} does not fit {n_nodes} nodes and a 3-DoF output",
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(Self { net, n_nodes })
    }

    pub fn init(cfg: &RegConfig, n_nodes: usize, latent_dim: usize) -> Result<Self> {
        let mut widths = vec![n_nodes + latent_dim];
        widths.extend(&cfg.hidden);
        widths.push(3);
        Self::new(DenseNet::mlp(&widths, Activation::Relu, Activation::Linear, cfg.dropout, cfg.train.seed)?, n_nodes)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn latent_dim(&self) -> usize {
        self.net.in_dim() - self.n_nodes
    }

    pub fn fine_localize(&self, node_id: usize, latent: &[f64]) -> Result<Pose2> {
        if node_id >= self.n_nodes {
            return Err(Error::input(format!("node {node_id} outside regressor range 0..{}", self.n_nodes)));
        }
        let y = self.net.predict(&regressor_input(node_id, self.n_nodes, latent))?;
        Ok(Pose2::new(y[0], y[1], wrap_angle(y[2])))
    }
}

/// One regressor training example.
#[derive(Debug, Clone, Copy)]
pub struct RegSample<'a> {
    pub node_id: usize,
    pub latent: &'a [f64],
    pub rel_pose: Pose2,
}

pub fn train_regressor(samples: &[RegSample], n_nodes: usize, cfg: &RegConfig) -> Result<(RegModel, TrainReport)> {
    let Some(first) = samples.first() else {
        return Err(Error::input("regressor training set is empty"));
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        if s.node_id >= n_nodes {
            return Err(Error::input(format!("sample node {} outside 0..{n_nodes}", s.node_id)));
        }
        *counts.entry(s.node_id).or_default() += 1;
    }
    let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
    if lo != hi && !cfg.allow_unbalanced {
        return Err(Error::input(format!(
            "regressor training set is unbalanced (node counts {lo}..{hi}); balance it or allow_unbalanced"
        )));
    }
    let model = RegModel::init(cfg, n_nodes, first.latent.len())?;
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| regressor_input(s.node_id, n_nodes, s.latent)).collect();
    let targets: Vec<[f64; 3]> = samples.iter().map(|s| [s.rel_pose.x, s.rel_pose.y, s.rel_pose.theta]).collect();
    let data = TrainSet {
        inputs: inputs.iter().map(|v| v.as_slice()).collect(),
        targets: targets.iter().map(|t| t.as_slice()).collect(),
    };
    let mut net = model.net;
    let report = nnet::train(&mut net, &data, &cfg.train)?;
    Ok((RegModel::new(net, n_nodes)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationResult {
    pub node_id: usize,
    pub rel_pose: Pose2,
    pub global_pose: Pose2,
    pub nn_distance: f64,
}

/// The assembled inference pipeline.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub ae: AeModel,
    pub index: EmbeddingIndex,
    pub reg: RegModel,
    pub map: TopoMap,
}

impl Localizer {
    pub fn new(ae: AeModel, index: EmbeddingIndex, reg: RegModel, map: TopoMap) -> Result<Self> {
        if index.latent_dim() != ae.latent_dim() || reg.latent_dim() != ae.latent_dim() {
            return Err(Error::Config(format!(
                "latent sizes disagree: encoder {}, index {}, regressor {}",
                ae.latent_dim(),
                index.latent_dim(),
                reg.latent_dim()
            )));
        }
        if reg.n_nodes() != map.len() {
            return Err(Error::Config(format!("regressor covers {} nodes, map has {}", reg.n_nodes(), map.len())));
        }
        let mut seen = vec![false; map.len()];
        for &n in index.node_ids() {
            if n >= map.len() {
                return Err(Error::Config(format!("index references node {n}, map has {}", map.len())));
            }
            seen[n] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("node {missing} has no embedding in the index")));
        }
        Ok(Self { ae, index, reg, map })
    }

    pub fn localize_latent(&self, latent: &[f64]) -> Result<LocalizationResult> {
        let (node_id, nn_distance) = self.index.coarse_localize(latent)?;
        let rel_pose = self.reg.fine_localize(node_id, latent)?;
        Ok(LocalizationResult {
            node_id,
            rel_pose,
            global_pose: global_from_relative(&self.map.nodes[node_id].pose, &rel_pose),
            nn_distance,
        })
    }

    pub fn localize(&self, sbev: &SBev) -> Result<LocalizationResult> {
        self.localize_latent(&self.ae.embed(sbev)?)
    }
}
