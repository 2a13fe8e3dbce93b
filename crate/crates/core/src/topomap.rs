//! Topological nodes along a mapping trajectory, frame-to-node assignment,
//! node-average S-BEVs, class balancing and label-consistent augmentation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, wrap_angle, Pose2};
use crate::rng;
use crate::sbev::SBev;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: usize,
    pub pose: Pose2,
}

/// Ordered topo-metric nodes; ids run 0..n in trajectory order.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoMap {
    pub nodes: Vec<TopoNode>,
    pub trans_threshold: f64,
    /// Radians.
    pub ang_threshold: f64,
}

/// Greedy walk: a pose becomes a node once it is at least `trans_threshold`
/// away from the previous node or its heading differs by `ang_threshold`.
pub fn build_topo_map(trajectory: &[Pose2], trans_threshold: f64, ang_threshold: f64) -> Result<TopoMap> {
    let Some(first) = trajectory.first() else {
        return Err(Error::input("cannot build a topological map from an empty trajectory"));
    };
    if !(trans_threshold > 0.0) || !(ang_threshold > 0.0) {
        return Err(Error::Config("node thresholds must be positive".into()));
    }
    let mut nodes = vec![TopoNode { id: 0, pose: *first }];
    for p in &trajectory[1..] {
        let last = nodes.last().unwrap().pose;
        if p.distance(&last) >= trans_threshold || wrap_angle(p.theta - last.theta).abs() >= ang_threshold {
            nodes.push(TopoNode { id: nodes.len(), pose: *p });
        }
    }
    Ok(TopoMap {
        nodes,
        trans_threshold,
        ang_threshold,
    })
}

impl TopoMap {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_pose(&self, id: usize) -> Option<Pose2> {
        self.nodes.get(id).map(|n| n.pose)
    }

    /// Node with the smallest planar distance; ties go to the smaller id.
    pub fn nearest_node(&self, pose: &Pose2) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for n in &self.nodes {
            let (dx, dy) = (n.pose.x - pose.x, n.pose.y - pose.y);
            let d = dx * dx + dy * dy;
            if d < best_d {
                best_d = d;
                best = n.id;
            }
        }
        best
    }
}

pub fn nearest_node(map: &TopoMap, pose: &Pose2) -> usize {
    map.nearest_node(pose)
}

/// Cell-wise mean of a node's S-BEVs, stored as 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgSBev {
    pub node_id: usize,
    pub size: usize,
    /// Row-major cell means.
    pub grid: Vec<f32>,
}

impl AvgSBev {
    /// Block-averaged and scaled to [0, 1], matching [`SBev::pooled`].
    pub fn pooled(&self, factor: usize) -> Vec<f64> {
        let n = self.size / factor;
        let mut out = vec![0.0; n * n];
        for row in 0..n * factor {
            for col in 0..n * factor {
                out[(row / factor) * n + col / factor] += self.grid[row * self.size + col] as f64;
            }
        }
        let norm = 1.0 / (255.0 * (factor * factor) as f64);
        out.iter_mut().for_each(|v| *v *= norm);
        out
    }
}

pub fn node_average_sbev(node_id: usize, sbevs: &[&SBev]) -> Result<AvgSBev> {
    let Some(first) = sbevs.first() else {
        return Err(Error::input(format!("node {node_id} has no S-BEVs to average")));
    };
    let size = first.size();
    if sbevs.iter().any(|s| s.size() != size) {
        return Err(Error::input("S-BEVs to average differ in size"));
    }
    // class IDs are small integers, so the f64 sum is exact regardless of order
    let mut acc = vec![0f64; size * size];
    for s in sbevs {
        for (a, &c) in acc.iter_mut().zip(s.grid.data()) {
            *a += c as f64;
        }
    }
    let n = sbevs.len() as f64;
    Ok(AvgSBev {
        node_id,
        size,
        grid: acc.into_iter().map(|v| (v / n) as f32).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSample {
    pub frame_id: u64,
    pub node_id: usize,
    /// Frame pose relative to its node.
    pub rel_pose: Pose2,
    pub sbev_path: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeDataset {
    pub samples: Vec<NodeSample>,
}

impl NodeDataset {
    /// Assigns every frame to its nearest node.
    pub fn assign(map: &TopoMap, frames: &[(u64, Pose2)]) -> Self {
        let samples = frames
            .iter()
            .map(|(frame_id, pose)| {
                let node_id = map.nearest_node(pose);
                NodeSample {
                    frame_id: *frame_id,
                    node_id,
                    rel_pose: relative_pose(&map.nodes[node_id].pose, pose),
                    sbev_path: format!("sbev/{frame_id:05}.pgm"),
                }
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per node id (only nodes that have samples).
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        let mut c = BTreeMap::new();
        for s in &self.samples {
            *c.entry(s.node_id).or_insert(0) += 1;
        }
        c
    }

    pub fn is_balanced(&self) -> bool {
        let c = self.counts();
        c.values().min() == c.values().max()
    }

    /// Sample indices grouped per node, in dataset order.
    pub fn by_node(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            m.entry(s.node_id).or_default().push(i);
        }
        m
    }

    /// Checks every node id exists in `map`.
    pub fn check_against(&self, map: &TopoMap) -> Result<()> {
        match self.samples.iter().find(|s| s.node_id >= map.len()) {
            Some(s) => Err(Error::input(format!(
                "frame {} references node {} but the map has {} nodes",
                s.frame_id,
                s.node_id,
                map.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Undersamples every node to the smallest node's count, uniformly without
/// replacement, keeping dataset order among the survivors.
pub fn balance_samples(ds: &NodeDataset, seed: u64) -> NodeDataset {
    let groups = ds.by_node();
    let Some(min) = groups.values().map(Vec::len).min() else {
        return NodeDataset::default();
    };
    let mut keep = Vec::with_capacity(min * groups.len());
    for (&node, idx) in &groups {
        let mut r = rng::stream(seed, node as u64);
        let mut chosen: Vec<usize> = sample(&mut r, idx.len(), min).into_iter().map(|i| idx[i]).collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    NodeDataset {
        samples: keep.into_iter().map(|i| ds.samples[i].clone()).collect(),
    }
}

/// Rotations and cell shifts applied to training S-BEVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub rotations_deg: Vec<f64>,
    /// (forward cells, left cells).
    pub shifts: Vec<(i64, i64)>,
    /// Keep only this many randomly chosen augmentations per sample.
    pub per_sample: Option<usize>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotations_deg: vec![-5.0, 5.0],
            shifts: vec![(-4, 0), (-2, 0), (2, 0), (4, 0), (0, -4), (0, -2), (0, 2), (0, 4)],
            per_sample: None,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotations_deg: Vec::new(),
            shifts: Vec::new(),
            per_sample: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rotations_deg.is_empty() && self.shifts.is_empty()
    }
}

/// The original sample followed by its augmented copies. Each copy's label
/// is the relative pose the ego would have had to see that grid.
pub fn augment_sample(sbev: &SBev, rel_pose: &Pose2, spec: &AugmentSpec, seed: u64) -> Vec<(SBev, Pose2)> {
    enum Aug {
        Rot(f64),
        Shift(i64, i64),
    }
    let mut augs: Vec<Aug> = spec.rotations_deg.iter().map(|d| Aug::Rot(d.to_radians())).collect();
    augs.extend(spec.shifts.iter().map(|&(di, dj)| Aug::Shift(di, dj)));
    if let Some(k) = spec.per_sample {
        if k < augs.len() {
            let mut r = rng::stream(seed, sbev.frame_id);
            let mut idx = sample(&mut r, augs.len(), k).into_vec();
            idx.sort_unstable();
            let mut picked = Vec::with_capacity(k);
            for (i, a) in augs.into_iter().enumerate() {
                if idx.binary_search(&i).is_ok() {
                    picked.push(a);
                }
            }
            augs = picked;
        }
    }
    let mut out = Vec::with_capacity(augs.len() + 1);
    out.push((sbev.clone(), *rel_pose));
    for a in augs {
        match a {
            Aug::Rot(delta) => out.push((sbev.rotated(delta), rel_pose.compose(&Pose2::new(0.0, 0.0, delta)))),
            Aug::Shift(di, dj) => {
                let step = Pose2::new(di as f64 * sbev.resolution, dj as f64 * sbev.resolution, 0.0);
                out.push((sbev.shifted(di, dj), rel_pose.compose(&step)));
            }
        }
    }
    out
}
