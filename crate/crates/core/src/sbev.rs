//! Semantic bird's-eye-view construction.
//!
//! Depth plus labels are unprojected into a labeled cloud, moved into the ego
//! frame and rasterized top-down into a fixed 352×352 class-ID grid. Up to
//! five consecutive frames are motion-compensated into the newest ego frame
//! before rasterizing.
//!
//! Grid layout: the ego sits at the bottom-center cell facing up. Row 0 is
//! the farthest forward band, column 0 the leftmost band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose2_from_pose3, transform_points, Intrinsics, LabeledPoint, Pose2, Pose3};
use crate::grid::{check_same_shape, Grid};
use crate::stereo::DepthMap;

pub const SBEV_SIZE: usize = 352;
/// Maximum number of frames fused into one S-BEV (current plus four previous).
pub const MAX_ACCUMULATED_FRAMES: usize = 5;

/// Per-pixel class IDs, 0 = unlabeled.
pub type LabelMap = Grid<u8>;

/// Which classes survive into the S-BEV, plus an optional relabeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPolicy {
    keep: [bool; 256],
    remap: [u8; 256],
}

impl ClassPolicy {
    /// Keeps `keep` minus `excluded`; `remap` is applied after filtering.
    pub fn new(keep: impl IntoIterator<Item = u8>, excluded: &[u8], remap: &[(u8, u8)]) -> Self {
        let mut k = [false; 256];
        for id in keep {
            k[id as usize] = true;
        }
        k[0] = false;
        for &id in excluded {
            k[id as usize] = false;
        }
        let mut r = [0u8; 256];
        for (i, v) in r.iter_mut().enumerate() {
            *v = i as u8;
        }
        for &(from, to) in remap {
            r[from as usize] = to;
        }
        Self { keep: k, remap: r }
    }

    /// Every nonzero class except `excluded` (dynamic objects, sky, ...).
    pub fn all_except(excluded: &[u8]) -> Self {
        Self::new(1..=255u8, excluded, &[])
    }

    pub fn keeps(&self, id: u8) -> bool {
        self.keep[id as usize]
    }

    pub fn keep_set(&self) -> Vec<u8> {
        (0..=255u8).filter(|&i| self.keep[i as usize]).collect()
    }

    #[inline]
    pub fn apply(&self, id: u8) -> u8 {
        if self.keep[id as usize] {
            self.remap[id as usize]
        } else {
            0
        }
    }
}

pub fn filter_labels(labels: &LabelMap, policy: &ClassPolicy) -> LabelMap {
    labels.map(|id| policy.apply(id))
}

/// Replaces each valid depth by the median of the valid depths carrying the
/// same label within `radius` pixels. Planar surfaces pass through unchanged
/// away from their borders; per-pixel depth noise is strongly reduced.
pub fn median_filter_depth(depth: &DepthMap, labels: &LabelMap, radius: usize) -> Result<DepthMap> {
    check_same_shape(depth, labels, "depth/labels")?;
    if radius == 0 {
        return Ok(depth.clone());
    }
    let (w, h) = (depth.width(), depth.height());
    let mut out = depth.clone();
    let mut buf = Vec::with_capacity((2 * radius + 1).pow(2));
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(radius), (v + radius).min(h - 1));
        for u in 0..w {
            let (d, l) = (depth.get(u, v), labels.get(u, v));
            if !(d > 0.0) || l == 0 {
                continue;
            }
            let (u0, u1) = (u.saturating_sub(radius), (u + radius).min(w - 1));
            buf.clear();
            for y in v0..=v1 {
                for x in u0..=u1 {
                    let dq = depth.get(x, y);
                    if dq > 0.0 && labels.get(x, y) == l {
                        buf.push(dq);
                    }
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
            out.set(u, v, *m);
        }
    }
    Ok(out)
}

/// Metric layout of the S-BEV raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub size: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub forward_extent: f64,
    pub lateral_extent: f64,
    /// Height window relative to the camera, meters.
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            size: SBEV_SIZE,
            resolution: 0.25,
            forward_extent: 88.0,
            lateral_extent: 88.0,
            z_min: -2.5,
            z_max: 6.0,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: f64) -> Self {
        let extent = SBEV_SIZE as f64 * resolution;
        Self {
            resolution,
            forward_extent: extent,
            lateral_extent: extent,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extent = self.size as f64 * self.resolution;
        if self.size != SBEV_SIZE {
            return Err(Error::Config(format!("S-BEV size must be {SBEV_SIZE}, got {}", self.size)));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config("S-BEV resolution must be positive".into()));
        }
        if (extent - self.forward_extent).abs() > 1e-9 || (extent - self.lateral_extent).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "size x resolution = {extent} m must equal both extents ({} / {})",
                self.forward_extent, self.lateral_extent
            )));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::Config("height window needs z_min < z_max".into()));
        }
        Ok(())
    }

    /// Cell (row, col) containing ego-frame point (x forward, y left).
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x / self.resolution).floor();
        let ci = ((0.5 * self.lateral_extent - y) / self.resolution).floor();
        if fi < 0.0 || ci < 0.0 || fi >= self.size as f64 || ci >= self.size as f64 {
            return None;
        }
        Some((self.size - 1 - fi as usize, ci as usize))
    }

    /// Ego-frame coordinates of a cell center.
    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = ((self.size - 1 - row) as f64 + 0.5) * self.resolution;
        let y = 0.5 * self.lateral_extent - (col as f64 + 0.5) * self.resolution;
        (x, y)
    }
}

/// A rasterized semantic bird's-eye view.
#[derive(Debug, Clone, PartialEq)]
pub struct SBev {
    /// `grid.get(col, row)` holds the class ID of the cell, 0 = empty.
    pub grid: Grid<u8>,
    pub resolution: f64,
    /// Ego pose the grid is anchored to.
    pub origin: Pose2,
    pub frame_id: u64,
}

impl SBev {
    pub fn empty(spec: &GridSpec) -> Self {
        Self {
            grid: Grid::filled(spec.size, spec.size, 0),
            resolution: spec.resolution,
            origin: Pose2::IDENTITY,
            frame_id: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.grid.get(col, row)
    }

    pub fn nonzero_cells(&self) -> usize {
        self.grid.data().iter().filter(|&&c| c != 0).count()
    }

    fn spec(&self) -> GridSpec {
        GridSpec::with_resolution(self.resolution)
    }

    /// Content translated by (-di, -dj) cells, i.e. the view after the ego
    /// moves `di` cells forward and `dj` cells left. Vacated cells are 0.
    pub fn shifted(&self, di: i64, dj: i64) -> SBev {
        let n = self.size() as i64;
        let grid = Grid::from_fn(self.size(), self.size(), |col, row| {
            let (sr, sc) = (row as i64 - di, col as i64 - dj);
            if sr >= 0 && sr < n && sc >= 0 && sc < n {
                self.grid.get(sc as usize, sr as usize)
            } else {
                0
            }
        });
        SBev { grid, ..*self }
    }

    /// Content rotated about the ego cell by `-delta` (the view after the
    /// ego yaws by `+delta`), nearest-neighbor resampled.
    pub fn rotated(&self, delta: f64) -> SBev {
        let spec = self.spec();
        let (s, c) = delta.sin_cos();
        let grid = Grid::from_fn(self.size(), self.size(), |col, row| {
            let (x, y) = spec.cell_center(row, col);
            // point in the old ego frame
            let (ox, oy) = (c * x - s * y, s * x + c * y);
            match spec.cell_of(ox, oy) {
                Some((r, cc)) => self.grid.get(cc, r),
                None => 0,
            }
        });
        SBev { grid, ..*self }
    }

    /// Block-averaged class IDs scaled to [0, 1], row-major, `(size/factor)^2` values.
    pub fn pooled(&self, factor: usize) -> Vec<f64> {
        let n = self.size() / factor;
        let mut out = vec![0.0; n * n];
        let norm = 1.0 / (255.0 * (factor * factor) as f64);
        for row in 0..n * factor {
            let pr = row / factor;
            for col in 0..n * factor {
                out[pr * n + col / factor] += self.cell(row, col) as f64;
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        out
    }
}

/// Camera-frame points, one per valid-depth labeled pixel on the stride lattice.
pub fn build_point_cloud(depth: &DepthMap, labels: &LabelMap, k: &Intrinsics, stride: usize) -> Result<Vec<LabeledPoint>> {
    check_same_shape(depth, labels, "depth/labels")?;
    if stride == 0 {
        return Err(Error::Config("pixel stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    for v in (0..depth.height()).step_by(stride) {
        for u in (0..depth.width()).step_by(stride) {
            let label = labels.get(u, v);
            if label == 0 {
                continue;
            }
            if let Some(p) = k.unproject(u as f64, v as f64, depth.get(u, v)) {
                out.push(LabeledPoint { pos: p, label });
            }
        }
    }
    Ok(out)
}

/// Filters labels, unprojects and moves the cloud into the ego frame.
pub fn frame_cloud(
    depth: &DepthMap,
    labels: &LabelMap,
    policy: &ClassPolicy,
    k: &Intrinsics,
    stride: usize,
) -> Result<Vec<LabeledPoint>> {
    let filtered = filter_labels(labels, policy);
    let cloud = build_point_cloud(depth, &filtered, k, stride)?;
    Ok(transform_points(&cloud, &Pose3::camera_to_ego()))
}

/// Top-down raster of an ego-frame cloud: each cell takes the label of its
/// highest point, ties going to the larger class ID.
pub fn rasterize_bev(cloud: &[LabeledPoint], spec: &GridSpec) -> SBev {
    let mut sbev = SBev::empty(spec);
    let n = spec.size;
    let mut top = vec![f64::NEG_INFINITY; n * n];
    let cells = sbev.grid.data_mut();
    for p in cloud {
        let z = p.pos.z;
        if !(z >= spec.z_min && z <= spec.z_max) {
            continue;
        }
        let Some((row, col)) = spec.cell_of(p.pos.x, p.pos.y) else {
            continue;
        };
        let i = row * n + col;
        if z > top[i] || (z == top[i] && p.label > cells[i]) {
            top[i] = z;
            cells[i] = p.label;
        }
    }
    sbev
}

/// Motion-compensated S-BEV from up to five (ego-frame cloud, ego pose)
/// pairs, newest last, rendered in the `current` ego frame.
pub fn accumulate_sbev(frames: &[(&[LabeledPoint], Pose3)], current: &Pose3, spec: &GridSpec) -> Result<SBev> {
    if frames.is_empty() {
        return Err(Error::input("S-BEV accumulation needs at least one frame"));
    }
    if frames.len() > MAX_ACCUMULATED_FRAMES {
        return Err(Error::input(format!(
            "S-BEV accumulation takes at most {MAX_ACCUMULATED_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let to_current = current.inverse();
    let mut all = Vec::with_capacity(frames.iter().map(|f| f.0.len()).sum());
    for (cloud, pose) in frames {
        let rel = to_current.compose(pose);
        all.extend(transform_points(cloud, &rel));
    }
    let mut sbev = rasterize_bev(&all, spec);
    sbev.origin = pose2_from_pose3(current)?;
    Ok(sbev)
}

/// Keeps the last few ego-frame clouds of a traversal and emits one S-BEV per pushed frame.
#[derive(Debug)]
pub struct SbevAccumulator {
    frames: std::collections::VecDeque<(Vec<LabeledPoint>, Pose3)>,
    window: usize,
}

impl Default for SbevAccumulator {
    fn default() -> Self {
        Self { frames: Default::default(), window: MAX_ACCUMULATED_FRAMES }
    }
}

impl SbevAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates over the last `window` frames (1 to 5).
    pub fn with_window(window: usize) -> Result<Self> {
        if window == 0 || window > MAX_ACCUMULATED_FRAMES {
            return Err(Error::Config(format!("accumulation window must be 1..={MAX_ACCUMULATED_FRAMES}, got {window}")));
        }
        Ok(Self { frames: Default::default(), window })
    }

    pub fn push(&mut self, cloud: Vec<LabeledPoint>, pose: Pose3, spec: &GridSpec) -> Result<SBev> {
        if self.frames.len() == self.window {
            self.frames.pop_front();
        }
        self.frames.push_back((cloud, pose));
        let refs: Vec<(&[LabeledPoint], Pose3)> = self.frames.iter().map(|(c, p)| (c.as_slice(), *p)).collect();
        accumulate_sbev(&refs, &pose, spec)
    }
}
