//! Dense depth from rectified stereo.
//!
//! Winner-take-all SAD block matching with a left-right consistency check,
//! followed by guide-weighted edge-aware smoothing. This is a light stand-in
//! for semi-global matching with WLS post-filtering; precomputed depth maps
//! can be fed to the S-BEV stage directly instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grid::{check_same_shape, Grid};

pub type GrayImage = Grid<u8>;
/// Disparity in pixels, `INVALID_DISPARITY` where unknown.
pub type DisparityMap = Grid<f64>;
/// Depth along the optical axis in meters, `0.0` where unknown.
pub type DepthMap = Grid<f64>;

pub const INVALID_DISPARITY: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMatchParams {
    /// Odd window side, ≥ 3.
    pub block_size: usize,
    pub max_disparity: usize,
    /// Maximum left/right disagreement in pixels.
    pub lr_tolerance: f64,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            block_size: 9,
            max_disparity: 128,
            lr_tolerance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthParams {
    /// Disparities at or below this are treated as invalid (epsilon_d).
    pub min_disparity: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthParams {
    fn default() -> Self {
        Self {
            min_disparity: 0.5,
            min_depth: 0.5,
            max_depth: 80.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothParams {
    pub radius: usize,
    /// Guide intensity scale of the range kernel.
    pub eps: f64,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            radius: 3,
            eps: 12.0,
        }
    }
}

fn box_sum_rows(src: &[f32], w: usize, h: usize, r: usize, dst: &mut [f32]) {
    // dst(u, v) = sum of src over the (2r+1)^2 window; only interior pixels are meaningful.
    let mut col = vec![0f32; w * h];
    for u in 0..w {
        let mut acc = 0f32;
        for v in 0..h {
            acc += src[v * w + u];
            if v >= 2 * r + 1 {
                acc -= src[(v - 2 * r - 1) * w + u];
            }
            if v >= 2 * r {
                col[(v - r) * w + u] = acc;
            }
        }
    }
    for v in r..h.saturating_sub(r) {
        let row = &col[v * w..(v + 1) * w];
        let mut acc = 0f32;
        for u in 0..w {
            acc += row[u];
            if u >= 2 * r + 1 {
                acc -= row[u - 2 * r - 1];
            }
            if u >= 2 * r {
                dst[v * w + u - r] = acc;
            }
        }
    }
}

/// SAD block matching along rows with left-right consistency.
pub fn disparity_block_match(left: &GrayImage, right: &GrayImage, params: &BlockMatchParams) -> Result<DisparityMap> {
    check_same_shape(left, right, "stereo pair")?;
    if params.block_size < 3 || params.block_size % 2 == 0 {
        return Err(Error::Config(format!(
            "block size must be odd and >= 3, got {}",
            params.block_size
        )));
    }
    if params.max_disparity == 0 {
        return Err(Error::Config("max_disparity must be positive".into()));
    }
    let (w, h) = (left.width(), left.height());
    let r = params.block_size / 2;
    let nd = params.max_disparity;
    let mut out = Grid::filled(w, h, INVALID_DISPARITY);
    if w <= 2 * r || h <= 2 * r {
        return Ok(out);
    }

    // cost[(v * w + u) * nd + d], infinite where the window leaves the right image.
    let mut cost = vec![f32::INFINITY; w * h * nd];
    let mut diff = vec![0f32; w * h];
    let mut summed = vec![0f32; w * h];
    for d in 0..nd.min(w) {
        for v in 0..h {
            for u in 0..w {
                diff[v * w + u] = if u >= d {
                    (left.get(u, v) as f32 - right.get(u - d, v) as f32).abs()
                } else {
                    0.0
                };
            }
        }
        box_sum_rows(&diff, w, h, r, &mut summed);
        for v in r..h - r {
            for u in (r + d)..(w - r) {
                cost[(v * w + u) * nd + d] = summed[v * w + u];
            }
        }
    }

    let best = |costs: &dyn Fn(usize) -> f32| -> Option<usize> {
        let mut arg = None;
        let mut min = f32::INFINITY;
        for d in 0..nd {
            let c = costs(d);
            if c < min {
                min = c;
                arg = Some(d);
            }
        }
        arg
    };

    let mut right_disp = vec![-1i64; w * h];
    for v in r..h - r {
        for ur in r..w - r {
            let c = |d: usize| {
                if ur + d < w {
                    cost[(v * w + ur + d) * nd + d]
                } else {
                    f32::INFINITY
                }
            };
            if let Some(d) = best(&c) {
                right_disp[v * w + ur] = d as i64;
            }
        }
    }

    for v in r..h - r {
        for u in r..w - r {
            let base = (v * w + u) * nd;
            let c = |d: usize| cost[base + d];
            let Some(d) = best(&c) else { continue };
            let mut sub = d as f64;
            if d > 0 && d + 1 < nd {
                let (cm, c0, cp) = (cost[base + d - 1] as f64, cost[base + d] as f64, cost[base + d + 1] as f64);
                let denom = cm - 2.0 * c0 + cp;
                if cm.is_finite() && cp.is_finite() && denom > 0.0 {
                    sub += (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                }
            }
            let ur = u - d;
            let dr = right_disp[v * w + ur];
            if dr < 0 || (dr as f64 - sub).abs() > params.lr_tolerance {
                continue;
            }
            if sub >= 0.0 && sub < nd as f64 {
                out.set(u, v, sub);
            }
        }
    }
    Ok(out)
}

/// Guide-weighted smoothing with hole filling.
///
/// Each output is a weighted mean of valid neighbors within `radius`, with
/// weights `exp(-(I_p - I_q)^2 / (2 eps^2))` from the guide image. Invalid
/// pixels are filled when at least a quarter of the window is valid.
pub fn smooth_disparity(d: &DisparityMap, guide: &GrayImage, params: &SmoothParams) -> Result<DisparityMap> {
    check_same_shape(d, guide, "disparity/guide")?;
    if !(params.eps > 0.0) {
        return Err(Error::Config("smoothing eps must be positive".into()));
    }
    let (w, h) = (d.width(), d.height());
    let r = params.radius as isize;
    let window = ((2 * r + 1) * (2 * r + 1)) as usize;
    let inv = 1.0 / (2.0 * params.eps * params.eps);
    let mut out = Grid::filled(w, h, INVALID_DISPARITY);
    for v in 0..h as isize {
        for u in 0..w as isize {
            let gp = guide.get(u as usize, v as usize) as f64;
            let dp = d.get(u as usize, v as usize);
            let center_valid = dp >= 0.0;
            let mut reference = if center_valid { dp } else { f64::NAN };
            let (mut sw, mut swd, mut count) = (0.0, 0.0, 0usize);
            for dv in -r..=r {
                let y = v + dv;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for du in -r..=r {
                    let x = u + du;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let dq = d.get(x as usize, y as usize);
                    if dq < 0.0 {
                        continue;
                    }
                    if reference.is_nan() {
                        reference = dq;
                    }
                    count += 1;
                    let dg = guide.get(x as usize, y as usize) as f64 - gp;
                    let wq = (-dg * dg * inv).exp();
                    sw += wq;
                    swd += wq * (dq - reference);
                }
            }
            if sw <= 0.0 {
                continue;
            }
            if center_valid || 4 * count >= window {
                out.set(u as usize, v as usize, reference + swd / sw);
            }
        }
    }
    Ok(out)
}

/// `depth = fx * baseline / disparity`; small or out-of-range values become 0.
pub fn disparity_to_depth(d: &DisparityMap, k: &Intrinsics, params: &DepthParams) -> DepthMap {
    let fb = k.fx * k.baseline;
    d.map(|disp| {
        if disp > params.min_disparity {
            let z = fb / disp;
            if z > params.min_depth && z < params.max_depth {
                return z;
            }
        }
        0.0
    })
}

/// Inverse of [`disparity_to_depth`] for valid pixels.
pub fn depth_to_disparity(depth: &DepthMap, k: &Intrinsics) -> DisparityMap {
    let fb = k.fx * k.baseline;
    depth.map(|z| if z > 0.0 { fb / z } else { INVALID_DISPARITY })
}
