//! Deterministic synthetic driving world: a smooth route flanked by semantic
//! boxes, rendered to depth + label frames through a pinhole camera, plus
//! weather and lane-shift perturbations.

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose2};
use crate::grid::Grid;
use crate::rng;
use crate::sbev::LabelMap;
use crate::stereo::{DepthMap, GrayImage};

/// Class IDs used by the generator. Similar classes sit next to each other so
/// small label confusions stay semantically close.
pub mod palette {
    pub const GROUND: u8 = 7;
    /// Ground and the IDs a radius-1 confusion can turn it into.
    pub const GROUND_BAND: [u8; 3] = [6, 7, 8];
    pub const VEGETATION: [u8; 3] = [20, 21, 22];
    pub const WALL: u8 = 30;
    pub const BUILDING: [u8; 2] = [40, 41];
    pub const POLE: u8 = 60;
    /// Dynamic objects and sky; never part of an S-BEV.
    pub const EXCLUDED: [u8; 5] = [2, 90, 91, 92, 93];
}

const NEAR_PLANE: f64 = 0.05;
const SKY_GRAY: u8 = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub length_m: f64,
    /// Spacing of route samples, one frame per sample.
    pub frame_spacing_m: f64,
    pub max_curvature: f64,
    /// Expected primitives per metre of route, both sides together.
    pub density: f64,
    /// Lateral band (distance of a primitive's near edge from the route).
    pub band_inner_m: f64,
    pub band_outer_m: f64,
    /// Half-width kept free of primitives around the route.
    pub corridor_m: f64,
    pub camera_height_m: f64,
    pub speed_mps: f64,
    pub ground_class: u8,
    /// Depths beyond this are reported invalid.
    pub max_range_m: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            length_m: 1200.0,
            frame_spacing_m: 0.5,
            max_curvature: 1.0 / 150.0,
            density: 0.15,
            band_inner_m: 6.0,
            band_outer_m: 30.0,
            corridor_m: 2.0,
            camera_height_m: 1.65,
            speed_mps: 10.0,
            ground_class: palette::GROUND,
            max_range_m: 60.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_m > 0.0) {
            return Err(Error::input(format!("route length must be positive, got {}", self.length_m)));
        }
        let ok = self.frame_spacing_m > 0.0
            && self.max_curvature >= 0.0
            && self.density >= 0.0
            && self.band_inner_m > self.corridor_m
            && self.band_outer_m >= self.band_inner_m
            && self.camera_height_m > 0.0
            && self.speed_mps > 0.0
            && self.max_range_m > 0.0
            && self.max_range_m <= 65.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid world spec {self:?}")))
        }
    }
}

/// Box standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub center: [f64; 2],
    pub yaw: f64,
    /// Half sizes along the box's own x and y axes.
    pub half_extent: [f64; 2],
    pub height: f64,
    pub class_id: u8,
}

impl Primitive {
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Planar distance from a point to the footprint (0 inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let (lx, ly) = self.to_local(x, y);
        let ex = (lx.abs() - self.half_extent[0]).max(0.0);
        let ey = (ly.abs() - self.half_extent[1]).max(0.0);
        ex.hypot(ey)
    }

    fn radius(&self) -> f64 {
        self.half_extent[0].hypot(self.half_extent[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub spec: WorldSpec,
    /// Route samples every `frame_spacing_m`.
    pub route: Vec<Pose2>,
    pub primitives: Vec<Primitive>,
}

/// Sum-of-sinusoids heading profile, integrated at a fine step.
fn generate_route(spec: &WorldSpec, r: &mut impl Rng) -> Vec<Pose2> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (r.random_range(150.0..500.0), r.random_range(0.2..1.0), r.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let wsum: f64 = comps.iter().map(|c| c.1).sum();
    // amplitude so the curvature bound is met with equality at worst
    let comps: Vec<(f64, f64, f64)> = comps
        .into_iter()
        .map(|(lambda, w, phase)| (lambda, spec.max_curvature * (w / wsum) * lambda / std::f64::consts::TAU, phase))
        .collect();
    let heading = |s: f64| -> f64 {
        comps
            .iter()
            .map(|&(lambda, a, phase)| a * (std::f64::consts::TAU * s / lambda + phase).sin())
            .sum()
    };
    let n = (spec.length_m / spec.frame_spacing_m).floor() as usize + 1;
    let sub = 8;
    let h = spec.frame_spacing_m / sub as f64;
    let mut out = Vec::with_capacity(n);
    let (mut x, mut y) = (0.0, 0.0);
    let mut s = 0.0;
    out.push(Pose2::new(x, y, heading(0.0)));
    for _ in 1..n {
        for _ in 0..sub {
            let th = heading(s + 0.5 * h);
            x += h * th.cos();
            y += h * th.sin();
            s += h;
        }
        out.push(Pose2::new(x, y, heading(s)));
    }
    out
}

fn random_primitive(anchor: &Pose2, side: f64, spec: &WorldSpec, r: &mut impl Rng) -> Primitive {
    let kind = r.random_range(0.0..1.0);
    let (class_id, along, across, height) = if kind < 0.3 {
        (
            *palette::BUILDING.choose(r).unwrap(),
            r.random_range(8.0..25.0),
            r.random_range(6.0..15.0),
            r.random_range(6.0..15.0),
        )
    } else if kind < 0.65 {
        let d = r.random_range(2.0..5.0);
        (*palette::VEGETATION.choose(r).unwrap(), d, d * r.random_range(0.7..1.3), r.random_range(2.0..8.0))
    } else if kind < 0.85 {
        (palette::WALL, r.random_range(5.0..20.0), r.random_range(0.3..0.6), r.random_range(1.5..3.0))
    } else {
        (palette::POLE, 0.3, 0.3, r.random_range(4.0..8.0))
    };
    let near = r.random_range(spec.band_inner_m..=spec.band_outer_m);
    let lateral = side * (near + 0.5 * across);
    let c = anchor.compose(&Pose2::new(0.0, lateral, 0.0));
    Primitive {
        center: [c.x, c.y],
        yaw: anchor.theta + r.random_range(-0.15..0.15),
        half_extent: [0.5 * along, 0.5 * across],
        height,
        class_id,
    }
}

pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut r = rng::stream(seed, 0x3011);
    let route = generate_route(spec, &mut r);
    let mut primitives = Vec::new();
    if spec.density > 0.0 {
        let gap = Exp::new(0.5 * spec.density).map_err(|e| Error::Config(e.to_string()))?;
        for side in [1.0, -1.0] {
            let mut s = gap.sample(&mut r);
            while s < spec.length_m {
                let idx = ((s / spec.frame_spacing_m).round() as usize).min(route.len() - 1);
                let p = random_primitive(&route[idx], side, spec, &mut r);
                // keep the driving corridor clear
                let reach = p.radius() + spec.corridor_m;
                let clear = route
                    .iter()
                    .filter(|q| (q.x - p.center[0]).abs() <= reach && (q.y - p.center[1]).abs() <= reach)
                    .all(|q| p.footprint_distance(q.x, q.y) > spec.corridor_m);
                if clear {
                    primitives.push(p);
                }
                s += gap.sample(&mut r);
            }
        }
    }
    Ok(World { seed, spec: spec.clone(), route, primitives })
}

impl World {
    /// Timestamp of route sample `i`.
    pub fn timestamp(&self, i: usize) -> f64 {
        i as f64 * self.spec.frame_spacing_m / self.spec.speed_mps
    }
}

/// Every pose moved sideways along its left normal; headings unchanged.
pub fn lane_shift(route: &[Pose2], lateral_offset: f64) -> Vec<Pose2> {
    route.iter().map(|p| p.compose(&Pose2::new(0.0, lateral_offset, 0.0))).collect()
}

/// Camera-frame view of the world from one ego pose.
struct View {
    ego: Pose2,
    h: f64,
}

impl View {
    fn point(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        let (s, c) = self.ego.theta.sin_cos();
        let (dx, dy) = (x - self.ego.x, y - self.ego.y);
        let xe = c * dx + s * dy;
        let ye = -s * dx + c * dy;
        Vector3::new(-ye, -(z - self.h), xe)
    }

    fn vector(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        let (s, c) = self.ego.theta.sin_cos();
        Vector3::new(s * x - c * y, -z, c * x + s * y)
    }
}

struct Face {
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    normal: Vector3<f64>,
}

/// The five visible-from-above faces of a box, in camera coordinates, with
/// outward normals.
fn box_faces(p: &Primitive, view: &View) -> Vec<Face> {
    let (s, c) = p.yaw.sin_cos();
    let ax = (c * p.half_extent[0], s * p.half_extent[0]);
    let ay = (-s * p.half_extent[1], c * p.half_extent[1]);
    let corner = |sx: f64, sy: f64, z: f64| {
        view.point(p.center[0] + sx * ax.0 + sy * ay.0, p.center[1] + sx * ax.1 + sy * ay.1, z)
    };
    let ex = view.vector(2.0 * ax.0, 2.0 * ax.1, 0.0);
    let ey = view.vector(2.0 * ay.0, 2.0 * ay.1, 0.0);
    let ez = view.vector(0.0, 0.0, p.height);
    let nx = ex.normalize();
    let ny = ey.normalize();
    let nz = view.vector(0.0, 0.0, 1.0);
    vec![
        Face { origin: corner(1.0, -1.0, 0.0), e1: ey, e2: ez, normal: nx },
        Face { origin: corner(-1.0, -1.0, 0.0), e1: ey, e2: ez, normal: -nx },
        Face { origin: corner(-1.0, 1.0, 0.0), e1: ex, e2: ez, normal: ny },
        Face { origin: corner(-1.0, -1.0, 0.0), e1: ex, e2: ez, normal: -ny },
        Face { origin: corner(-1.0, -1.0, p.height), e1: ex, e2: ey, normal: nz },
    ]
}

/// Clips a convex polygon to z >= near.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn hash_gray(a: i64, b: i64, salt: u64) -> u64 {
    rng::derive(salt, (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64))
}

struct Raster {
    depth: Vec<f64>,
    labels: Vec<u8>,
    gray: Option<Vec<u8>>,
}

fn render_view(world: &World, ego: &Pose2, k: &Intrinsics, with_gray: bool) -> Raster {
    let (w, h) = (k.width, k.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut labels = vec![0u8; w * h];
    let mut gray = with_gray.then(|| vec![SKY_GRAY; w * h]);
    let view = View { ego: *ego, h: world.spec.camera_height_m };
    let range = world.spec.max_range_m;
    // the gray image is a camera picture, so it is not range limited
    let cull = if with_gray { f64::INFINITY } else { range };

    let (es, ec) = ego.theta.sin_cos();
    for (bi, p) in world.primitives.iter().enumerate() {
        // depth is measured along the heading, so cull on the forward distance
        let forward = ec * (p.center[0] - ego.x) + es * (p.center[1] - ego.y);
        if forward - p.radius() > cull || forward + p.radius() < NEAR_PLANE {
            continue;
        }
        for (fi, f) in box_faces(p, &view).iter().enumerate() {
            // back-face: camera sits at the origin
            if f.normal.dot(&f.origin) >= 0.0 {
                continue;
            }
            let quad = [f.origin, f.origin + f.e1, f.origin + f.e1 + f.e2, f.origin + f.e2];
            let clipped = clip_near(&quad);
            if clipped.len() < 3 {
                continue;
            }
            let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for q in &clipped {
                let (u, v) = k.project(q).unwrap();
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
            let ua = u0.floor().max(0.0) as usize;
            let va = v0.floor().max(0.0) as usize;
            if u1 < 0.0 || v1 < 0.0 {
                continue;
            }
            let ub = (u1.ceil() as usize).min(w - 1);
            let vb = (v1.ceil() as usize).min(h - 1);
            let n_dot_o = f.normal.dot(&f.origin);
            let (l1, l2) = (f.e1.norm_squared(), f.e2.norm_squared());
            for v in va..=vb {
                let dy = (v as f64 - k.cy) / k.fy;
                for u in ua..=ub {
                    let ray = Vector3::new((u as f64 - k.cx) / k.fx, dy, 1.0);
                    let denom = f.normal.dot(&ray);
                    if denom >= 0.0 {
                        continue;
                    }
                    let t = n_dot_o / denom;
                    let i = v * w + u;
                    if t < NEAR_PLANE || t >= zbuf[i] {
                        continue;
                    }
                    let rel = ray * t - f.origin;
                    let a = rel.dot(&f.e1) / l1;
                    let b = rel.dot(&f.e2) / l2;
                    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                        continue;
                    }
                    zbuf[i] = t;
                    labels[i] = p.class_id;
                    if let Some(g) = gray.as_mut() {
                        let am = (a * l1.sqrt() / 0.3).floor() as i64;
                        let bm = (b * l2.sqrt() / 0.3).floor() as i64;
                        let base = 50 + (rng::derive(bi as u64, 17) % 60) as u8;
                        g[i] = base + (hash_gray(am, bm, (bi * 8 + fi) as u64) % 90) as u8;
                    }
                }
            }
        }
    }

    let cam_h = world.spec.camera_height_m;
    let (s, c) = ego.theta.sin_cos();
    for v in 0..h {
        let dv = v as f64 - k.cy;
        if dv <= 0.0 {
            continue;
        }
        let t = cam_h * k.fy / dv;
        for u in 0..w {
            let i = v * w + u;
            if t >= zbuf[i] {
                continue;
            }
            zbuf[i] = t;
            labels[i] = world.spec.ground_class;
            if let Some(g) = gray.as_mut() {
                let xc = (u as f64 - k.cx) / k.fx * t;
                // camera (x right, z forward) to world ground coordinates
                let (xe, ye) = (t, -xc);
                let gx = ego.x + c * xe - s * ye;
                let gy = ego.y + s * xe + c * ye;
                g[i] = 80 + (hash_gray((gx / 0.25).floor() as i64, (gy / 0.25).floor() as i64, 0x6e0) % 100) as u8;
            }
        }
    }

    let depth = zbuf
        .iter()
        .zip(labels.iter_mut())
        .map(|(&z, l)| {
            if z.is_finite() && z <= range {
                z
            } else {
                *l = 0;
                0.0
            }
        })
        .collect();
    Raster { depth, labels, gray }
}

/// Depth (metres along the optical axis, 0 = invalid) and labels for the
/// camera at `ego`, mounted at the configured height facing along the heading.
pub fn render_frame(world: &World, ego: &Pose2, k: &Intrinsics) -> (DepthMap, LabelMap) {
    let r = render_view(world, ego, k, false);
    (
        Grid::from_vec(k.width, k.height, r.depth).unwrap(),
        Grid::from_vec(k.width, k.height, r.labels).unwrap(),
    )
}

/// Procedurally textured grayscale image plus its depth map.
pub fn render_gray(world: &World, ego: &Pose2, k: &Intrinsics) -> (GrayImage, DepthMap) {
    let r = render_view(world, ego, k, true);
    (
        Grid::from_vec(k.width, k.height, r.gray.unwrap()).unwrap(),
        Grid::from_vec(k.width, k.height, r.depth).unwrap(),
    )
}

/// Left/right grayscale pair with the right camera one baseline to the right.
pub fn render_stereo_pair(world: &World, ego: &Pose2, k: &Intrinsics) -> (GrayImage, GrayImage, DepthMap) {
    let (left, depth) = render_gray(world, ego, k);
    let right_pose = ego.compose(&Pose2::new(0.0, -k.baseline, 0.0));
    let (right, _) = render_gray(world, &right_pose, k);
    (left, right, depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherSpec {
    pub name: String,
    pub label_confusion_prob: f64,
    /// Maximum class-ID distance of a confused label.
    pub confusion_radius: u8,
    pub depth_dropout_prob: f64,
    pub depth_noise_sigma: f64,
    /// Fog-like maximum range in metres; 0 disables it.
    pub range_attenuation: f64,
}

impl Default for WeatherSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl WeatherSpec {
    pub fn clean() -> Self {
        Self {
            name: "clean".into(),
            label_confusion_prob: 0.0,
            confusion_radius: 0,
            depth_dropout_prob: 0.0,
            depth_noise_sigma: 0.0,
            range_attenuation: 0.0,
        }
    }

    pub fn confusion(p: f64, radius: u8) -> Self {
        Self { name: format!("confusion_{p}"), label_confusion_prob: p, confusion_radius: radius, ..Self::clean() }
    }

    pub fn depth_noise(sigma: f64) -> Self {
        Self { name: format!("depth_noise_{sigma}"), depth_noise_sigma: sigma, ..Self::clean() }
    }

    pub fn fog(range: f64) -> Self {
        Self { name: format!("fog_{range}"), range_attenuation: range, ..Self::clean() }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if p(self.label_confusion_prob)
            && p(self.depth_dropout_prob)
            && self.depth_noise_sigma >= 0.0
            && self.range_attenuation >= 0.0
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid weather spec {self:?}")))
        }
    }
}

/// Applies label confusion, depth dropout, depth noise and fog, each pixel
/// independently from a stream seeded by `seed`.
pub fn perturb_weather(depth: &DepthMap, labels: &LabelMap, w: &WeatherSpec, seed: u64) -> Result<(DepthMap, LabelMap)> {
    w.validate()?;
    crate::grid::check_same_shape(depth, labels, "depth/labels")?;
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, w.depth_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut d = depth.clone();
    let mut l = labels.clone();
    let rad = w.confusion_radius as i32;
    for (dv, lv) in d.data_mut().iter_mut().zip(l.data_mut().iter_mut()) {
        if *lv != 0 && rad > 0 && w.label_confusion_prob > 0.0 && r.random_bool(w.label_confusion_prob) {
            let c = *lv as i32;
            let lo = (c - rad).max(1);
            let hi = (c + rad).min(255);
            if hi > lo {
                // uniform over the other classes in [lo, hi]
                let mut pick = r.random_range(lo..hi);
                if pick >= c {
                    pick += 1;
                }
                *lv = pick as u8;
            }
        }
        if *dv > 0.0 {
            if w.depth_dropout_prob > 0.0 && r.random_bool(w.depth_dropout_prob) {
                *dv = 0.0;
            } else if w.depth_noise_sigma > 0.0 {
                let nd = *dv + noise.sample(&mut r);
                *dv = if nd > 0.0 { nd } else { 0.0 };
            }
        }
        if w.range_attenuation > 0.0 && *dv > w.range_attenuation {
            *dv = 0.0;
            *lv = 0;
        }
    }
    Ok((d, l))
}
