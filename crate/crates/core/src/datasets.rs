//! On-disk formats: binary PGM images, trajectory and sample CSVs, JSON
//! sidecars, network weights, embedding indexes, localizer bundles and
//! dataset directories (native and vKITTI-like).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose2};
use crate::grid::Grid;
use crate::localizer::{AeModel, EmbeddingIndex, Localizer, RegModel};
use crate::nnet::{decode_weights, encode_weights, DenseNet};
use crate::sbev::{LabelMap, SBev};
use crate::stereo::DepthMap;
use crate::topomap::{NodeDataset, NodeSample, TopoMap, TopoNode};

pub const FORMAT_VERSION: u32 = 1;
/// Depth PGMs store millimetres.
pub const DEPTH_UNIT_M: f64 = 0.001;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// Decoded binary PGM.
#[derive(Debug, Clone, PartialEq)]
pub enum Pgm {
    Gray8(Grid<u8>),
    Gray16(Grid<u16>),
}

pub fn encode_pgm8(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm16(img: &Grid<u16>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for v in img.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { what: self.what.to_string(), offset: self.pos, message: message.into() }
    }

    fn skip_space(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse { what: self.what.to_string(), offset: start, message: "number out of range".into() })
    }
}

pub fn decode_pgm(bytes: &[u8], what: &str) -> Result<Pgm> {
    let mut h = Header { bytes, pos: 0, what };
    if !bytes.starts_with(b"P5") {
        return Err(h.err("expected binary PGM magic \"P5\""));
    }
    h.pos = 2;
    h.skip_space()?;
    let width = h.number()?;
    h.skip_space()?;
    let height = h.number()?;
    h.skip_space()?;
    let maxval_at = h.pos;
    let maxval = h.number()?;
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: maxval_at,
            message: format!("unsupported maxval {maxval}; expected 255 or 65535"),
        });
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected a single whitespace byte after maxval"));
    }
    h.pos += 1;
    let bpp = if maxval == 255 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bpp))
        .ok_or_else(|| h.err("image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: bytes.len(),
            message: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: h.pos + need,
            message: format!("{} trailing bytes after payload", payload.len() - need),
        });
    }
    if bpp == 1 {
        Ok(Pgm::Gray8(Grid::from_vec(width, height, payload.to_vec())?))
    } else {
        let data = payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Ok(Pgm::Gray16(Grid::from_vec(width, height, data)?))
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    decode_pgm(&read_bytes(path)?, &path.display().to_string())
}

pub fn read_pgm8(path: &Path) -> Result<Grid<u8>> {
    match read_pgm(path)? {
        Pgm::Gray8(g) => Ok(g),
        Pgm::Gray16(_) => Err(Error::Format { what: path.display().to_string(), message: "expected an 8-bit PGM".into() }),
    }
}

pub fn read_pgm16(path: &Path) -> Result<Grid<u16>> {
    match read_pgm(path)? {
        Pgm::Gray16(g) => Ok(g),
        Pgm::Gray8(_) => Err(Error::Format { what: path.display().to_string(), message: "expected a 16-bit PGM".into() }),
    }
}

pub fn write_pgm8(path: &Path, img: &Grid<u8>) -> Result<()> {
    write_bytes(path, &encode_pgm8(img))
}

pub fn write_pgm16(path: &Path, img: &Grid<u16>) -> Result<()> {
    write_bytes(path, &encode_pgm16(img))
}

/// Metric depth to integer units of `unit_m`; out-of-range depths become 0.
pub fn quantize_depth(depth: &DepthMap, unit_m: f64) -> Grid<u16> {
    depth.map(|d| {
        let q = (d / unit_m).round();
        if d > 0.0 && q >= 1.0 && q <= u16::MAX as f64 {
            q as u16
        } else {
            0
        }
    })
}

pub fn dequantize_depth(raw: &Grid<u16>, unit_m: f64) -> DepthMap {
    raw.map(|v| v as f64 * unit_m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub frame_id: u64,
    pub t: f64,
    pub pose: Pose2,
}

pub fn encode_trajectory(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from("frame_id,t,x,y,theta\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.frame_id, r.t, r.pose.x, r.pose.y, r.pose.theta));
    }
    s
}

pub fn decode_trajectory(text: &str, what: &str) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format { what: what.into(), message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["frame_id", "t", "x", "y", "theta"] {
        return Err(Error::Format {
            what: what.into(),
            message: format!("expected header frame_id,t,x,y,theta, found {}", header.join(",")),
        });
    }
    let mut rows: Vec<TrajectoryRow> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::input(format!("{what}: row {row}: {e}")))?;
        let frame_id: u64 = rec[0]
            .parse()
            .map_err(|e| Error::input(format!("{what}: row {row}: frame_id: {e}")))?;
        let mut v = [0.0f64; 4];
        for k in 0..4 {
            v[k] = rec[k + 1]
                .parse()
                .map_err(|e| Error::input(format!("{what}: row {row}: {e}")))?;
            if !v[k].is_finite() {
                return Err(Error::input(format!("{what}: row {row}: non-finite value")));
            }
        }
        if let Some(prev) = rows.last() {
            if v[0] < prev.t {
                return Err(Error::input(format!("{what}: row {row}: timestamp {} before {}", v[0], prev.t)));
            }
            if frame_id <= prev.frame_id {
                return Err(Error::input(format!("{what}: row {row}: frame_id {frame_id} not increasing")));
            }
        }
        rows.push(TrajectoryRow { frame_id, t: v[0], pose: Pose2 { x: v[1], y: v[2], theta: v[3] } });
    }
    Ok(rows)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    decode_trajectory(&read_text(path)?, &path.display().to_string())
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_bytes(path, encode_trajectory(rows).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SbevSidecar {
    format_version: u32,
    frame_id: u64,
    resolution: f64,
    origin: Pose2,
}

/// Writes `<stem>.pgm` and `<stem>.json`.
pub fn write_sbev(pgm_path: &Path, sbev: &SBev) -> Result<()> {
    write_pgm8(pgm_path, &sbev.grid)?;
    write_json(
        &pgm_path.with_extension("json"),
        &SbevSidecar { format_version: FORMAT_VERSION, frame_id: sbev.frame_id, resolution: sbev.resolution, origin: sbev.origin },
    )
}

pub fn read_sbev(pgm_path: &Path) -> Result<SBev> {
    let grid = read_pgm8(pgm_path)?;
    let side = pgm_path.with_extension("json");
    let meta: SbevSidecar = read_json(&side)?;
    check_version(meta.format_version, &side)?;
    if grid.width() != grid.height() {
        return Err(Error::Format { what: pgm_path.display().to_string(), message: "S-BEV must be square".into() });
    }
    Ok(SBev { grid, resolution: meta.resolution, origin: meta.origin, frame_id: meta.frame_id })
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format {
            what: path.display().to_string(),
            message: format!("format_version {v}, expected {FORMAT_VERSION}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopoMapFile {
    format_version: u32,
    trans_threshold: f64,
    ang_threshold: f64,
    nodes: Vec<TopoNode>,
}

pub fn write_topomap(path: &Path, map: &TopoMap) -> Result<()> {
    write_json(
        path,
        &TopoMapFile {
            format_version: FORMAT_VERSION,
            trans_threshold: map.trans_threshold,
            ang_threshold: map.ang_threshold,
            nodes: map.nodes.clone(),
        },
    )
}

pub fn read_topomap(path: &Path) -> Result<TopoMap> {
    let f: TopoMapFile = read_json(path)?;
    check_version(f.format_version, path)?;
    if f.nodes.iter().enumerate().any(|(i, n)| n.id != i) {
        return Err(Error::Format { what: path.display().to_string(), message: "node ids must run 0..n in order".into() });
    }
    if f.nodes.is_empty() {
        return Err(Error::Format { what: path.display().to_string(), message: "map has no nodes".into() });
    }
    Ok(TopoMap { nodes: f.nodes, trans_threshold: f.trans_threshold, ang_threshold: f.ang_threshold })
}

pub fn encode_node_dataset(ds: &NodeDataset) -> String {
    let mut s = String::from("frame_id,node_id,rel_x,rel_y,rel_theta,sbev_path\n");
    for r in &ds.samples {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.frame_id, r.node_id, r.rel_pose.x, r.rel_pose.y, r.rel_pose.theta, r.sbev_path
        ));
    }
    s
}

pub fn decode_node_dataset(text: &str, what: &str) -> Result<NodeDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format { what: what.into(), message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["frame_id", "node_id", "rel_x", "rel_y", "rel_theta", "sbev_path"] {
        return Err(Error::Format {
            what: what.into(),
            message: format!("expected header frame_id,node_id,rel_x,rel_y,rel_theta,sbev_path, found {}", header.join(",")),
        });
    }
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::input(format!("{what}: row {row}: {e}")))?;
        let bad = |e: &dyn std::fmt::Display| Error::input(format!("{what}: row {row}: {e}"));
        let frame_id: u64 = rec[0].parse().map_err(|e| bad(&e))?;
        let node_id: usize = rec[1].parse().map_err(|e| bad(&e))?;
        let mut v = [0.0f64; 3];
        for k in 0..3 {
            v[k] = rec[k + 2].parse().map_err(|e| bad(&e))?;
            if !v[k].is_finite() {
                return Err(bad(&"non-finite value"));
            }
        }
        samples.push(NodeSample { frame_id, node_id, rel_pose: Pose2 { x: v[0], y: v[1], theta: v[2] }, sbev_path: rec[5].to_string() });
    }
    Ok(NodeDataset { samples })
}

pub fn read_node_dataset(path: &Path) -> Result<NodeDataset> {
    decode_node_dataset(&read_text(path)?, &path.display().to_string())
}

pub fn write_node_dataset(path: &Path, ds: &NodeDataset) -> Result<()> {
    write_bytes(path, encode_node_dataset(ds).as_bytes())
}

pub fn read_weights(path: &Path) -> Result<DenseNet> {
    decode_weights(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_weights(path: &Path, net: &DenseNet) -> Result<()> {
    write_bytes(path, &encode_weights(net))
}

pub fn read_index(path: &Path) -> Result<EmbeddingIndex> {
    EmbeddingIndex::from_bytes(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    write_bytes(path, &index.to_bytes())
}

/// Top-level `manifest.json` stamped into every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub kind: String,
}

pub fn write_manifest(dir: &Path, kind: &str) -> Result<()> {
    write_json(&dir.join("manifest.json"), &ArtifactManifest { format_version: FORMAT_VERSION, kind: kind.into() })
}

/// Checks `dir/manifest.json` exists with the current version and the expected kind.
pub fn check_manifest(dir: &Path, kind: &str) -> Result<()> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::input(format!("{} is missing; is {} a {kind} directory?", path.display(), dir.display())));
    }
    let m: ArtifactManifest = read_json(&path)?;
    check_version(m.format_version, &path)?;
    if m.kind != kind {
        return Err(Error::Format { what: path.display().to_string(), message: format!("expected a {kind} directory, found {}", m.kind) });
    }
    Ok(())
}

pub const BUNDLE_TOPOMAP: &str = "topomap.json";
pub const BUNDLE_AE: &str = "ae.sbnn";
pub const BUNDLE_REG: &str = "regressor.sbnn";
pub const BUNDLE_INDEX: &str = "index.bin";

pub fn save_bundle(dir: &Path, loc: &Localizer) -> Result<()> {
    write_topomap(&dir.join(BUNDLE_TOPOMAP), &loc.map)?;
    write_weights(&dir.join(BUNDLE_AE), loc.ae.net())?;
    write_weights(&dir.join(BUNDLE_REG), loc.reg.net())?;
    write_index(&dir.join(BUNDLE_INDEX), &loc.index)?;
    write_manifest(dir, "bundle")
}

pub fn load_bundle(dir: &Path) -> Result<Localizer> {
    check_manifest(dir, "bundle")?;
    let map = read_topomap(&dir.join(BUNDLE_TOPOMAP))?;
    let ae = AeModel::new(read_weights(&dir.join(BUNDLE_AE))?)?;
    let reg = RegModel::new(read_weights(&dir.join(BUNDLE_REG))?, map.len())?;
    let index = read_index(&dir.join(BUNDLE_INDEX))?;
    Localizer::new(ae, index, reg, map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose2,
    pub depth_ref: PathBuf,
    pub label_ref: PathBuf,
}

/// Frames of a depth + label dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub frames: Vec<FrameRef>,
    pub depth_unit_m: f64,
    pub class_remap: Vec<(u8, u8)>,
    pub intrinsics: Intrinsics,
}

impl DatasetManifest {
    pub fn load_frame(&self, i: usize) -> Result<(DepthMap, LabelMap)> {
        let f = &self.frames[i];
        let depth = dequantize_depth(&read_pgm16(&self.root.join(&f.depth_ref))?, self.depth_unit_m);
        let mut labels = read_pgm8(&self.root.join(&f.label_ref))?;
        if !self.class_remap.is_empty() {
            let mut table: [u8; 256] = std::array::from_fn(|i| i as u8);
            for &(a, b) in &self.class_remap {
                table[a as usize] = b;
            }
            labels.data_mut().iter_mut().for_each(|v| *v = table[*v as usize]);
        }
        if depth.width() != labels.width() || depth.height() != labels.height() {
            return Err(Error::input(format!("frame {}: depth and label images differ in size", f.frame_id)));
        }
        Ok((depth, labels))
    }
}

pub const CAMERA_FILE: &str = "camera.json";
pub const POSES_FILE: &str = "poses.csv";

pub fn depth_name(frame_id: u64) -> PathBuf {
    PathBuf::from(format!("depth/{frame_id:05}.pgm"))
}

pub fn label_name(frame_id: u64) -> PathBuf {
    PathBuf::from(format!("labels/{frame_id:05}.pgm"))
}

fn missing_error(missing: &[PathBuf]) -> Error {
    let shown: Vec<String> = missing.iter().take(10).map(|p| p.display().to_string()).collect();
    Error::input(format!("{} referenced files are missing: {}", missing.len(), shown.join(", ")))
}

fn read_intrinsics(root: &Path) -> Result<Intrinsics> {
    let path = root.join(CAMERA_FILE);
    if !path.exists() {
        return Ok(Intrinsics::default());
    }
    let k: Intrinsics = read_json(&path)?;
    k.validate()?;
    Ok(k)
}

/// Native layout: `poses.csv`, `depth/NNNNN.pgm` (16-bit mm), `labels/NNNNN.pgm`.
pub fn load_native_dataset(root: &Path) -> Result<DatasetManifest> {
    let poses = root.join(POSES_FILE);
    if !poses.exists() {
        return Err(Error::input(format!("{} is missing", poses.display())));
    }
    let rows = read_trajectory(&poses)?;
    let mut frames = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    for r in rows {
        let (d, l) = (depth_name(r.frame_id), label_name(r.frame_id));
        for p in [&d, &l] {
            if !root.join(p).exists() {
                missing.push(root.join(p));
            }
        }
        frames.push(FrameRef { frame_id: r.frame_id, timestamp: r.t, pose: r.pose, depth_ref: d, label_ref: l });
    }
    if !missing.is_empty() {
        return Err(missing_error(&missing));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), frames, depth_unit_m: DEPTH_UNIT_M, class_remap: Vec::new(), intrinsics: read_intrinsics(root)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VkittiOptions {
    pub depth_unit_m: f64,
    pub class_remap: Vec<(u8, u8)>,
}

impl Default for VkittiOptions {
    fn default() -> Self {
        Self { depth_unit_m: DEPTH_UNIT_M, class_remap: Vec::new() }
    }
}

/// Frame number from the trailing digits of a file stem, e.g. `classgt_00042`.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().ok()
}

fn list_frames(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "pgm") {
            if let Some(n) = frame_number(&p) {
                out.insert(n, p);
            }
        }
    }
    Ok(out)
}

fn first_existing(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

/// Directory with a depth folder (`depth/`), a class-ID folder (`labels/`,
/// `classSegmentation/` or `classgt/`), whose files end in the frame number,
/// and `poses.csv`. Frames missing from any source are dropped with a warning.
pub fn import_vkitti_like(root: &Path, opts: &VkittiOptions) -> Result<DatasetManifest> {
    let poses = root.join(POSES_FILE);
    let mut missing = Vec::new();
    if !poses.exists() {
        missing.push(poses.clone());
    }
    let depth_dir = first_existing(root, &["depth"]);
    let label_dir = first_existing(root, &["labels", "classSegmentation", "classgt"]);
    if depth_dir.is_none() {
        missing.push(root.join("depth"));
    }
    if label_dir.is_none() {
        missing.push(root.join("labels"));
    }
    if !missing.is_empty() {
        return Err(missing_error(&missing));
    }
    let depths = list_frames(&depth_dir.unwrap())?;
    let labels = list_frames(&label_dir.unwrap())?;
    let rows = read_trajectory(&poses)?;
    let counts = [depths.len(), labels.len(), rows.len()];
    let expect = *counts.iter().min().unwrap();
    if counts.iter().any(|&c| c != expect) {
        log::warn!(
            "{}: {} depth, {} label and {} pose entries; keeping frames present in all three",
            root.display(),
            counts[0],
            counts[1],
            counts[2]
        );
    }
    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_path_buf();
    let mut frames = Vec::new();
    for r in &rows {
        if let (Some(d), Some(l)) = (depths.get(&r.frame_id), labels.get(&r.frame_id)) {
            frames.push(FrameRef { frame_id: r.frame_id, timestamp: r.t, pose: r.pose, depth_ref: rel(d), label_ref: rel(l) });
        }
    }
    if frames.len() < expect {
        let mut absent = Vec::new();
        for r in &rows {
            if !depths.contains_key(&r.frame_id) {
                absent.push(root.join(depth_name(r.frame_id)));
            }
            if !labels.contains_key(&r.frame_id) {
                absent.push(root.join(label_name(r.frame_id)));
            }
        }
        return Err(missing_error(&absent));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        frames,
        depth_unit_m: opts.depth_unit_m,
        class_remap: opts.class_remap.clone(),
        intrinsics: read_intrinsics(root)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn pgm_examples() {
        let one = Grid::filled(1, 1, 0u8);
        let bytes = encode_pgm8(&one);
        assert_eq!(bytes, b"P5\n1 1\n255\n\0");
        // 2 + 1 + 3 + 1 + 3 + 1 header bytes plus one pixel
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode_pgm(&bytes, "x").unwrap(), Pgm::Gray8(one));
        let err = decode_pgm(b"P5\n1 1\n300\n\0", "x").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 7, .. }), "{err}");
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0", "x"), Err(Error::Parse { offset: 12, .. })));
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0", "x"), Err(Error::Parse { offset: 0, .. })));
        // comment in the header
        assert_eq!(decode_pgm(b"P5\n# c\n1 1\n255\n\x07", "x").unwrap(), Pgm::Gray8(Grid::filled(1, 1, 7)));
    }

    #[test]
    fn pgm_round_trips() {
        let mut r = rng::seeded(1);
        let g8 = Grid::from_fn(352, 352, |_, _| r.random::<u8>());
        assert_eq!(decode_pgm(&encode_pgm8(&g8), "x").unwrap(), Pgm::Gray8(g8));
        let g16 = Grid::from_fn(37, 11, |_, _| r.random::<u16>());
        let bytes = encode_pgm16(&g16);
        assert_eq!(decode_pgm(&bytes, "x").unwrap(), Pgm::Gray16(g16.clone()));
        let first = g16.get(0, 0).to_be_bytes();
        let header = b"P5\n37 11\n65535\n".len();
        assert_eq!(&bytes[header..header + 2], &first);
    }

    #[test]
    fn depth_quantization() {
        let d: DepthMap = Grid::from_vec(4, 1, vec![0.0, 1.2345, 70.0, -1.0]).unwrap();
        let q = quantize_depth(&d, DEPTH_UNIT_M);
        assert_eq!(q.data(), &[0, 1235, 0, 0]);
        assert!((dequantize_depth(&q, DEPTH_UNIT_M).get(1, 0) - 1.235).abs() < 1e-12);
    }

    #[test]
    fn trajectory_examples() {
        assert!(decode_trajectory("frame_id,t,x,y,theta\n", "t").unwrap().is_empty());
        let rows = decode_trajectory("frame_id,t,x,y,theta\n0,0.5,1,2,0.25\n3,1.5,-1,-2,-0.25\n", "t").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], TrajectoryRow { frame_id: 3, t: 1.5, pose: Pose2 { x: -1.0, y: -2.0, theta: -0.25 } });
        let err = decode_trajectory("frame_id,t,x,y,theta\n0,2,0,0,0\n1,1,0,0,0\n", "t").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(decode_trajectory("frame_id,t,x,y,theta\n0,0,NaN,0,0\n", "t").is_err());
        assert!(matches!(decode_trajectory("a,b\n", "t"), Err(Error::Format { .. })));
    }

    #[test]
    fn trajectory_round_trip() {
        let mut r = rng::seeded(2);
        let rows: Vec<TrajectoryRow> = (0..1000)
            .map(|i| TrajectoryRow {
                frame_id: i,
                t: i as f64 * 0.1,
                pose: Pose2::new(r.random_range(-1e4..1e4), r.random_range(-1e4..1e4), r.random_range(-3.0..3.0)),
            })
            .collect();
        let back = decode_trajectory(&encode_trajectory(&rows), "t").unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn sidecars_and_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SBev::empty(&crate::sbev::GridSpec::default());
        s.grid.set(3, 4, 40);
        s.frame_id = 12;
        s.origin = Pose2::new(1.0, 2.0, 0.5);
        let p = dir.path().join("sbev/00012.pgm");
        write_sbev(&p, &s).unwrap();
        assert_eq!(read_sbev(&p).unwrap(), s);

        let map = crate::topomap::build_topo_map(&(0..100).map(|i| Pose2::new(i as f64, 0.0, 0.0)).collect::<Vec<_>>(), 20.0, 0.5).unwrap();
        write_topomap(&dir.path().join("map.json"), &map).unwrap();
        assert_eq!(read_topomap(&dir.path().join("map.json")).unwrap(), map);

        let ds = NodeDataset {
            samples: vec![NodeSample { frame_id: 5, node_id: 1, rel_pose: Pose2::new(0.1, -0.2, 0.03), sbev_path: "sbev/00005.pgm".into() }],
        };
        write_node_dataset(&dir.path().join("ds.csv"), &ds).unwrap();
        assert_eq!(read_node_dataset(&dir.path().join("ds.csv")).unwrap(), ds);

        write_manifest(dir.path(), "map").unwrap();
        assert!(check_manifest(dir.path(), "map").is_ok());
        assert!(matches!(check_manifest(dir.path(), "bundle"), Err(Error::Format { .. })));
        write_bytes(&dir.path().join("manifest.json"), br#"{"format_version": 2, "kind": "map"}"#).unwrap();
        assert!(matches!(check_manifest(dir.path(), "map"), Err(Error::Format { .. })));
    }

    fn write_frames(root: &Path, ids: &[u64], depth: bool, labels: bool) {
        for &i in ids {
            if depth {
                write_pgm16(&root.join(depth_name(i)), &Grid::filled(4, 3, 1000)).unwrap();
            }
            if labels {
                write_pgm8(&root.join(label_name(i)), &Grid::filled(4, 3, 7)).unwrap();
            }
        }
    }

    fn write_poses(root: &Path, ids: &[u64]) {
        let rows: Vec<TrajectoryRow> = ids.iter().map(|&i| TrajectoryRow { frame_id: i, t: i as f64, pose: Pose2::new(i as f64, 0.0, 0.0) }).collect();
        write_trajectory(&root.join(POSES_FILE), &rows).unwrap();
    }

    #[test]
    fn adapter_matches_native_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &[0, 1, 2], true, true);
        write_poses(dir.path(), &[0, 1, 2]);
        let native = load_native_dataset(dir.path()).unwrap();
        let adapted = import_vkitti_like(dir.path(), &VkittiOptions::default()).unwrap();
        assert_eq!(native, adapted);
        let (d, l) = native.load_frame(1).unwrap();
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(l.get(0, 0), 7);
    }

    #[test]
    fn adapter_errors_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), &[0, 1, 2, 3], true, true);
        let err = import_vkitti_like(dir.path(), &VkittiOptions::default()).unwrap_err();
        assert!(err.to_string().contains("poses.csv"), "{err}");

        write_frames(dir.path(), &[4, 5], true, false);
        write_poses(dir.path(), &[0, 1, 2]);
        let m = import_vkitti_like(dir.path(), &VkittiOptions::default()).unwrap();
        assert_eq!(m.frames.len(), 3);

        let remap = VkittiOptions { class_remap: vec![(7, 9)], ..Default::default() };
        let m = import_vkitti_like(dir.path(), &remap).unwrap();
        assert_eq!(m.load_frame(0).unwrap().1.get(0, 0), 9);

        let many = tempfile::tempdir().unwrap();
        write_poses(many.path(), &(0..30).collect::<Vec<_>>());
        let err = load_native_dataset(many.path()).unwrap_err().to_string();
        assert!(err.starts_with("invalid input: 60 referenced files are missing"), "{err}");
        assert_eq!(err.matches(".pgm").count(), 10);
    }
}
