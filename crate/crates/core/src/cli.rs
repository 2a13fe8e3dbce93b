//! The `sbev` command-line tool: one subcommand per pipeline stage, each
//! reading and writing the documented file formats.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Ablation, RunConfig};
use crate::datasets::{
    self, check_manifest, depth_name, label_name, load_bundle, load_native_dataset, read_node_dataset, read_pgm8,
    read_sbev, read_topomap, read_trajectory, read_weights, save_bundle, write_bytes, write_index, write_json,
    write_manifest, write_node_dataset, write_pgm16, write_pgm8, write_sbev, write_topomap, write_trajectory,
    write_weights, DatasetManifest, TrajectoryRow, BUNDLE_AE, BUNDLE_INDEX, CAMERA_FILE, DEPTH_UNIT_M, POSES_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_map, evaluate, index_stage, reports_csv, reports_table, run_experiment, split_for_training, train_ae_stage,
    train_reg_stage, EvalItem, SbevBuilder, TrainData,
};
use crate::fusion::{fuse_trajectory, odometry_from_stream, read_stream_csv, write_fused_csv, KfState, Measurement};
use crate::geometry::{relative_pose, Pose2};
use crate::localizer::{AeModel, Localizer};
use crate::nnet::TrainReport;
use crate::rng;
use crate::stereo::{disparity_block_match, disparity_to_depth, smooth_disparity};
use crate::synthworld::{generate_world, render_frame, render_stereo_pair};
use crate::topomap::NodeDataset;

#[derive(Debug, Parser)]
#[command(name = "sbev", version, about = "Semantic bird's-eye-view vehicle re-localization")]
pub struct Cli {
    /// JSON run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker cap. Every stage currently runs on one thread.
    #[arg(long, global = true, env = "SBEV_THREADS")]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetFormat {
    /// `poses.csv`, `depth/NNNNN.pgm`, `labels/NNNNN.pgm`, optional `camera.json`.
    Native,
    /// Depth plus `classSegmentation/` or `classgt/` folders, frame number at the end of each file name.
    Vkitti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Base,
    Avg,
    Aug,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Base => Ablation::Base,
            AblationArg::Avg => Ablation::Avg,
            AblationArg::Aug => Ablation::Aug,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic traversal into a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write left/right grayscale stereo pairs.
        #[arg(long)]
        stereo: bool,
    },
    /// Turn a dataset directory into one S-BEV per frame.
    Build {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "native")]
        format: DatasetFormat,
        /// Compute depth from `left/` and `right/` images instead of reading `depth/`.
        #[arg(long)]
        stereo: bool,
    },
    /// Build the topo map, assign frames to nodes and split train/test.
    Map {
        #[arg(long)]
        sbev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder and the embedding index.
    TrainAe {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        sbev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        ablation: AblationArg,
    },
    /// Train the pose regressor and assemble a localizer bundle.
    TrainReg {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        sbev: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize S-BEV frames; writes one CSV row per frame.
    Localize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        sbev: PathBuf,
        /// Node dataset CSV selecting the frames (default: all frames).
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kalman-fuse localizer output with odometry.
    Fuse {
        /// `timestamp,x,y,theta` stream, or `localize` output (needs --trajectory).
        #[arg(long)]
        measurements: PathBuf,
        /// `timestamp,x,y,theta,vx,vy,omega` stream.
        #[arg(long)]
        odometry: PathBuf,
        /// `frame_id,t,x,y,theta` file giving timestamps for `localize` rows.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an evaluation report, either for a trained bundle on a set of
    /// frames or for a complete synthetic experiment.
    Eval {
        #[arg(long, conflicts_with = "experiment", requires_all = ["sbev", "frames"])]
        bundle: Option<PathBuf>,
        #[arg(long)]
        sbev: Option<PathBuf>,
        /// Node dataset CSV with ground truth, e.g. a map's `test.csv`.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Build, train and evaluate every configured ablation and condition.
        #[arg(long)]
        experiment: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { out, stereo } => cmd_synth(&cfg, out, *stereo, cli.force),
        Command::Build { dataset, out, format, stereo } => cmd_build(&cfg, dataset, out, *format, *stereo, cli.force),
        Command::Map { sbev, out } => cmd_map(&cfg, sbev, out, cli.force),
        Command::TrainAe { map, sbev, out, ablation } => cmd_train_ae(&cfg, map, sbev, out, (*ablation).into(), cli.force),
        Command::TrainReg { map, sbev, ae, out } => cmd_train_reg(&cfg, map, sbev, ae, out, cli.force),
        Command::Localize { bundle, sbev, frames, out } => cmd_localize(&cfg, bundle, sbev, frames.as_deref(), out, cli.force),
        Command::Fuse { measurements, odometry, trajectory, out } => {
            cmd_fuse(&cfg, measurements, odometry, trajectory.as_deref(), out, cli.force)
        }
        Command::Eval { bundle, sbev, frames, experiment, out } => {
            if *experiment {
                cmd_eval_experiment(&cfg, out.as_deref(), cli.force)
            } else {
                match (bundle, sbev, frames) {
                    (Some(b), Some(s), Some(f)) => cmd_eval(&cfg, b, s, f, out.as_deref(), cli.force),
                    _ => Err(Error::input("eval needs either --experiment or --bundle, --sbev and --frames")),
                }
            }
        }
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::input(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::input(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare_out_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::input(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// Resolved configuration for a single-file output, e.g. `loc.csv` -> `loc.config.json`.
fn config_path_for(file: &Path) -> PathBuf {
    file.with_extension("config.json")
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_bytes(path, cfg.to_json().as_bytes())
}

fn finish_dir(dir: &Path, cfg: &RunConfig, kind: &str) -> Result<()> {
    write_config(&dir.join("config.json"), cfg)?;
    write_manifest(dir, kind)
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    write_bytes(path, s.as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

const SBEV_FRAMES: &str = "frames.csv";

pub fn cmd_synth(cfg: &RunConfig, out: &Path, stereo: bool, force: bool) -> Result<()> {
    let world = generate_world(rng::derive(cfg.seed, crate::eval::seeds::WORLD), &cfg.world)?;
    prepare_out_dir(out, force)?;
    let k = &cfg.camera;
    let mut rows = Vec::with_capacity(world.route.len());
    for (i, pose) in world.route.iter().enumerate() {
        let id = i as u64;
        let (depth, labels) = render_frame(&world, pose, k);
        write_pgm16(&out.join(depth_name(id)), &datasets::quantize_depth(&depth, DEPTH_UNIT_M))?;
        write_pgm8(&out.join(label_name(id)), &labels)?;
        if stereo {
            let (left, right, _) = render_stereo_pair(&world, pose, k);
            write_pgm8(&out.join(format!("left/{id:05}.pgm")), &left)?;
            write_pgm8(&out.join(format!("right/{id:05}.pgm")), &right)?;
        }
        rows.push(TrajectoryRow { frame_id: id, t: world.timestamp(i), pose: *pose });
    }
    write_trajectory(&out.join(POSES_FILE), &rows)?;
    write_text(&out.join("odometry.csv"), &odometry_csv(&rows))?;
    write_json(&out.join(CAMERA_FILE), k)?;
    write_json(&out.join("world.json"), &world)?;
    log::info!("synth: {} frames into {}", rows.len(), out.display());
    finish_dir(out, cfg, "dataset")
}

/// Ego-frame velocities between consecutive trajectory rows; the last row repeats the previous one.
pub fn odometry_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from("timestamp,x,y,theta,vx,vy,omega\n");
    let mut last = (0.0, 0.0, 0.0);
    for (i, r) in rows.iter().enumerate() {
        if let Some(next) = rows.get(i + 1) {
            let dt = next.t - r.t;
            if dt > 0.0 {
                let rel = relative_pose(&r.pose, &next.pose);
                last = (rel.x / dt, rel.y / dt, rel.theta / dt);
            }
        }
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.t, r.pose.x, r.pose.y, r.pose.theta, last.0, last.1, last.2));
    }
    s
}

fn load_dataset(cfg: &RunConfig, root: &Path, format: DatasetFormat) -> Result<DatasetManifest> {
    match format {
        DatasetFormat::Native => load_native_dataset(root),
        DatasetFormat::Vkitti => {
            let mut m = datasets::import_vkitti_like(root, &cfg.vkitti)?;
            if !root.join(CAMERA_FILE).exists() {
                m.intrinsics = cfg.camera;
            }
            Ok(m)
        }
    }
}

pub fn cmd_build(cfg: &RunConfig, dataset: &Path, out: &Path, format: DatasetFormat, stereo: bool, force: bool) -> Result<()> {
    let ds = load_dataset(cfg, dataset, format)?;
    if ds.frames.is_empty() {
        return Err(Error::input(format!("{} holds no frames", dataset.display())));
    }
    prepare_out_dir(out, force)?;
    let mut builder = SbevBuilder::new(&cfg.sbev, &ds.intrinsics)?;
    let mut rows = Vec::with_capacity(ds.frames.len());
    for (i, f) in ds.frames.iter().enumerate() {
        let (mut depth, labels) = ds.load_frame(i)?;
        if stereo {
            let left = read_pgm8(&ds.root.join(format!("left/{:05}.pgm", f.frame_id)))?;
            let right = read_pgm8(&ds.root.join(format!("right/{:05}.pgm", f.frame_id)))?;
            let disp = disparity_block_match(&left, &right, &cfg.stereo.block)?;
            let disp = smooth_disparity(&disp, &left, &cfg.stereo.smooth)?;
            depth = disparity_to_depth(&disp, &ds.intrinsics, &cfg.stereo.depth);
        }
        let sbev = builder.push(f.frame_id, &f.pose, &depth, &labels)?;
        write_sbev(&out.join(format!("sbev/{:05}.pgm", f.frame_id)), &sbev)?;
        rows.push(TrajectoryRow { frame_id: f.frame_id, t: f.timestamp, pose: f.pose });
    }
    write_trajectory(&out.join(SBEV_FRAMES), &rows)?;
    log::info!("build: {} S-BEVs into {}", rows.len(), out.display());
    finish_dir(out, cfg, "sbev")
}

pub fn cmd_map(cfg: &RunConfig, sbev: &Path, out: &Path, force: bool) -> Result<()> {
    check_manifest(sbev, "sbev")?;
    let rows = read_trajectory(&sbev.join(SBEV_FRAMES))?;
    let route: Vec<Pose2> = rows.iter().map(|r| r.pose).collect();
    let map = build_map(&route, cfg)?;
    let frames: Vec<(u64, Pose2)> = rows.iter().map(|r| (r.frame_id, r.pose)).collect();
    let all = NodeDataset::assign(&map, &frames);
    let (train, test) = split_for_training(&all, cfg)?;
    prepare_out_dir(out, force)?;
    write_topomap(&out.join("topomap.json"), &map)?;
    write_node_dataset(&out.join("nodes.csv"), &all)?;
    write_node_dataset(&out.join("train.csv"), &train)?;
    write_node_dataset(&out.join("test.csv"), &test)?;
    log::info!("map: {} nodes, {} train / {} test frames", map.len(), train.len(), test.len());
    finish_dir(out, cfg, "map")
}

fn load_train_data(map_dir: &Path, sbev_dir: &Path) -> Result<TrainData> {
    check_manifest(map_dir, "map")?;
    check_manifest(sbev_dir, "sbev")?;
    let train = read_node_dataset(&map_dir.join("train.csv"))?;
    let mut data = TrainData::default();
    for s in &train.samples {
        data.push(s.node_id, s.rel_pose, read_sbev(&sbev_dir.join(&s.sbev_path))?);
    }
    Ok(data)
}

pub fn cmd_train_ae(cfg: &RunConfig, map: &Path, sbev: &Path, out: &Path, ablation: Ablation, force: bool) -> Result<()> {
    let data = load_train_data(map, sbev)?;
    prepare_out_dir(out, force)?;
    let (ae, report) = train_ae_stage(&data, cfg, ablation)?;
    let index = index_stage(&ae, &data, cfg)?;
    write_weights(&out.join(BUNDLE_AE), ae.net())?;
    write_index(&out.join(BUNDLE_INDEX), &index)?;
    write_loss_csv(&out.join("loss.csv"), &report)?;
    finish_dir(out, cfg, "ae")
}

pub fn cmd_train_reg(cfg: &RunConfig, map: &Path, sbev: &Path, ae_dir: &Path, out: &Path, force: bool) -> Result<()> {
    let data = load_train_data(map, sbev)?;
    check_manifest(ae_dir, "ae")?;
    let ae = AeModel::new(read_weights(&ae_dir.join(BUNDLE_AE))?)?;
    let index = datasets::read_index(&ae_dir.join(BUNDLE_INDEX))?;
    let topo = read_topomap(&map.join("topomap.json"))?;
    prepare_out_dir(out, force)?;
    let (reg, report) = train_reg_stage(&ae, &data, topo.len(), cfg)?;
    let loc = Localizer::new(ae, index, reg, topo)?;
    save_bundle(out, &loc)?;
    write_loss_csv(&out.join("loss.csv"), &report)?;
    write_config(&out.join("config.json"), cfg)
}

/// Frame ids and S-BEV paths to process: a node dataset if given, otherwise every built frame.
fn frame_list(sbev: &Path, frames: Option<&Path>) -> Result<Vec<(u64, PathBuf)>> {
    check_manifest(sbev, "sbev")?;
    Ok(match frames {
        Some(f) => read_node_dataset(f)?.samples.into_iter().map(|s| (s.frame_id, sbev.join(s.sbev_path))).collect(),
        None => read_trajectory(&sbev.join(SBEV_FRAMES))?
            .into_iter()
            .map(|r| (r.frame_id, sbev.join(format!("sbev/{:05}.pgm", r.frame_id))))
            .collect(),
    })
}

pub fn cmd_localize(cfg: &RunConfig, bundle: &Path, sbev: &Path, frames: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let loc = load_bundle(bundle)?;
    let list = frame_list(sbev, frames)?;
    prepare_out_file(out, force)?;
    let mut s = String::from("frame_id,node_id,rel_x,rel_y,rel_theta,glob_x,glob_y,glob_theta\n");
    for (id, path) in list {
        let r = loc.localize(&read_sbev(&path)?)?;
        let (a, g) = (r.rel_pose, r.global_pose);
        s.push_str(&format!("{id},{},{},{},{},{},{},{}\n", r.node_id, a.x, a.y, a.theta, g.x, g.y, g.theta));
    }
    write_text(out, &s)?;
    write_config(&config_path_for(out), cfg)
}

/// Localizer output rows: (frame_id, global pose).
fn read_localize_csv(path: &Path) -> Result<Vec<(u64, Pose2)>> {
    let what = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::input(format!("{what}: {e}")))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format { what: what.clone(), message: format!("row {}: {e}", i + 1) })?;
        let field = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format { what: what.clone(), message: format!("row {}: bad column {k}", i + 1) })
        };
        out.push((field(0)? as u64, Pose2::new(field(5)?, field(6)?, field(7)?)));
    }
    Ok(out)
}

fn open_reader(path: &Path) -> Result<std::io::BufReader<fs::File>> {
    Ok(std::io::BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn cmd_fuse(cfg: &RunConfig, measurements: &Path, odometry: &Path, trajectory: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let odo_rows = read_stream_csv(open_reader(odometry)?, &odometry.display().to_string())?;
    if odo_rows.len() < 2 {
        return Err(Error::input(format!("{} needs at least two rows", odometry.display())));
    }
    let head = fs::read_to_string(measurements).map_err(|e| Error::io(measurements, e))?;
    let meas: Vec<Measurement> = if head.starts_with("frame_id,") {
        let traj = trajectory.ok_or_else(|| Error::input("localizer output needs --trajectory to supply timestamps"))?;
        let times: std::collections::BTreeMap<u64, f64> = read_trajectory(traj)?.into_iter().map(|r| (r.frame_id, r.t)).collect();
        let mut m = Vec::new();
        for (id, pose) in read_localize_csv(measurements)? {
            let t = *times
                .get(&id)
                .ok_or_else(|| Error::input(format!("frame {id} is missing from {}", traj.display())))?;
            m.push(Measurement { t, pose });
        }
        m.sort_by(|a, b| a.t.total_cmp(&b.t));
        m
    } else {
        read_stream_csv(head.as_bytes(), &measurements.display().to_string())?
            .into_iter()
            .map(|r| Measurement { t: r.t, pose: r.pose })
            .collect()
    };
    let odom = odometry_from_stream(&odo_rows)?;
    let init = KfState::new(odo_rows[0].pose, cfg.kf.init_sigma());
    let fused = fuse_trajectory(&init, odo_rows[0].t, &odom, &meas, &cfg.kf.q(), &cfg.kf.r())?;
    prepare_out_file(out, force)?;
    let mut buf = Vec::new();
    write_fused_csv(&mut buf, &fused).map_err(|e| Error::io(out, e))?;
    write_bytes(out, &buf)?;
    write_config(&config_path_for(out), cfg)
}

fn emit_report(rows: &[crate::eval::EvalReport], out: Option<&Path>, cfg: &RunConfig, force: bool) -> Result<()> {
    if let Some(p) = out {
        prepare_out_file(p, force)?;
        write_text(p, &reports_csv(rows))?;
        write_config(&config_path_for(p), cfg)?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(reports_table(rows).as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_eval(cfg: &RunConfig, bundle: &Path, sbev: &Path, frames: &Path, out: Option<&Path>, force: bool) -> Result<()> {
    let loc = load_bundle(bundle)?;
    check_manifest(sbev, "sbev")?;
    let ds = read_node_dataset(frames)?;
    ds.check_against(&loc.map)?;
    let mut items = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let grid = read_sbev(&sbev.join(&s.sbev_path))?;
        items.push(EvalItem { node_id: s.node_id, rel_pose: s.rel_pose, pooled: loc.ae.pool(&grid)? });
    }
    let name = frames.file_stem().and_then(|s| s.to_str()).unwrap_or("frames");
    let rows = evaluate(&loc, name, &items)?;
    emit_report(&rows, out, cfg, force)
}

pub fn cmd_eval_experiment(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<()> {
    if let Some(p) = out {
        prepare_out_file(p, force)?;
    }
    let rows = run_experiment(cfg)?;
    emit_report(&rows, out, cfg, true)
}
