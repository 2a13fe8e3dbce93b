//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use sbev_core::config::{Ablation, RunConfig};
use sbev_core::eval::{
    build_scene, clean_items, evaluate, index_stage, lane_items, train_ae_stage, train_pipeline, weather_items,
    EvalItem, EvalReport, Scene,
};
use sbev_core::fusion::{kf_predict, kf_update, min_eigenvalue, KfConfig, KfState, OdomSample};
use sbev_core::geometry::{global_from_relative, relative_pose, wrap_angle, LabeledPoint, Pose2, Pose3};
use sbev_core::localizer::{regressor_input, AeConfig, AeModel, EmbeddingIndex, RegConfig, RegModel, AE_INPUT_DIM};
use sbev_core::nnet::{backward, forward, mse_loss, Activation, DenseNet, LayerSpec, Mode};
use sbev_core::rng;
use sbev_core::sbev::{rasterize_bev, GridSpec};
use sbev_core::synthworld::WeatherSpec;
use sbev_core::topomap::{TopoMap, TopoNode};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn random_pose2(r: &mut impl Rng) -> Pose2 {
    Pose2::new(r.random_range(-100.0..100.0), r.random_range(-100.0..100.0), r.random_range(-3.14..3.14))
}

fn random_pose3(r: &mut impl Rng) -> Pose3 {
    let t = Vector3::new(r.random_range(-100.0..100.0), r.random_range(-100.0..100.0), r.random_range(-10.0..10.0));
    let q = UnitQuaternion::from_euler_angles(r.random_range(-3.0..3.0), r.random_range(-1.5..1.5), r.random_range(-3.0..3.0));
    Pose3::new(t, q)
}

fn pose2_err(a: &Pose2, b: &Pose2) -> f64 {
    (a.x - b.x).abs().max((a.y - b.y).abs()).max(wrap_angle(a.theta - b.theta).abs())
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(101);
    let mut round = 0.0f64;
    let mut matrix = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (random_pose2(&mut r), random_pose2(&mut r));
        round = round
            .max(pose2_err(&a.compose(&a.inverse()), &Pose2::IDENTITY))
            .max(pose2_err(&a.inverse().inverse(), &a))
            .max(pose2_err(&global_from_relative(&a, &relative_pose(&a, &b)), &b))
            .max(pose2_err(&a.compose(&b).inverse(), &b.inverse().compose(&a.inverse())));
        matrix = matrix
            .max((a.compose(&b).to_matrix() - a.to_matrix() * b.to_matrix()).amax())
            .max((a.inverse().to_matrix() - a.to_matrix().try_inverse().unwrap()).amax());

        let (p, q) = (random_pose3(&mut r), random_pose3(&mut r));
        let id = p.compose(&p.inverse());
        round = round.max(id.translation.amax()).max(id.rotation.angle());
        let back = p.inverse().compose(&p.compose(&q));
        round = round.max((back.translation - q.translation).amax()).max(back.rotation.angle_to(&q.rotation));
        matrix = matrix
            .max((p.compose(&q).to_matrix() - p.to_matrix() * q.to_matrix()).amax())
            .max((p.inverse().to_matrix() - p.to_matrix().try_inverse().unwrap()).amax());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        round < 1e-12 && matrix < 1e-12 && secs < 1.0,
        format!("max round-trip error {round:.2e}, matrix oracle {matrix:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

/// Which parameter of which layer.
#[derive(Clone, Copy)]
struct Param {
    layer: usize,
    bias: bool,
    row: usize,
    col: usize,
}

fn get_param(net: &DenseNet, p: Param) -> f64 {
    let l = &net.layers()[p.layer];
    if p.bias {
        l.bias[p.row]
    } else {
        l.weights[(p.row, p.col)]
    }
}

fn set_param(net: &mut DenseNet, p: Param, v: f64) {
    let l = &mut net.layers_mut()[p.layer];
    if p.bias {
        l.bias[p.row] = v;
    } else {
        l.weights[(p.row, p.col)] = v;
    }
}

fn random_param(net: &DenseNet, r: &mut impl Rng) -> Param {
    let layer = r.random_range(0..net.layers().len());
    let l = &net.layers()[layer];
    Param { layer, bias: r.random_bool(0.2), row: r.random_range(0..l.out_dim()), col: r.random_range(0..l.in_dim()) }
}

/// Scalar objective: either a fixed linear functional of the output or MSE to a target.
enum Objective {
    Linear(DMatrix<f64>),
    Mse(DMatrix<f64>),
}

impl Objective {
    fn value_and_grad(&self, out: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        match self {
            Objective::Linear(c) => (out.component_mul(c).sum(), c.clone()),
            Objective::Mse(t) => {
                let mut loss = 0.0;
                let mut g = DMatrix::zeros(out.nrows(), out.ncols());
                for j in 0..out.ncols() {
                    let (l, gj) = mse_loss(out.column(j).as_slice(), t.column(j).as_slice()).unwrap();
                    loss += l;
                    g.column_mut(j).copy_from_slice(&gj);
                }
                (loss, g)
            }
        }
    }
}

/// Signs of every ReLU pre-activation, used to spot finite differences
/// that straddle a kink.
fn relu_signs(net: &DenseNet, x: &DMatrix<f64>, mode: Mode, mask_seed: u64) -> Vec<bool> {
    let acts = forward(net, x, mode, &mut rng::seeded(mask_seed)).unwrap();
    net.layers()
        .iter()
        .zip(acts.pre_activations())
        .filter(|(l, _)| l.activation == Activation::Relu)
        .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Checks `per_instance` sampled parameters of `net` against central
/// differences. Returns the worst relative error and the number checked.
fn grad_check(
    net: &mut DenseNet,
    x: &DMatrix<f64>,
    obj: &Objective,
    mode: Mode,
    mask_seed: u64,
    per_instance: usize,
    r: &mut impl Rng,
) -> (f64, usize) {
    const H: f64 = 1e-5;
    let acts = forward(net, x, mode, &mut rng::seeded(mask_seed)).unwrap();
    let (_, og) = obj.value_and_grad(&acts.output);
    let grads = backward(net, &acts, &og).unwrap();
    let base_signs = relu_signs(net, x, mode, mask_seed);
    let loss_at = |net: &DenseNet| obj.value_and_grad(&forward(net, x, mode, &mut rng::seeded(mask_seed)).unwrap().output).0;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < per_instance && attempts < 50 * per_instance {
        attempts += 1;
        let p = random_param(net, r);
        let orig = get_param(net, p);
        set_param(net, p, orig + H);
        let (lp, sp) = (loss_at(net), relu_signs(net, x, mode, mask_seed));
        set_param(net, p, orig - H);
        let (lm, sm) = (loss_at(net), relu_signs(net, x, mode, mask_seed));
        set_param(net, p, orig);
        if sp != base_signs || sm != base_signs {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let analytic = if p.bias { grads.biases[p.layer][p.row] } else { grads.weights[p.layer][(p.row, p.col)] };
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-12 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(202);
    let mut lines = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, worst: f64, instances: usize, checked: usize, lines: &mut Vec<String>| {
        let ok = worst < 1e-4 && instances >= 20 && checked >= 20 * 5;
        pass &= ok;
        lines.push(format!("{name} {worst:.1e}/{instances}x{}", checked / instances.max(1)));
    };

    let kinds: [(&str, Activation, f64); 4] = [
        ("linear", Activation::Linear, 0.0),
        ("relu", Activation::Relu, 0.0),
        ("sigmoid", Activation::Sigmoid, 0.0),
        ("dropout", Activation::Relu, 0.3),
    ];
    for (name, act, dropout) in kinds {
        let (mut worst, mut checked) = (0.0f64, 0);
        for i in 0..20u64 {
            let (din, dout) = (r.random_range(2..9), r.random_range(2..9));
            let mut net = DenseNet::init(&[LayerSpec { in_dim: din, out_dim: dout, activation: act, dropout }], 900 + i).unwrap();
            let x = DMatrix::from_fn(din, 3, |_, _| r.random_range(-1.0..1.0));
            let obj = Objective::Linear(DMatrix::from_fn(dout, 3, |_, _| r.random_range(-1.0..1.0)));
            let (w, c) = grad_check(&mut net, &x, &obj, Mode::Train, 5000 + i, 8, &mut r);
            worst = worst.max(w);
            checked += c;
        }
        record(name, worst, 20, checked, &mut lines);
    }

    let (mut worst, mut checked) = (0.0f64, 0);
    for i in 0..20u64 {
        let ae = AeModel::init(&AeConfig { train: sbev_core::nnet::TrainConfig { seed: 300 + i, ..Default::default() }, ..Default::default() }, AE_INPUT_DIM).unwrap();
        let mut net = ae.net().clone();
        let x = DMatrix::from_fn(AE_INPUT_DIM, 1, |_, _| if r.random_bool(0.3) { r.random_range(0.0..0.5) } else { 0.0 });
        let obj = Objective::Mse(DMatrix::from_fn(AE_INPUT_DIM, 1, |_, _| r.random_range(0.0..0.5)));
        let (w, c) = grad_check(&mut net, &x, &obj, Mode::Eval, 0, 6, &mut r);
        worst = worst.max(w);
        checked += c;
    }
    record("ae", worst, 20, checked, &mut lines);

    let (mut worst, mut checked) = (0.0f64, 0);
    for i in 0..20u64 {
        let n_nodes = 58;
        let cfg = RegConfig { train: sbev_core::nnet::TrainConfig { seed: 400 + i, ..Default::default() }, ..Default::default() };
        let mut net = RegModel::init(&cfg, n_nodes, 128).unwrap().net().clone();
        let latent: Vec<f64> = (0..128).map(|_| r.random_range(-0.5..0.5)).collect();
        let input = regressor_input(r.random_range(0..n_nodes), n_nodes, &latent);
        let x = DMatrix::from_column_slice(input.len(), 1, &input);
        let obj = Objective::Mse(DMatrix::from_fn(3, 1, |_, _| r.random_range(-5.0..5.0)));
        let (w, c) = grad_check(&mut net, &x, &obj, Mode::Train, 7000 + i, 6, &mut r);
        worst = worst.max(w);
        checked += c;
    }
    record("regressor", worst, 20, checked, &mut lines);

    let secs = t.elapsed().as_secs_f64();
    outcome(pass && secs < 30.0, format!("worst rel err/instances x params: {}; {secs:.1}s", lines.join(", ")))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(303);
    let (n, dim) = (10_000, 128);
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        // duplicates under different node ids exercise tie-breaking
        if i > 0 && r.random_bool(0.05) {
            let (_, v) = rows[r.random_range(0..i)].clone();
            rows.push((r.random_range(0..60), v));
        } else {
            rows.push((r.random_range(0..60), (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()));
        }
    }
    let mut index = EmbeddingIndex::new(dim);
    rows.iter().for_each(|(node, v)| index.push(*node, v).unwrap());
    let mut mismatches = 0;
    let queries = 300;
    for q in 0..queries {
        let query: Vec<f64> = if q % 3 == 0 { rows[r.random_range(0..n)].1.clone() } else { (0..dim).map(|_| r.random_range(-1.0..1.0)).collect() };
        let mut best = (usize::MAX, f64::INFINITY);
        for (node, v) in &rows {
            let d2: f64 = v.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 || (d2 == best.1 && *node < best.0) {
                best = (*node, d2);
            }
        }
        let (node, dist) = index.coarse_localize(&query).unwrap();
        if node != best.0 || dist != best.1.sqrt() {
            mismatches += 1;
        }
    }

    // nodes on an integer lattice so that equidistant ties occur
    let nodes: Vec<TopoNode> = (0..n)
        .map(|id| TopoNode { id, pose: Pose2::new(r.random_range(-200..200) as f64, r.random_range(-200..200) as f64, 0.0) })
        .collect();
    let map = TopoMap { nodes, trans_threshold: 20.0, ang_threshold: 0.5 };
    let mut node_mismatches = 0;
    let node_queries = 2000;
    for q in 0..node_queries {
        let p = if q % 2 == 0 {
            Pose2::new(r.random_range(-200..200) as f64 + 0.5, r.random_range(-200..200) as f64, 1.0)
        } else {
            Pose2::new(r.random_range(-210.0..210.0), r.random_range(-210.0..210.0), 0.0)
        };
        let mut best = (usize::MAX, f64::INFINITY);
        for nd in &map.nodes {
            let d = (nd.pose.x - p.x).powi(2) + (nd.pose.y - p.y).powi(2);
            if d < best.1 || (d == best.1 && nd.id < best.0) {
                best = (nd.id, d);
            }
        }
        if map.nearest_node(&p) != best.0 {
            node_mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && node_mismatches == 0 && secs < 10.0,
        format!("{mismatches}/{queries} index and {node_mismatches}/{node_queries} node mismatches over {n} entries, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(404);
    let spec = GridSpec::default();
    let n = spec.size;
    let mut bad_cells = 0usize;
    let mut occupied = 0usize;
    for _ in 0..100 {
        let cloud: Vec<LabeledPoint> = (0..1000)
            .map(|_| {
                // coarse z values make equal-height ties common
                let z = if r.random_bool(0.5) { r.random_range(-6..14) as f64 * 0.5 } else { r.random_range(-3.0..7.0) };
                LabeledPoint::new(r.random_range(-5.0..95.0), r.random_range(-50.0..50.0), z, r.random_range(1..=255))
            })
            .collect();
        let got = rasterize_bev(&cloud, &spec);
        let mut want = vec![(f64::NEG_INFINITY, 0u8); n * n];
        for p in &cloud {
            let (x, y, z) = (p.pos.x, p.pos.y, p.pos.z);
            if z < spec.z_min || z > spec.z_max {
                continue;
            }
            let fwd = (x / spec.resolution).floor();
            let lat = ((spec.lateral_extent / 2.0 - y) / spec.resolution).floor();
            if fwd < 0.0 || lat < 0.0 || fwd >= n as f64 || lat >= n as f64 {
                continue;
            }
            let (row, col) = (n - 1 - fwd as usize, lat as usize);
            let cell = &mut want[row * n + col];
            if z > cell.0 || (z == cell.0 && p.label > cell.1) {
                *cell = (z, p.label);
            }
        }
        for row in 0..n {
            for col in 0..n {
                let w = want[row * n + col].1;
                occupied += (w != 0) as usize;
                if got.cell(row, col) != w {
                    bad_cells += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(bad_cells == 0 && secs < 5.0, format!("{bad_cells} mismatched cells ({occupied} occupied) over 100 clouds, {secs:.2}s"))
}

// ---------------------------------------------------------------- 5, 6, 9

struct Reference {
    cfg: RunConfig,
    scene: Scene,
    trained: sbev_core::eval::Trained,
    clean: [EvalReport; 2],
    secs: f64,
}

fn reference_run() -> Reference {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let scene = build_scene(&cfg).expect("scene");
    let trained = train_pipeline(&scene, &cfg, Ablation::Base).expect("training");
    let clean = evaluate(&trained.localizer, "clean", &clean_items(&scene)).expect("evaluation");
    Reference { cfg, scene, trained, clean, secs: t.elapsed().as_secs_f64() }
}

fn criterion_5(rf: &Reference) -> Outcome {
    let [pred, perfect] = &rf.clean;
    let acc = pred.node_accuracy;
    let pass = acc >= 0.95 && perfect.mae_x <= 2.0 && perfect.mae_y <= 1.0 && perfect.mae_theta_deg <= 2.0 && rf.secs <= 600.0;
    outcome(
        pass,
        format!(
            "{} nodes, {} test frames: node acc {:.2}%, perfect-node MAE {:.3} m / {:.3} m / {:.3} deg, {:.0}s",
            rf.scene.map.len(),
            pred.n,
            100.0 * acc,
            perfect.mae_x,
            perfect.mae_y,
            perfect.mae_theta_deg,
            rf.secs
        ),
    )
}

fn criterion_6(rf: &Reference) -> Outcome {
    let t = Instant::now();
    let clean = rf.clean[0].node_accuracy;
    let mut parts = vec![format!("clean {:.2}%", 100.0 * clean)];
    let mut worst = 0.0f64;
    for w in [WeatherSpec::confusion(0.1, 1), WeatherSpec::depth_noise(0.2), WeatherSpec::fog(40.0)] {
        let items = weather_items(&rf.scene, &rf.cfg, &w).expect("weather render");
        let acc = evaluate(&rf.trained.localizer, &w.name, &items).expect("evaluation")[0].node_accuracy;
        worst = worst.max((clean - acc).abs());
        parts.push(format!("{} {:.2}%", w.name, 100.0 * acc));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 0.05 && secs <= 900.0,
        format!("{}; largest gap {:.2} pp, {secs:.0}s", parts.join(", "), 100.0 * worst),
    )
}

fn criterion_9(rf: &Reference) -> Outcome {
    let items = lane_items(&rf.scene, &rf.cfg, 3.0).expect("lane render");
    let lane = &evaluate(&rf.trained.localizer, "lane_+3", &items).expect("evaluation")[1];
    let base = &rf.clean[1];
    let ratios = [lane.mae_x / base.mae_x, lane.mae_y / base.mae_y, lane.mae_theta_deg / base.mae_theta_deg];
    let pass = ratios.iter().all(|&q| q <= 3.0);
    outcome(
        pass,
        format!(
            "lane +3 m perfect-node MAE {:.3} m / {:.3} m / {:.3} deg vs in-route {:.3} / {:.3} / {:.3}; ratios {:.2} / {:.2} / {:.2} (limit 3)",
            lane.mae_x, lane.mae_y, lane.mae_theta_deg, base.mae_x, base.mae_y, base.mae_theta_deg, ratios[0], ratios[1], ratios[2]
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Coarse accuracy of the AE + index alone.
fn coarse_accuracy(scene: &Scene, cfg: &RunConfig, ablation: Ablation, items: &[EvalItem]) -> f64 {
    let (ae, _) = train_ae_stage(&scene.train_data, cfg, ablation).expect("ae training");
    let index = index_stage(&ae, &scene.train_data, cfg).expect("index");
    let pooled: Vec<&[f64]> = items.iter().map(|e| e.pooled.as_slice()).collect();
    let latents = ae.encode_many(&pooled).expect("encode");
    let hits = items.iter().zip(&latents).filter(|(e, l)| index.coarse_localize(l).unwrap().0 == e.node_id).count();
    hits as f64 / items.len() as f64
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn criterion_7(rf: &Reference) -> Outcome {
    let t = Instant::now();
    let ablations = [Ablation::Base, Ablation::Avg, Ablation::Aug];
    let mut acc = [[0.0; 3]; 3];
    for seed in 0..3u64 {
        let owned;
        let (scene, cfg) = if seed == rf.cfg.seed {
            (&rf.scene, &rf.cfg)
        } else {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            owned = (build_scene(&cfg).expect("scene"), cfg);
            (&owned.0, &owned.1)
        };
        let mut items = lane_items(scene, cfg, 1.5).expect("lane render");
        items.extend(lane_items(scene, cfg, -1.5).expect("lane render"));
        for (a, &ab) in ablations.iter().enumerate() {
            acc[a][seed as usize] = coarse_accuracy(scene, cfg, ab, &items);
        }
    }
    let med: Vec<f64> = acc.iter().map(|a| median3(*a)).collect();
    let per_seed: Vec<String> = ablations
        .iter()
        .zip(&acc)
        .map(|(ab, a)| format!("{} [{:.1} {:.1} {:.1}]", ab.name(), 100.0 * a[0], 100.0 * a[1], 100.0 * a[2]))
        .collect();
    outcome(
        med[0] >= med[1] && med[0] >= med[2],
        format!(
            "lane +-1.5 m median node acc BASE {:.2}% AVG {:.2}% AUG {:.2}%; per seed {}; {:.0}s",
            100.0 * med[0],
            100.0 * med[1],
            100.0 * med[2],
            per_seed.join(", "),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn is_psd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && min_eigenvalue(m) >= -1e-12 * m.amax().max(1.0)
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let steps = 600;
    let dt = 0.1;
    let meas_sigma = [3.0, 3.0, 1f64.to_radians()];
    let (odo_v, odo_w) = (0.1, 0.2f64.to_radians());
    let cfg = KfConfig { r_diag: meas_sigma.map(|s| s * s), ..KfConfig::default() };
    let (q, r_cov) = (cfg.q(), cfg.r());
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let mut r = rng::seeded(800 + seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut truth = Pose2::new(0.0, 0.0, r.random_range(-3.0..3.0));
        let z0 = [truth.x + meas_sigma[0] * unit.sample(&mut r), truth.y + meas_sigma[1] * unit.sample(&mut r), truth.theta];
        let mut state = KfState::new(Pose2::new(z0[0], z0[1], z0[2]), cfg.init_sigma());
        let mut psd_ok = is_psd(&state.sigma);
        let (mut pre, mut post) = ([0.0; 2], [0.0; 2]);
        for k in 0..steps {
            let tk = k as f64 * dt;
            let (vx, vy, omega) = (10.0 + 2.0 * (0.02 * tk).sin(), 0.0, 0.15 * (0.05 * tk).sin());
            let (s, c) = truth.theta.sin_cos();
            truth = Pose2::new(truth.x + (vx * c - vy * s) * dt, truth.y + (vx * s + vy * c) * dt, truth.theta + omega * dt);
            let odom = OdomSample {
                vx: vx + odo_v * unit.sample(&mut r),
                vy: vy + odo_v * unit.sample(&mut r),
                omega: omega + odo_w * unit.sample(&mut r),
                dt,
            };
            state = kf_predict(&state, &odom, &q).unwrap();
            psd_ok &= is_psd(&state.sigma);
            let z = Vector3::new(
                truth.x + meas_sigma[0] * unit.sample(&mut r),
                truth.y + meas_sigma[1] * unit.sample(&mut r),
                wrap_angle(truth.theta + meas_sigma[2] * unit.sample(&mut r)),
            );
            state = kf_update(&state, &z, &r_cov).unwrap();
            psd_ok &= is_psd(&state.sigma);
            pre[0] += (z.x - truth.x).abs();
            pre[1] += (z.y - truth.y).abs();
            post[0] += (state.mu.x - truth.x).abs();
            post[1] += (state.mu.y - truth.y).abs();
        }
        let n = steps as f64;
        let (pre, post) = (pre.map(|v| v / n), post.map(|v| v / n));
        pass &= psd_ok && post[0] <= pre[0] && post[1] <= pre[1];
        parts.push(format!("x {:.2}->{:.2} y {:.2}->{:.2}{}", pre[0], post[0], pre[1], post[1], if psd_ok { "" } else { " (covariance not PSD)" }));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(pass && secs < 10.0, format!("{steps} steps x 5 seeds, MAE before->after (m): {}; {secs:.2}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 10

const CHAIN_CONFIG: &str = r#"{
  "world": {"length_m": 120.0, "frame_spacing_m": 1.0},
  "ae": {"hidden": 32, "latent": 8, "train": {"epochs": 2}},
  "reg": {"hidden": [16, 8], "train": {"epochs": 2}}
}"#;

fn run_chain(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("run.json"), CHAIN_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 8] = [
        &["synth", "--out", "ds"],
        &["build", "--dataset", "ds", "--out", "sb"],
        &["map", "--sbev", "sb", "--out", "mp"],
        &["train-ae", "--map", "mp", "--sbev", "sb", "--out", "ae"],
        &["train-reg", "--map", "mp", "--sbev", "sb", "--ae", "ae", "--out", "bundle"],
        &["localize", "--bundle", "bundle", "--sbev", "sb", "--frames", "mp/test.csv", "--out", "loc.csv"],
        &["fuse", "--measurements", "loc.csv", "--odometry", "ds/odometry.csv", "--trajectory", "ds/poses.csv", "--out", "fused.csv"],
        &["eval", "--bundle", "bundle", "--sbev", "sb", "--frames", "mp/test.csv", "--out", "report.csv"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_sbev"))
            .current_dir(dir)
            .args(["--config", "run.json", "--seed", "11"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn checksums(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(fs::read(&path).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((path.strip_prefix(root).unwrap().display().to_string(), hex));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = run_chain(a.path()).and_then(|_| run_chain(b.path())) {
        return outcome(false, format!("chain failed: {e}"));
    }
    let (sa, sb) = (checksums(a.path()), checksums(b.path()));
    let differing: Vec<&str> = sa.iter().zip(&sb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let pass = sa.len() == sb.len() && differing.is_empty() && sa.len() > 20;
    outcome(
        pass,
        format!("{} files checksummed per run, {} differ{}, {:.1}s", sa.len(), differing.len(), if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }, t.elapsed().as_secs_f64()),
    )
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, o: &Outcome) {
    println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    // honour `cargo test -- --list` and filters loosely: any filter argument
    // that does not mention acceptance skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let run = |n: usize, name: &'static str, o: Outcome, results: &mut Vec<(usize, &str, Outcome)>| {
        report(n, name, &o);
        results.push((n, name, o));
    };
    run(1, "pose algebra", criterion_1(), &mut results);
    run(2, "gradient checks", criterion_2(), &mut results);
    run(3, "exact nearest neighbour", criterion_3(), &mut results);
    run(4, "rasterizer oracle", criterion_4(), &mut results);
    run(8, "Kalman improvement", criterion_8(), &mut results);
    run(10, "CLI determinism", criterion_10(), &mut results);
    let rf = reference_run();
    run(5, "in-route localization", criterion_5(&rf), &mut results);
    run(6, "weather invariance", criterion_6(&rf), &mut results);
    run(9, "lane-shift generalization", criterion_9(&rf), &mut results);
    run(7, "ablation ordering", criterion_7(&rf), &mut results);

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (n, name, o) in &results {
        report(*n, name, o);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
