//! Acceptance criteria 1-10, one `[PASS]`/`[FAIL]` line each.

use std::time::{Duration, Instant};

use cvt_core::cost_volume::{
    brute_force_cost_volume, build_cost_volume, CvtHeadParams, HeadShape, TemporalWindow, VolumeFeatures,
};
use cvt_core::experiment::{ablation_csv, run_ablation, Manifest, SweepAxis};
use cvt_core::geometry::{
    relative_transform, sample_sight_points, sight_direction, transform_point, voxel_to_world, world_to_voxel,
    FramePose, GridSpec, RigidTransform, StrideSet, VoxelIndex, WorldPoint,
};
use cvt_core::io::{encode_checkpoint, encode_dataset, ExperimentConfig};
use cvt_core::metrics::{EvalReport, EvalScope};
use cvt_core::occupancy::{
    cvt_loss, cvt_loss_taped, occupancy_loss, occupancy_loss_taped, total_loss, DecoderParams, OccupancyGrid,
    OccupancyLogits, VisibilityMask,
};
use cvt_core::synth::{generate_dataset, Dataset, SceneConfig};
use cvt_core::tensor::{DenseTensor, ParamId, ParamSet, Tape, Var};
use cvt_core::trainer::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Harness {
    failed: usize,
}

impl Harness {
    fn check(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let out = f();
        let elapsed = t.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let (ok, detail) = match out {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.unwrap().as_secs_f64())),
            Err(d) => (false, d),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "[{}] {id}. {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn geometry_exactness() -> Outcome {
    let grid = GridSpec::new(200, 200, 16, 0.4).map_err(|e| e.to_string())?;
    for g in [grid, grid.with_center_offset([3.7, -12.25, 0.3])] {
        for idx in g.indices() {
            let c = world_to_voxel(voxel_to_world(idx, &g).map_err(|e| e.to_string())?, &g);
            ensure((c.u, c.v, c.w) == (idx.i as f64, idx.j as f64, idx.k as f64), || {
                format!("round trip broke at {idx:?}: {c:?}")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let strides = StrideSet::symmetric(4);
    let mut collapse = 0.0f64;
    for _ in 0..2000 {
        let idx = VoxelIndex::new(rng.gen_range(0..200), rng.gen_range(0..200), rng.gen_range(0..16));
        let p = voxel_to_world(idx, &grid).map_err(|e| e.to_string())?;
        let t = rng.gen_range(0.0..10.0);
        let pose = FramePose {
            transform: RigidTransform::from_yaw_translation(rng.gen_range(-3.0..3.0), [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 0.5]),
            timestamp: t,
        };
        let past = FramePose { timestamp: t - 0.5, ..pose };
        let rel = relative_transform(&pose, &past).map_err(|e| e.to_string())?;
        let pts = sample_sight_points(p, sight_direction(p, &grid), &strides, &grid);
        for q in &pts {
            collapse = collapse.max(transform_point(&rel, *q).distance(*q));
        }
        collapse = collapse.max(pts[strides.zero_slot()].distance(p));
    }
    ensure(collapse <= 1e-9, || format!("identity-pose collapse error {collapse:e}"))?;

    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let m = RigidTransform::from_yaw_translation(rng.gen_range(-3.2..3.2), [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-5.0..5.0)]);
        let mut pt = || WorldPoint::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0), rng.gen_range(-4.0..4.0));
        let (a, b) = (pt(), pt());
        let d = a.distance(b);
        let d2 = transform_point(&m, a).distance(transform_point(&m, b));
        worst = worst.max((d - d2).abs() / d.max(1e-12));
    }
    ensure(worst <= 1e-9, || format!("distance distortion {worst:e}"))?;
    Ok(format!("{} indices exact, collapse {collapse:.1e}, distortion {worst:.1e}", grid.voxel_count() * 2))
}

fn random_window(rng: &mut ChaCha8Rng) -> (TemporalWindow<f64>, StrideSet) {
    let grid = GridSpec::new(rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(0.3..1.2)).unwrap();
    let k = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let dt = rng.gen_range(0.1..1.0);
    let s = grid.spatial_shape();
    let mut frames = Vec::new();
    for f in 0..k {
        let pose = FramePose {
            transform: RigidTransform::from_yaw_translation(
                rng.gen_range(-0.4..0.4),
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.3..0.3)],
            ),
            timestamp: 10.0 - f as f64 * dt,
        };
        let feats = DenseTensor::from_fn(vec![s[0], s[1], s[2], c], |_| rng.gen_range(-1.0..1.0));
        frames.push(VolumeFeatures::new(feats, pose, grid).unwrap());
    }
    let mut strides: Vec<f64> = vec![0.0];
    let n = rng.gen_range(1..=5);
    while strides.len() < n {
        let v: f64 = (rng.gen_range(-3.0f64..3.0) * 4.0).round() / 4.0;
        if !strides.contains(&v) {
            strides.push(v);
        }
    }
    strides.sort_by(f64::total_cmp);
    let current = frames.remove(0);
    (TemporalWindow::new(current, frames, dt).unwrap(), StrideSet::new(strides).unwrap())
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let instances = 64;
    for i in 0..instances {
        let (w, strides) = random_window(&mut rng);
        let a = build_cost_volume(&w, &strides).map_err(|e| e.to_string())?;
        let b = brute_force_cost_volume(&w, &strides).map_err(|e| e.to_string())?;
        ensure(a.features.shape() == b.features.shape(), || format!("instance {i}: shape mismatch"))?;
        let d = a.features.max_abs_diff(&b.features).max(a.validity.max_abs_diff(&b.validity));
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("instance {i}: max diff {d:e}"))?;
    }
    Ok(format!("{instances} instances, max diff {worst:.1e}"))
}

const FD_STEP: f64 = 1e-6;

/// Central differences over every parameter element; returns the worst relative error.
fn fd_check(params: &mut ParamSet<f64>, f: &dyn Fn(&ParamSet<f64>, &mut Tape<f64>) -> Var) -> Result<f64, String> {
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(params, &mut tape);
    tape.backward(loss, params).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        let id = ParamId(pi);
        for e in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[e];
            let mut eval = |x: f64| {
                params.get_mut(id).value.data_mut()[e] = x;
                let mut t = Tape::new();
                let l = f(params, &mut t);
                t.value(l).item().unwrap()
            };
            let numeric = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            eval(orig);
            let a = analytic[pi][e];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
            if err > 1e-4 && (a - numeric).abs() > 1e-8 {
                return Err(format!("{} [{e}]: analytic {a} vs numeric {numeric}", params.get(id).name));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor<f64> {
    DenseTensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, z, c) = (3, 2, 3, 2);
    let voxels = h * w * z;
    let probe = rand_tensor(&mut rng, vec![h, w, z, 1]);
    let labels: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..3)).collect();
    let mask: Vec<bool> = (0..voxels).map(|_| rng.gen_bool(0.8)).collect();
    let occupied: Vec<bool> = labels.iter().map(|&l| l != 0).collect();

    // Each case reduces its op's output to a scalar through a fixed random per-voxel weighting.
    let reduce = |t: &mut Tape<f64>, x: Var| {
        let p = t.input(probe.clone()).unwrap();
        let y = t.mul_voxel(x, p).unwrap();
        t.sum(y).unwrap()
    };
    let mut report = Vec::new();
    let mut run = |name: &str, params: &mut ParamSet<f64>, f: &dyn Fn(&ParamSet<f64>, &mut Tape<f64>) -> Var| -> Result<(), String> {
        let e = fd_check(params, f).map_err(|m| format!("{name}: {m}"))?;
        report.push(format!("{name} {e:.0e}"));
        Ok(())
    };

    for k in [1usize, 3] {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", rand_tensor(&mut rng, vec![h, w, z, c]));
        let kw = ps.insert("k", rand_tensor(&mut rng, vec![k, k, k, c, 2]));
        let b = ps.insert("b", rand_tensor(&mut rng, vec![2]));
        run(&format!("conv3d k{k}"), &mut ps, &|p, t| {
            let (x, kw, b) = (t.param(p, x), t.param(p, kw), t.param(p, b));
            let y = t.conv3d(x, kw, b).unwrap();
            reduce(t, y)
        })?;
    }
    let mut ps = ParamSet::new();
    let x = ps.insert("x", rand_tensor(&mut rng, vec![h, w, z, c]));
    run("relu", &mut ps, &|p, t| {
        let v = t.param(p, x);
        let y = t.relu(v);
        reduce(t, y)
    })?;
    run("sigmoid", &mut ps, &|p, t| {
        let v = t.param(p, x);
        let y = t.sigmoid(v).unwrap();
        reduce(t, y)
    })?;
    run("scale", &mut ps, &|p, t| {
        let v = t.param(p, x);
        let y = t.scale(v, -1.7).unwrap();
        reduce(t, y)
    })?;
    let y2 = ps.insert("y", rand_tensor(&mut rng, vec![h, w, z, c]));
    let wv = ps.insert("w", rand_tensor(&mut rng, vec![h, w, z, 1]));
    run("add", &mut ps, &|p, t| {
        let (a, b) = (t.param(p, x), t.param(p, y2));
        let s = t.add(a, b).unwrap();
        reduce(t, s)
    })?;
    run("mul_voxel", &mut ps, &|p, t| {
        let (a, b) = (t.param(p, x), t.param(p, wv));
        let y = t.mul_voxel(a, b).unwrap();
        reduce(t, y)
    })?;
    let mut ps = ParamSet::new();
    let lg = ps.insert("logits", rand_tensor(&mut rng, vec![h, w, z, 3]));
    let cw = [0.6, 1.1, 1.3];
    run("cross_entropy", &mut ps, &|p, t| {
        let v = t.param(p, lg);
        t.cross_entropy(v, &labels, &cw, &mask).unwrap()
    })?;
    let mut ps = ParamSet::new();
    let zl = ps.insert("z", rand_tensor(&mut rng, vec![h, w, z, 1]));
    run("bce_with_logits", &mut ps, &|p, t| {
        let v = t.param(p, zl);
        t.binary_cross_entropy_with_logits(v, &occupied, &mask).unwrap()
    })?;

    // Full objective through head and decoder.
    let (kn, classes) = (3 * 2, 3);
    let mut ps = ParamSet::<f64>::new();
    let head = CvtHeadParams::init(
        &mut ps,
        HeadShape {
            in_channels: kn * c,
            hidden: 3,
            first_kernel: 1,
            second_kernel: 3,
        },
        &mut rng,
    );
    let dec = DecoderParams::init(&mut ps, c, classes, &mut rng);
    let cv = rand_tensor(&mut rng, vec![h, w, z, kn * c]);
    let cur = rand_tensor(&mut rng, vec![h, w, z, c]);
    let shape = [h, w, z];
    let gt = OccupancyGrid::new(shape, labels.clone(), classes).unwrap();
    let vis = VisibilityMask::new(shape, mask.clone()).unwrap();
    let weights = [0.5, 1.2, 1.3];
    run("total loss", &mut ps, &|p, t| {
        let f = t.input(cv.clone()).unwrap();
        let x = t.input(cur.clone()).unwrap();
        let r = head.forward(t, p, f, x).unwrap();
        let logits = dec.forward(t, p, r.v_occ).unwrap();
        let occ = occupancy_loss_taped(t, logits, &gt, &weights, &vis).unwrap();
        let l = cvt_loss_taped(t, r.logits, &gt, &vis).unwrap();
        let l = t.scale(l, 0.7).unwrap();
        t.add(occ, l).unwrap()
    })?;
    Ok(report.join(", "))
}

fn closed_form_losses() -> Outcome {
    let shape = [2, 3, 2];
    let n = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ce = 0.0f64;
    for m in [1usize, 4, 9] {
        let classes = m + 1;
        let gt = OccupancyGrid::new(shape, (0..n).map(|_| rng.gen_range(0..classes as u8)).collect(), classes).unwrap();
        let mask = VisibilityMask::new(shape, (0..n).map(|i| i % 5 != 0).collect()).unwrap();
        for level in [0.0, -2.5, 7.0] {
            let logits = OccupancyLogits::new(DenseTensor::from_fn(vec![2, 3, 2, classes], |_| level)).unwrap();
            let l = occupancy_loss(&logits, &gt, &vec![1.0; classes], &mask).map_err(|e| e.to_string())?;
            worst_ce = worst_ce.max((l.value - (classes as f64).ln()).abs());
        }
    }
    ensure(worst_ce <= 1e-6, || format!("uniform cross-entropy off by {worst_ce:e}"))?;

    let gt = OccupancyGrid::new(shape, (0..n).map(|_| rng.gen_range(0..3)).collect(), 3).unwrap();
    let mask = VisibilityMask::new(shape, (0..n).map(|i| i % 3 != 0).collect()).unwrap();
    let half = DenseTensor::from_fn(vec![2, 3, 2], |_| 0.5f64);
    let l = cvt_loss(&half, &gt, &mask).map_err(|e| e.to_string())?.value;
    let cvt_err = (l - std::f64::consts::LN_2).abs();
    ensure(cvt_err <= 1e-7, || format!("cvt loss at 0.5 off by {cvt_err:e}"))?;

    for (occ, ref_loss) in [(0.7, 0.3), (1.234567, 9.87), (0.0, 5.0)] {
        let t = total_loss(occ, ref_loss, 0.0).map_err(|e| e.to_string())?;
        ensure(t == occ, || format!("lambda 0 gave {t} for {occ}"))?;
    }
    let mut tape = Tape::<f64>::new();
    let logits = tape.input(rand_tensor(&mut rng, vec![2, 3, 2, 3])).unwrap();
    let zl = tape.input(rand_tensor(&mut rng, vec![2, 3, 2, 1])).unwrap();
    let occ = occupancy_loss_taped(&mut tape, logits, &gt, &[0.8, 1.0, 1.2], &mask).unwrap();
    let rl = cvt_loss_taped(&mut tape, zl, &gt, &mask).unwrap();
    let scaled = tape.scale(rl, 0.0).unwrap();
    let sum = tape.add(occ, scaled).unwrap();
    let (a, b) = (tape.value(sum).item().unwrap(), tape.value(occ).item().unwrap());
    ensure(a == b, || format!("taped lambda 0 gave {a} vs {b}"))?;
    Ok(format!("ce error {worst_ce:.1e}, cvt error {cvt_err:.1e}, lambda 0 exact"))
}

#[derive(Clone, Copy, PartialEq)]
enum Arm {
    Baseline,
    Cvt { frames: usize, supervised: bool },
}

fn bench_config(seed: u64, grid: GridSpec, arm: Arm) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        grid,
        eval_each_epoch: false,
        log_train_miou: false,
        ..TrainConfig::default()
    };
    match arm {
        Arm::Baseline => {
            cfg.baseline = true;
            cfg.frame_count = 1;
        }
        Arm::Cvt { frames, supervised } => {
            cfg.frame_count = frames;
            cfg.cvt_supervision = supervised;
        }
    }
    cfg
}

fn bench_run(data: &Dataset, seed: u64, arm: Arm) -> Result<EvalReport, String> {
    let scene = &data.cfg;
    let mut cfg = bench_config(seed, scene.grid, arm);
    cfg.frame_interval = scene.frame_interval;
    let classes = scene.class_set.len();
    let (ckpt, _) = train(&cfg, &data.train, &data.eval, classes).map_err(|e| e.to_string())?;
    let scope = EvalScope {
        grid: scene.grid,
        classes,
        excluded: Vec::new(),
    };
    ckpt.model.evaluate(&data.eval, &scope).map_err(|e| e.to_string())
}

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SAMPLES: usize = 48;
const EVAL_SAMPLES: usize = 16;

fn dataset(seed: u64, interval: f64) -> Result<Dataset, String> {
    let cfg = SceneConfig {
        seed,
        frame_interval: interval,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, TRAIN_SAMPLES, EVAL_SAMPLES).map_err(|e| e.to_string())
}

struct Runs {
    base: Vec<EvalReport>,
    k3: Vec<EvalReport>,
    k7: Vec<EvalReport>,
}

fn mean(v: &[EvalReport], f: impl Fn(&EvalReport) -> Option<f64>) -> f64 {
    100.0 * v.iter().map(|r| f(r).unwrap_or(f64::NAN)).sum::<f64>() / v.len() as f64
}

fn miou(r: &EvalReport) -> Option<f64> {
    r.miou
}

fn trend_a(runs: &mut Option<Runs>) -> Outcome {
    let mut out = Runs {
        base: Vec::new(),
        k3: Vec::new(),
        k7: Vec::new(),
    };
    for seed in SEEDS {
        let data = dataset(seed, 0.5)?;
        out.base.push(bench_run(&data, seed, Arm::Baseline)?);
        out.k3.push(bench_run(&data, seed, Arm::Cvt { frames: 3, supervised: true })?);
        out.k7.push(bench_run(&data, seed, Arm::Cvt { frames: 7, supervised: true })?);
        println!(
            "      seed {seed}: base {:.2} K3 {:.2} K7 {:.2}",
            100.0 * out.base[out.base.len() - 1].miou.unwrap_or(f64::NAN),
            100.0 * out.k3[out.k3.len() - 1].miou.unwrap_or(f64::NAN),
            100.0 * out.k7[out.k7.len() - 1].miou.unwrap_or(f64::NAN)
        );
    }
    let (b, k3, k7) = (mean(&out.base, miou), mean(&out.k3, miou), mean(&out.k7, miou));
    *runs = Some(out);
    let detail = format!("mean mIoU base {b:.2}, K3 {k3:.2}, K7 {k7:.2}, K7-base {:.2}", k7 - b);
    ensure(k7 > k3 && k3 > b && k7 - b >= 2.0, || detail.clone())?;
    Ok(detail)
}

fn trend_b(runs: &Option<Runs>) -> Outcome {
    let runs = runs.as_ref().ok_or("needs the criterion 5 runs")?;
    let mut means = Vec::new();
    for interval in [1.0 / 12.0, 1.0 / 6.0] {
        let mut reports = Vec::new();
        for seed in SEEDS {
            let data = dataset(seed, interval)?;
            reports.push(bench_run(&data, seed, Arm::Cvt { frames: 7, supervised: true })?);
        }
        means.push(mean(&reports, miou));
    }
    means.push(mean(&runs.k7, miou));
    let detail = format!("mean mIoU at span 0.5 s {:.2}, 1 s {:.2}, 3 s {:.2}", means[0], means[1], means[2]);
    ensure(means.windows(2).all(|w| w[1] >= w[0] - 0.3), || detail.clone())?;
    Ok(detail)
}

fn trend_c(runs: &Option<Runs>) -> Outcome {
    let runs = runs.as_ref().ok_or("needs the criterion 5 runs")?;
    let mut off = Vec::new();
    for seed in SEEDS {
        let data = dataset(seed, 0.5)?;
        off.push(bench_run(&data, seed, Arm::Cvt { frames: 7, supervised: false })?);
    }
    let (on, off) = (mean(&runs.k7, miou), mean(&off, miou));
    let detail = format!("mean mIoU supervised {on:.2}, unsupervised {off:.2}");
    ensure(on >= off - 0.3, || detail.clone())?;
    Ok(detail)
}

fn trend_d(runs: &Option<Runs>) -> Outcome {
    let r = runs.as_ref().ok_or("needs the criterion 5 runs")?;
    let delta = |f: fn(&EvalReport) -> Option<f64>| mean(&r.k7, f) - mean(&r.base, f);
    let (near, far) = (delta(|r| r.near_miou), delta(|r| r.far_miou));
    let (fast, slow) = (delta(|r| r.fast_miou), delta(|r| r.slow_miou));
    let detail = format!("delta near {near:.2} vs far {far:.2}, fast {fast:.2} vs slow {slow:.2}");
    ensure(near >= far - 0.3 && fast >= slow - 0.3, || detail.clone())?;
    Ok(detail)
}

fn binary_geometry(runs: &Option<Runs>) -> Outcome {
    let r = runs.as_ref().ok_or("needs the criterion 5 runs")?;
    let (b, k7) = (mean(&r.base, |r| r.nonfree_iou), mean(&r.k7, |r| r.nonfree_iou));
    let detail = format!("Non-Free IoU base {b:.2}, K7 {k7:.2}, gain {:.2}", k7 - b);
    ensure(k7 - b >= 1.0, || detail.clone())?;
    Ok(detail)
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("grid_height", "12"),
        ("grid_width", "12"),
        ("grid_depth", "8"),
        ("frame_count", "3"),
        ("channels", "4"),
        ("strides", "-1,0,1"),
        ("head_hidden", "4"),
        ("epochs", "2"),
        ("train_samples", "3"),
        ("eval_samples", "2"),
        ("seed", "21"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let gen = || generate_dataset(&cfg.scene, cfg.train_samples, cfg.eval_samples).map(|d| encode_dataset(&cfg, &d));
    let (a, b) = (gen().map_err(|e| e.to_string())?, gen().map_err(|e| e.to_string())?);
    ensure(a == b, || "dataset bytes differ".into())?;

    let data = generate_dataset(&cfg.scene, cfg.train_samples, cfg.eval_samples).map_err(|e| e.to_string())?;
    let classes = cfg.scene.class_set.len();
    let fit = || train(&cfg.train, &data.train, &data.eval, classes).map_err(|e| e.to_string());
    let ((c1, l1), (c2, l2)) = (fit()?, fit()?);
    ensure(encode_checkpoint(&cfg, &c1) == encode_checkpoint(&cfg, &c2) && l1 == l2, || "checkpoint bytes differ".into())?;

    let scope = EvalScope {
        grid: cfg.scene.grid,
        classes,
        excluded: Vec::new(),
    };
    let r1 = c1.model.evaluate(&data.eval, &scope).map_err(|e| e.to_string())?;
    let r2 = c2.model.evaluate(&data.eval, &scope).map_err(|e| e.to_string())?;
    ensure(r1.rows(&cfg.scene.class_set.names) == r2.rows(&cfg.scene.class_set.names), || "eval reports differ".into())?;

    let mut base = cfg.clone();
    base.set("epochs", "1").unwrap();
    let manifest = |jobs| Manifest {
        base: base.clone(),
        seeds: vec![0, 1],
        axis: SweepAxis::FrameCount,
        values: vec!["1".into(), "3".into()],
        jobs,
    };
    let sweep = |jobs| -> Result<String, String> {
        let m = manifest(jobs);
        let (rows, _) = run_ablation(&m).map_err(|e| e.to_string())?;
        Ok(ablation_csv(m.axis, &m.base.hash(), &rows))
    };
    let (s1, s2) = (sweep(1)?, sweep(2)?);
    ensure(s1 == s2, || "ablation tables differ across job counts".into())?;
    Ok(format!("dataset ({} bytes), checkpoint, eval report and ablation table identical on re-run", a.len()))
}

fn main() {
    let mut h = Harness { failed: 0 };
    h.check(1, "geometry exactness", Some(Duration::from_secs(10)), geometry_exactness);
    h.check(2, "oracle equivalence", Some(Duration::from_secs(30)), oracle_equivalence);
    h.check(3, "gradient correctness", Some(Duration::from_secs(60)), gradient_correctness);
    h.check(4, "closed-form losses", None, closed_form_losses);
    let mut runs = None;
    h.check(5, "trend A: more frames help", Some(Duration::from_secs(15 * 60)), || trend_a(&mut runs));
    h.check(6, "trend B: longer spans help", None, || trend_b(&runs));
    h.check(7, "trend C: refinement supervision helps", None, || trend_c(&runs));
    h.check(8, "trend D: gains concentrate near and fast", None, || trend_d(&runs));
    h.check(9, "binary geometry gain", None, || binary_geometry(&runs));
    h.check(10, "determinism", None, determinism);
    if h.failed > 0 {
        println!("{} criteria failed", h.failed);
        std::process::exit(1);
    }
}
