//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line
//! straight to stderr, so the lines show up without `--nocapture`. The tests
//! hold a shared lock because several of them time themselves.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use eegflow::classifier::ClassifierNet;
use eegflow::formats::flowfile::FlowFile;
use eegflow::ingest::{Electrode, Montage};
use eegflow::jointtrain::{
    discriminator_accuracy, extractor_objective, joint_train, loss_adver_confusion, loss_img, train_image_only,
    Discriminator, FeatureExtractor, ImageHead, JointBatch, JointConfig, JointModel,
};
use eegflow::nn::gradcheck::{check_input, check_params};
use eegflow::nn::{flat, softmax_cross_entropy, softmax_uniform_cross_entropy, Conv2d, Dense, Lstm};
use eegflow::optflow::{flow_two_frame, FarnebackParams, FlowField};
use eegflow::pipeline::load_manifest;
use eegflow::synth::two_domain_task;
use eegflow::topomap::clough_tocher::CloughTocher;
use eegflow::topomap::{aep_project, vertex_center, TopoMapper};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn eegflow(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_eegflow")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "eegflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, trials: usize, seed: u64) -> String {
    let d = dir.to_str().unwrap();
    eegflow(&["synth", "--out", d, "--trials", &trials.to_string(), "--seed", &seed.to_string()]);
    dir.join("config.txt").to_str().unwrap().to_string()
}

fn with_sets<'a>(base: &[&'a str], sets: &'a [String]) -> Vec<&'a str> {
    let mut args = base.to_vec();
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

#[test]
fn pipeline_shape_and_runtime() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 0);
    let start = Instant::now();
    eegflow(&["convert", "--config", &cfg]);
    let elapsed = start.elapsed();

    let out = dir.path().join("out");
    let rows = load_manifest(&out.join("manifest.csv")).unwrap();
    let sources: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.source).collect();
    let mut shapes_ok = true;
    for r in &rows {
        let f = FlowFile::load(&out.join("flows").join(&r.file)).unwrap();
        shapes_ok &= f.data.dim() == (5, 12, 2, 32, 32);
    }
    let pass = sources.len() == 12 && rows.len() == 12 * 50 && shapes_ok && elapsed < Duration::from_secs(60);
    report(
        "pipeline shape",
        pass,
        &format!(
            "{} sources -> {} containers, 5 bands x 12 flow fields of 32x32: {shapes_ok}, {:.1}s",
            sources.len(),
            rows.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn random_montage(rng: &mut ChaCha8Rng, n: usize) -> Montage {
    let electrodes = (0..n)
        .map(|i| {
            let z: f64 = rng.random_range(0.05..1.0);
            let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            Electrode {
                name: format!("E{i}"),
                pos: [r * az.cos(), r * az.sin(), z],
            }
        })
        .collect();
    Montage::new(electrodes).unwrap()
}

#[test]
fn azimuthal_equidistant_isometry() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(8..64);
        let m = random_montage(&mut rng, n);
        let center = vertex_center(&m);
        let p = aep_project(&m, center).unwrap();
        for (e, q) in m.electrodes().iter().zip(&p.points) {
            let dot = (0..3).map(|i| e.pos[i] * center[i]).sum::<f64>().clamp(-1.0, 1.0);
            worst = worst.max((q[0].hypot(q[1]) - dot.acos()).abs());
        }
    }
    let pass = worst <= 1e-9;
    report("projection isometry", pass, &format!("100 montages, max |r - angle| = {worst:.2e}"));
    assert!(pass);
}

#[test]
fn clough_tocher_exactness() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_const, mut worst_lin, mut worst_node): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut pixels = 0;
    for _ in 0..20 {
        let n = rng.random_range(10..48);
        let m = random_montage(&mut rng, n);
        let mapper = TopoMapper::new(&m, 32).unwrap();
        let pts = &mapper.projection.points;
        let (a, b, c) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let constant = mapper.frame(&vec![c; n]).unwrap();
        let lin: Vec<f64> = pts.iter().map(|p| a * p[0] + b * p[1] + c).collect();
        let linear = mapper.frame(&lin).unwrap();
        for r in 0..32 {
            for col in 0..32 {
                if mapper.inside(r, col) {
                    pixels += 1;
                    let p = mapper.grid.pixel_center(r, col);
                    worst_const = worst_const.max((constant[[r, col]] - c).abs());
                    worst_lin = worst_lin.max((linear[[r, col]] - (a * p[0] + b * p[1] + c)).abs());
                }
            }
        }
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let ct = CloughTocher::new(&mapper.triangulation, &values).unwrap();
        for (p, v) in pts.iter().zip(&values) {
            worst_node = worst_node.max((ct.eval(*p).unwrap() - v).abs());
        }
    }
    let pass = worst_const <= 1e-9 && worst_lin <= 1e-9 && worst_node <= 1e-9;
    report(
        "clough-tocher exactness",
        pass,
        &format!("{pixels} in-hull pixels, constant {worst_const:.1e}, linear {worst_lin:.1e}, nodes {worst_node:.1e}"),
    );
    assert!(pass);
}

fn smooth_field(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|i| {
            let (k1, k2) = (rng.random_range(1..4) as f64, rng.random_range(-2..3) as f64);
            let (kx, ky) = if i % 2 == 0 { (k1, k2) } else { (k2, k1) };
            (kx, ky, rng.random_range(0.5..1.5), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    Array2::from_shape_fn((32, 32), |(r, c)| {
        modes
            .iter()
            .map(|&(kx, ky, amp, ph)| amp * (std::f64::consts::TAU * (kx * c as f64 + ky * r as f64) / 32.0 + ph).sin())
            .sum()
    })
}

fn shifted(f: &Array2<f64>, sx: isize, sy: isize) -> Array2<f64> {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        f[[
            (r as isize - sy).rem_euclid(h as isize) as usize,
            (c as isize - sx).rem_euclid(w as isize) as usize,
        ]]
    })
}

const INTERIOR: usize = 8;

fn interior(f: &FlowField) -> impl Iterator<Item = (usize, usize)> {
    let (h, w) = f.dx.dim();
    (INTERIOR..h - INTERIOR).flat_map(move |r| (INTERIOR..w - INTERIOR).map(move |c| (r, c)))
}

#[test]
fn optical_flow_recovery() {
    let _g = serial();
    let params = FarnebackParams::default();
    let mut worst_err: f64 = 0.0;
    let mut worst_anti: f64 = 0.0;
    let shifts = [(1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (-2, 0)];
    for (i, &(sx, sy)) in shifts.iter().enumerate() {
        for seed in 0..3 {
            let f1 = smooth_field(100 * i as u64 + seed);
            let f2 = shifted(&f1, sx, sy);
            let fwd = flow_two_frame(&f1, &f2, &params).unwrap();
            let bwd = flow_two_frame(&f2, &f1, &params).unwrap();
            let n = interior(&fwd).count() as f64;
            let (mx, my) = interior(&fwd).fold((0.0, 0.0), |(a, b), (r, c)| (a + fwd.dx[[r, c]], b + fwd.dy[[r, c]]));
            let err = ((mx / n - sx as f64).powi(2) + (my / n - sy as f64).powi(2)).sqrt();
            let anti = interior(&fwd)
                .map(|(r, c)| (fwd.dx[[r, c]] + bwd.dx[[r, c]]).hypot(fwd.dy[[r, c]] + bwd.dy[[r, c]]))
                .sum::<f64>()
                / n;
            worst_err = worst_err.max(err);
            worst_anti = worst_anti.max(anti);
        }
    }
    let pass = worst_err <= 0.25 && worst_anti <= 0.3;
    report(
        "optical flow recovery",
        pass,
        &format!("worst interior mean error {worst_err:.3} px, worst mean |fwd + bwd| {worst_anti:.3} px"),
    );
    assert!(pass);
}

fn rand2(rng: &mut ChaCha8Rng, d: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
}

fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
}

fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
}

fn as_vec<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::new();

    let mut dense = Dense::new(6, 4, &mut rng);
    dense.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let x = rand2(&mut rng, (3, 6));
    let r = rand2(&mut rng, (3, 4));
    let mut g = dense.zeros_like();
    let dx = dense.backward(&x, &r, &mut g);
    let loss = |l: &Dense, x: &Array2<f64>| (l.forward(x) * &r).sum();
    let e = check_params(&dense, &g, 100, |l| loss(l, &x)).max(check_input(&as_vec(&x), &as_vec(&dx), |v| {
        loss(&dense, &Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap())
    }));
    errs.push(("dense", e));

    let mut conv = Conv2d::new(2, 3, 3, &mut rng);
    conv.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let x = rand4(&mut rng, (2, 2, 6, 5));
    let r = rand4(&mut rng, (2, 3, 6, 5));
    let (_, cache) = conv.forward(&x).unwrap();
    let mut g = conv.zeros_like();
    let dx = conv.backward(&cache, &r, &mut g, true).unwrap();
    let loss = |l: &Conv2d, x: &Array4<f64>| (l.forward(x).unwrap().0 * &r).sum();
    let e = check_params(&conv, &g, 200, |l| loss(l, &x)).max(check_input(&as_vec(&x), &as_vec(&dx), |v| {
        loss(&conv, &Array4::from_shape_vec(x.dim(), v.to_vec()).unwrap())
    }));
    errs.push(("conv", e));

    for (name, steps) in [("lstm cell", 1), ("bptt", 6)] {
        let mut cell = Lstm::new(3, 4, &mut rng);
        cell.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = rand3(&mut rng, (steps, 2, 3));
        let r = rand3(&mut rng, (steps, 2, 4));
        let (_, cache) = cell.forward(&x).unwrap();
        let mut g = cell.zeros_like();
        let dx = cell.backward(&cache, &r, &mut g, true).unwrap();
        let loss = |l: &Lstm, x: &Array3<f64>| (l.forward(x).unwrap().0 * &r).sum();
        let e = check_params(&cell, &g, 300, |l| loss(l, &x)).max(check_input(&as_vec(&x), &as_vec(&dx), |v| {
            loss(&cell, &Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap())
        }));
        errs.push((name, e));
    }

    // the full sequence classifier, BPTT through both LSTM layers
    let net = ClassifierNet::new(3, 4, 5, 3, 0.0, &mut rng);
    let x = rand3(&mut rng, (5, 2, 3));
    let labels = [1, 2];
    let (logits, cache) = net.forward(&x, None).unwrap();
    let (_, dz) = softmax_cross_entropy(&logits, &labels);
    let mut g = net.zeros_like();
    let dx = net.backward(&cache, &dz, &mut g, true).unwrap();
    let loss = |n: &ClassifierNet, x: &Array3<f64>| softmax_cross_entropy(&n.forward(x, None).unwrap().0, &labels).0;
    let e = check_params(&net, &g, 400, |n| loss(n, &x)).max(check_input(&as_vec(&x), &as_vec(&dx), |v| {
        loss(&net, &Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap())
    }));
    errs.push(("classifier bptt", e));

    let z = rand2(&mut rng, (4, 5)) * 3.0;
    let labels = [0, 4, 2, 2];
    let (_, g) = softmax_cross_entropy(&z, &labels);
    let e = check_input(&as_vec(&z), &as_vec(&g), |v| {
        softmax_cross_entropy(&Array2::from_shape_vec((4, 5), v.to_vec()).unwrap(), &labels).0
    });
    errs.push(("softmax cross-entropy", e));

    let extractor = FeatureExtractor::new(4, &mut rng);
    let f = FeatureExtractor::feature_dim(8, 8);
    let mut head = ImageHead::new(f, 5, &mut rng);
    head.dense.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    let model = JointModel { extractor, head, disc: Discriminator::new(f, &mut rng) };
    let batch = JointBatch {
        images: rand4(&mut rng, (3, 3, 8, 8)),
        labels: vec![0, 3, 4],
        flows: rand4(&mut rng, (2, 4, 8, 8)),
    };
    let alpha = 0.7;
    let (_, grads) = extractor_objective(&model, &batch, alpha).unwrap();
    let e_ex = check_params(&model.extractor, &grads.extractor, 400, |ex| {
        let m = JointModel { extractor: ex.clone(), ..model.clone() };
        extractor_objective(&m, &batch, alpha).unwrap().0.l_img
    });
    let e_head = check_params(&model.head, &grads.head, 200, |h| {
        let m = JointModel { head: h.clone(), ..model.clone() };
        extractor_objective(&m, &batch, alpha).unwrap().0.l_img
    });
    errs.push(("image objective with confusion", e_ex.max(e_head)));

    // confusion through the discriminator down to its input features
    let feats = rand2(&mut rng, (5, f)) * 2.0;
    let (logits, cache) = model.disc.logits(&feats);
    let (_, dz) = softmax_uniform_cross_entropy(&logits);
    let mut g = model.disc.zeros_like();
    let dfeat = model.disc.backward(&cache, &dz, &mut g);
    let e_logits = check_input(&as_vec(&logits), &as_vec(&dz), |v| {
        loss_adver_confusion(&eegflow::nn::softmax(&Array2::from_shape_vec(logits.dim(), v.to_vec()).unwrap())).0
    });
    let e_feat = check_input(&as_vec(&feats), &as_vec(&dfeat), |v| {
        loss_adver_confusion(&model.disc.probabilities(&Array2::from_shape_vec(feats.dim(), v.to_vec()).unwrap())).0
    });
    errs.push(("adversarial confusion", e_logits.max(e_feat)));
    errs
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 0..3 {
        for (name, e) in grad_errors(seed) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|(_, e)| *e < 1e-4) && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(
        "gradient correctness",
        pass,
        &format!("{}; {:.1}s", detail.join(", "), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn loss_values_and_zero_alpha_control() {
    let _g = serial();
    let mut worst: f64 = 0.0;
    for k in [2usize, 5, 10, 12] {
        let uniform = vec![0.0; k];
        worst = worst.max((loss_img(&uniform, k - 1, 0.0, 0.0) - (k as f64).ln()).abs());
        worst = worst.max((softmax_cross_entropy(&Array2::zeros((3, k)), &[0, 1, k - 1]).0 - (k as f64).ln()).abs());
    }
    let d = 2f64.ln();
    worst = worst.max((loss_adver_confusion(&Array2::from_elem((7, 2), 0.5)).0 - d).abs());
    worst = worst.max((softmax_uniform_cross_entropy(&Array2::zeros((7, 2))).0 - d).abs());

    let task = two_domain_task(4, 10, 60, 4, 16, 3);
    let cfg = JointConfig {
        alpha: 0.0,
        steps: 60,
        batch: 8,
        seed: 11,
        ..Default::default()
    };
    let (model, _) = joint_train(&task.images, &task.flows, &cfg).unwrap();
    let (extractor, head) = train_image_only(&task.images, 4, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let identical = bits(flat(&model.extractor)) == bits(flat(&extractor)) && bits(flat(&model.head)) == bits(flat(&head));
    let pass = worst <= 1e-9 && identical;
    report(
        "loss values and zero-alpha control",
        pass,
        &format!("max |loss - ln K| = {worst:.1e}, alpha=0 bit-identical to image-only control: {identical}"),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn adversary_confuses_discriminator() {
    let _g = serial();
    let mut accs = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let train = two_domain_task(4, 40, 400, 4, 16, seed);
        let held = two_domain_task(4, 10, 100, 4, 16, seed + 100);
        for (i, alpha) in [1.0, 0.0].into_iter().enumerate() {
            let cfg = JointConfig {
                alpha,
                steps: 500,
                batch: 16,
                seed,
                ..Default::default()
            };
            let (model, _) = joint_train(&train.images, &train.flows, &cfg).unwrap();
            accs[i].push(discriminator_accuracy(&model, &held.images.images, &held.flows).unwrap());
        }
    }
    let (adv, ctl) = (median(accs[0].clone()), median(accs[1].clone()));
    let pass = adv <= 0.65 && ctl >= 0.8;
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    report(
        "adversarial confusion",
        pass,
        &format!(
            "median held-out discriminator accuracy alpha=1 {adv:.3} [{}], alpha=0 {ctl:.3} [{}]",
            fmt(&accs[0]),
            fmt(&accs[1])
        ),
    );
    assert!(pass);
}

fn read_table(path: &Path) -> Vec<(f64, f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("train_fraction,joint,no_joint"));
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect()
}

/// Settings for the five-seed synthetic runs, sized for a single CPU core.
const REDUCE_SETTINGS: [&str; 5] = ["grid=16", "resample=2", "test_fraction=0.25", "cls_epochs=30", "joint_steps=200"];

struct SeedRun {
    table: Vec<(f64, f64, f64)>,
    elapsed: Duration,
}

fn reduce_run(root: &Path, seed: u64) -> SeedRun {
    let dir = root.join(format!("seed{seed}"));
    let cfg = synth(&dir, 20, seed);
    let sets: Vec<String> = REDUCE_SETTINGS.iter().map(|s| s.to_string()).collect();
    let start = Instant::now();
    eegflow(&with_sets(&["convert", "--config", &cfg], &sets));
    eegflow(&with_sets(&["reduce-experiment", "--config", &cfg], &sets));
    SeedRun {
        table: read_table(&dir.join("out/reduce/table.csv")),
        elapsed: start.elapsed(),
    }
}

#[test]
fn synthetic_reduce_experiments() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<SeedRun> = (0..5).map(|s| reduce_run(root.path(), s)).collect();

    let full = |r: &SeedRun| r.table[0];
    let wins = runs.iter().filter(|r| full(r).1 >= full(r).2).count();
    let pairs: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", full(r).1, full(r).2)).collect();
    let transfer = wins >= 4;
    report(
        "joint training helps downstream",
        transfer,
        &format!("joint >= no-joint at 100% in {wins}/5 seeds (joint/no-joint: {})", pairs.join(" ")),
    );

    let shape_ok = runs
        .iter()
        .all(|r| r.table.iter().map(|t| t.0).collect::<Vec<_>>() == [100.0, 50.0, 25.0]);
    let above_chance = runs.iter().all(|r| full(r).1 >= 0.25 && full(r).2 >= 0.25);
    let inverted = runs
        .iter()
        .filter(|r| {
            let col = |j: usize| r.table.iter().map(|t| if j == 1 { t.1 } else { t.2 }).collect::<Vec<_>>();
            [col(1), col(2)].iter().any(|c| c.windows(2).any(|w| w[1] > w[0]))
        })
        .count();
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    let end_to_end = shape_ok && above_chance && inverted <= 1 && slowest < Duration::from_secs(15 * 60);
    report(
        "reduce experiment",
        end_to_end,
        &format!(
            "table rows 100/50/25: {shape_ok}, 100% accuracy >= 3x chance: {above_chance}, seeds with an inversion: {inverted}, slowest run {:.0}s",
            slowest.as_secs_f64()
        ),
    );
    assert!(end_to_end, "reduce experiment");
    assert!(transfer, "joint training helps downstream");
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_commands_are_byte_identical() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let sets: Vec<String> = ["grid=16", "resample=2", "cls_epochs=3", "joint_steps=20"].iter().map(|s| s.to_string()).collect();
    let dir = root.path().join("run");
    let mut outputs = Vec::new();
    let mut stdouts = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = synth(&dir, 2, 5);
        let mut log = String::new();
        for cmd in ["convert", "train", "reduce-experiment"] {
            log += &eegflow(&with_sets(&[cmd, "--config", &cfg], &sets));
        }
        eegflow(&with_sets(&["visualize", "--config", &cfg, "--epoch", "1"], &sets));
        outputs.push(snapshot(&dir));
        stdouts.push(log);
    }
    let files = outputs[0].len();
    let identical = outputs[0] == outputs[1] && stdouts[0] == stdouts[1];
    report(
        "determinism",
        identical,
        &format!("{files} files from synth, convert, train, reduce-experiment and visualize compared byte for byte"),
    );
    assert!(identical);
}
