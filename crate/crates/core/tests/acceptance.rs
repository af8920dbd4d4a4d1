//! Acceptance suite. Each test prints one `[acceptance] criterion N ... PASS|FAIL` line.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use hmfn::backbone::{strided_sparse_conv, submanifold_sparse_conv, SparseFeatureMap};
use hmfn::dataset_io::{self, load_dataset, split_scenes, validate, write_dataset, DEFAULT_RATIOS};
use hmfn::detection_head::{build_targets, decode, wrap_angle, Box3D, DecodeConfig, HeadGrid, HeadOutput};
use hmfn::eval::{average_precision, evaluate, match_frame, write_results, EvalReport, THRESHOLDS};
use hmfn::gradcheck;
use hmfn::numerics::{Real, Tape, Tensor};
use hmfn::scene_synth::{self, LayoutKind, LidarModel};
use hmfn::training::{self, eval_config_for, infer, prepare_samples, split_samples, train, Hmfn, RunConfig};

const GRADCHECK_SEEDS: u64 = 5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..GRADCHECK_SEEDS).collect();
    let reports = gradcheck::run(gradcheck::OPS, &seeds).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, Real::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    let pass = failed.is_empty() && reports.len() == gradcheck::OPS.len() && elapsed < GRADCHECK_BUDGET;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops x {} seeds, worst rel err {:.2e}, {:.1}s, failing {:?}",
            reports.len(),
            seeds.len(),
            worst,
            elapsed.as_secs_f64(),
            failed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_sparse_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Real = 0.0;
    let mut maps = 0;
    let mut sites_ok = true;
    for trial in 0..24 {
        let h = rng.gen_range(4..=32);
        let w = rng.gen_range(4..=32);
        let density = rng.gen_range(0.05..0.5);
        let coords: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|_| rng.gen_bool(density))
            .collect();
        if coords.is_empty() {
            continue;
        }
        maps += 1;
        let (c_in, c_out, k) = (rng.gen_range(1..4), rng.gen_range(1..4), if trial % 3 == 0 { 5 } else { 3 });
        let feats = Tensor::randn(&[coords.len(), c_in], 1.0, &mut rng);
        let map = SparseFeatureMap::new(h, w, coords.clone(), feats).unwrap();
        let dense_in = map.to_dense();
        let kernel = Tensor::randn(&[c_out, c_in, k, k], 0.5, &mut rng);
        let bias = Tensor::randn(&[c_out], 0.5, &mut rng);

        for stride in [1usize, 2] {
            let mut tape = Tape::new();
            let v = map.on_tape(&mut tape);
            let kv = tape.constant(kernel.clone());
            let bv = tape.constant(bias.clone());
            let out = if stride == 1 {
                submanifold_sparse_conv(&mut tape, &v, kv, Some(bv)).unwrap()
            } else {
                strided_sparse_conv(&mut tape, &v, kv, Some(bv), stride).unwrap()
            };
            let got = SparseFeatureMap::from_tape(&tape, &out);
            let (want, ho, wo) = dense_conv(&dense_in, &kernel, &bias, stride);
            let expected_sites = if stride == 1 {
                let mut c = coords.clone();
                c.sort();
                c
            } else {
                strided_active_sites(&coords, h, w, k, stride)
            };
            let mut got_sites = got.geom.coords().to_vec();
            got_sites.sort();
            sites_ok &= got_sites == expected_sites && (got.geom.h, got.geom.w) == (ho, wo);
            for (i, &(r, c)) in got.geom.coords().iter().enumerate() {
                for o in 0..c_out {
                    let d = (got.features.data()[i * c_out + o] - want[(o * ho + r) * wo + c]).abs();
                    worst = worst.max(d);
                }
            }
        }
    }
    let pass = maps >= 20 && sites_ok && worst <= 1e-6;
    report(
        2,
        "sparse/dense oracle",
        pass,
        &format!("{} maps up to 32x32, max abs diff {:.2e}, active sets match {}", maps, worst, sites_ok),
    );
    assert!(pass);
}

#[test]
fn criterion_3_eval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut monotone_violations = 0;
    let instances = 300;
    for _ in 0..instances {
        let (nd, ng) = (rng.gen_range(0..=8), rng.gen_range(0..=8));
        let dets = random_boxes(&mut rng, nd, 3.0, true);
        let gts = random_boxes(&mut rng, ng, 3.0, false);
        let mut tps = Vec::new();
        for thr in THRESHOLDS {
            let m = match_frame(&dets, &gts, thr);
            let got: Vec<(usize, Option<usize>)> = m.order.iter().copied().zip(m.matched_gt.iter().copied()).collect();
            if got != greedy_oracle(&dets, &gts, thr) {
                mismatches += 1;
            }
            tps.push(m.tp.iter().filter(|&&x| x).count());
        }
        if tps.windows(2).any(|w| w[0] > w[1]) {
            monotone_violations += 1;
        }
    }
    let perfect = average_precision(&[(0.9, true), (0.8, true)], 2);
    let all_fp = average_precision(&[(0.9, false), (0.8, false)], 2);
    let hand = average_precision(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)], 2);
    let hand_ok = (perfect - 1.0).abs() <= 1e-9 && all_fp.abs() <= 1e-9 && (hand - 253.0 / 303.0).abs() <= 1e-9;
    let pass = mismatches == 0 && monotone_violations == 0 && hand_ok;
    report(
        3,
        "eval oracle",
        pass,
        &format!(
            "{} instances, {} matching mismatches, {} threshold-monotonicity violations, hand AP {:.9}",
            instances, mismatches, monotone_violations, hand
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_encode_decode_round_trip() {
    let grid = HeadGrid::covering((-9.6, 9.6), (-9.6, 9.6), (48, 48));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_center, mut worst_size, mut worst_yaw): (Real, Real, Real) = (0.0, 0.0, 0.0);
    let mut count_ok = true;
    for _ in 0..50 {
        let mut planted: Vec<Box3D> = Vec::new();
        let want = rng.gen_range(1..=12);
        let mut tries = 0;
        while planted.len() < want && tries < 1000 {
            tries += 1;
            let center = [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-1.5..-0.5)];
            let size = [rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2), rng.gen_range(1.4..2.0)];
            let b = Box3D::new(center, size, rng.gen_range(-3.1..3.1), 0);
            let far = planted.iter().all(|p| {
                let du = (p.center[0] - b.center[0]) / grid.cell.0;
                let dv = (p.center[1] - b.center[1]) / grid.cell.1;
                (du * du + dv * dv).sqrt() > 3.0
            });
            if far {
                planted.push(b);
            }
        }
        let t = build_targets(&planted, &grid, 1);
        let pred = HeadOutput {
            heatmap: t.heatmap.clone(),
            regression: t.regression.clone(),
        };
        let cfg = DecodeConfig {
            max_dets: 100,
            ..DecodeConfig::default()
        };
        let decoded = decode(&pred, &grid, &cfg).unwrap();
        count_ok &= decoded.len() == planted.len();
        for p in &planted {
            let d = decoded
                .iter()
                .min_by(|a, b| a.bev_distance(p).total_cmp(&b.bev_distance(p)))
                .unwrap();
            worst_center = worst_center.max(d.bev_distance(p) / grid.cell.0.min(grid.cell.1));
            for k in 0..3 {
                worst_size = worst_size.max((d.size[k] - p.size[k]).abs() / p.size[k]);
            }
            worst_yaw = worst_yaw.max(wrap_angle(d.yaw - p.yaw).abs());
        }
    }
    let pass = count_ok && worst_center <= 0.5 && worst_size <= 1e-6 && worst_yaw <= 1e-6;
    report(
        4,
        "encode/decode round trip",
        pass,
        &format!(
            "50 sets, center err {:.2e} cells, size rel err {:.2e}, yaw err {:.2e}, counts match {}",
            worst_center, worst_size, worst_yaw, count_ok
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_overfit_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let tables = desk_dataset(dir.path(), 8, 2, 11);
    let start = Instant::now();
    let cfg = RunConfig {
        train_split: "all".into(),
        val_split: String::new(),
        scales: vec![0.05, 0.075],
        epochs: 500,
        max_steps: 500,
        batch_size: 16,
        ..RunConfig::default()
    };
    let mut model = Hmfn::new(&cfg).unwrap();
    let tokens = split_samples(&tables, "all", 0).unwrap();
    let frames = prepare_samples(&model, dir.path(), &tables, &tokens).unwrap();
    let out = train(&mut model, &frames, None, None).unwrap();
    let results = infer(&model, &frames).unwrap();
    let gt = dataset_io::ground_truth(&tables, &tokens);
    let r = evaluate(&results.results, &gt, &eval_config_for(&cfg));
    let elapsed = start.elapsed();
    let ap2 = r.ap_at(2.0).unwrap();
    let losses: Vec<Real> = out.steps.iter().map(|s| s.loss).collect();
    let first = losses[0];
    let last = *losses.last().unwrap();
    let monotone = losses[..50].windows(2).all(|w| w[1] < w[0]);
    let bounded = losses.iter().all(|&l| l >= 0.0 && l.is_finite());
    let pass = ap2 >= 0.8
        && out.steps.len() <= 500
        && elapsed <= OVERFIT_BUDGET
        && monotone
        && bounded
        && last < 0.2 * first;
    report(
        5,
        "overfit fixture",
        pass,
        &format!(
            "{} frames, {} steps, AP@2.0 {:.4}, loss {:.3} -> {:.3} ({:.1}%), first 50 strictly decreasing {}, {:.0}s",
            frames.len(),
            out.steps.len(),
            ap2,
            first,
            last,
            100.0 * last / first,
            monotone,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn ablation_map(root: &Path, tables: &dataset_io::DatasetTables, scales: &[Real], seed: u64) -> Real {
    let cfg = RunConfig {
        scales: scales.to_vec(),
        seed,
        epochs: 1000,
        max_steps: 200,
        batch_size: 4,
        ..RunConfig::default()
    };
    let mut model = Hmfn::new(&cfg).unwrap();
    let train_tokens = split_samples(tables, "train", 0).unwrap();
    let val_tokens = split_samples(tables, "val", 0).unwrap();
    let frames = prepare_samples(&model, root, tables, &train_tokens).unwrap();
    let val = prepare_samples(&model, root, tables, &val_tokens).unwrap();
    train(&mut model, &frames, None, None).unwrap();
    let gt = dataset_io::ground_truth(tables, &val_tokens);
    evaluate(&infer(&model, &val).unwrap().results, &gt, &eval_config_for(&cfg)).map
}

#[test]
fn criterion_6_ablation_trend() {
    let dir = tempfile::tempdir().unwrap();
    let tables = desk_dataset(dir.path(), 30, 2, 5);
    let mut rows = Vec::new();
    for seed in 0..3 {
        let fine_first = ablation_map(dir.path(), &tables, &[0.05, 0.075], seed);
        let single = ablation_map(dir.path(), &tables, &[0.075], seed);
        let coarse_first = ablation_map(dir.path(), &tables, &[0.075, 0.05], seed);
        rows.push((fine_first, single, coarse_first));
    }
    let beats_single = rows.iter().all(|&(f, s, _)| f >= s);
    let beats_coarse = rows.iter().filter(|&&(f, _, c)| f >= c).count();
    let pass = beats_single && beats_coarse >= 2;
    let detail: Vec<String> = rows
        .iter()
        .map(|(f, s, c)| format!("fine-first {:.3} single {:.3} coarse-first {:.3}", f, s, c))
        .collect();
    report(
        6,
        "ablation trend",
        pass,
        &format!("{}; fine>=coarse on {}/3 seeds", detail.join(" | "), beats_coarse),
    );
    assert!(pass);
}

#[test]
fn criterion_7_synthetic_calibration() {
    let target = scene_synth::pfsd_target();
    let cals = scene_synth::calibrate_layouts(&LayoutKind::ALL, &target, 0.1, 0).unwrap();
    let plan: Vec<_> = cals.into_iter().map(|(k, c)| (k, c.crowd)).collect();
    let lidar = LidarModel {
        beams: 8,
        azimuth_step_deg: 2.0,
        ..LidarModel::desk()
    };
    let ds = dataset_io::synthesize(10, 10, &plan, &lidar, 7).unwrap();
    let s = dataset_io::dataset_density(&ds.tables).unwrap();
    let rel = |got: Real, want: Real| (got - want).abs() / want;
    let pass = rel(s.pedes_per_frame, 32.0) <= 0.10
        && rel(s.density_2, 2.6) <= 0.20
        && rel(s.density_5, 6.0) <= 0.20
        && rel(s.density_10, 11.6) <= 0.20;
    report(7, "synthetic calibration", pass, &s.table_row("calibrated"));
    assert!(pass);
}

fn table_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(root.join(dataset_io::VERSION_DIR))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_8_dataset_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let tables = desk_dataset(&a, 30, 2, 8);
    write_dataset(&load_dataset(&a).unwrap(), &b).unwrap();
    let round_trip = table_bytes(&a) == table_bytes(&b) && load_dataset(&b).unwrap() == tables;

    let mut detected = 0;
    let classes = corruptions();
    for c in &classes {
        let mut t = tables.clone();
        let token = (c.apply)(&mut t);
        if validate(&t).iter().any(|v| v.token == token) {
            detected += 1;
        }
    }

    let s1 = split_scenes(&tables, DEFAULT_RATIOS, 3, true).unwrap();
    let s2 = split_scenes(&tables, DEFAULT_RATIOS, 3, true).unwrap();
    let n = tables.scene.len();
    let mut all: Vec<&String> = s1.train.iter().chain(&s1.val).chain(&s1.test).collect();
    all.sort();
    let before = all.len();
    all.dedup();
    let disjoint = before == all.len();
    let exhaustive = all.len() == n;
    let near = |got: usize, ratio: Real| (got as Real - n as Real * ratio).abs() <= 1.0;
    let ratio_ok = near(s1.train.len(), DEFAULT_RATIOS.0) && near(s1.val.len(), DEFAULT_RATIOS.1) && near(s1.test.len(), DEFAULT_RATIOS.2);
    let layouts = |set: &[String]| {
        let mut k: Vec<&str> = set.iter().map(|s| tables.layout_of(s).unwrap()).collect();
        k.sort();
        k.dedup();
        k.len()
    };
    let stratified = layouts(&s1.val) >= 4 && layouts(&s1.test) >= 4;
    let pass = round_trip && detected == classes.len() && s1 == s2 && disjoint && exhaustive && ratio_ok && stratified;
    report(
        8,
        "dataset integrity",
        pass,
        &format!(
            "round trip {}, corruptions {}/{}, split {}/{}/{} deterministic {} disjoint {} exhaustive {} layouts val {} test {}",
            round_trip,
            detected,
            classes.len(),
            s1.train.len(),
            s1.val.len(),
            s1.test.len(),
            s1 == s2,
            disjoint,
            exhaustive,
            layouts(&s1.val),
            layouts(&s1.test)
        ),
    );
    assert!(pass);
}

struct PipelineRun {
    report: EvalReport,
    results: Vec<u8>,
    losses: Vec<Real>,
    checkpoint: Vec<u8>,
}

fn pipeline(root: &Path) -> PipelineRun {
    let tables = desk_dataset(&root.join("data"), 5, 2, 99);
    let cfg = RunConfig {
        data_root: root.join("data"),
        out_dir: root.join("run"),
        train_split: "train".into(),
        val_split: String::new(),
        epochs: 100,
        max_steps: 50,
        seed: 3,
        ..RunConfig::default()
    };
    let summary = training::run_training(&cfg).unwrap();
    let model = Hmfn::load(&cfg, &cfg.out_dir.join("best.ckpt")).unwrap();
    let tokens = split_samples(&tables, "all", 0).unwrap();
    let frames = prepare_samples(&model, &cfg.data_root, &tables, &tokens).unwrap();
    let results = infer(&model, &frames).unwrap();
    let path = root.join("results.json");
    write_results(&path, &results).unwrap();
    let gt = dataset_io::ground_truth(&tables, &tokens);
    PipelineRun {
        report: evaluate(&results.results, &gt, &eval_config_for(&cfg)),
        results: fs::read(&path).unwrap(),
        losses: summary.outcome.steps.iter().map(|s| s.loss).collect(),
        checkpoint: fs::read(cfg.out_dir.join("best.ckpt")).unwrap(),
    }
}

#[test]
fn criterion_9_determinism() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = pipeline(d1.path());
    let b = pipeline(d2.path());
    let same_report = a.report == b.report;
    let pass = same_report && a.results == b.results && a.losses == b.losses && a.checkpoint == b.checkpoint && a.losses.len() == 50;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "{} steps, reports equal {}, results bytes equal {}, loss curves equal {}, mAP {:.4}",
            a.losses.len(),
            same_report,
            a.results == b.results,
            a.losses == b.losses,
            a.report.map
        ),
    );
    assert!(pass);
}

#[test]
fn checkpoint_reload_reproduces_inference() {
    let dir = tempfile::tempdir().unwrap();
    let tables = desk_dataset(dir.path(), 2, 1, 6);
    let cfg = RunConfig {
        epochs: 2,
        batch_size: 1,
        ..RunConfig::default()
    };
    let mut model = Hmfn::new(&cfg).unwrap();
    let tokens = split_samples(&tables, "all", 0).unwrap();
    let frames = prepare_samples(&model, dir.path(), &tables, &tokens).unwrap();
    train(&mut model, &frames, None, None).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    training::save_checkpoint(&ckpt, &model, None).unwrap();
    let back = Hmfn::load(&cfg, &ckpt).unwrap();
    for f in &frames {
        assert_eq!(model.predict(f).unwrap(), back.predict(f).unwrap());
    }
}
