use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmfn::dataset_io;
use hmfn::eval::{write_results, DetectionRecord, ResultsFile};
use hmfn::training::RunConfig;

fn hmfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmfn"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, scenes: &str, seed: &str) -> Output {
    hmfn(&[
        "synth",
        "--scenes",
        scenes,
        "--frames",
        "2",
        "--preset",
        "desk",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ])
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_scenes_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(&dir.path().join("d"), "0", "0");
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no scenes requested"));
}

#[test]
fn synth_is_byte_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&synth(&a, "3", "9")), 0);
    assert_eq!(code(&synth(&b, "3", "9")), 0);
    assert_eq!(files_under(&a), files_under(&b));
    assert!(a.join("synth_config.json").exists());

    let v = hmfn(&["validate", "--root", a.to_str().unwrap()]);
    assert_eq!(code(&v), 0, "{}", stdout(&v));
    let s = hmfn(&["stats", "--root", a.to_str().unwrap()]);
    assert!(stdout(&s).contains("Pedes/Fr"));
}

#[test]
fn validation_failures_and_missing_files_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    assert_eq!(code(&synth(&root, "2", "1")), 0);
    let table = root.join("v1.0/sample.json");
    let text = fs::read_to_string(&table).unwrap();
    let first_token = text.split("\"token\": \"").nth(1).unwrap()[..32].to_string();
    fs::write(&table, text.replacen(&first_token, "ffffffffffffffffffffffffffffffff", 1)).unwrap();
    let v = hmfn(&["validate", "--root", root.to_str().unwrap()]);
    assert_eq!(code(&v), 1);
    assert!(stdout(&v).contains("violation"));

    let missing = hmfn(&["stats", "--root", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
    assert_eq!(code(&hmfn(&["stats", "--root", "x", "--bogus"])), 1);
}

#[test]
fn eval_of_perfect_detections_prints_a_full_row() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    assert_eq!(code(&synth(&root, "4", "2")), 0);
    let t = dataset_io::load_dataset(&root).unwrap();
    let tokens: Vec<String> = t.sample.iter().map(|s| s.token.clone()).collect();
    let gt = dataset_io::ground_truth(&t, &tokens);
    let results: Vec<DetectionRecord> = gt
        .iter()
        .flat_map(|(tok, boxes)| {
            boxes.iter().filter(|g| g.num_lidar_pts > 0).map(move |g| {
                let mut b = g.bbox.clone();
                b.score = Some(1.0);
                DetectionRecord::from_box(tok, &b)
            })
        })
        .collect();
    let res = dir.path().join("perfect.json");
    write_results(&res, &ResultsFile { results }).unwrap();
    let curve = dir.path().join("pr.txt");
    let o = hmfn(&[
        "eval",
        "--results",
        res.to_str().unwrap(),
        "--root",
        root.to_str().unwrap(),
        "--split",
        "all",
        "--label",
        "perfect",
        "--pr-curve",
        curve.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("perfect")).unwrap();
    assert_eq!(row.matches("100.00").count(), 5, "{}", row);
    let pr = fs::read_to_string(&curve).unwrap();
    assert!(pr.lines().skip(1).all(|l| l.ends_with("1.000000")));
}

#[test]
fn gradcheck_all_ops_passes() {
    let o = hmfn(&["gradcheck", "--ops", "all", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("ok")).count(), hmfn::gradcheck::OPS.len());
    assert_eq!(code(&hmfn(&["gradcheck", "--ops", "warp"])), 1);
}

#[test]
fn train_infer_eval_with_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    assert_eq!(code(&synth(&root, "6", "4")), 0);
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, "epochs = 1\nseed = 5\nbatch_size = 2\n[model]\nhead_hidden = 8\n").unwrap();
    let run = dir.path().join("run");
    let o = hmfn(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data-root",
        root.to_str().unwrap(),
        "--out-dir",
        run.to_str().unwrap(),
        "--seed",
        "7",
        "--max-steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = RunConfig::load(&run.join("config.toml")).unwrap();
    // flag beats file, file beats default
    assert_eq!(resolved.seed, 7);
    assert_eq!(resolved.epochs, 1);
    assert_eq!(resolved.model.head_hidden, 8);
    assert_eq!(resolved.base_lr, RunConfig::default().base_lr);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let res = dir.path().join("out/res.json");
    let o = hmfn(&[
        "infer",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--root",
        root.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        res.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = hmfn(&[
        "eval",
        "--results",
        res.to_str().unwrap(),
        "--root",
        root.to_str().unwrap(),
        "--split",
        "val",
        "--range",
        "4.8",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("mAP"));

    let wrong = dir.path().join("wrong.toml");
    fs::write(&wrong, "[model]\nhead_hidden = 4\n").unwrap();
    let o = hmfn(&[
        "infer",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--config",
        wrong.to_str().unwrap(),
        "--root",
        root.to_str().unwrap(),
        "--out",
        res.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}
