//! `hmfn` command-line entry point.
//!
//! Exit codes: 0 success, 1 contract or validation failure, 2 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hmfn::dataset_io::{self, DEFAULT_RATIOS};
use hmfn::eval::{self, EvalConfig};
use hmfn::gradcheck;
use hmfn::scene_synth::{self, CrowdModel, LayoutKind, LidarModel, DEFAULT_FRAMES};
use hmfn::numerics::Real;
use hmfn::training::{self, Hmfn, RunConfig};
use hmfn::{Error, Result};

#[derive(Parser)]
#[command(name = "hmfn", version, about = "Multi-scale pillar pedestrian detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Check dataset tables for integrity violations.
    Validate(RootArg),
    /// Print crowd density statistics.
    Stats(RootArg),
    /// Write the train/val/test scene split.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run a checkpoint over a split and write a results file.
    Infer(InferArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size crowd and 128-beam scanner.
    Full,
    /// Small crowd near the sensor and a 32-beam scanner.
    Desk,
}

#[derive(Args)]
struct SynthArgs {
    /// Layout kind, or `all` to cycle through every kind.
    #[arg(long, default_value = "all")]
    layout: String,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = DEFAULT_FRAMES)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Tune the crowd per layout to the reference density statistics.
    #[arg(long)]
    calibrate_to_pfsd: bool,
}

#[derive(Args)]
struct RootArg {
    #[arg(long)]
    root: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; defaults to `<root>/splits.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated pillar sizes in meters, reference scale first.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    train_split: Option<String>,
    #[arg(long)]
    val_split: Option<String>,
    /// Append per-point velocity channels.
    #[arg(long)]
    speed: bool,
    /// Train on every annotated class, not only pedestrians.
    #[arg(long)]
    all_classes: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to `config.toml` beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Only count boxes centered within this half extent (meters).
    #[arg(long)]
    range: Option<f64>,
    /// Keep ground-truth boxes without lidar returns.
    #[arg(long)]
    include_empty_gt: bool,
    /// Write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write precision/recall points per threshold as text.
    #[arg(long)]
    pr_curve: Option<PathBuf>,
    #[arg(long, default_value = "HMFN")]
    label: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all` or a comma-separated list of op names.
    #[arg(long, default_value = "all")]
    ops: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| hmfn_io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| hmfn_io(path, e))
}

fn hmfn_io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Contract("no scenes requested".into()));
    }
    let kinds: Vec<LayoutKind> = if a.layout == "all" {
        LayoutKind::ALL.to_vec()
    } else {
        vec![a.layout.parse()?]
    };
    let (base_crowd, lidar) = match a.preset {
        Preset::Full => (CrowdModel::default(), LidarModel::default()),
        Preset::Desk => (CrowdModel::desk(), LidarModel::desk()),
    };
    let plan: Vec<(LayoutKind, CrowdModel)> = if a.calibrate_to_pfsd {
        let cals = scene_synth::calibrate_layouts(&kinds, &scene_synth::pfsd_target(), 0.1, a.seed)?;
        for (k, c) in &cals {
            println!("{}", c.achieved.table_row(&format!("calib {}", k)));
        }
        cals.into_iter().map(|(k, c)| (k, c.crowd)).collect()
    } else {
        kinds.iter().map(|&k| (k, base_crowd.clone())).collect()
    };
    let ds = dataset_io::synthesize(a.scenes, a.frames, &plan, &lidar, a.seed)?;
    ds.write(&a.out)?;
    let stats = dataset_io::dataset_density(&ds.tables)?;
    let resolved = json!({
        "layouts": kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>(),
        "scenes": a.scenes,
        "frames": a.frames,
        "seed": a.seed,
        "calibrate_to_pfsd": a.calibrate_to_pfsd,
        "crowds": plan.iter().map(|(k, c)| json!({"layout": k.as_str(), "crowd": c})).collect::<Vec<_>>(),
        "lidar": lidar,
        "achieved": stats,
    });
    write_text(&a.out.join("synth_config.json"), &pretty(&resolved))?;
    println!("{}", stats.table_row("synthetic"));
    Ok(())
}

fn validate(a: RootArg) -> Result<bool> {
    let t = dataset_io::load_dataset(&a.root)?;
    let v = dataset_io::validate(&t);
    for x in &v {
        println!("{}", x);
    }
    if v.is_empty() {
        println!("ok: {} scenes, {} samples, {} annotations", t.scene.len(), t.sample.len(), t.sample_annotation.len());
    } else {
        println!("{} violation(s)", v.len());
    }
    Ok(v.is_empty())
}

fn stats(a: RootArg) -> Result<()> {
    let t = dataset_io::load_dataset(&a.root)?;
    println!("{}", dataset_io::dataset_density(&t)?.table_row("synthetic"));
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let t = dataset_io::load_dataset(&a.root)?;
    let s = dataset_io::split_scenes(&t, DEFAULT_RATIOS, a.seed, !a.no_stratify)?;
    let out = a.out.unwrap_or_else(|| a.root.join("splits.json"));
    let manifest = json!({"seed": a.seed, "stratify": !a.no_stratify, "ratios": DEFAULT_RATIOS, "split": s});
    write_text(&out, &pretty(&manifest))?;
    println!("train {} | val {} | test {}", s.train.len(), s.val.len(), s.test.len());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.data_root {
        cfg.data_root = v.clone();
    }
    if let Some(v) = &a.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v as _;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.scales {
        cfg.scales = v.iter().map(|&x| x as _).collect();
    }
    if let Some(v) = &a.train_split {
        cfg.train_split = v.clone();
    }
    if let Some(v) = &a.val_split {
        cfg.val_split = v.clone();
    }
    if a.speed {
        cfg.speed = true;
    }
    if a.all_classes {
        cfg.pedes_only = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let summary = training::run_training(&cfg)?;
    let o = &summary.outcome;
    let last = o.steps.last().map_or(f64::NAN, |s| s.loss as f64);
    println!(
        "trained {} steps on {} frames, final loss {:.4}, best val mAP {}",
        o.steps.len(),
        summary.train_frames,
        last,
        o.best_val_map.map_or("n/a".into(), |m| format!("{:.4}", m))
    );
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg_path = a
        .config
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("config.toml"));
    let mut cfg = RunConfig::load(&cfg_path)?;
    cfg.data_root = a.root.clone();
    let model = Hmfn::load(&cfg, &a.checkpoint)?;
    let tables = dataset_io::load_dataset(&a.root)?;
    dataset_io::ensure_valid(&tables)?;
    let tokens = training::split_samples(&tables, &a.split, a.split_seed)?;
    let frames = training::prepare_samples(&model, &a.root, &tables, &tokens)?;
    let results = training::infer(&model, &frames)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| hmfn_io(parent, e))?;
    }
    eval::write_results(&a.out, &results)?;
    write_text(&a.out.with_extension("config.toml"), &cfg.to_toml_string()?)?;
    println!("{} detections over {} frames -> {}", results.results.len(), frames.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let results = eval::read_results(&a.results)?;
    let tables = dataset_io::load_dataset(&a.root)?;
    let tokens = training::split_samples(&tables, &a.split, a.split_seed)?;
    let gt = dataset_io::ground_truth(&tables, &tokens);
    let cfg = EvalConfig {
        include_empty_gt: a.include_empty_gt,
        bev_range: a.range.map(|r| {
            let r = r as Real;
            [-r, r, -r, r]
        }),
        ..EvalConfig::default()
    };
    let report = eval::evaluate(&results.results, &gt, &cfg);
    print!("{}", eval::format_report_table(&a.label, &report));
    if let Some(p) = &a.report {
        write_text(p, &pretty(&json!({"config": cfg, "report": report})))?;
    }
    if let Some(p) = &a.pr_curve {
        let labeled = eval::label_detections(&results.results, &gt, &cfg);
        let mut text = String::from("# threshold recall precision\n");
        for (thr, labels) in cfg.thresholds.iter().zip(&labeled.per_threshold) {
            for (r, p) in eval::pr_curve(labels, labeled.total_gts) {
                text.push_str(&format!("{} {:.6} {:.6}\n", thr, r, p));
            }
        }
        write_text(p, &text)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let ops: Vec<&str> = if a.ops == "all" {
        gradcheck::OPS.to_vec()
    } else {
        a.ops.split(',').map(str::trim).collect()
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
    let reports = gradcheck::run(&ops, &seeds)?;
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<26} max rel err {:.3e}  cases {:>3}  {}", r.op, r.max_rel_error, r.cases, status);
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Validate(a) => validate(a),
        Command::Stats(a) => stats(a).map(|_| true),
        Command::Split(a) => split(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
