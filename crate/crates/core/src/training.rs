//! Model assembly, AdamW with a one-cycle schedule, the training loop and inference.
//!
//! A batch is processed frame by frame on separate tapes; gradients are summed and
//! averaged before the optimizer step, which is equivalent to padding plus masking.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{fuse_scale, run_scale_branch, ScaleBranch, ScaleBranchConfig};
use crate::dataset_io::{self, DatasetTables, PEDESTRIAN_CLASS};
use crate::detection_head::{
    build_targets, decode, detection_loss_graph, head_output, Box3D, CenterHead, DecodeConfig, HeadGrid, HeadOutput,
    Targets,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionRecord, EvalConfig, EvalReport, GroundTruth, GtBox, ResultsFile};
use crate::fusion::{align_scales, attention_fuse, AttentionFusion, FusionConfig};
use crate::numerics::{read_checkpoint, write_checkpoint, Real, Tape, Tensor, UpsampleMode, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pillar_encoder::{assign_pillars, encode_pillars, scatter_to_bev, PillarGridSpec, PillarizedScene, PointCloud};

pub const ADAM_BETAS: (Real, Real) = (0.9, 0.999);
pub const ADAM_EPS: Real = 1e-8;
/// Fraction of the schedule spent warming up.
pub const WARMUP_FRACTION: Real = 0.4;
/// Warmup starts at `base_lr / START_DIV`.
pub const START_DIV: Real = 10.0;
/// Annealing ends at `base_lr / FINAL_DIV`.
pub const FINAL_DIV: Real = 1000.0;
/// Slack around a box when assigning a point's velocity (meters).
const VELOCITY_BOX_MARGIN: Real = 0.1;
const CONFIG_HASH_PREFIX: &str = "meta.config_hash/";

/// Architecture hyperparameters shared by every scale branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Detection range is `[-range, range)` on both BEV axes.
    pub range: Real,
    /// Pillar feature width `E`.
    pub feature_dim: usize,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub refine_depth: usize,
    pub refine_channels: usize,
    pub out_channels: usize,
    pub fusion_hidden: usize,
    pub fusion_mode: UpsampleMode,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            range: 4.8,
            feature_dim: 8,
            max_points_per_pillar: 32,
            max_pillars: 12000,
            stage_channels: vec![8, 16, 16],
            stage_strides: vec![1, 2, 2],
            refine_depth: 1,
            refine_channels: 16,
            out_channels: 16,
            fusion_hidden: 0,
            fusion_mode: UpsampleMode::Bilinear,
            head_hidden: 16,
        }
    }
}

/// Everything a training or inference run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// `train`, `val`, `test` or `all`.
    pub train_split: String,
    /// Empty disables per-epoch validation.
    pub val_split: String,
    pub split_seed: u64,
    /// Pillar sizes in meters; the first is the fusion reference grid.
    pub scales: Vec<Real>,
    /// Append per-point BEV velocity channels.
    pub speed: bool,
    pub pedes_only: bool,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: Real,
    pub weight_decay: Real,
    pub clip_norm: Real,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            train_split: "train".into(),
            val_split: "val".into(),
            split_seed: 0,
            scales: vec![0.05, 0.075],
            speed: false,
            pedes_only: true,
            epochs: 20,
            max_steps: 0,
            batch_size: 4,
            base_lr: 1e-3,
            weight_decay: 0.01,
            clip_norm: 10.0,
            seed: 0,
            eval_every: 1,
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

/// Fields that change parameter shapes or the meaning of inputs.
#[derive(Serialize)]
struct ArchitectureKey<'a> {
    scales: &'a [Real],
    speed: bool,
    num_classes: usize,
    model: &'a ModelConfig,
}

impl RunConfig {
    /// Large-scale preset: 51.2 m grid, 64-wide pillars, three stages up to 256 channels.
    pub fn full_preset() -> Self {
        RunConfig {
            epochs: 20,
            batch_size: 4,
            model: ModelConfig {
                range: 25.6,
                feature_dim: 64,
                stage_channels: vec![64, 128, 256],
                stage_strides: vec![1, 2, 2],
                refine_depth: 2,
                refine_channels: 128,
                out_channels: 128,
                head_hidden: 64,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_classes(&self) -> usize {
        if self.pedes_only {
            1
        } else {
            2
        }
    }

    /// Short hex digest of the architecture-relevant fields.
    pub fn config_hash(&self) -> String {
        let key = ArchitectureKey {
            scales: &self.scales,
            speed: self.speed,
            num_classes: self.num_classes(),
            model: &self.model,
        };
        let json = serde_json::to_string(&key).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one pillar scale is required".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("pillar sizes {:?} must be positive", self.scales)));
        }
        let rising = self.scales.windows(2).all(|w| w[0] < w[1]);
        let falling = self.scales.windows(2).all(|w| w[0] > w[1]);
        if !(rising || falling) {
            return Err(Error::Config(format!("pillar sizes {:?} must be strictly monotone", self.scales)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(self.model.range > 0.0) {
            return Err(Error::Config("detection range must be positive".into()));
        }
        Ok(())
    }
}

/// One pillar size: its grid, encoder weight and branch.
#[derive(Clone, Debug)]
struct ScaleModule {
    spec: PillarGridSpec,
    encoder: ParamId,
    branch: ScaleBranch,
}

/// The full detector.
#[derive(Clone, Debug)]
pub struct Hmfn {
    pub cfg: RunConfig,
    pub store: ParamStore,
    scales: Vec<ScaleModule>,
    fusion: Option<AttentionFusion>,
    head: CenterHead,
    pub head_grid: HeadGrid,
}

/// Raw point width: x, y, z, intensity, plus vx, vy with speed channels.
pub fn input_dims(speed: bool) -> usize {
    if speed {
        6
    } else {
        4
    }
}

impl Hmfn {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = input_dims(cfg.speed);
        let mut scales = Vec::with_capacity(cfg.scales.len());
        for (i, &size) in cfg.scales.iter().enumerate() {
            let spec = PillarGridSpec {
                max_points_per_pillar: m.max_points_per_pillar,
                max_pillars: m.max_pillars,
                feature_dim: m.feature_dim,
                ..PillarGridSpec::square(m.range, size)
            };
            spec.validate()?;
            let branch_cfg = ScaleBranchConfig {
                pillar_size: size,
                stage_channels: m.stage_channels.clone(),
                stage_strides: m.stage_strides.clone(),
                refine_depth: m.refine_depth,
                refine_channels: m.refine_channels,
                out_channels: m.out_channels,
            };
            branch_cfg.validate()?;
            let (gm, gk) = spec.grid_dims();
            let stride = branch_cfg.total_stride();
            if gm % stride != 0 || gk % stride != 0 {
                return Err(Error::Config(format!(
                    "pillar size {} gives a {}x{} grid, not divisible by total stride {}",
                    size, gm, gk, stride
                )));
            }
            let fan_in = (d + 2) as Real;
            let encoder = store.add(
                format!("scale{}.encoder.weight", i),
                Tensor::randn(&[d + 2, m.feature_dim], (2.0 / fan_in).sqrt(), &mut rng),
            );
            let branch = ScaleBranch::new(branch_cfg, m.feature_dim, &format!("scale{}", i), &mut store, &mut rng)?;
            scales.push(ScaleModule { spec, encoder, branch });
        }
        let fusion = if scales.len() > 1 {
            let fc = FusionConfig {
                reference: 0,
                mode: m.fusion_mode,
                hidden: m.fusion_hidden,
            };
            Some(AttentionFusion::new(fc, scales.len(), m.out_channels, &mut store, &mut rng)?)
        } else {
            None
        };
        let head = CenterHead::new(m.out_channels, m.head_hidden, cfg.num_classes(), &mut store, &mut rng);
        let reference = &scales[0];
        let (gm, gk) = reference.spec.grid_dims();
        let stride = reference.branch.cfg.total_stride();
        let head_grid = HeadGrid::covering(reference.spec.x_range, reference.spec.y_range, (gm / stride, gk / stride));
        Ok(Hmfn {
            cfg: cfg.clone(),
            store,
            scales,
            fusion,
            head,
            head_grid,
        })
    }

    pub fn pillar_specs(&self) -> Vec<&PillarGridSpec> {
        self.scales.iter().map(|s| &s.spec).collect()
    }

    /// `(heatmap logits, regression)` for one prepared frame.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, frame: &PreparedFrame) -> Result<(Var, Var)> {
        if frame.pillars.len() != self.scales.len() {
            return Err(Error::Contract(format!(
                "frame prepared for {} scales, model has {}",
                frame.pillars.len(),
                self.scales.len()
            )));
        }
        let mut maps = Vec::with_capacity(self.scales.len());
        for (scale, pillars) in self.scales.iter().zip(&frame.pillars) {
            let feats = encode_pillars(tape, pillars, bound.var(scale.encoder))?;
            let bev = scatter_to_bev(feats, &pillars.pillar_coords, &scale.spec)?;
            let (stages, refined) = run_scale_branch(tape, &bev, &scale.branch, bound)?;
            let (k, b) = scale.branch.fuse_params();
            let last = stages.last().expect("at least one stage");
            maps.push(fuse_scale(tape, last, refined, bound.var(k), Some(bound.var(b)))?);
        }
        let fused = match &self.fusion {
            Some(f) => {
                let aligned = align_scales(tape, &maps, &f.cfg)?;
                attention_fuse(tape, &aligned, f, bound)?.0
            }
            None => maps[0],
        };
        self.head.forward(tape, fused, bound)
    }

    /// Scalar loss and parameter gradients for one frame.
    pub fn loss_and_grads(&self, frame: &PreparedFrame) -> Result<(Real, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (heat, reg) = self.forward(&mut tape, &bound, frame)?;
        let loss = detection_loss_graph(&mut tape, heat, reg, &frame.targets)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.grads(&tape)))
    }

    pub fn predict(&self, frame: &PreparedFrame) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let (heat, reg) = self.forward(&mut tape, &bound, frame)?;
        Ok(head_output(&tape, heat, reg))
    }

    pub fn detect(&self, frame: &PreparedFrame) -> Result<Vec<Box3D>> {
        decode(&self.predict(frame)?, &self.head_grid, &self.cfg.decode)
    }

    /// Restore parameters from a checkpoint written for the same architecture.
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut model = Hmfn::new(cfg)?;
        let named = read_checkpoint(path)?;
        let want = cfg.config_hash();
        let stored = named.iter().find_map(|(n, _)| n.strip_prefix(CONFIG_HASH_PREFIX));
        match stored {
            Some(h) if h == want => {}
            Some(h) => {
                return Err(Error::Contract(format!(
                    "checkpoint was trained with config {} but the run config hashes to {}",
                    h, want
                )))
            }
            None => return Err(Error::Contract("checkpoint carries no config hash".into())),
        }
        model.store.load_named(&named)?;
        Ok(model)
    }
}

/// Inputs of one frame, pillarized once per scale and cached across epochs.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub sample_token: String,
    pub pillars: Vec<PillarizedScene>,
    pub targets: Targets,
}

fn token_seed(token: &str) -> u64 {
    token.get(..16).and_then(|h| u64::from_str_radix(h, 16).ok()).unwrap_or(0)
}

fn point_in_box(p: &[Real], b: &Box3D) -> bool {
    let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
    let (s, c) = b.yaw.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 + VELOCITY_BOX_MARGIN
        && ly.abs() <= b.size[1] / 2.0 + VELOCITY_BOX_MARGIN
        && (p[2] - b.center[2]).abs() <= b.size[2] / 2.0 + VELOCITY_BOX_MARGIN
}

/// Append `[vx, vy]` per point: the velocity of the annotated box holding the point, else zero.
pub fn add_velocity_channels(cloud: &PointCloud, boxes: &[(Box3D, [Real; 2])]) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Ok(PointCloud::empty(cloud.dims() + 2));
    }
    let extra: Vec<Vec<Real>> = cloud
        .iter()
        .map(|p| {
            boxes
                .iter()
                .find(|(b, _)| point_in_box(p, b))
                .map_or(vec![0.0, 0.0], |(_, v)| v.to_vec())
        })
        .collect();
    cloud.with_extra_channels(&extra)
}

/// Pillarize a cloud for every scale and build targets from its annotations.
pub fn prepare_frame(model: &Hmfn, sample_token: &str, cloud: &PointCloud, annotations: &[GtBox]) -> Result<PreparedFrame> {
    let want = input_dims(model.cfg.speed);
    if cloud.dims() != want {
        return Err(Error::dim(
            "prepare_frame",
            format!("cloud has {} channels, model expects {}", cloud.dims(), want),
        ));
    }
    let seed = token_seed(sample_token) ^ model.cfg.seed;
    let pillars = model
        .scales
        .iter()
        .enumerate()
        .map(|(i, s)| assign_pillars(cloud, &s.spec, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let visible: Vec<Box3D> = annotations
        .iter()
        .filter(|g| g.num_lidar_pts > 0 && (!model.cfg.pedes_only || g.bbox.class_id == PEDESTRIAN_CLASS))
        .map(|g| g.bbox.clone())
        .collect();
    Ok(PreparedFrame {
        sample_token: sample_token.to_string(),
        pillars,
        targets: build_targets(&visible, &model.head_grid, model.cfg.num_classes()),
    })
}

/// Load and prepare the given samples of an on-disk dataset.
pub fn prepare_samples(
    model: &Hmfn,
    root: &Path,
    tables: &DatasetTables,
    sample_tokens: &[String],
) -> Result<Vec<PreparedFrame>> {
    let velocities = if model.cfg.speed {
        dataset_io::annotation_velocities(tables)
    } else {
        HashMap::new()
    };
    let mut out = Vec::with_capacity(sample_tokens.len());
    for token in sample_tokens {
        let mut cloud = dataset_io::read_sample_cloud(root, tables, token)?;
        if model.cfg.speed {
            let boxes: Vec<(Box3D, [Real; 2])> = tables
                .sample_annotation
                .iter()
                .filter(|a| &a.sample_token == token)
                .map(|a| {
                    let v = velocities.get(&a.token).copied().unwrap_or([0.0, 0.0]);
                    (Box3D::new(a.translation, a.size, a.yaw, 0), v)
                })
                .collect();
            cloud = add_velocity_channels(&cloud, &boxes)?;
        }
        let annotations = dataset_io::sample_boxes(tables, token, model.cfg.pedes_only);
        out.push(prepare_frame(model, token, &cloud, &annotations)?);
    }
    Ok(out)
}

/// Sample tokens of a named split (`all` takes every scene).
pub fn split_samples(tables: &DatasetTables, split: &str, split_seed: u64) -> Result<Vec<String>> {
    let scenes: Vec<String> = if split == "all" {
        tables.scene.iter().map(|s| s.token.clone()).collect()
    } else {
        let s = dataset_io::split_scenes(tables, dataset_io::DEFAULT_RATIOS, split_seed, true)?;
        s.get(split)?.to_vec()
    };
    Ok(dataset_io::samples_of_scenes(tables, &scenes)
        .into_iter()
        .map(|s| s.token.clone())
        .collect())
}

/// Evaluation settings matching a model's detection range.
pub fn eval_config_for(cfg: &RunConfig) -> EvalConfig {
    let r = cfg.model.range;
    EvalConfig {
        bev_range: Some([-r, r, -r, r]),
        ..EvalConfig::default()
    }
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: Real, weight_decay: Real) {
    let (b1, b2) = ADAM_BETAS;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            p[i] -= lr * (update + weight_decay * p[i]);
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> Real {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x * x)
        .sum::<Real>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Learning rate at `step` of `total`: cosine warmup then cosine anneal. Steps past the end clamp.
pub fn one_cycle_lr(step: usize, total: usize, base_lr: Real) -> Real {
    let start = base_lr / START_DIV;
    let end = base_lr / FINAL_DIV;
    if total == 0 {
        return end;
    }
    let s = step.min(total) as Real;
    let t = total as Real;
    let warm = WARMUP_FRACTION * t;
    if s < warm {
        // s / (0.4 t) written to stay exact at the boundary
        let frac = 5.0 * s / (2.0 * t);
        start + (base_lr - start) * 0.5 * (1.0 - (std::f64::consts::PI as Real * frac).cos())
    } else {
        let frac = if t > warm { (5.0 * s - 2.0 * t) / (3.0 * t) } else { 1.0 };
        end + (base_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI as Real * frac).cos())
    }
}

/// Parameters, optimizer moments, step and config hash in one checkpoint.
pub fn save_checkpoint(path: &Path, model: &Hmfn, adam: Option<&AdamState>) -> Result<()> {
    let mut named = model.store.named();
    if let Some(a) = adam {
        for (i, n) in model.store.names().iter().enumerate() {
            named.push((format!("adam.m/{}", n), a.m[i].clone()));
            named.push((format!("adam.v/{}", n), a.v[i].clone()));
        }
        named.push(("meta.step".into(), Tensor::scalar(a.step as Real)));
    }
    named.push((format!("{}{}", CONFIG_HASH_PREFIX, model.cfg.config_hash()), Tensor::zeros(&[0])));
    write_checkpoint(path, &named)
}

/// Optimizer state stored by [`save_checkpoint`], if any.
pub fn load_adam_state(path: &Path, model: &Hmfn) -> Result<Option<AdamState>> {
    let named = read_checkpoint(path)?;
    let find = |k: &str| named.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone());
    let Some(step) = find("meta.step") else {
        return Ok(None);
    };
    let mut state = AdamState::new(model.store.values());
    for (i, n) in model.store.names().iter().enumerate() {
        let m = find(&format!("adam.m/{}", n));
        let v = find(&format!("adam.v/{}", n));
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == state.m[i].shape() && v.shape() == state.v[i].shape() => {
                state.m[i] = m;
                state.v[i] = v;
            }
            _ => return Err(Error::Contract(format!("checkpoint lacks optimizer state for {}", n))),
        }
    }
    state.step = step.item() as u64;
    Ok(state.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: Real,
    pub lr: Real,
    pub grad_norm: Real,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: Real,
    pub val_map: Option<Real>,
    pub val_ap: Vec<Real>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_val_map: Option<Real>,
    pub best_epoch: Option<usize>,
    /// Parameters with the best validation mAP (the final ones without validation).
    pub best_params: Vec<Tensor>,
    pub adam: AdamState,
}

/// Validation frames with their ground truth.
pub struct ValidationSet<'a> {
    pub frames: &'a [PreparedFrame],
    pub gt: &'a GroundTruth,
}

pub fn total_steps(cfg: &RunConfig, train_frames: usize) -> usize {
    let per_epoch = train_frames.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        total.min(cfg.max_steps)
    } else {
        total
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| Error::Contract(e.to_string()))?;
    writeln!(f, "{}", line).map_err(|e| Error::io(path, e))
}

/// Train in place. With `out_dir`, writes `metrics.jsonl`, `epochs.jsonl`, `best.ckpt` and `last.ckpt`.
pub fn train(
    model: &mut Hmfn,
    frames: &[PreparedFrame],
    val: Option<ValidationSet<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if frames.is_empty() {
        return Err(Error::Contract("no training frames".into()));
    }
    let cfg = model.cfg.clone();
    let total = total_steps(&cfg, frames.len());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in ["metrics.jsonl", "epochs.jsonl"] {
            File::create(dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
        }
    }
    let eval_cfg = eval_config_for(&cfg);
    let mut adam = AdamState::new(model.store.values());
    let mut outcome_steps = Vec::with_capacity(total);
    let mut epochs = Vec::new();
    let mut best: Option<(Real, usize, Vec<Tensor>)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch = 0;
    while step < total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let mut grads: Option<Vec<Tensor>> = None;
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = model.loss_and_grads(&frames[i])?;
                loss += l;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let n = batch.len() as Real;
            let mut grads = grads.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
            loss /= n;
            let lr = one_cycle_lr(step, total, cfg.base_lr);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            let skipped = !norm.is_finite() || !loss.is_finite();
            if skipped {
                warn!("step {}: non-finite gradient or loss, update skipped", step);
            } else {
                adam_step(model.store.values_mut(), &grads, &mut adam, lr, cfg.weight_decay);
            }
            let rec = StepRecord {
                step,
                epoch,
                loss,
                lr,
                grad_norm: norm,
                skipped,
            };
            if let Some(dir) = out_dir {
                append_line(&dir.join("metrics.jsonl"), &rec)?;
            }
            outcome_steps.push(rec);
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }
        let last_epoch = step >= total;
        let validate_now = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0) || last_epoch;
        let mut report: Option<EvalReport> = None;
        if let (Some(v), true) = (&val, validate_now) {
            if !v.frames.is_empty() {
                let results = infer(model, v.frames)?;
                report = Some(evaluate(&results.results, v.gt, &eval_cfg));
            }
        }
        let rec = EpochRecord {
            epoch,
            step,
            mean_loss: epoch_loss / epoch_steps.max(1) as Real,
            val_map: report.as_ref().map(|r| r.map),
            val_ap: report.as_ref().map(|r| r.ap.clone()).unwrap_or_default(),
        };
        info!("epoch {} step {} loss {:.4} val mAP {:?}", epoch, step, rec.mean_loss, rec.val_map);
        if let Some(map) = rec.val_map {
            if best.as_ref().map_or(true, |(b, _, _)| map > *b) {
                best = Some((map, epoch, model.store.values().to_vec()));
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), model, Some(&adam))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            append_line(&dir.join("epochs.jsonl"), &rec)?;
            save_checkpoint(&dir.join("last.ckpt"), model, Some(&adam))?;
        }
        epochs.push(rec);
        epoch += 1;
    }
    let (best_val_map, best_epoch, best_params) = match best {
        Some((m, e, p)) => (Some(m), Some(e), p),
        None => {
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), model, Some(&adam))?;
            }
            (None, None, model.store.values().to_vec())
        }
    };
    Ok(TrainOutcome {
        steps: outcome_steps,
        epochs,
        best_val_map,
        best_epoch,
        best_params,
        adam,
    })
}

/// Decoded detections for every frame.
pub fn infer(model: &Hmfn, frames: &[PreparedFrame]) -> Result<ResultsFile> {
    let mut results = Vec::new();
    for f in frames {
        for b in model.detect(f)? {
            results.push(DetectionRecord::from_box(&f.sample_token, &b));
        }
    }
    Ok(ResultsFile { results })
}

/// Summary of a full run from an on-disk dataset.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcome: TrainOutcome,
    pub train_frames: usize,
    pub val_frames: usize,
}

/// Load the dataset, prepare the splits, train, and write artifacts under `cfg.out_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    let tables = dataset_io::load_dataset(&cfg.data_root)?;
    dataset_io::ensure_valid(&tables)?;
    let mut model = Hmfn::new(cfg)?;
    let train_tokens = split_samples(&tables, &cfg.train_split, cfg.split_seed)?;
    let frames = prepare_samples(&model, &cfg.data_root, &tables, &train_tokens)?;
    let (val_frames, val_gt) = if cfg.val_split.is_empty() {
        (Vec::new(), GroundTruth::new())
    } else {
        let tokens = split_samples(&tables, &cfg.val_split, cfg.split_seed)?;
        let gt = dataset_io::ground_truth(&tables, &tokens);
        (prepare_samples(&model, &cfg.data_root, &tables, &tokens)?, gt)
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let resolved = cfg.out_dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;
    let val = (!val_frames.is_empty()).then(|| ValidationSet {
        frames: &val_frames,
        gt: &val_gt,
    });
    let outcome = train(&mut model, &frames, val, Some(&cfg.out_dir))?;
    Ok(RunSummary {
        outcome,
        train_frames: frames.len(),
        val_frames: val_frames.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            scales: vec![0.2, 0.3],
            batch_size: 2,
            epochs: 2,
            model: ModelConfig {
                range: 2.4,
                feature_dim: 4,
                stage_channels: vec![4, 4],
                stage_strides: vec![1, 2],
                refine_channels: 4,
                out_channels: 4,
                head_hidden: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn person(x: Real, y: Real) -> GtBox {
        GtBox {
            bbox: Box3D::new([x, y, -1.1], [0.7, 0.7, 1.8], 0.0, 0),
            num_lidar_pts: 10,
        }
    }

    fn cloud_around(centers: &[(Real, Real)]) -> PointCloud {
        let mut pts = Vec::new();
        for &(x, y) in centers {
            for i in 0..12 {
                let a = i as Real * 0.5;
                pts.extend_from_slice(&[x + 0.3 * a.cos(), y + 0.3 * a.sin(), -1.0 + 0.05 * i as Real, 0.6]);
            }
        }
        PointCloud::new(4, pts, "f", 0).unwrap()
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.5)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, 0.0);
        // m_hat = 0.5, v_hat = 0.25, update = 0.5 / (0.5 + 1e-8)
        assert!((p[0].item() - 0.900000002).abs() < 1e-12);
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, 0.01);
        assert!((p[0].item() - 0.899000002).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut g = vec![Tensor::from_vec(vec![12.0, 16.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 20.0);
        assert_eq!(g[0].data(), &[6.0, 8.0]);
        let mut small = vec![Tensor::from_vec(vec![3.0, 4.0])];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn one_cycle_hits_its_anchor_points() {
        let base = 1e-3;
        assert!((one_cycle_lr(0, 100, base) - 1e-4).abs() < 1e-15);
        assert!((one_cycle_lr(40, 100, base) - 1e-3).abs() < 1e-15);
        assert!((one_cycle_lr(100, 100, base) - 1e-6).abs() < 1e-15);
        assert_eq!(one_cycle_lr(250, 100, base), one_cycle_lr(100, 100, base));
        let mid = one_cycle_lr(70, 100, base);
        assert!((mid - (1e-6 + (1e-3 - 1e-6) * 0.5)).abs() < 1e-12);
        for s in 1..40 {
            assert!(one_cycle_lr(s, 100, base) > one_cycle_lr(s - 1, 100, base));
        }
    }

    #[test]
    fn grid_must_divide_by_stride() {
        let mut cfg = tiny_cfg();
        cfg.scales = vec![0.45];
        assert!(matches!(Hmfn::new(&cfg), Err(Error::Config(_))));
        cfg.scales = vec![0.2, 0.3, 0.2];
        assert!(matches!(Hmfn::new(&cfg), Err(Error::Config(_))));
        cfg.scales = vec![0.3, 0.2];
        assert!(Hmfn::new(&cfg).is_ok());
    }

    #[test]
    fn config_round_trips_through_toml_and_partial_files_use_defaults() {
        let cfg = tiny_cfg();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml_str("epochs = 3\n[model]\nrange = 6.4\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model.range, 6.4);
        assert_eq!(partial.batch_size, RunConfig::default().batch_size);
        assert!(RunConfig::from_toml_str("epoch = 3").is_err());
    }

    #[test]
    fn speed_channels_follow_the_enclosing_box() {
        let cloud = cloud_around(&[(0.0, 0.0), (1.5, 1.5)]);
        let boxes = vec![(person(0.0, 0.0).bbox, [1.0, -0.5])];
        let out = add_velocity_channels(&cloud, &boxes).unwrap();
        assert_eq!(out.dims(), 6);
        assert_eq!(&out.point(0)[4..], &[1.0, -0.5]);
        assert_eq!(&out.point(12)[4..], &[0.0, 0.0]);
        assert_eq!(add_velocity_channels(&PointCloud::empty(4), &boxes).unwrap().dims(), 6);
    }

    #[test]
    fn loss_drops_and_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 60;
        cfg.base_lr = 1e-2;
        let mut model = Hmfn::new(&cfg).unwrap();
        let frames: Vec<PreparedFrame> = [(0.5, 0.5), (-1.0, 1.2)]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                prepare_frame(&model, &format!("{:016x}", i), &cloud_around(&[c]), &[person(c.0, c.1)]).unwrap()
            })
            .collect();
        let out = train(&mut model, &frames, None, Some(dir.path())).unwrap();
        let first = out.steps.first().unwrap().loss;
        let last = out.steps.last().unwrap().loss;
        assert!(last < 0.75 * first, "loss {} -> {}", first, last);
        assert_eq!(out.steps.len(), 60);
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 60);

        let ckpt = dir.path().join("last.ckpt");
        let loaded = Hmfn::load(&cfg, &ckpt).unwrap();
        assert_eq!(loaded.store.values(), model.store.values());
        assert_eq!(load_adam_state(&ckpt, &loaded).unwrap().unwrap(), out.adam);

        let mut other = cfg.clone();
        other.model.head_hidden = 8;
        assert!(matches!(Hmfn::load(&other, &ckpt), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_frames_run_through_the_model() {
        let cfg = tiny_cfg();
        let model = Hmfn::new(&cfg).unwrap();
        let f = prepare_frame(&model, "0", &PointCloud::empty(4), &[]).unwrap();
        let out = model.predict(&f).unwrap();
        assert_eq!(out.heatmap.shape(), &[1, model.head_grid.dims.0, model.head_grid.dims.1]);
    }
}
