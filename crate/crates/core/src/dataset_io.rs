//! nuScenes-style relational tables for generated datasets.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/v1.0/{scene,sample,sample_data,sample_annotation,instance,category,
//!              sensor,calibrated_sensor,ego_pose}.json
//! <root>/samples/LIDAR_TOP/<scene>__LIDAR_TOP__<timestamp>.bin
//! ```
//!
//! Every table is a JSON array sorted by token. Missing links (`prev` of a first
//! record, `next` of a last one) are empty strings. Annotation `size` is `[l, w, h]`
//! and `yaw` is stored directly instead of a quaternion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection_head::Box3D;
use crate::error::{Error, Result};
use crate::eval::{density_stats, DensityStats, GroundTruth, GtBox};
use crate::numerics::Real;
use crate::pillar_encoder::PointCloud;
use crate::scene_synth::{generate_scene, scene_seed, CrowdModel, LayoutKind, LidarModel, SceneLayout, SynthScene};

pub const VERSION_DIR: &str = "v1.0";
pub const LIDAR_CHANNEL: &str = "LIDAR_TOP";
pub const PEDESTRIAN_CATEGORY: &str = "human.pedestrian.adult";
/// Scene `i` starts `i` hours after this epoch (microseconds).
const TIMESTAMP_EPOCH_US: u64 = 1_600_000_000_000_000;
const SCENE_GAP_US: u64 = 3_600_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub token: String,
    pub name: String,
    /// Layout kind of the scene.
    pub description: String,
    pub nbr_samples: usize,
    pub first_sample_token: String,
    pub last_sample_token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub token: String,
    pub timestamp: u64,
    pub scene_token: String,
    pub prev: String,
    pub next: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleData {
    pub token: String,
    pub sample_token: String,
    pub ego_pose_token: String,
    pub calibrated_sensor_token: String,
    pub timestamp: u64,
    pub fileformat: String,
    pub is_key_frame: bool,
    pub filename: String,
    pub channel: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAnnotation {
    pub token: String,
    pub sample_token: String,
    pub instance_token: String,
    pub translation: [Real; 3],
    pub size: [Real; 3],
    pub yaw: Real,
    pub num_lidar_pts: usize,
    pub prev: String,
    pub next: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub token: String,
    pub category_token: String,
    pub nbr_annotations: usize,
    pub first_annotation_token: String,
    pub last_annotation_token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub token: String,
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub token: String,
    pub channel: String,
    pub modality: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSensor {
    pub token: String,
    pub sensor_token: String,
    pub translation: [Real; 3],
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [Real; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub token: String,
    pub timestamp: u64,
    pub translation: [Real; 3],
    pub rotation: [Real; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetTables {
    pub scene: Vec<Scene>,
    pub sample: Vec<Sample>,
    pub sample_data: Vec<SampleData>,
    pub sample_annotation: Vec<SampleAnnotation>,
    pub instance: Vec<Instance>,
    pub category: Vec<Category>,
    pub sensor: Vec<Sensor>,
    pub calibrated_sensor: Vec<CalibratedSensor>,
    pub ego_pose: Vec<EgoPose>,
}

/// 32 hex characters from a seeded hash of `(table, index)`.
pub fn make_token(seed: u64, table: &str, index: usize) -> String {
    let digest = Sha256::digest(format!("{}:{}:{}", seed, table, index).as_bytes());
    hex::encode(&digest[..16])
}

macro_rules! by_token {
    ($($field:ident),*) => {
        impl DatasetTables {
            /// Sort every table by token (the on-disk order).
            pub fn sort(&mut self) {
                $(self.$field.sort_by(|a, b| a.token.cmp(&b.token));)*
            }
        }
    };
}
by_token!(scene, sample, sample_data, sample_annotation, instance, category, sensor, calibrated_sensor, ego_pose);

impl DatasetTables {
    pub fn is_empty(&self) -> bool {
        self.scene.is_empty()
    }

    /// Samples of a scene in chain order (stops at a broken link).
    pub fn scene_samples(&self, scene_token: &str) -> Vec<&Sample> {
        let by: HashMap<&str, &Sample> = self.sample.iter().map(|s| (s.token.as_str(), s)).collect();
        let mut out = Vec::new();
        let Some(scene) = self.scene.iter().find(|s| s.token == scene_token) else {
            return out;
        };
        let mut cur = by.get(scene.first_sample_token.as_str()).copied();
        let mut seen = BTreeSet::new();
        while let Some(s) = cur {
            if !seen.insert(s.token.as_str()) {
                break;
            }
            out.push(s);
            cur = if s.next.is_empty() { None } else { by.get(s.next.as_str()).copied() };
        }
        out
    }

    pub fn lidar_of(&self, sample_token: &str) -> Option<&SampleData> {
        self.sample_data
            .iter()
            .find(|d| d.sample_token == sample_token && d.channel == LIDAR_CHANNEL)
    }

    pub fn layout_of(&self, scene_token: &str) -> Option<&str> {
        self.scene
            .iter()
            .find(|s| s.token == scene_token)
            .map(|s| s.description.as_str())
    }
}

/// Generated dataset: tables plus the point clouds they reference, keyed by file name.
#[derive(Clone, Debug, Default)]
pub struct GeneratedDataset {
    pub tables: DatasetTables,
    pub clouds: BTreeMap<String, PointCloud>,
}

/// Generate `n` scenes; scene `i` uses the `i`-th entry of `plan`, cycling.
pub fn synthesize(
    n: usize,
    frames: usize,
    plan: &[(LayoutKind, CrowdModel)],
    lidar: &LidarModel,
    seed: u64,
) -> Result<GeneratedDataset> {
    if n == 0 {
        return Err(Error::Contract("no scenes requested".into()));
    }
    if plan.is_empty() {
        return Err(Error::Contract("no layouts to generate from".into()));
    }
    let scenes = (0..n)
        .map(|i| {
            let (kind, crowd) = &plan[i % plan.len()];
            generate_scene(&SceneLayout::new(*kind), crowd, lidar, frames, scene_seed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    build_dataset(&scenes, seed)
}

/// Every layout kind with the same crowd.
pub fn uniform_plan(crowd: &CrowdModel) -> Vec<(LayoutKind, CrowdModel)> {
    LayoutKind::ALL.iter().map(|&k| (k, crowd.clone())).collect()
}

/// Turn generated scenes into tables. Token derivation uses `seed`.
pub fn build_dataset(scenes: &[SynthScene], seed: u64) -> Result<GeneratedDataset> {
    let mut t = DatasetTables::default();
    let mut clouds = BTreeMap::new();
    let sensor_token = make_token(seed, "sensor", 0);
    let calib_token = make_token(seed, "calibrated_sensor", 0);
    let category_token = make_token(seed, "category", 0);
    t.sensor.push(Sensor {
        token: sensor_token.clone(),
        channel: LIDAR_CHANNEL.into(),
        modality: "lidar".into(),
    });
    t.calibrated_sensor.push(CalibratedSensor {
        token: calib_token.clone(),
        sensor_token,
        translation: [0.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
    });
    t.category.push(Category {
        token: category_token.clone(),
        name: PEDESTRIAN_CATEGORY.into(),
        description: "Adult pedestrian".into(),
    });
    let (mut n_sample, mut n_ann, mut n_inst) = (0usize, 0usize, 0usize);
    for (si, scene) in scenes.iter().enumerate() {
        if scene.frames.is_empty() {
            return Err(Error::Contract(format!("scene {} has no frames", si)));
        }
        let scene_token = make_token(seed, "scene", si);
        let name = format!("scene-{:04}", si + 1);
        let sample_tokens: Vec<String> = (0..scene.frames.len()).map(|k| make_token(seed, "sample", n_sample + k)).collect();
        n_sample += scene.frames.len();
        // instance id -> (instance token, annotation tokens in frame order)
        let mut instances: BTreeMap<usize, (String, Vec<String>)> = BTreeMap::new();
        let mut anns = Vec::new();
        for (k, frame) in scene.frames.iter().enumerate() {
            let timestamp = TIMESTAMP_EPOCH_US + si as u64 * SCENE_GAP_US + frame.timestamp_us;
            let link = |j: Option<usize>| j.map(|j| sample_tokens[j].clone()).unwrap_or_default();
            t.sample.push(Sample {
                token: sample_tokens[k].clone(),
                timestamp,
                scene_token: scene_token.clone(),
                prev: link(k.checked_sub(1)),
                next: link((k + 1 < sample_tokens.len()).then_some(k + 1)),
            });
            let filename = format!("samples/{}/{}__{}__{}.bin", LIDAR_CHANNEL, name, LIDAR_CHANNEL, timestamp);
            let sd_index = t.sample_data.len();
            let ego_token = make_token(seed, "ego_pose", sd_index);
            t.ego_pose.push(EgoPose {
                token: ego_token.clone(),
                timestamp,
                translation: [0.0; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
            });
            t.sample_data.push(SampleData {
                token: make_token(seed, "sample_data", sd_index),
                sample_token: sample_tokens[k].clone(),
                ego_pose_token: ego_token,
                calibrated_sensor_token: calib_token.clone(),
                timestamp,
                fileformat: "bin".into(),
                is_key_frame: true,
                filename: filename.clone(),
                channel: LIDAR_CHANNEL.into(),
            });
            clouds.insert(filename, frame.cloud.clone());
            for a in &frame.annotations {
                let token = make_token(seed, "sample_annotation", n_ann);
                n_ann += 1;
                let entry = instances.entry(a.instance).or_insert_with(|| {
                    n_inst += 1;
                    (make_token(seed, "instance", n_inst - 1), Vec::new())
                });
                entry.1.push(token.clone());
                anns.push(SampleAnnotation {
                    token,
                    sample_token: sample_tokens[k].clone(),
                    instance_token: entry.0.clone(),
                    translation: a.bbox.center,
                    size: a.bbox.size,
                    yaw: a.bbox.yaw,
                    num_lidar_pts: a.num_lidar_pts,
                    prev: String::new(),
                    next: String::new(),
                });
            }
        }
        let index: HashMap<String, usize> = anns.iter().enumerate().map(|(i, a)| (a.token.clone(), i)).collect();
        for (inst_token, chain) in instances.values() {
            for (j, tok) in chain.iter().enumerate() {
                let a = &mut anns[index[tok]];
                a.prev = if j > 0 { chain[j - 1].clone() } else { String::new() };
                a.next = chain.get(j + 1).cloned().unwrap_or_default();
            }
            t.instance.push(Instance {
                token: inst_token.clone(),
                category_token: category_token.clone(),
                nbr_annotations: chain.len(),
                first_annotation_token: chain[0].clone(),
                last_annotation_token: chain[chain.len() - 1].clone(),
            });
        }
        t.sample_annotation.extend(anns);
        t.scene.push(Scene {
            token: scene_token,
            name,
            description: scene.layout.kind.to_string(),
            nbr_samples: sample_tokens.len(),
            first_sample_token: sample_tokens[0].clone(),
            last_sample_token: sample_tokens[sample_tokens.len() - 1].clone(),
        });
    }
    t.sort();
    Ok(GeneratedDataset { tables: t, clouds })
}

fn table_path(root: &Path, name: &str) -> PathBuf {
    root.join(VERSION_DIR).join(format!("{}.json", name))
}

fn write_table<T: Serialize>(root: &Path, name: &str, rows: &[T]) -> Result<()> {
    let path = table_path(root, name);
    let text = serde_json::to_string_pretty(rows).expect("table rows serialize");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_table<T: DeserializeOwned>(root: &Path, name: &str) -> Result<Vec<T>> {
    let path = table_path(root, name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        detail: e.to_string(),
    })
}

/// Write all tables (sorted by token) under `<root>/v1.0/`.
pub fn write_dataset(tables: &DatasetTables, root: &Path) -> Result<()> {
    let dir = root.join(VERSION_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut t = tables.clone();
    t.sort();
    write_table(root, "scene", &t.scene)?;
    write_table(root, "sample", &t.sample)?;
    write_table(root, "sample_data", &t.sample_data)?;
    write_table(root, "sample_annotation", &t.sample_annotation)?;
    write_table(root, "instance", &t.instance)?;
    write_table(root, "category", &t.category)?;
    write_table(root, "sensor", &t.sensor)?;
    write_table(root, "calibrated_sensor", &t.calibrated_sensor)?;
    write_table(root, "ego_pose", &t.ego_pose)
}

pub fn load_dataset(root: &Path) -> Result<DatasetTables> {
    Ok(DatasetTables {
        scene: read_table(root, "scene")?,
        sample: read_table(root, "sample")?,
        sample_data: read_table(root, "sample_data")?,
        sample_annotation: read_table(root, "sample_annotation")?,
        instance: read_table(root, "instance")?,
        category: read_table(root, "category")?,
        sensor: read_table(root, "sensor")?,
        calibrated_sensor: read_table(root, "calibrated_sensor")?,
        ego_pose: read_table(root, "ego_pose")?,
    })
}

impl GeneratedDataset {
    /// Tables plus every point-cloud payload.
    pub fn write(&self, root: &Path) -> Result<()> {
        write_dataset(&self.tables, root)?;
        let dir = root.join("samples").join(LIDAR_CHANNEL);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, cloud) in &self.clouds {
            cloud.write_bin(&root.join(name))?;
        }
        Ok(())
    }
}

/// Read the lidar sweep of a sample.
pub fn read_sample_cloud(root: &Path, tables: &DatasetTables, sample_token: &str) -> Result<PointCloud> {
    let sd = tables
        .lidar_of(sample_token)
        .ok_or_else(|| Error::Contract(format!("sample {} has no {} data", sample_token, LIDAR_CHANNEL)))?;
    PointCloud::read_bin(&root.join(&sd.filename), sample_token, sd.timestamp)
}

/// One broken rule.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub table: String,
    pub token: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.table, self.token, self.rule)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn flag(&mut self, table: &str, token: &str, rule: impl Into<String>) {
        self.out.push(Violation {
            table: table.into(),
            token: token.into(),
            rule: rule.into(),
        });
    }

    fn unique<'a>(&mut self, table: &str, tokens: impl Iterator<Item = &'a str>) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::new();
        for t in tokens {
            if !seen.insert(t) {
                self.flag(table, t, "duplicate token");
            }
        }
        seen
    }
}

/// Every violated invariant; empty iff the tables are consistent.
pub fn validate(t: &DatasetTables) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let scenes = c.unique("scene", t.scene.iter().map(|r| r.token.as_str()));
    let samples = c.unique("sample", t.sample.iter().map(|r| r.token.as_str()));
    c.unique("sample_data", t.sample_data.iter().map(|r| r.token.as_str()));
    let anns = c.unique("sample_annotation", t.sample_annotation.iter().map(|r| r.token.as_str()));
    let instances = c.unique("instance", t.instance.iter().map(|r| r.token.as_str()));
    let categories = c.unique("category", t.category.iter().map(|r| r.token.as_str()));
    let sensors = c.unique("sensor", t.sensor.iter().map(|r| r.token.as_str()));
    let calibs = c.unique("calibrated_sensor", t.calibrated_sensor.iter().map(|r| r.token.as_str()));
    let poses = c.unique("ego_pose", t.ego_pose.iter().map(|r| r.token.as_str()));

    let link = |c: &mut Checker, table: &str, token: &str, field: &str, value: &str, target: &BTreeSet<&str>, optional: bool| {
        if optional && value.is_empty() {
            return;
        }
        if !target.contains(value) {
            c.flag(table, token, format!("{} {:?} does not resolve", field, value));
        }
    };

    let sample_by: HashMap<&str, &Sample> = t.sample.iter().map(|s| (s.token.as_str(), s)).collect();
    let ann_by: HashMap<&str, &SampleAnnotation> = t.sample_annotation.iter().map(|a| (a.token.as_str(), a)).collect();

    for s in &t.sample {
        link(&mut c, "sample", &s.token, "scene_token", &s.scene_token, &scenes, false);
        link(&mut c, "sample", &s.token, "prev", &s.prev, &samples, true);
        link(&mut c, "sample", &s.token, "next", &s.next, &samples, true);
        if let Some(n) = sample_by.get(s.next.as_str()) {
            if n.prev != s.token {
                c.flag("sample", &s.token, format!("next {} does not point back", n.token));
            }
            if n.scene_token != s.scene_token {
                c.flag("sample", &s.token, "next sample belongs to another scene");
            }
            if n.timestamp <= s.timestamp {
                c.flag("sample", &s.token, format!("timestamp {} not before next {}", s.timestamp, n.timestamp));
            }
        }
        if let Some(p) = sample_by.get(s.prev.as_str()) {
            if p.next != s.token {
                c.flag("sample", &s.token, format!("prev {} does not point forward", p.token));
            }
        }
    }
    for d in &t.sample_data {
        link(&mut c, "sample_data", &d.token, "sample_token", &d.sample_token, &samples, false);
        link(&mut c, "sample_data", &d.token, "ego_pose_token", &d.ego_pose_token, &poses, false);
        link(&mut c, "sample_data", &d.token, "calibrated_sensor_token", &d.calibrated_sensor_token, &calibs, false);
    }
    for cs in &t.calibrated_sensor {
        link(&mut c, "calibrated_sensor", &cs.token, "sensor_token", &cs.sensor_token, &sensors, false);
    }
    let mut ann_count: HashMap<&str, usize> = HashMap::new();
    for a in &t.sample_annotation {
        link(&mut c, "sample_annotation", &a.token, "sample_token", &a.sample_token, &samples, false);
        link(&mut c, "sample_annotation", &a.token, "instance_token", &a.instance_token, &instances, false);
        link(&mut c, "sample_annotation", &a.token, "prev", &a.prev, &anns, true);
        link(&mut c, "sample_annotation", &a.token, "next", &a.next, &anns, true);
        *ann_count.entry(a.instance_token.as_str()).or_default() += 1;
        if let Some(n) = ann_by.get(a.next.as_str()) {
            if n.prev != a.token {
                c.flag("sample_annotation", &a.token, format!("next {} does not point back", n.token));
            }
            if n.instance_token != a.instance_token {
                c.flag("sample_annotation", &a.token, "next annotation belongs to another instance");
            }
        }
        if let Some(p) = ann_by.get(a.prev.as_str()) {
            if p.next != a.token {
                c.flag("sample_annotation", &a.token, format!("prev {} does not point forward", p.token));
            }
        }
    }
    for i in &t.instance {
        link(&mut c, "instance", &i.token, "category_token", &i.category_token, &categories, false);
        link(&mut c, "instance", &i.token, "first_annotation_token", &i.first_annotation_token, &anns, false);
        link(&mut c, "instance", &i.token, "last_annotation_token", &i.last_annotation_token, &anns, false);
        let n = ann_count.get(i.token.as_str()).copied().unwrap_or(0);
        if n != i.nbr_annotations {
            c.flag("instance", &i.token, format!("nbr_annotations {} but {} annotations", i.nbr_annotations, n));
        }
        if let Some(f) = ann_by.get(i.first_annotation_token.as_str()) {
            if !f.prev.is_empty() {
                c.flag("instance", &i.token, "first annotation has a prev link");
            }
        }
        if let Some(l) = ann_by.get(i.last_annotation_token.as_str()) {
            if !l.next.is_empty() {
                c.flag("instance", &i.token, "last annotation has a next link");
            }
        }
    }
    let mut per_scene: HashMap<&str, usize> = HashMap::new();
    for s in &t.sample {
        *per_scene.entry(s.scene_token.as_str()).or_default() += 1;
    }
    for s in &t.scene {
        link(&mut c, "scene", &s.token, "first_sample_token", &s.first_sample_token, &samples, false);
        link(&mut c, "scene", &s.token, "last_sample_token", &s.last_sample_token, &samples, false);
        let n = per_scene.get(s.token.as_str()).copied().unwrap_or(0);
        if n != s.nbr_samples {
            c.flag("scene", &s.token, format!("nbr_samples {} but {} samples", s.nbr_samples, n));
        }
        if let Some(f) = sample_by.get(s.first_sample_token.as_str()) {
            if !f.prev.is_empty() || f.scene_token != s.token {
                c.flag("scene", &s.token, "first_sample_token is not the head of this scene's chain");
            }
        }
        if let Some(l) = sample_by.get(s.last_sample_token.as_str()) {
            if !l.next.is_empty() || l.scene_token != s.token {
                c.flag("scene", &s.token, "last_sample_token is not the tail of this scene's chain");
            }
        }
        let chain = t.scene_samples(&s.token);
        if chain.len() != n {
            c.flag("scene", &s.token, format!("chain from first sample reaches {} of {} samples", chain.len(), n));
        } else if chain.last().map(|x| x.token.as_str()) != Some(s.last_sample_token.as_str()) {
            c.flag("scene", &s.token, "chain does not end at last_sample_token");
        }
    }
    c.out.sort();
    c.out
}

/// `Ok` iff `validate` finds nothing.
pub fn ensure_valid(t: &DatasetTables) -> Result<()> {
    let v = validate(t);
    match v.first() {
        None => Ok(()),
        Some(first) => Err(Error::Validation {
            count: v.len(),
            first: first.to_string(),
        }),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

impl SceneSplit {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            "all" => Err(Error::Config("'all' is not a stored split".into())),
            other => Err(Error::Config(format!("unknown split {:?}", other))),
        }
    }
}

pub const DEFAULT_RATIOS: (Real, Real, Real) = (0.70, 0.15, 0.15);
/// Layout kinds the val and test sets should each cover.
pub const MIN_LAYOUT_COVERAGE: usize = 4;

/// Split scenes into disjoint train/val/test token sets.
///
/// Val and test get `round(n * ratio)` scenes each, train the rest. With
/// stratification, scenes are dealt layout by layout so val and test each see
/// as many distinct layouts as their size allows.
pub fn split_scenes(t: &DatasetTables, ratios: (Real, Real, Real), seed: u64, stratify: bool) -> Result<SceneSplit> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-6 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!("split ratios {:?} must be nonnegative and sum to 1", ratios)));
    }
    let n = t.scene.len();
    let n_val = (n as Real * ratios.1).round() as usize;
    let n_test = ((n as Real * ratios.2).round() as usize).min(n - n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SceneSplit::default();
    let mut tokens: Vec<&Scene> = t.scene.iter().collect();
    tokens.sort_by(|a, b| a.token.cmp(&b.token));

    let layouts: BTreeSet<&str> = tokens.iter().map(|s| s.description.as_str()).collect();
    let can_stratify = stratify && n >= 3 && layouts.len() > 1;
    if stratify && !can_stratify {
        let w = format!("{} scene(s) over {} layout(s): too few to stratify, split unstratified", n, layouts.len());
        warn!("{}", w);
        split.warnings.push(w);
    }
    if !can_stratify {
        tokens.shuffle(&mut rng);
        split.val = tokens[..n_val].iter().map(|s| s.token.clone()).collect();
        split.test = tokens[n_val..n_val + n_test].iter().map(|s| s.token.clone()).collect();
        split.train = tokens[n_val + n_test..].iter().map(|s| s.token.clone()).collect();
    } else {
        let mut pools: BTreeMap<&str, Vec<&Scene>> = BTreeMap::new();
        for s in &tokens {
            pools.entry(s.description.as_str()).or_default().push(s);
        }
        for p in pools.values_mut() {
            p.shuffle(&mut rng);
        }
        let mut order: Vec<&str> = pools.keys().copied().collect();
        order.shuffle(&mut rng);
        let deal = |count: usize, pools: &mut BTreeMap<&str, Vec<&Scene>>| -> Vec<String> {
            let mut picked = Vec::new();
            let mut used: BTreeSet<&str> = BTreeSet::new();
            while picked.len() < count {
                // unused layouts first, then the fullest pool; seeded order breaks ties
                let next = order
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| !pools[**l].is_empty())
                    .max_by_key(|(i, l)| (!used.contains(**l), pools[**l].len(), usize::MAX - i))
                    .map(|(_, l)| *l);
                let Some(l) = next else { break };
                used.insert(l);
                picked.push(pools.get_mut(l).unwrap().pop().unwrap().token.clone());
            }
            picked
        };
        split.val = deal(n_val, &mut pools);
        split.test = deal(n_test, &mut pools);
        split.train = pools.values().flatten().map(|s| s.token.clone()).collect();
        for (name, set) in [("val", &split.val), ("test", &split.test)] {
            let covered: BTreeSet<&str> = set.iter().filter_map(|tok| t.layout_of(tok)).collect();
            let want = MIN_LAYOUT_COVERAGE.min(layouts.len());
            if !set.is_empty() && covered.len() < want {
                let w = format!("{} covers {} layout(s), fewer than {}", name, covered.len(), want);
                warn!("{}", w);
                split.warnings.push(w);
            }
        }
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

/// Pedestrian class id used by the detector.
pub const PEDESTRIAN_CLASS: usize = 0;

/// Class id of a category name: pedestrians are 0, everything else 1.
pub fn class_of(category_name: &str) -> usize {
    if category_name.starts_with("human.pedestrian") {
        PEDESTRIAN_CLASS
    } else {
        1
    }
}

/// Finite-difference BEV velocity of every annotation along its instance chain (m/s).
pub fn annotation_velocities(t: &DatasetTables) -> HashMap<String, [Real; 2]> {
    let ann_by: HashMap<&str, &SampleAnnotation> = t.sample_annotation.iter().map(|a| (a.token.as_str(), a)).collect();
    let ts: HashMap<&str, u64> = t.sample.iter().map(|s| (s.token.as_str(), s.timestamp)).collect();
    let mut out = HashMap::new();
    for a in &t.sample_annotation {
        let prev = ann_by.get(a.prev.as_str()).copied();
        let next = ann_by.get(a.next.as_str()).copied();
        let (p, q) = match (prev, next) {
            (Some(p), Some(q)) => (p, q),
            (Some(p), None) => (p, a),
            (None, Some(q)) => (a, q),
            (None, None) => {
                out.insert(a.token.clone(), [0.0, 0.0]);
                continue;
            }
        };
        let v = match (ts.get(p.sample_token.as_str()), ts.get(q.sample_token.as_str())) {
            (Some(&t0), Some(&t1)) if t1 > t0 => {
                let dt = (t1 - t0) as Real * 1e-6;
                [
                    (q.translation[0] - p.translation[0]) / dt,
                    (q.translation[1] - p.translation[1]) / dt,
                ]
            }
            _ => [0.0, 0.0],
        };
        out.insert(a.token.clone(), v);
    }
    out
}

/// Annotation boxes of one sample with their lidar counts, optionally pedestrians only.
pub fn sample_boxes(t: &DatasetTables, sample_token: &str, pedes_only: bool) -> Vec<GtBox> {
    let categories: HashMap<&str, &str> = t.category.iter().map(|c| (c.token.as_str(), c.name.as_str())).collect();
    let inst_class: HashMap<&str, usize> = t
        .instance
        .iter()
        .map(|i| (i.token.as_str(), class_of(categories.get(i.category_token.as_str()).copied().unwrap_or(""))))
        .collect();
    t.sample_annotation
        .iter()
        .filter(|a| a.sample_token == sample_token)
        .filter_map(|a| {
            let class_id = inst_class.get(a.instance_token.as_str()).copied().unwrap_or(1);
            if pedes_only && class_id != PEDESTRIAN_CLASS {
                return None;
            }
            let mut bbox = Box3D::new(a.translation, a.size, a.yaw, class_id);
            bbox.instance_id = Some(a.instance_token.clone());
            Some(GtBox {
                bbox,
                num_lidar_pts: a.num_lidar_pts,
            })
        })
        .collect()
}

/// Samples of the given scenes, in scene then chain order.
pub fn samples_of_scenes<'a>(t: &'a DatasetTables, scene_tokens: &[String]) -> Vec<&'a Sample> {
    scene_tokens.iter().flat_map(|s| t.scene_samples(s)).collect()
}

pub fn ground_truth(t: &DatasetTables, sample_tokens: &[String]) -> GroundTruth {
    sample_tokens
        .iter()
        .map(|s| (s.clone(), sample_boxes(t, s, true)))
        .collect()
}

/// Pedes/Fr and Density-2/5/10 over every sample.
pub fn dataset_density(t: &DatasetTables) -> Result<DensityStats> {
    let frames: Vec<Vec<[Real; 2]>> = t
        .sample
        .iter()
        .map(|s| {
            sample_boxes(t, &s.token, true)
                .iter()
                .map(|g| [g.bbox.center[0], g.bbox.center[1]])
                .collect()
        })
        .collect();
    density_stats(&frames)
}
