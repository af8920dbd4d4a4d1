//! Synthetic semi-structured pedestrian scenes: static layouts, a clustered crowd that
//! walks between frames, and a ray-cast lidar.
//!
//! The world frame has the ground at `z = 0` and the sensor at `(0, 0, sensor_height)`.
//! Point clouds and annotation boxes are emitted in the sensor frame.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection_head::{wrap_angle, Box3D};
use crate::error::{Error, Result};
use crate::eval::{density_stats, DensityStats};
use crate::numerics::Real;
use crate::pillar_encoder::PointCloud;

pub const FRAME_DT_US: u64 = 500_000;
pub const DEFAULT_FRAMES: usize = 20;
pub const PEDESTRIAN_INTENSITY: Real = 0.6;
pub const OBSTACLE_INTENSITY: Real = 0.3;
/// No pedestrian stands closer than this to the sensor mast.
pub const SENSOR_CLEARANCE: Real = 1.0;
const SCENE_HALF_EXTENT: Real = 20.0;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    MainPathway,
    Courtyard,
    BridgeCrossing,
    CoveredCorridor,
    OpenPlaza,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 5] = [
        LayoutKind::MainPathway,
        LayoutKind::Courtyard,
        LayoutKind::BridgeCrossing,
        LayoutKind::CoveredCorridor,
        LayoutKind::OpenPlaza,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::MainPathway => "main_pathway",
            LayoutKind::Courtyard => "courtyard",
            LayoutKind::BridgeCrossing => "bridge_crossing",
            LayoutKind::CoveredCorridor => "covered_corridor",
            LayoutKind::OpenPlaza => "open_plaza",
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayoutKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layout {:?}", s)))
    }
}

/// Axis-aligned static box in world coordinates (ground at z = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min: [Real; 3],
    pub max: [Real; 3],
}

impl Obstacle {
    pub fn new(x: (Real, Real), y: (Real, Real), z: (Real, Real)) -> Self {
        Obstacle {
            min: [x.0, y.0, z.0],
            max: [x.1, y.1, z.1],
        }
    }

    /// Whether a walker of the given radius standing at `p` would overlap this box.
    /// Overhead structure (a roof) never blocks walking.
    fn blocks(&self, p: [Real; 2], radius: Real) -> bool {
        if self.min[2] > 2.5 {
            return false;
        }
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx * dx + dy * dy < radius * radius
    }

    fn contains_xy(&self, p: [Real; 2]) -> bool {
        self.min[2] <= 2.5 && p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

pub type Polygon = Vec<[Real; 2]>;

fn point_in_polygon(p: [Real; 2], poly: &[[Real; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn rect(x: (Real, Real), y: (Real, Real)) -> Polygon {
    vec![[x.0, y.0], [x.1, y.0], [x.1, y.1], [x.0, y.1]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub kind: LayoutKind,
    pub obstacles: Vec<Obstacle>,
    pub walkable: Vec<Polygon>,
}

impl SceneLayout {
    /// The fixed geometry of a layout kind.
    pub fn new(kind: LayoutKind) -> Self {
        let e = SCENE_HALF_EXTENT;
        let (obstacles, walkable) = match kind {
            LayoutKind::MainPathway => (
                vec![
                    Obstacle::new((-e, -4.0), (7.0, 12.0), (0.0, 8.0)),
                    Obstacle::new((2.0, e), (7.0, 12.0), (0.0, 8.0)),
                    Obstacle::new((-e, -10.0), (-12.0, -7.0), (0.0, 6.0)),
                    Obstacle::new((-6.0, e), (-12.0, -7.0), (0.0, 10.0)),
                    Obstacle::new((8.0, 8.6), (-5.0, -4.4), (0.0, 3.0)),
                ],
                vec![rect((-e, e), (-6.0, 6.0)), rect((-3.5, 1.5), (6.0, e))],
            ),
            LayoutKind::Courtyard => (
                vec![
                    Obstacle::new((-16.0, -3.0), (15.0, 16.0), (0.0, 9.0)),
                    Obstacle::new((3.0, 16.0), (15.0, 16.0), (0.0, 9.0)),
                    Obstacle::new((-16.0, 16.0), (-16.0, -15.0), (0.0, 9.0)),
                    Obstacle::new((15.0, 16.0), (-15.0, 15.0), (0.0, 9.0)),
                    Obstacle::new((-16.0, -15.0), (-15.0, 4.0), (0.0, 9.0)),
                    Obstacle::new((5.5, 6.5), (5.5, 6.5), (0.0, 4.0)),
                    Obstacle::new((-7.5, -6.5), (-5.5, -4.5), (0.0, 4.0)),
                ],
                vec![rect((-14.5, 14.5), (-14.5, 14.5))],
            ),
            LayoutKind::BridgeCrossing => (
                vec![
                    Obstacle::new((-2.0 * e, 2.0 * e), (6.1, 6.3), (0.0, 1.1)),
                    Obstacle::new((-2.0 * e, 2.0 * e), (-6.3, -6.1), (0.0, 1.1)),
                    Obstacle::new((-e, -14.0), (-e, -7.0), (0.0, 12.0)),
                ],
                // a long deck, so a full crowd can spread along it
                vec![rect((-2.0 * e, 2.0 * e), (-6.0, 6.0))],
            ),
            LayoutKind::CoveredCorridor => {
                let mut obs = vec![
                    Obstacle::new((-6.5, 6.5), (-e, e), (3.5, 3.8)),
                    Obstacle::new((5.8, 6.2), (-e, e), (0.0, 3.5)),
                ];
                let mut y = -e + 2.5;
                while y < e {
                    if y.abs() > 1.0 {
                        obs.push(Obstacle::new((-4.9, -4.4), (y - 0.25, y + 0.25), (0.0, 3.5)));
                    }
                    y += 5.0;
                }
                (obs, vec![rect((-5.5, 5.5), (-e, e)), rect((-e, -6.5), (-3.0, 3.0))])
            }
            LayoutKind::OpenPlaza => (
                vec![
                    Obstacle::new((9.0, 11.0), (7.0, 9.0), (0.0, 3.0)),
                    Obstacle::new((-10.0, -8.0), (10.0, 12.0), (0.0, 3.0)),
                    Obstacle::new((-13.0, -11.0), (-10.0, -8.0), (0.0, 3.0)),
                    Obstacle::new((6.0, 8.0), (-13.0, -11.0), (0.0, 3.0)),
                    Obstacle::new((-1.5, 1.5), (11.0, 14.0), (0.0, 0.8)),
                ],
                vec![rect((-e, e), (-e, e))],
            ),
        };
        SceneLayout {
            kind,
            obstacles,
            walkable,
        }
    }

    /// Whether a walker of radius `radius` may stand at `p`.
    pub fn is_free(&self, p: [Real; 2], radius: Real) -> bool {
        self.walkable.iter().any(|poly| point_in_polygon(p, poly))
            && !self.obstacles.iter().any(|o| o.blocks(p, radius))
            && (p[0] * p[0] + p[1] * p[1]).sqrt() >= SENSOR_CLEARANCE
    }

    pub fn inside_obstacle(&self, p: [Real; 2]) -> bool {
        self.obstacles.iter().any(|o| o.contains_xy(p))
    }

    fn walkable_bounds(&self) -> ([Real; 2], [Real; 2]) {
        let mut lo = [Real::INFINITY; 2];
        let mut hi = [Real::NEG_INFINITY; 2];
        for p in self.walkable.iter().flatten() {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.walkable.is_empty() || self.walkable.iter().any(|p| p.len() < 3) {
            return Err(Error::Config(format!("layout {} has no walkable polygon", self.kind)));
        }
        // coarse scan: some walkable cell must stay free
        let (lo, hi) = self.walkable_bounds();
        let n = 64;
        let free = (0..n * n).any(|i| {
            let p = [
                lo[0] + (hi[0] - lo[0]) * ((i % n) as Real + 0.5) / n as Real,
                lo[1] + (hi[1] - lo[1]) * ((i / n) as Real + 0.5) / n as Real,
            ];
            self.is_free(p, 0.3)
        });
        if free {
            Ok(())
        } else {
            Err(Error::Config(format!("layout {} obstacles cover every walkable cell", self.kind)))
        }
    }
}

/// Parameters of the clustered crowd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdModel {
    /// Pedestrians present in every frame of a scene.
    pub pedestrians_per_frame: Real,
    /// Number of parent points (groups).
    pub clusters: usize,
    /// Radius of the disk around a parent in which its members stand (m).
    pub spread: Real,
    /// Parents lie within this distance of the sensor (m).
    pub area_radius: Real,
    /// `(l, w, h)` means and standard deviations (m).
    pub size_mean: [Real; 3],
    pub size_std: [Real; 3],
    pub speed_mean: Real,
    pub speed_std: Real,
    pub speed_max: Real,
}

impl Default for CrowdModel {
    fn default() -> Self {
        CrowdModel {
            pedestrians_per_frame: 32.0,
            clusters: 9,
            spread: 1.2,
            area_radius: 16.0,
            size_mean: [0.73, 0.67, 1.77],
            size_std: [0.08, 0.08, 0.1],
            speed_mean: 1.1,
            speed_std: 0.3,
            speed_max: 2.0,
        }
    }
}

impl CrowdModel {
    /// Small crowd inside a few meters of the sensor, for quick local runs.
    pub fn desk() -> Self {
        CrowdModel {
            pedestrians_per_frame: 6.0,
            clusters: 2,
            spread: 1.0,
            area_radius: 3.5,
            ..CrowdModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pedestrians_per_frame >= 0.0) || !self.pedestrians_per_frame.is_finite() {
            return Err(Error::Config("pedestrians per frame must be >= 0".into()));
        }
        if !(self.spread > 0.0) || !(self.area_radius > 0.0) {
            return Err(Error::Config("cluster spread and area radius must be positive".into()));
        }
        if self.size_mean.iter().any(|&m| !(m > 0.0)) || self.size_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("pedestrian size means must be positive".into()));
        }
        if !(self.speed_mean >= 0.0 && self.speed_std >= 0.0 && self.speed_max >= self.speed_mean) {
            return Err(Error::Config("speed distribution must be nonnegative with max >= mean".into()));
        }
        if self.pedestrians_per_frame > 0.0 && self.clusters == 0 {
            return Err(Error::Config("a nonempty crowd needs at least one cluster".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.pedestrians_per_frame.round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    pub beams: usize,
    pub fov_down_deg: Real,
    pub fov_up_deg: Real,
    pub azimuth_step_deg: Real,
    pub max_range: Real,
    pub sensor_height: Real,
    pub range_noise: Real,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            beams: 128,
            fov_down_deg: -25.0,
            fov_up_deg: 15.0,
            azimuth_step_deg: 0.2,
            max_range: 50.0,
            sensor_height: 2.0,
            range_noise: 0.02,
        }
    }
}

impl LidarModel {
    /// Coarser scanner matched to the desk crowd.
    pub fn desk() -> Self {
        LidarModel {
            beams: 32,
            azimuth_step_deg: 0.5,
            max_range: 12.0,
            ..LidarModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::Config("lidar needs at least one beam".into()));
        }
        if !(self.max_range > 0.0 && self.azimuth_step_deg > 0.0 && self.sensor_height > 0.0 && self.range_noise >= 0.0) {
            return Err(Error::Config("lidar ranges, step and height must be positive".into()));
        }
        if !(self.fov_up_deg >= self.fov_down_deg) {
            return Err(Error::Config("lidar fov_up must be >= fov_down".into()));
        }
        Ok(())
    }

    pub fn elevations(&self) -> Vec<Real> {
        if self.beams == 1 {
            return vec![(0.5 * (self.fov_down_deg + self.fov_up_deg)).to_radians()];
        }
        let step = (self.fov_up_deg - self.fov_down_deg) / (self.beams - 1) as Real;
        (0..self.beams)
            .map(|b| (self.fov_down_deg + step * b as Real).to_radians())
            .collect()
    }

    pub fn azimuth_count(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round().max(1.0) as usize
    }
}

/// A pedestrian's state in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pedestrian {
    pub id: usize,
    pub position: [Real; 2],
    /// `(l, w, h)`.
    pub size: [Real; 3],
    pub yaw: Real,
    pub velocity: [Real; 2],
}

impl Pedestrian {
    /// Cylinder radius used for ray casting and spacing.
    pub fn radius(&self) -> Real {
        0.25 * (self.size[0] + self.size[1])
    }
}

/// Ray-castable geometry in world coordinates.
#[derive(Clone, Debug)]
pub struct SceneGeometry<'a> {
    pub obstacles: &'a [Obstacle],
    pub pedestrians: &'a [Pedestrian],
}

#[derive(Clone, Debug)]
pub struct RaycastOutput {
    pub cloud: PointCloud,
    /// Returns per pedestrian, indexed like `SceneGeometry::pedestrians`.
    pub hits_per_pedestrian: Vec<usize>,
    /// Pedestrian index that produced each point, if any.
    pub owner: Vec<Option<usize>>,
}

#[derive(Clone, Copy)]
enum Surface {
    Obstacle(usize),
    Pedestrian(usize),
}

/// Slab test; smallest positive `t` with `origin + t * dir` inside the box.
fn ray_box(o: [Real; 3], d: [Real; 3], min: [Real; 3], max: [Real; 3]) -> Option<Real> {
    let mut t0 = 0.0 as Real;
    let mut t1 = Real::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Vertical cylinder (side and both caps).
fn ray_cylinder(o: [Real; 3], d: [Real; 3], c: [Real; 2], r: Real, z: (Real, Real)) -> Option<Real> {
    let mut best: Option<Real> = None;
    let mut consider = |t: Real| {
        if t > 1e-9 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    let (px, py) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = 2.0 * (px * d[0] + py * d[1]);
        let cc = px * px + py * py - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let zt = o[2] + t * d[2];
                if zt >= z.0 && zt <= z.1 {
                    consider(t);
                }
            }
        }
    }
    if d[2].abs() > 1e-12 {
        for zc in [z.0, z.1] {
            let t = (zc - o[2]) / d[2];
            let (x, y) = (px + t * d[0], py + t * d[1]);
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

/// Azimuth interval `(center, half_width)` covered by a footprint, or `None` if it surrounds the origin.
fn azimuth_span(corners: &[[Real; 2]]) -> Option<(Real, Real)> {
    let cx = corners.iter().map(|p| p[0]).sum::<Real>() / corners.len() as Real;
    let cy = corners.iter().map(|p| p[1]).sum::<Real>() / corners.len() as Real;
    let center = cy.atan2(cx);
    let mut half = 0.0 as Real;
    for p in corners {
        let a = wrap_angle(p[1].atan2(p[0]) - center).abs();
        half = half.max(a);
    }
    (half < 0.5 * PI as Real).then_some((center, half))
}

/// One return per (beam, azimuth) ray: the nearest surface within range, with Gaussian range noise.
pub fn raycast<R: Rng + ?Sized>(geom: &SceneGeometry<'_>, lidar: &LidarModel, rng: &mut R) -> Result<RaycastOutput> {
    lidar.validate()?;
    let origin = [0.0, 0.0, lidar.sensor_height];
    let n_az = lidar.azimuth_count();
    let step = (2.0 * PI as Real) / n_az as Real;
    // candidate surfaces per azimuth column
    let mut columns: Vec<Vec<Surface>> = vec![Vec::new(); n_az];
    let mut bin = |surface: Surface, span: Option<(Real, Real)>| match span {
        None => columns.iter_mut().for_each(|c| c.push(surface)),
        Some((center, half)) => {
            let lo = ((center - half) / step).floor() as i64 - 1;
            let hi = ((center + half) / step).ceil() as i64 + 1;
            for a in lo..=hi.min(lo + n_az as i64 - 1) {
                columns[a.rem_euclid(n_az as i64) as usize].push(surface);
            }
        }
    };
    for (i, o) in geom.obstacles.iter().enumerate() {
        let inside = origin[0] >= o.min[0] && origin[0] <= o.max[0] && origin[1] >= o.min[1] && origin[1] <= o.max[1];
        let corners = [[o.min[0], o.min[1]], [o.max[0], o.min[1]], [o.max[0], o.max[1]], [o.min[0], o.max[1]]];
        bin(Surface::Obstacle(i), if inside { None } else { azimuth_span(&corners) });
    }
    for (i, p) in geom.pedestrians.iter().enumerate() {
        let dist = (p.position[0].powi(2) + p.position[1].powi(2)).sqrt();
        let r = p.radius();
        let span = (dist > r).then(|| (p.position[1].atan2(p.position[0]), (r / dist).asin()));
        bin(Surface::Pedestrian(i), span);
    }
    let noise = Normal::new(0.0, lidar.range_noise as f64).expect("finite sigma");
    let elevations = lidar.elevations();
    let mut points = Vec::new();
    let mut owner = Vec::new();
    let mut hits = vec![0usize; geom.pedestrians.len()];
    for (a, col) in columns.iter().enumerate() {
        if col.is_empty() {
            continue;
        }
        let (sp, cp) = (a as Real * step).sin_cos();
        for &theta in &elevations {
            let (st, ct) = theta.sin_cos();
            let d = [ct * cp, ct * sp, st];
            let mut best: Option<(Real, Surface)> = None;
            for &s in col {
                let t = match s {
                    Surface::Obstacle(i) => {
                        let o = &geom.obstacles[i];
                        ray_box(origin, d, o.min, o.max)
                    }
                    Surface::Pedestrian(i) => {
                        let p = &geom.pedestrians[i];
                        ray_cylinder(origin, d, p.position, p.radius(), (0.0, p.size[2]))
                    }
                };
                if let Some(t) = t {
                    if t <= lidar.max_range && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, s));
                    }
                }
            }
            let Some((t, s)) = best else { continue };
            let tn = if lidar.range_noise > 0.0 {
                t + noise.sample(rng) as Real
            } else {
                t
            };
            let (intensity, who) = match s {
                Surface::Obstacle(_) => (OBSTACLE_INTENSITY, None),
                Surface::Pedestrian(i) => {
                    hits[i] += 1;
                    (PEDESTRIAN_INTENSITY, Some(i))
                }
            };
            // sensor frame: the sensor sits at the origin
            points.extend_from_slice(&[d[0] * tn, d[1] * tn, d[2] * tn, intensity]);
            owner.push(who);
        }
    }
    Ok(RaycastOutput {
        cloud: PointCloud::new(4, points, "", 0)?,
        hits_per_pedestrian: hits,
        owner,
    })
}

/// Annotation of one pedestrian in one frame, in the sensor frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAnnotation {
    pub instance: usize,
    pub bbox: Box3D,
    pub velocity: [Real; 2],
    pub num_lidar_pts: usize,
    /// False when no ray reached the pedestrian; such boxes stay in GT but are not training targets.
    pub visible: bool,
}

#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub timestamp_us: u64,
    pub cloud: PointCloud,
    pub annotations: Vec<SynthAnnotation>,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub layout: SceneLayout,
    pub frames: Vec<SynthFrame>,
}

/// Independent per-scene seed; scene `i` of a run never depends on any other scene.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

fn normal_clamped<R: Rng + ?Sized>(rng: &mut R, mean: Real, std: Real, lo: Real, hi: Real) -> Real {
    if std <= 0.0 {
        return mean.clamp(lo, hi);
    }
    let v = Normal::new(mean as f64, std as f64).expect("finite").sample(rng) as Real;
    v.clamp(lo, hi)
}

fn uniform_disk<R: Rng + ?Sized>(rng: &mut R, center: [Real; 2], radius: Real) -> [Real; 2] {
    let r = radius * rng.gen::<Real>().sqrt();
    let t = rng.gen::<Real>() * 2.0 * PI as Real;
    [center[0] + r * t.cos(), center[1] + r * t.sin()]
}

fn heading(v: [Real; 2]) -> Option<Real> {
    (v[0].hypot(v[1]) > 1e-9).then(|| wrap_angle(v[1].atan2(v[0])))
}

/// Matérn-style placement: parents uniform in the walkable disk around the sensor,
/// members uniform within `spread` of their parent, no two walkers overlapping.
/// Members share their group's velocity.
pub fn place_crowd<R: Rng + ?Sized>(layout: &SceneLayout, crowd: &CrowdModel, rng: &mut R) -> Result<Vec<Pedestrian>> {
    crowd.validate()?;
    let n = crowd.count();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = crowd.clusters.min(n);
    let mut parents = Vec::with_capacity(k);
    for _ in 0..k {
        let p = (0..PLACEMENT_TRIES)
            .map(|_| uniform_disk(rng, [0.0, 0.0], crowd.area_radius))
            .find(|&p| layout.is_free(p, 0.4))
            .ok_or_else(|| {
                Error::Generation(format!(
                    "no free parent site within {} m on layout {}",
                    crowd.area_radius, layout.kind
                ))
            })?;
        let speed = normal_clamped(rng, crowd.speed_mean, crowd.speed_std, 0.0, crowd.speed_max);
        let dir = rng.gen::<Real>() * 2.0 * PI as Real;
        parents.push((p, [speed * dir.cos(), speed * dir.sin()]));
    }
    let mut peds: Vec<Pedestrian> = Vec::with_capacity(n);
    for id in 0..n {
        let cluster = if id < k { id } else { rng.gen_range(0..k) };
        let (parent, velocity) = parents[cluster];
        let mut size = [0.0; 3];
        for a in 0..3 {
            let m = crowd.size_mean[a];
            size[a] = normal_clamped(rng, m, crowd.size_std[a], 0.5 * m, 1.5 * m);
        }
        let radius = 0.25 * (size[0] + size[1]);
        let fits = |p: [Real; 2], peds: &[Pedestrian]| {
            layout.is_free(p, radius)
                && peds.iter().all(|q| {
                    let d = (p[0] - q.position[0]).hypot(p[1] - q.position[1]);
                    d >= radius + q.radius()
                })
        };
        let mut spot = None;
        for _ in 0..PLACEMENT_TRIES {
            let p = uniform_disk(rng, parent, crowd.spread);
            if fits(p, &peds) {
                spot = Some(p);
                break;
            }
        }
        if spot.is_none() {
            // the group is full; stand anywhere in the area instead
            for _ in 0..PLACEMENT_TRIES {
                let p = uniform_disk(rng, [0.0, 0.0], crowd.area_radius);
                if fits(p, &peds) {
                    spot = Some(p);
                    break;
                }
            }
        }
        let position = spot.ok_or_else(|| {
            Error::Generation(format!(
                "could not place pedestrian {} of {} on layout {} after {} retries",
                id + 1,
                n,
                layout.kind,
                2 * PLACEMENT_TRIES
            ))
        })?;
        let yaw = heading(velocity).unwrap_or_else(|| wrap_angle(rng.gen::<Real>() * 2.0 * PI as Real));
        peds.push(Pedestrian {
            id,
            position,
            size,
            yaw,
            velocity,
        });
    }
    Ok(peds)
}

/// Advance every walker by `dt` seconds; a blocked step reflects the velocity
/// (x, then y, then both) and a walker with no free reflection stands still.
pub fn step_crowd(layout: &SceneLayout, peds: &mut [Pedestrian], dt: Real) {
    for p in peds.iter_mut() {
        let v = p.velocity;
        let candidates = [v, [-v[0], v[1]], [v[0], -v[1]], [-v[0], -v[1]]];
        let r = p.radius();
        match candidates.iter().find(|c| {
            let q = [p.position[0] + c[0] * dt, p.position[1] + c[1] * dt];
            layout.is_free(q, r)
        }) {
            Some(&c) => {
                p.position = [p.position[0] + c[0] * dt, p.position[1] + c[1] * dt];
                p.velocity = c;
                if let Some(h) = heading(c) {
                    p.yaw = h;
                }
            }
            None => p.velocity = [0.0, 0.0],
        }
    }
}

fn frame_dt() -> Real {
    FRAME_DT_US as Real * 1e-6
}

/// BEV pedestrian positions per frame, without ray casting (same crowd as `generate_scene`).
pub fn crowd_positions(layout: &SceneLayout, crowd: &CrowdModel, frames: usize, seed: u64) -> Result<Vec<Vec<[Real; 2]>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut peds = place_crowd(layout, crowd, &mut rng)?;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            step_crowd(layout, &mut peds, frame_dt());
        }
        out.push(peds.iter().map(|p| p.position).collect());
    }
    Ok(out)
}

pub fn generate_scene(
    layout: &SceneLayout,
    crowd: &CrowdModel,
    lidar: &LidarModel,
    frames: usize,
    seed: u64,
) -> Result<SynthScene> {
    if frames == 0 {
        return Err(Error::Contract("a scene needs at least one frame".into()));
    }
    layout.validate()?;
    lidar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut peds = place_crowd(layout, crowd, &mut rng)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let h = lidar.sensor_height;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            step_crowd(layout, &mut peds, frame_dt());
        }
        let geom = SceneGeometry {
            obstacles: &layout.obstacles,
            pedestrians: &peds,
        };
        let cast = raycast(&geom, lidar, &mut noise_rng)?;
        let timestamp_us = f as u64 * FRAME_DT_US;
        let annotations = peds
            .iter()
            .zip(&cast.hits_per_pedestrian)
            .map(|(p, &hits)| {
                let mut bbox = Box3D::new([p.position[0], p.position[1], 0.5 * p.size[2] - h], p.size, p.yaw, 0);
                bbox.instance_id = Some(format!("ped-{:04}", p.id));
                SynthAnnotation {
                    instance: p.id,
                    bbox,
                    velocity: p.velocity,
                    num_lidar_pts: hits,
                    visible: hits > 0,
                }
            })
            .collect();
        let cloud = PointCloud::new(4, cast.cloud.raw().to_vec(), format!("{}-{:03}", layout.kind, f), timestamp_us)?;
        out.push(SynthFrame {
            timestamp_us,
            cloud,
            annotations,
        });
    }
    Ok(SynthScene {
        layout: layout.clone(),
        frames: out,
    })
}

/// Density statistics of a run of generated scenes.
pub fn scene_density(scenes: &[SynthScene]) -> Result<DensityStats> {
    let frames: Vec<Vec<[Real; 2]>> = scenes
        .iter()
        .flat_map(|s| &s.frames)
        .map(|f| f.annotations.iter().map(|a| [a.bbox.center[0], a.bbox.center[1]]).collect())
        .collect();
    density_stats(&frames)
}

pub const CALIBRATION_BUDGET: usize = 100;

/// Crowd statistics of the reference pedestrian dataset.
pub fn pfsd_target() -> DensityStats {
    DensityStats {
        frames: 0,
        pedes_per_frame: 32.0,
        density_2: 2.6,
        density_5: 6.0,
        density_10: 11.6,
    }
}
const CALIBRATION_SCENES: u64 = 8;
const CALIBRATION_FRAMES: usize = 4;

/// Result of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub crowd: CrowdModel,
    pub achieved: DensityStats,
    pub configs_tried: usize,
}

fn relative_gap(got: Real, want: Real) -> Real {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want
    }
}

/// Worst relative miss over Pedes/Fr and the three densities.
pub fn calibration_error(got: &DensityStats, target: &DensityStats) -> Real {
    [
        relative_gap(got.pedes_per_frame, target.pedes_per_frame),
        relative_gap(got.density_2, target.density_2),
        relative_gap(got.density_5, target.density_5),
        relative_gap(got.density_10, target.density_10),
    ]
    .into_iter()
    .fold(0.0, Real::max)
}

fn measure(layout: &SceneLayout, crowd: &CrowdModel, seed: u64) -> Result<DensityStats> {
    let mut frames = Vec::new();
    for s in 0..CALIBRATION_SCENES {
        frames.extend(crowd_positions(layout, crowd, CALIBRATION_FRAMES, scene_seed(seed, s))?);
    }
    density_stats(&frames)
}

/// Calibrate one crowd per layout kind against `target`.
pub fn calibrate_layouts(
    kinds: &[LayoutKind],
    target: &DensityStats,
    tolerance: Real,
    seed: u64,
) -> Result<Vec<(LayoutKind, Calibration)>> {
    kinds
        .iter()
        .map(|&k| calibrate_crowd(target, &SceneLayout::new(k), tolerance, seed).map(|c| (k, c)))
        .collect()
}

/// Search crowd parameters until Pedes/Fr and Density-2/5/10 sit within `tolerance`
/// (relative) of `target` on `layout`. At most [`CALIBRATION_BUDGET`] configs are tried.
///
/// The group size tracks Density-2, the spread fine-tunes it, and the area radius
/// sets the longer-range densities.
pub fn calibrate_crowd(target: &DensityStats, layout: &SceneLayout, tolerance: Real, seed: u64) -> Result<Calibration> {
    let t = target;
    if !(t.pedes_per_frame >= 0.0) || t.densities().iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::Contract("calibration targets must be nonnegative".into()));
    }
    let mut crowd = CrowdModel {
        pedestrians_per_frame: t.pedes_per_frame.round(),
        ..CrowdModel::default()
    };
    let n = crowd.count();
    if n == 0 {
        crowd.pedestrians_per_frame = 0.0;
        let achieved = measure(layout, &crowd, seed)?;
        return Ok(Calibration {
            crowd,
            achieved,
            configs_tried: 1,
        });
    }
    let mut group = (t.density_2 + 1.0).clamp(1.0, n as Real);
    crowd.clusters = ((n as Real / group).round() as usize).clamp(1, n);
    let mut best: Option<(Real, CrowdModel, DensityStats)> = None;
    for tried in 1..=CALIBRATION_BUDGET {
        let stats = match measure(layout, &crowd, seed) {
            Ok(s) => s,
            Err(Error::Generation(_)) => {
                crowd.area_radius = (crowd.area_radius * 1.15).min(40.0);
                crowd.spread = (crowd.spread * 1.1).min(4.0);
                continue;
            }
            Err(e) => return Err(e),
        };
        let err = calibration_error(&stats, t);
        debug!(
            "calibration {}: clusters {} spread {:.2} radius {:.2} -> {:?} (err {:.3})",
            tried, crowd.clusters, crowd.spread, crowd.area_radius, stats, err
        );
        if best.as_ref().map_or(true, |(e, _, _)| err < *e) {
            best = Some((err, crowd.clone(), stats.clone()));
        }
        if err <= tolerance {
            return Ok(Calibration {
                crowd,
                achieved: stats,
                configs_tried: tried,
            });
        }
        // near field: more neighbors within 2 m means a smaller spread or bigger groups
        if t.density_2 > 0.0 && stats.density_2 > 0.0 {
            let ratio = (stats.density_2 / t.density_2).clamp(0.5, 2.0);
            let s = crowd.spread * ratio.powf(0.4);
            if s < 0.6 && ratio < 1.0 {
                group = (group + 0.5).min(n as Real);
            } else if s > 3.0 && ratio > 1.0 {
                group = (group - 0.5).max(1.0);
            }
            crowd.spread = s.clamp(0.6, 3.0);
        } else if t.density_2 > 0.0 {
            group = (group + 1.0).min(n as Real);
        }
        crowd.clusters = ((n as Real / group).round() as usize).clamp(1, n);
        // far field: neighbors beyond the own group scale like 1 / area
        let far_got = (stats.density_10 - stats.density_2).max(0.05);
        let far_want = (t.density_10 - t.density_2).max(0.05);
        let ratio = (far_got / far_want).clamp(0.25, 4.0);
        crowd.area_radius = (crowd.area_radius * ratio.powf(0.4)).clamp(3.0, 40.0);
    }
    let (err, crowd, achieved) = best.ok_or_else(|| Error::Calibration("no candidate config could be placed".into()))?;
    Err(Error::Calibration(format!(
        "best error {:.3} > tolerance {:.3} on layout {} with {:?} ({:?})",
        err, tolerance, layout.kind, achieved, crowd
    )))
}
