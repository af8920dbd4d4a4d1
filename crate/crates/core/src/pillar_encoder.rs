//! Point cloud to BEV pillar features.
//!
//! Points are binned into full-height x/y columns, each stored point is augmented
//! with its offset from the pillar center, mapped through a learned linear layer
//! with ReLU, and max-pooled per pillar. The pooled vectors are scattered onto the
//! BEV grid as a sparse feature map.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{SparseGeometry, SparseVar};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Raw LiDAR frame: `N x D` row-major point matrix, columns `x, y, z, intensity, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dims: usize,
    points: Vec<Real>,
    pub frame_id: String,
    pub timestamp: u64,
}

impl PointCloud {
    pub fn new(dims: usize, points: Vec<Real>, frame_id: impl Into<String>, timestamp: u64) -> Result<Self> {
        if dims < 4 {
            return Err(Error::Contract(format!("point clouds need at least 4 channels, got {}", dims)));
        }
        if points.len() % dims != 0 {
            return Err(Error::dim(
                "PointCloud::new",
                format!("{} values is not a multiple of {} channels", points.len(), dims),
            ));
        }
        if let Some(i) = points.chunks(dims).position(|p| !p[..3].iter().all(|v| v.is_finite())) {
            return Err(Error::Contract(format!("point {} has a non-finite coordinate", i)));
        }
        Ok(PointCloud {
            dims,
            points,
            frame_id: frame_id.into(),
            timestamp,
        })
    }

    pub fn empty(dims: usize) -> Self {
        PointCloud {
            dims: dims.max(4),
            points: Vec::new(),
            frame_id: String::new(),
            timestamp: 0,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[Real] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Real]> {
        self.points.chunks(self.dims)
    }

    pub fn raw(&self) -> &[Real] {
        &self.points
    }

    /// Append per-point channels (e.g. velocity) after the existing ones.
    pub fn with_extra_channels(&self, extra: &[Vec<Real>]) -> Result<Self> {
        if extra.len() != self.len() {
            return Err(Error::dim(
                "with_extra_channels",
                format!("{} rows for {} points", extra.len(), self.len()),
            ));
        }
        let width = extra.first().map_or(0, Vec::len);
        if extra.iter().any(|e| e.len() != width) {
            return Err(Error::dim("with_extra_channels", "ragged extra channels"));
        }
        let mut points = Vec::with_capacity(self.len() * (self.dims + width));
        for (p, e) in self.iter().zip(extra) {
            points.extend_from_slice(p);
            points.extend_from_slice(e);
        }
        Ok(PointCloud {
            dims: self.dims + width,
            points,
            frame_id: self.frame_id.clone(),
            timestamp: self.timestamp,
        })
    }

    /// `.bin` payload: little-endian `f32` x, y, z, intensity per point.
    pub fn to_bin_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 16);
        for p in self.iter() {
            for &v in &p[..4] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bin_bytes(bytes: &[u8], frame_id: impl Into<String>, timestamp: u64) -> Result<Self> {
        if bytes.len() % 16 != 0 {
            return Err(Error::Contract(format!(
                "point payload of {} bytes is not a multiple of 16",
                bytes.len()
            )));
        }
        let points = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        PointCloud::new(4, points, frame_id, timestamp)
    }

    pub fn write_bin(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bin_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_bin(path: &Path, frame_id: impl Into<String>, timestamp: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bin_bytes(&bytes, frame_id, timestamp).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// BEV pillar grid over `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillarGridSpec {
    pub x_range: (Real, Real),
    pub y_range: (Real, Real),
    /// `(P_m, P_k)` pillar footprint in meters.
    pub pillar_size: (Real, Real),
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub feature_dim: usize,
}

impl Default for PillarGridSpec {
    fn default() -> Self {
        PillarGridSpec {
            x_range: (-25.6, 25.6),
            y_range: (-25.6, 25.6),
            pillar_size: (0.075, 0.075),
            max_points_per_pillar: 32,
            max_pillars: 12000,
            feature_dim: 64,
        }
    }
}

/// Cells needed to cover `extent` with `size`, tolerant of float noise in exact ratios.
pub(crate) fn cells_for(extent: Real, size: Real) -> usize {
    let ratio = extent / size;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-6 {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

impl PillarGridSpec {
    pub fn square(half_extent: Real, pillar: Real) -> Self {
        PillarGridSpec {
            x_range: (-half_extent, half_extent),
            y_range: (-half_extent, half_extent),
            pillar_size: (pillar, pillar),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (px, py) = self.pillar_size;
        if !(px > 0.0 && py > 0.0) {
            return Err(Error::Config(format!("pillar size {:?} must be positive", self.pillar_size)));
        }
        if !(self.x_range.1 > self.x_range.0 && self.y_range.1 > self.y_range.0) {
            return Err(Error::Config(format!(
                "empty grid range x {:?} y {:?}",
                self.x_range, self.y_range
            )));
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 || self.feature_dim == 0 {
            return Err(Error::Config("pillar capacities and feature width must be positive".into()));
        }
        Ok(())
    }

    /// `(M, K)`: pillars along x and y.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            cells_for(self.x_range.1 - self.x_range.0, self.pillar_size.0).max(1),
            cells_for(self.y_range.1 - self.y_range.0, self.pillar_size.1).max(1),
        )
    }

    /// Pillar `(row, col)` holding `(x, y)`, or `None` outside the range.
    pub fn locate(&self, x: Real, y: Real) -> Option<(usize, usize)> {
        if x < self.x_range.0 || x >= self.x_range.1 || y < self.y_range.0 || y >= self.y_range.1 {
            return None;
        }
        let (m, k) = self.grid_dims();
        let r = (((x - self.x_range.0) / self.pillar_size.0).floor() as usize).min(m - 1);
        let c = (((y - self.y_range.0) / self.pillar_size.1).floor() as usize).min(k - 1);
        Some((r, c))
    }

    pub fn pillar_center(&self, row: usize, col: usize) -> (Real, Real) {
        (
            self.x_range.0 + (row as Real + 0.5) * self.pillar_size.0,
            self.y_range.0 + (col as Real + 0.5) * self.pillar_size.1,
        )
    }
}

/// Occupied pillars of one frame with their augmented point features.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarizedScene {
    pub grid: (usize, usize),
    /// Occupied `(row, col)` in row-major order.
    pub pillar_coords: Vec<(usize, usize)>,
    /// CSR row pointer into `point_features`, one segment per pillar.
    pub offsets: Vec<usize>,
    /// Stored augmented points, `feature_width` values each.
    pub point_features: Vec<Real>,
    pub feature_width: usize,
    /// Points that fell in each kept pillar before subsampling.
    pub occupancy: Vec<usize>,
    pub points_in_range: usize,
    pub dropped_by_subsampling: usize,
    /// Points lost because their pillar exceeded the `max_pillars` budget.
    pub dropped_with_pillars: usize,
}

impl PillarizedScene {
    pub fn num_pillars(&self) -> usize {
        self.pillar_coords.len()
    }

    pub fn stored_points(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    pub fn pillar_points(&self, pillar: usize) -> impl Iterator<Item = &[Real]> {
        let (lo, hi) = (self.offsets[pillar], self.offsets[pillar + 1]);
        self.point_features[lo * self.feature_width..hi * self.feature_width].chunks(self.feature_width)
    }

    pub fn points_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.stored_points(), self.feature_width],
            self.point_features.clone(),
        )
        .expect("consistent pillar storage")
    }
}

/// `[features..., dx, dy]` with offsets measured from the pillar center.
pub fn augment_point(point: &[Real], pillar_center: (Real, Real)) -> Vec<Real> {
    let mut out = Vec::with_capacity(point.len() + 2);
    out.extend_from_slice(point);
    out.push(point[0] - pillar_center.0);
    out.push(point[1] - pillar_center.1);
    out
}

fn lexicographic(a: &[Real], b: &[Real]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Bin points into pillars, enforce capacity limits, and augment the survivors.
///
/// Within a pillar, points are put in a canonical (lexicographic) order before
/// the seeded subsample, so the result does not depend on input point order.
pub fn assign_pillars(cloud: &PointCloud, spec: &PillarGridSpec, rng_seed: u64) -> Result<PillarizedScene> {
    spec.validate()?;
    let (m, k) = spec.grid_dims();
    let d = cloud.dims();

    let mut keyed: Vec<(usize, usize)> = cloud
        .iter()
        .enumerate()
        .filter_map(|(i, p)| spec.locate(p[0], p[1]).map(|(r, c)| (r * k + c, i)))
        .collect();
    let points_in_range = keyed.len();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| lexicographic(cloud.point(a.1), cloud.point(b.1))));

    // (key, start, end) into `keyed`
    let mut groups: Vec<(usize, usize, usize)> = Vec::new();
    for (pos, &(key, _)) in keyed.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if g.0 == key => g.2 = pos + 1,
            _ => groups.push((key, pos, pos + 1)),
        }
    }

    let mut dropped_with_pillars = 0;
    if groups.len() > spec.max_pillars {
        let mut ranked: Vec<usize> = (0..groups.len()).collect();
        ranked.sort_by(|&a, &b| {
            let (ga, gb) = (groups[a], groups[b]);
            (gb.2 - gb.1).cmp(&(ga.2 - ga.1)).then(ga.0.cmp(&gb.0))
        });
        let mut keep = vec![false; groups.len()];
        for &g in &ranked[..spec.max_pillars] {
            keep[g] = true;
        }
        for (g, &kept) in groups.iter().zip(&keep) {
            if !kept {
                dropped_with_pillars += g.2 - g.1;
            }
        }
        let mut it = keep.iter();
        groups.retain(|_| *it.next().unwrap());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let width = d + 2;
    let mut scene = PillarizedScene {
        grid: (m, k),
        pillar_coords: Vec::with_capacity(groups.len()),
        offsets: vec![0],
        point_features: Vec::new(),
        feature_width: width,
        occupancy: Vec::with_capacity(groups.len()),
        points_in_range,
        dropped_by_subsampling: 0,
        dropped_with_pillars,
    };
    for &(key, lo, hi) in &groups {
        let (r, c) = (key / k, key % k);
        let center = spec.pillar_center(r, c);
        let occ = hi - lo;
        let members: Vec<usize> = if occ > spec.max_points_per_pillar {
            let mut picked = sample(&mut rng, occ, spec.max_points_per_pillar).into_vec();
            picked.sort_unstable();
            scene.dropped_by_subsampling += occ - spec.max_points_per_pillar;
            picked.into_iter().map(|j| keyed[lo + j].1).collect()
        } else {
            keyed[lo..hi].iter().map(|&(_, i)| i).collect()
        };
        for i in &members {
            scene.point_features.extend(augment_point(cloud.point(*i), center));
        }
        scene.pillar_coords.push((r, c));
        scene.occupancy.push(occ);
        let last = *scene.offsets.last().unwrap();
        scene.offsets.push(last + members.len());
    }
    Ok(scene)
}

/// Per-pillar features `[P, E]`: `max_i ReLU(p_i W_f)` over the pillar's stored points.
///
/// `w_f` has shape `[D + 2, E]`.
pub fn encode_pillars(tape: &mut Tape, scene: &PillarizedScene, w_f: Var) -> Result<Var> {
    let ws = tape.shape(w_f).to_vec();
    if ws.len() != 2 || ws[0] != scene.feature_width {
        return Err(Error::dim(
            "encode_pillars",
            format!("W_f {:?} for augmented width {}", ws, scene.feature_width),
        ));
    }
    let points = tape.constant(scene.points_tensor());
    let projected = tape.matmul(points, w_f)?;
    let activated = tape.relu(projected);
    tape.segment_max(activated, &scene.offsets)
}

/// Place pillar features on the `M x K` BEV grid as a sparse map.
pub fn scatter_to_bev(features: Var, coords: &[(usize, usize)], spec: &PillarGridSpec) -> Result<SparseVar> {
    let (m, k) = spec.grid_dims();
    let geom = SparseGeometry::new(m, k, coords.to_vec())?;
    Ok(SparseVar {
        geom: Rc::new(geom),
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::densify;

    fn cloud(points: &[[Real; 4]]) -> PointCloud {
        PointCloud::new(4, points.iter().flatten().copied().collect(), "f", 0).unwrap()
    }

    fn spec_half_meter() -> PillarGridSpec {
        PillarGridSpec {
            x_range: (0.0, 4.0),
            y_range: (0.0, 4.0),
            pillar_size: (0.5, 0.5),
            max_points_per_pillar: 32,
            max_pillars: 100,
            feature_dim: 4,
        }
    }

    #[test]
    fn grid_dims_tolerate_float_ratios() {
        let s = PillarGridSpec::square(4.8, 0.075);
        assert_eq!(s.grid_dims(), (128, 128));
        let s = PillarGridSpec::square(4.8, 0.05);
        assert_eq!(s.grid_dims(), (192, 192));
        let s = PillarGridSpec::square(1.0, 0.3);
        assert_eq!(s.grid_dims(), (7, 7));
    }

    #[test]
    fn empty_cloud_has_no_pillars() {
        let s = assign_pillars(&PointCloud::empty(4), &spec_half_meter(), 0).unwrap();
        assert_eq!(s.num_pillars(), 0);
        assert_eq!(s.offsets, vec![0]);
    }

    #[test]
    fn point_at_center_has_zero_offset() {
        let s = assign_pillars(&cloud(&[[1.25, 2.75, 0.3, 0.5]]), &spec_half_meter(), 0).unwrap();
        assert_eq!(s.pillar_coords, vec![(2, 5)]);
        let p: Vec<&[Real]> = s.pillar_points(0).collect();
        assert_eq!(&p[0][4..], &[0.0, 0.0]);
    }

    #[test]
    fn five_points_match_floor_division() {
        let pts = [
            [0.1, 0.1, 0.0, 0.1],
            [0.49, 0.51, 1.0, 0.2],
            [3.99, 0.0, 0.5, 0.3],
            [2.5, 2.5, 0.2, 0.4],
            [1.76, 3.2, 0.9, 0.5],
        ];
        let s = assign_pillars(&cloud(&pts), &spec_half_meter(), 0).unwrap();
        // oracle: floor((x - 0) / 0.5), floor((y - 0) / 0.5)
        let mut expected: Vec<(usize, usize)> = pts
            .iter()
            .map(|p| ((p[0] / 0.5).floor() as usize, (p[1] / 0.5).floor() as usize))
            .collect();
        expected.sort();
        expected.dedup();
        assert_eq!(s.pillar_coords, expected);
        assert_eq!(expected, vec![(0, 0), (0, 1), (3, 6), (5, 5), (7, 0)]);
    }

    #[test]
    fn out_of_range_points_are_dropped() {
        let s = assign_pillars(&cloud(&[[4.0, 1.0, 0.0, 0.0], [-0.01, 1.0, 0.0, 0.0]]), &spec_half_meter(), 0).unwrap();
        assert_eq!(s.points_in_range, 0);
        assert_eq!(s.num_pillars(), 0);
    }

    #[test]
    fn corner_offsets() {
        let a = augment_point(&[0.5, 0.5, 0.1, 0.2], (0.25, 0.25));
        assert_eq!(a.len(), 6);
        assert_eq!(&a[4..], &[0.25, 0.25]);
        let b = augment_point(&[0.0, 0.0, 0.1, 0.2], (0.25, 0.25));
        assert_eq!(&b[4..], &[-0.25, -0.25]);
    }

    #[test]
    fn subsampling_caps_points_and_conserves_count() {
        let mut spec = spec_half_meter();
        spec.max_points_per_pillar = 3;
        let pts: Vec<[Real; 4]> = (0..10).map(|i| [0.1 + i as Real * 0.01, 0.2, 0.0, 0.0]).collect();
        let s = assign_pillars(&cloud(&pts), &spec, 9).unwrap();
        assert_eq!(s.stored_points(), 3);
        assert_eq!(s.occupancy, vec![10]);
        assert_eq!(s.dropped_by_subsampling, 7);
        let again = assign_pillars(&cloud(&pts), &spec, 9).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn pillar_budget_keeps_most_occupied() {
        let mut spec = spec_half_meter();
        spec.max_pillars = 2;
        let pts = [
            [0.1, 0.1, 0.0, 0.0],
            [1.1, 0.1, 0.0, 0.0],
            [1.2, 0.1, 0.0, 0.0],
            [2.1, 0.1, 0.0, 0.0],
            [3.1, 0.1, 0.0, 0.0],
            [3.2, 0.1, 0.0, 0.0],
        ];
        let s = assign_pillars(&cloud(&pts), &spec, 0).unwrap();
        assert_eq!(s.pillar_coords, vec![(2, 0), (6, 0)]);
        assert_eq!(s.dropped_with_pillars, 2);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let s = assign_pillars(&cloud(&[[1.0, 1.0, 0.5, 0.5], [2.0, 1.0, 0.5, 0.5]]), &spec_half_meter(), 0).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[6, 3]));
        let f = encode_pillars(&mut tape, &s, w).unwrap();
        assert_eq!(tape.shape(f), &[2, 3]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_point_pillar_is_elementwise_max() {
        // one pillar [0, 0.5)^2 with center (0.25, 0.25)
        let pts = [[0.25, 0.25, 1.0, 0.5], [0.0, 0.5 - 1e-9, 0.0, 1.0], [0.4, 0.1, 2.0, 0.0]];
        let s = assign_pillars(&cloud(&pts), &spec_half_meter(), 0).unwrap();
        assert_eq!(s.num_pillars(), 1);
        // W_f columns: z, intensity - z, dx + dy
        let mut w = Tensor::zeros(&[6, 3]);
        w.data_mut()[2 * 3] = 1.0;
        w.data_mut()[3 * 3 + 1] = 1.0;
        w.data_mut()[2 * 3 + 1] = -1.0;
        w.data_mut()[4 * 3 + 2] = 1.0;
        w.data_mut()[5 * 3 + 2] = 1.0;
        // hand values per point: relu(z), relu(i - z), relu(dx + dy)
        //   p0: 1.0, 0.0, 0.0
        //   p1: 0.0, 1.0, relu(-0.25 + 0.25 - 1e-9) = 0
        //   p2: 2.0, 0.0, relu(0.15 - 0.15) = 0
        let mut tape = Tape::new();
        let wv = tape.param(w);
        let f = encode_pillars(&mut tape, &s, wv).unwrap();
        let got = tape.value(f).data();
        assert_eq!(got[0], 2.0);
        assert_eq!(got[1], 1.0);
        assert!(got[2].abs() < 1e-12);
    }

    #[test]
    fn scatter_places_features_at_coords() {
        let spec = spec_half_meter();
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let map = scatter_to_bev(feats, &[(2, 3)], &spec).unwrap();
        let dense = densify(&mut tape, &map).unwrap();
        let d = tape.value(dense);
        assert_eq!(d.shape(), &[2, 8, 8]);
        for c in 0..2 {
            for r in 0..8 {
                for q in 0..8 {
                    let v = d.at3(c, r, q);
                    if (r, q) == (2, 3) {
                        assert_eq!(v, [3.0, 4.0][c]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert!(scatter_to_bev(feats, &[(2, 3), (2, 3)], &spec).is_err());
    }

    #[test]
    fn bin_round_trip() {
        let c = cloud(&[[1.5, -2.25, 0.125, 0.5], [3.0, 4.0, 5.0, 1.0]]);
        let back = PointCloud::from_bin_bytes(&c.to_bin_bytes(), "f", 0).unwrap();
        assert_eq!(back, c);
        assert!(PointCloud::from_bin_bytes(&[0u8; 15], "f", 0).is_err());
    }
}
