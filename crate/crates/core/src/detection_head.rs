//! Center-based detection head: Gaussian center targets, focal + L1 loss, and
//! local-maximum decoding back to 3D boxes.
//!
//! Regression channels per cell, in order: `dx, dy` (sub-cell center offset in
//! cell units), `z`, `ln l, ln w, ln h`, `sin yaw, cos yaw`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{focal_term, Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const REG_CHANNELS: usize = 8;
pub const FOCAL_ALPHA: Real = 2.0;
pub const FOCAL_BETA: Real = 4.0;
pub const HEATMAP_WEIGHT: Real = 1.0;
pub const REGRESSION_WEIGHT: Real = 0.25;
pub const MIN_OVERLAP: Real = 0.7;
pub const MIN_RADIUS: usize = 2;
/// Prior-probability bias of the heatmap logits (sigmoid(-2.19) ~ 0.1).
const HEATMAP_PRIOR_BIAS: Real = -2.19;

/// 7-DoF box with class; `score` is set on detections, `instance_id` on annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [Real; 3],
    /// `(l, w, h)` in meters.
    pub size: [Real; 3],
    pub yaw: Real,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
}

impl Box3D {
    pub fn new(center: [Real; 3], size: [Real; 3], yaw: Real, class_id: usize) -> Self {
        Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
            score: None,
            instance_id: None,
        }
    }

    pub fn bev_distance(&self, other: &Box3D) -> Real {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0) {
            return Err(Error::Contract(format!("box size {:?} must be positive", self.size)));
        }
        if !(self.yaw > -(PI as Real) && self.yaw <= PI as Real) {
            return Err(Error::Contract(format!("yaw {} outside (-pi, pi]", self.yaw)));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Contract(format!("score {} outside [0, 1]", s)));
            }
        }
        Ok(())
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: Real) -> Real {
    let two_pi = 2.0 * PI as Real;
    let mut w = a % two_pi;
    if w <= -(PI as Real) {
        w += two_pi;
    } else if w > PI as Real {
        w -= two_pi;
    }
    w
}

/// The BEV grid the head predicts on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGrid {
    pub x_min: Real,
    pub y_min: Real,
    pub cell: (Real, Real),
    /// `(rows along x, cols along y)`.
    pub dims: (usize, usize),
}

impl HeadGrid {
    pub fn covering(x_range: (Real, Real), y_range: (Real, Real), dims: (usize, usize)) -> Self {
        HeadGrid {
            x_min: x_range.0,
            y_min: y_range.0,
            cell: (
                (x_range.1 - x_range.0) / dims.0 as Real,
                (y_range.1 - y_range.0) / dims.1 as Real,
            ),
            dims,
        }
    }

    /// Continuous cell coordinates of `(x, y)`.
    fn to_cells(&self, x: Real, y: Real) -> (Real, Real) {
        ((x - self.x_min) / self.cell.0, (y - self.y_min) / self.cell.1)
    }

    pub fn cell_of(&self, x: Real, y: Real) -> Option<(usize, usize)> {
        let (u, v) = self.to_cells(x, y);
        if u < 0.0 || v < 0.0 || u >= self.dims.0 as Real || v >= self.dims.1 as Real {
            return None;
        }
        Some((u.floor() as usize, v.floor() as usize))
    }
}

/// Training targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[classes, H, W]`, peaks of exactly 1 at object centers.
    pub heatmap: Tensor,
    /// `[8, H, W]`, valid where `mask` is 1.
    pub regression: Tensor,
    /// `[H, W]` indicator of center cells.
    pub mask: Tensor,
}

/// CornerNet-style Gaussian radius (in cells) for a box footprint of `h x w` cells.
pub fn gaussian_radius(h: Real, w: Real, min_overlap: Real) -> Real {
    let (a1, b1, c1) = (1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

fn draw_gaussian(plane: &mut [Real], dims: (usize, usize), center: (usize, usize), radius: usize) {
    let sigma = (2 * radius + 1) as Real / 6.0;
    let r = radius as isize;
    for dr in -r..=r {
        for dc in -r..=r {
            let row = center.0 as isize + dr;
            let col = center.1 as isize + dc;
            if row < 0 || col < 0 || row >= dims.0 as isize || col >= dims.1 as isize {
                continue;
            }
            let g = (-((dr * dr + dc * dc) as Real) / (2.0 * sigma * sigma)).exp();
            if g < Real::EPSILON {
                continue;
            }
            let idx = row as usize * dims.1 + col as usize;
            if g > plane[idx] {
                plane[idx] = g;
            }
        }
    }
}

/// Gaussian center heatmaps plus regression targets at each annotation's center cell.
///
/// Annotations outside the grid or with an unknown class are skipped; overlapping
/// Gaussians combine by max; when two centers share a cell the first one keeps it.
pub fn build_targets(annotations: &[Box3D], grid: &HeadGrid, num_classes: usize) -> Targets {
    let (h, w) = grid.dims;
    let hw = h * w;
    let mut heatmap = Tensor::zeros(&[num_classes, h, w]);
    let mut regression = Tensor::zeros(&[REG_CHANNELS, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    for ann in annotations {
        if ann.class_id >= num_classes {
            continue;
        }
        let Some((row, col)) = grid.cell_of(ann.center[0], ann.center[1]) else {
            continue;
        };
        let radius = gaussian_radius(ann.size[0] / grid.cell.0, ann.size[1] / grid.cell.1, MIN_OVERLAP);
        let radius = (radius.max(0.0).floor() as usize).max(MIN_RADIUS);
        let plane = &mut heatmap.data_mut()[ann.class_id * hw..(ann.class_id + 1) * hw];
        draw_gaussian(plane, grid.dims, (row, col), radius);
        plane[row * w + col] = 1.0;

        let site = row * w + col;
        if mask.data()[site] == 1.0 {
            continue;
        }
        mask.data_mut()[site] = 1.0;
        let (u, v) = grid.to_cells(ann.center[0], ann.center[1]);
        let values = [
            u - row as Real - 0.5,
            v - col as Real - 0.5,
            ann.center[2],
            ann.size[0].ln(),
            ann.size[1].ln(),
            ann.size[2].ln(),
            ann.yaw.sin(),
            ann.yaw.cos(),
        ];
        for (ch, val) in values.into_iter().enumerate() {
            regression.data_mut()[ch * hw + site] = val;
        }
    }
    Targets {
        heatmap,
        regression,
        mask,
    }
}

/// Head predictions for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[classes, H, W]` probabilities in (0, 1).
    pub heatmap: Tensor,
    /// `[8, H, W]`.
    pub regression: Tensor,
}

/// Loss on plain values; `pred.heatmap` holds probabilities (clamped to `[1e-4, 1 - 1e-4]`).
pub fn detection_loss(pred: &HeadOutput, targets: &Targets) -> Result<Real> {
    if pred.heatmap.shape() != targets.heatmap.shape() || pred.regression.shape() != targets.regression.shape() {
        return Err(Error::dim(
            "detection_loss",
            format!(
                "prediction {:?}/{:?} vs targets {:?}/{:?}",
                pred.heatmap.shape(),
                pred.regression.shape(),
                targets.heatmap.shape(),
                targets.regression.shape()
            ),
        ));
    }
    let t = targets.heatmap.data();
    let npos = t.iter().filter(|&&v| v == 1.0).count().max(1) as Real;
    let focal: Real = pred
        .heatmap
        .data()
        .iter()
        .zip(t)
        .map(|(&p, &y)| focal_term(p.clamp(1e-4, 1.0 - 1e-4), y, FOCAL_ALPHA, FOCAL_BETA).0)
        .sum::<Real>()
        / npos;
    let m = targets.mask.data();
    let hw = m.len();
    let nmask = m.iter().sum::<Real>().max(1.0);
    let l1: Real = pred
        .regression
        .data()
        .iter()
        .zip(targets.regression.data())
        .enumerate()
        .map(|(i, (p, y))| m[i % hw] * (p - y).abs())
        .sum::<Real>()
        / nmask;
    Ok(HEATMAP_WEIGHT * focal + REGRESSION_WEIGHT * l1)
}

/// Same loss recorded on a tape, from heatmap logits and raw regression.
pub fn detection_loss_graph(tape: &mut Tape, heat_logits: Var, regression: Var, targets: &Targets) -> Result<Var> {
    let focal = tape.focal_loss(heat_logits, &targets.heatmap, FOCAL_ALPHA, FOCAL_BETA)?;
    let l1 = tape.masked_l1(regression, &targets.regression, &targets.mask)?;
    let focal = tape.scale(focal, HEATMAP_WEIGHT);
    let l1 = tape.scale(l1, REGRESSION_WEIGHT);
    tape.add(focal, l1)
}

/// Decoding thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_dets: usize,
    pub score_threshold: Real,
    /// Optional circular suppression radius in meters on BEV centers.
    #[serde(default)]
    pub nms_radius: Option<Real>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_dets: 100,
            score_threshold: 0.1,
            nms_radius: None,
        }
    }
}

/// Cells that are 3x3 local maxima. Among equal neighbours the row-major first cell wins.
fn is_peak(plane: &[Real], dims: (usize, usize), row: usize, col: usize) -> bool {
    let (h, w) = dims;
    let idx = row * w + col;
    let v = plane[idx];
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let r = row as isize + dr;
            let c = col as isize + dc;
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                continue;
            }
            let n = r as usize * w + c as usize;
            if plane[n] > v || (plane[n] == v && n < idx) {
                return false;
            }
        }
    }
    true
}

/// Peaks above `score_threshold`, best `max_dets` by score, converted back to boxes.
pub fn decode(pred: &HeadOutput, grid: &HeadGrid, cfg: &DecodeConfig) -> Result<Vec<Box3D>> {
    let hs = pred.heatmap.shape();
    if hs.len() != 3 || hs[1..] != [grid.dims.0, grid.dims.1] || pred.regression.shape() != [REG_CHANNELS, hs[1], hs[2]] {
        return Err(Error::dim(
            "decode",
            format!("heatmap {:?}, regression {:?}, grid {:?}", hs, pred.regression.shape(), grid.dims),
        ));
    }
    let (h, w) = grid.dims;
    let hw = h * w;
    // (score, class, site)
    let mut peaks: Vec<(Real, usize, usize)> = Vec::new();
    for cls in 0..hs[0] {
        let plane = &pred.heatmap.data()[cls * hw..(cls + 1) * hw];
        for row in 0..h {
            for col in 0..w {
                let s = plane[row * w + col];
                if s > cfg.score_threshold && is_peak(plane, grid.dims, row, col) {
                    peaks.push((s, cls, row * w + col));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let reg = pred.regression.data();
    let mut out: Vec<Box3D> = Vec::new();
    for (score, cls, site) in peaks {
        if out.len() >= cfg.max_dets {
            break;
        }
        let (row, col) = (site / w, site % w);
        let r = |ch: usize| reg[ch * hw + site];
        let x = grid.x_min + (row as Real + 0.5 + r(0)) * grid.cell.0;
        let y = grid.y_min + (col as Real + 0.5 + r(1)) * grid.cell.1;
        let mut b = Box3D::new([x, y, r(2)], [r(3).exp(), r(4).exp(), r(5).exp()], r(6).atan2(r(7)), cls);
        b.score = Some(score);
        if let Some(radius) = cfg.nms_radius {
            if out.iter().any(|o| o.class_id == cls && o.bev_distance(&b) < radius) {
                continue;
            }
        }
        out.push(b);
    }
    Ok(out)
}

/// Learned head: shared 3x3 conv, then 1x1 heatmap and regression convs.
#[derive(Clone, Debug)]
pub struct CenterHead {
    pub num_classes: usize,
    shared: (ParamId, ParamId),
    heat: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

impl CenterHead {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        hidden: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let shared = store.add_conv("head.shared", hidden, in_channels, 3, rng);
        let heat = store.add_conv("head.heatmap", num_classes, hidden, 1, rng);
        store
            .get_mut(heat.1)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = HEATMAP_PRIOR_BIAS);
        let reg = store.add_conv("head.regression", REG_CHANNELS, hidden, 1, rng);
        CenterHead {
            num_classes,
            shared,
            heat,
            reg,
        }
    }

    /// `(heatmap logits, regression)` from the fused map `[C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, fused: Var, bound: &Bound) -> Result<(Var, Var)> {
        let x = tape.conv2d(fused, bound.var(self.shared.0), Some(bound.var(self.shared.1)), 1, 1)?;
        let x = tape.relu(x);
        let heat = tape.conv2d(x, bound.var(self.heat.0), Some(bound.var(self.heat.1)), 1, 0)?;
        let reg = tape.conv2d(x, bound.var(self.reg.0), Some(bound.var(self.reg.1)), 1, 0)?;
        Ok((heat, reg))
    }
}

/// Plain-value head output from tape values of `forward`.
pub fn head_output(tape: &Tape, heat_logits: Var, regression: Var) -> HeadOutput {
    HeadOutput {
        heatmap: tape.value(heat_logits).map(crate::numerics::sigmoid),
        regression: tape.value(regression).clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> HeadGrid {
        HeadGrid::covering((0.0, 8.0), (0.0, 8.0), (16, 16))
    }

    fn ped(x: Real, y: Real) -> Box3D {
        Box3D::new([x, y, 0.9], [0.6, 0.5, 1.7], 0.3, 0)
    }

    #[test]
    fn no_annotations_zero_heatmap() {
        let t = build_targets(&[], &grid(), 1);
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.mask.sum(), 0.0);
    }

    #[test]
    fn one_annotation_peaks_at_its_cell() {
        let t = build_targets(&[ped(2.3, 5.1)], &grid(), 1);
        let (r, c) = (4, 10);
        assert_eq!(t.heatmap.at3(0, r, c), 1.0);
        let max = t.heatmap.data().iter().cloned().fold(0.0, Real::max);
        assert_eq!(max, 1.0);
        assert_eq!(t.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(t.mask.sum(), 1.0);
    }

    #[test]
    fn two_annotations_two_unit_peaks() {
        let t = build_targets(&[ped(2.3, 2.3), ped(6.1, 6.1)], &grid(), 1);
        assert_eq!(t.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(t.heatmap.at3(0, 4, 4), 1.0);
        assert_eq!(t.heatmap.at3(0, 12, 12), 1.0);
    }

    #[test]
    fn pedestrian_radius_hits_minimum() {
        let r = gaussian_radius(3.0, 2.5, MIN_OVERLAP);
        assert!(r < MIN_RADIUS as Real);
    }

    #[test]
    fn outside_annotations_are_skipped() {
        let t = build_targets(&[ped(-1.0, 2.0), ped(8.0, 1.0)], &grid(), 1);
        assert_eq!(t.heatmap.sum(), 0.0);
    }

    #[test]
    fn perfect_clamped_prediction_has_tiny_loss() {
        let t = build_targets(&[ped(2.3, 2.3), ped(6.1, 6.1)], &grid(), 1);
        let hard = t.heatmap.map(|v| if v == 1.0 { 1.0 - 1e-4 } else { 1e-4 });
        let hard_targets = Targets {
            heatmap: t.heatmap.map(|v| if v == 1.0 { 1.0 } else { 0.0 }),
            ..t.clone()
        };
        let pred = HeadOutput {
            heatmap: hard,
            regression: t.regression.clone(),
        };
        let loss = detection_loss(&pred, &hard_targets).unwrap();
        assert!(loss <= 1e-3, "loss {}", loss);
    }

    #[test]
    fn empty_frame_near_zero_heatmap_loss() {
        let t = build_targets(&[], &grid(), 1);
        let pred = HeadOutput {
            heatmap: Tensor::full(&[1, 16, 16], 1e-4),
            regression: Tensor::zeros(&[8, 16, 16]),
        };
        assert!(detection_loss(&pred, &t).unwrap() < 1e-6);
    }

    #[test]
    fn zero_heatmap_decodes_nothing() {
        let pred = HeadOutput {
            heatmap: Tensor::zeros(&[1, 16, 16]),
            regression: Tensor::zeros(&[8, 16, 16]),
        };
        assert!(decode(&pred, &grid(), &DecodeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn planted_peak_decodes_exactly() {
        let g = grid();
        let mut pred = HeadOutput {
            heatmap: Tensor::zeros(&[1, 16, 16]),
            regression: Tensor::zeros(&[8, 16, 16]),
        };
        let (row, col) = (5, 9);
        pred.heatmap.set3(0, row, col, 0.8);
        let vals = [0.2, -0.3, 1.1, (0.7 as Real).ln(), (0.4 as Real).ln(), (1.8 as Real).ln(), (1.0 as Real).sin(), (1.0 as Real).cos()];
        for (ch, v) in vals.iter().enumerate() {
            pred.regression.set3(ch, row, col, *v);
        }
        let dets = decode(&pred, &g, &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!((d.center[0] - (5.0 + 0.5 + 0.2) * 0.5).abs() < 1e-12);
        assert!((d.center[1] - (9.0 + 0.5 - 0.3) * 0.5).abs() < 1e-12);
        assert!((d.center[2] - 1.1).abs() < 1e-12);
        assert!((d.size[0] - 0.7).abs() < 1e-12 && (d.size[1] - 0.4).abs() < 1e-12 && (d.size[2] - 1.8).abs() < 1e-12);
        assert!((d.yaw - 1.0).abs() < 1e-12);
        assert_eq!(d.score, Some(0.8));
    }

    #[test]
    fn equal_neighbours_resolve_to_row_major_first() {
        let mut pred = HeadOutput {
            heatmap: Tensor::zeros(&[1, 16, 16]),
            regression: Tensor::zeros(&[8, 16, 16]),
        };
        pred.heatmap.set3(0, 3, 3, 0.5);
        pred.heatmap.set3(0, 3, 4, 0.5);
        let dets = decode(&pred, &grid(), &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].center[1] - 3.5 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn circular_nms_suppresses_close_peaks() {
        let mut pred = HeadOutput {
            heatmap: Tensor::zeros(&[1, 16, 16]),
            regression: Tensor::zeros(&[8, 16, 16]),
        };
        pred.heatmap.set3(0, 3, 3, 0.9);
        pred.heatmap.set3(0, 3, 5, 0.7);
        let mut cfg = DecodeConfig::default();
        assert_eq!(decode(&pred, &grid(), &cfg).unwrap().len(), 2);
        cfg.nms_radius = Some(1.5);
        assert_eq!(decode(&pred, &grid(), &cfg).unwrap().len(), 1);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI as Real) - PI as Real).abs() < 1e-12);
        assert!((wrap_angle(-PI as Real) - PI as Real).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
