//! Detection metrics (AP at BEV center-distance thresholds, mAP) and crowd density statistics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection_head::Box3D;
use crate::error::{Error, Result};
use crate::numerics::Real;

/// Center-distance thresholds in meters.
pub const THRESHOLDS: [Real; 4] = [0.5, 1.0, 2.0, 4.0];
pub const RECALL_POINTS: usize = 101;
pub const DENSITY_RADII: [Real; 3] = [2.0, 5.0, 10.0];

/// One detection as stored in a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_token: String,
    pub score: Real,
    pub center: [Real; 3],
    pub size: [Real; 3],
    pub yaw: Real,
    pub class_id: usize,
}

impl DetectionRecord {
    pub fn from_box(sample_token: &str, b: &Box3D) -> Self {
        DetectionRecord {
            sample_token: sample_token.to_string(),
            score: b.score.unwrap_or(1.0),
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class_id: b.class_id,
        }
    }

    pub fn to_box(&self) -> Box3D {
        let mut b = Box3D::new(self.center, self.size, self.yaw, self.class_id);
        b.score = Some(self.score);
        b
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub results: Vec<DetectionRecord>,
}

pub fn write_results(path: &Path, results: &ResultsFile) -> Result<()> {
    let text = serde_json::to_string_pretty(results).expect("results serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<ResultsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Ground-truth box with the number of lidar returns inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: Box3D,
    pub num_lidar_pts: usize,
}

/// Ground truth per sample token.
pub type GroundTruth = BTreeMap<String, Vec<GtBox>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<Real>,
    pub class_id: usize,
    /// Keep GT boxes without lidar returns.
    pub include_empty_gt: bool,
    /// `[x_min, x_max, y_min, y_max]`: only GT and detections centered inside count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev_range: Option<[Real; 4]>,
}

impl EvalConfig {
    fn in_range(&self, b: &Box3D) -> bool {
        match self.bev_range {
            Some([x0, x1, y0, y1]) => {
                b.center[0] >= x0 && b.center[0] < x1 && b.center[1] >= y0 && b.center[1] < y1
            }
            None => true,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: THRESHOLDS.to_vec(),
            class_id: 0,
            include_empty_gt: false,
            bev_range: None,
        }
    }
}

/// Outcome of greedy matching in one frame. `order[i]` is the input index of the i-th
/// detection by descending score; `tp[i]` and `matched_gt[i]` follow that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatch {
    pub order: Vec<usize>,
    pub tp: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub fn_count: usize,
}

fn det_cmp(a: &Box3D, b: &Box3D) -> Ordering {
    let sa = a.score.unwrap_or(0.0);
    let sb = b.score.unwrap_or(0.0);
    sb.total_cmp(&sa)
        .then_with(|| {
            a.center
                .iter()
                .chain(&a.size)
                .chain(std::iter::once(&a.yaw))
                .zip(b.center.iter().chain(&b.size).chain(std::iter::once(&b.yaw)))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Detection indices by descending score; equal scores fall back to box contents.
pub fn score_order(dets: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| det_cmp(&dets[i], &dets[j]));
    order
}

/// Greedy matching: detections in score order each take the nearest unmatched GT
/// within `threshold` meters (BEV center distance; equal distances go to the lower GT index).
pub fn match_frame(dets: &[Box3D], gts: &[Box3D], threshold: Real) -> FrameMatch {
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for &d in &order {
        let mut best: Option<(usize, Real)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let dist = dets[d].bev_distance(gt);
            if dist <= threshold && best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((g, dist));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        tp.push(best.is_some());
        matched_gt.push(best.map(|(g, _)| g));
    }
    FrameMatch {
        order,
        tp,
        matched_gt,
        fn_count: taken.iter().filter(|&&t| !t).count(),
    }
}

/// Cumulative (recall, precision) after each detection, in the given order.
fn pr_points(labels: &[(Real, bool)]) -> Vec<(usize, Real)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(k, &(_, is_tp))| {
            tp += is_tp as usize;
            (tp, tp as Real / (k + 1) as Real)
        })
        .collect()
}

/// Stable sort by descending score, so callers control tie order through input order.
fn sorted_labels(labels: &[(Real, bool)]) -> Vec<(Real, bool)> {
    let mut v = labels.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// Area under the 101-point interpolated precision/recall curve.
pub fn average_precision(labels: &[(Real, bool)], total_gts: usize) -> Real {
    if total_gts == 0 {
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let sorted = sorted_labels(labels);
    let pts = pr_points(&sorted);
    // interpolated precision at recall r is the best precision at any recall >= r;
    // recall thresholds i/100 are compared exactly as 100 * tp >= i * total
    let mut best_from = vec![0.0 as Real; pts.len() + 1];
    for k in (0..pts.len()).rev() {
        best_from[k] = best_from[k + 1].max(pts[k].1);
    }
    let steps = (RECALL_POINTS - 1) as u64;
    let mut area = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS as u64 {
        while k < pts.len() && (pts[k].0 as u64) * steps < i * total_gts as u64 {
            k += 1;
        }
        area += best_from[k];
    }
    area / RECALL_POINTS as Real
}

/// Raw precision/recall points for plotting: `(recall, precision)` per detection.
pub fn pr_curve(labels: &[(Real, bool)], total_gts: usize) -> Vec<(Real, Real)> {
    let sorted = sorted_labels(labels);
    pr_points(&sorted)
        .into_iter()
        .map(|(tp, p)| (if total_gts == 0 { 0.0 } else { tp as Real / total_gts as Real }, p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<Real>,
    pub ap: Vec<Real>,
    pub map: Real,
    pub counts: Vec<ThresholdCounts>,
    pub frames: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn ap_at(&self, threshold: Real) -> Option<Real> {
        self.thresholds.iter().position(|&t| t == threshold).map(|i| self.ap[i])
    }
}

/// Labeled detections per threshold plus GT total, ready for AP or curve export.
pub struct Labeled {
    pub per_threshold: Vec<Vec<(Real, bool)>>,
    pub counts: Vec<ThresholdCounts>,
    pub total_gts: usize,
    pub detections: usize,
}

/// Match every evaluated frame at every threshold. Detections on samples outside `gt` are ignored.
pub fn label_detections(results: &[DetectionRecord], gt: &GroundTruth, cfg: &EvalConfig) -> Labeled {
    let mut by_frame: BTreeMap<&str, Vec<Box3D>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.class_id == cfg.class_id) {
        let b = r.to_box();
        if gt.contains_key(&r.sample_token) && cfg.in_range(&b) {
            by_frame.entry(r.sample_token.as_str()).or_default().push(b);
        }
    }
    let mut per_threshold = vec![Vec::new(); cfg.thresholds.len()];
    let mut counts = vec![ThresholdCounts { tp: 0, fp: 0, fn_: 0 }; cfg.thresholds.len()];
    let mut total_gts = 0;
    let mut detections = 0;
    for (token, boxes) in gt {
        let gts: Vec<Box3D> = boxes
            .iter()
            .filter(|g| {
                g.bbox.class_id == cfg.class_id && (cfg.include_empty_gt || g.num_lidar_pts > 0) && cfg.in_range(&g.bbox)
            })
            .map(|g| g.bbox.clone())
            .collect();
        total_gts += gts.len();
        let dets = by_frame.get(token.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        detections += dets.len();
        for (t, &thr) in cfg.thresholds.iter().enumerate() {
            let m = match_frame(dets, &gts, thr);
            for (&d, &is_tp) in m.order.iter().zip(&m.tp) {
                per_threshold[t].push((dets[d].score.unwrap_or(0.0), is_tp));
                if is_tp {
                    counts[t].tp += 1;
                } else {
                    counts[t].fp += 1;
                }
            }
            counts[t].fn_ += m.fn_count;
        }
    }
    Labeled {
        per_threshold,
        counts,
        total_gts,
        detections,
    }
}

pub fn evaluate(results: &[DetectionRecord], gt: &GroundTruth, cfg: &EvalConfig) -> EvalReport {
    let labeled = label_detections(results, gt, cfg);
    let ap: Vec<Real> = labeled
        .per_threshold
        .iter()
        .map(|l| average_precision(l, labeled.total_gts))
        .collect();
    let map = if ap.is_empty() { 0.0 } else { ap.iter().sum::<Real>() / ap.len() as Real };
    EvalReport {
        thresholds: cfg.thresholds.clone(),
        ap,
        map,
        counts: labeled.counts,
        frames: gt.len(),
        gt_boxes: labeled.total_gts,
        detections: labeled.detections,
    }
}

/// Console table row in percent: label, AP per threshold, mAP.
pub fn format_report_table(label: &str, report: &EvalReport) -> String {
    let mut s = format!("{:<16}", "Method");
    for t in &report.thresholds {
        let _ = write!(s, " | {:>7}", format!("AP@{}", t));
    }
    s.push_str(" |     mAP\n");
    let _ = write!(s, "{:<16}", label);
    for ap in &report.ap {
        let _ = write!(s, " | {:>7.2}", ap * 100.0);
    }
    let _ = writeln!(s, " | {:>7.2}", report.map * 100.0);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub frames: usize,
    pub pedes_per_frame: Real,
    pub density_2: Real,
    pub density_5: Real,
    pub density_10: Real,
}

impl DensityStats {
    pub fn densities(&self) -> [Real; 3] {
        [self.density_2, self.density_5, self.density_10]
    }

    /// Row in the layout `Pedes/Fr | D-2 | D-5 | D-10`.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{:<16} | Pedes/Fr {:>6.1} | Density-2/5/10 {:.1}/{:.1}/{:.1}",
            label, self.pedes_per_frame, self.density_2, self.density_5, self.density_10
        )
    }
}

/// Per-frame BEV pedestrian positions -> mean count and mean neighbor counts within 2/5/10 m.
pub fn density_stats(frames: &[Vec<[Real; 2]>]) -> Result<DensityStats> {
    if frames.is_empty() {
        return Err(Error::Stats("density statistics over zero frames".into()));
    }
    let mut people = 0usize;
    let mut neighbors = [0usize; 3];
    for frame in frames {
        people += frame.len();
        for (i, a) in frame.iter().enumerate() {
            for (j, b) in frame.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                for (k, &r) in DENSITY_RADII.iter().enumerate() {
                    if d <= r {
                        neighbors[k] += 1;
                    }
                }
            }
        }
    }
    let per_person = |n: usize| if people == 0 { 0.0 } else { n as Real / people as Real };
    Ok(DensityStats {
        frames: frames.len(),
        pedes_per_frame: people as Real / frames.len() as Real,
        density_2: per_person(neighbors[0]),
        density_5: per_person(neighbors[1]),
        density_10: per_person(neighbors[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: Real, y: Real, score: Option<Real>) -> Box3D {
        let mut bx = Box3D::new([x, y, 0.9], [0.6, 0.5, 1.7], 0.0, 0);
        bx.score = score;
        bx
    }

    #[test]
    fn exact_detections_are_all_true_positives() {
        let gts = vec![b(0.0, 0.0, None), b(3.0, 1.0, None)];
        let dets = vec![b(0.0, 0.0, Some(0.9)), b(3.0, 1.0, Some(0.8))];
        let m = match_frame(&dets, &gts, 0.5);
        assert_eq!(m.tp, vec![true, true]);
        assert_eq!(m.fn_count, 0);
    }

    #[test]
    fn no_detections_leaves_every_gt_missed() {
        let gts = vec![b(0.0, 0.0, None), b(3.0, 1.0, None)];
        assert_eq!(match_frame(&[], &gts, 4.0).fn_count, 2);
    }

    #[test]
    fn hand_case_depends_on_threshold() {
        // det0 sits 1.5 m from gt0, det1 sits on gt1, det2 is far from both
        let gts = vec![b(0.0, 0.0, None), b(5.0, 0.0, None)];
        let dets = vec![b(1.5, 0.0, Some(0.9)), b(5.0, 0.0, Some(0.8)), b(20.0, 0.0, Some(0.7))];
        assert_eq!(match_frame(&dets, &gts, 1.0).tp, vec![false, true, false]);
        let m2 = match_frame(&dets, &gts, 2.0);
        assert_eq!(m2.tp, vec![true, true, false]);
        assert_eq!(m2.fn_count, 0);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 2), 0.0);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[(0.5, false)], 0), 0.0);
        // TP, FP, TP, FP over 2 GTs: precision 1 up to recall 0.5 (51 points), 2/3 beyond (50 points)
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)], 2);
        assert!((ap - 253.0 / 303.0).abs() < 1e-12);
    }

    #[test]
    fn density_hand_count() {
        // equilateral triangle with 1 m sides
        let s3 = (3.0 as Real).sqrt() / 2.0;
        let stats = density_stats(&[vec![[0.0, 0.0], [1.0, 0.0], [0.5, s3]]]).unwrap();
        assert!((stats.density_2 - 2.0).abs() < 1e-12);
        assert_eq!(stats.pedes_per_frame, 3.0);
        let single = density_stats(&[vec![[0.0, 0.0]], vec![[4.0, 4.0]]]).unwrap();
        assert_eq!(single.densities(), [0.0; 3]);
        assert_eq!(single.pedes_per_frame, 1.0);
        assert!(matches!(density_stats(&[]), Err(Error::Stats(_))));
    }

    #[test]
    fn report_table_has_all_columns() {
        let mut gt = GroundTruth::new();
        gt.insert("s0".into(), vec![GtBox { bbox: b(0.0, 0.0, None), num_lidar_pts: 5 }]);
        let res = vec![DetectionRecord::from_box("s0", &b(0.0, 0.0, Some(0.9)))];
        let r = evaluate(&res, &gt, &EvalConfig::default());
        assert_eq!(r.map, 1.0);
        let t = format_report_table("perfect", &r);
        assert!(t.contains("AP@0.5") && t.contains("AP@4") && t.contains("100.00"));
    }

    #[test]
    fn empty_gt_boxes_are_excluded_by_default() {
        let mut gt = GroundTruth::new();
        gt.insert(
            "s0".into(),
            vec![
                GtBox { bbox: b(0.0, 0.0, None), num_lidar_pts: 5 },
                GtBox { bbox: b(9.0, 0.0, None), num_lidar_pts: 0 },
            ],
        );
        let res = vec![DetectionRecord::from_box("s0", &b(0.0, 0.0, Some(0.9)))];
        assert_eq!(evaluate(&res, &gt, &EvalConfig::default()).map, 1.0);
        let cfg = EvalConfig {
            include_empty_gt: true,
            ..Default::default()
        };
        assert!(evaluate(&res, &gt, &cfg).map < 1.0);
    }

    #[test]
    fn range_filter_drops_outside_gt_and_detections() {
        let mut gt = GroundTruth::new();
        gt.insert(
            "s0".into(),
            vec![
                GtBox { bbox: b(0.0, 0.0, None), num_lidar_pts: 5 },
                GtBox { bbox: b(9.0, 0.0, None), num_lidar_pts: 5 },
            ],
        );
        let res = vec![
            DetectionRecord::from_box("s0", &b(0.0, 0.0, Some(0.9))),
            DetectionRecord::from_box("s0", &b(-7.0, 0.0, Some(0.8))),
        ];
        assert!(evaluate(&res, &gt, &EvalConfig::default()).map < 1.0);
        let cfg = EvalConfig {
            bev_range: Some([-5.0, 5.0, -5.0, 5.0]),
            ..Default::default()
        };
        let r = evaluate(&res, &gt, &cfg);
        assert_eq!((r.map, r.gt_boxes, r.detections), (1.0, 1, 1));
    }
}
