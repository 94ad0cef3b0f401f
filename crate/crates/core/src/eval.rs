//! Detection post-processing and metrics.
//!
//! ```
//! use lifusion::eval::{consistency_ratio, Detection, GroundTruth};
//! use lifusion::geometry::Box3D;
//!
//! let b = Box3D::new([0.0, 1.0, 5.0], [1.5, 1.6, 3.9], 0.0).unwrap();
//! let gts = [GroundTruth { scene_id: 0, bbox: b, class_id: 0 }];
//! let dets: Vec<_> = [0.2, 0.4, 0.6, 0.8]
//!     .iter()
//!     .map(|&c| Detection { scene_id: 0, bbox: b, confidence: c, class_id: 0 })
//!     .collect();
//! assert_eq!(consistency_ratio(&dets, &gts, 0.7, 0.5), Some(0.5));
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    pub bbox: Box3D,
    pub confidence: f64,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub bbox: Box3D,
    pub class_id: usize,
}

fn by_confidence(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy suppression in descending confidence, within each scene. A box is
/// dropped when its footprint IoU with a kept box is strictly above
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_confidence(dets) {
        if kept.len() == max_keep {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.scene_id == d.scene_id && iou_bev(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Index form of [`nms`] for boxes of a single scene.
pub fn nms_indices(boxes: &[Box3D], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() == max_keep {
            break;
        }
        if !kept.iter().any(|&k| iou_bev(&boxes[k], &boxes[i]) > iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

fn gts_by_scene(gts: &[GroundTruth]) -> HashMap<u64, Vec<&GroundTruth>> {
    let mut map: HashMap<u64, Vec<&GroundTruth>> = HashMap::new();
    for g in gts {
        map.entry(g.scene_id).or_default().push(g);
    }
    map
}

/// Best 3D IoU of each detection against same-scene, same-class ground truth.
pub fn best_iou(dets: &[Detection], gts: &[GroundTruth]) -> Vec<f64> {
    let map = gts_by_scene(gts);
    dets.iter()
        .map(|d| {
            map.get(&d.scene_id)
                .into_iter()
                .flatten()
                .filter(|g| g.class_id == d.class_id)
                .map(|g| iou_3d(&d.bbox, &g.bbox))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Fraction of positive candidates (best IoU `> τ`) whose confidence is
/// strictly above `υ`, pooled over all scenes. `None` when there are no
/// candidates.
pub fn consistency_ratio(dets: &[Detection], gts: &[GroundTruth], tau: f64, upsilon: f64) -> Option<f64> {
    let ious = best_iou(dets, gts);
    let cands: Vec<f64> = dets.iter().zip(&ious).filter(|(_, &i)| i > tau).map(|(d, _)| d.confidence).collect();
    ratio_over(&cands, upsilon)
}

fn ratio_over(confidences: &[f64], upsilon: f64) -> Option<f64> {
    if confidences.is_empty() {
        return None;
    }
    Some(confidences.iter().filter(|&&c| c > upsilon).count() as f64 / confidences.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub tau: f64,
    pub upsilons: Vec<f64>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            upsilons: (1..=9).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| v > 0.0 && v < 1.0;
        if !inside(self.tau)
            || !self.upsilons.iter().all(|&u| inside(u))
            || !self.upsilons.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Input(format!("invalid consistency config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub upsilon: f64,
    pub ratio: Option<f64>,
    pub n_candidates: usize,
}

pub fn sweep_consistency(dets: &[Detection], gts: &[GroundTruth], cfg: &ConsistencyConfig) -> Vec<SweepPoint> {
    let ious = best_iou(dets, gts);
    let cands: Vec<f64> = dets.iter().zip(&ious).filter(|(_, &i)| i > cfg.tau).map(|(d, _)| d.confidence).collect();
    cfg.upsilons
        .iter()
        .map(|&u| SweepPoint {
            upsilon: u,
            ratio: ratio_over(&cands, u),
            n_candidates: cands.len(),
        })
        .collect()
}

/// Recall positions used for interpolated average precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallGrid {
    /// `1/40, 2/40, …, 1`.
    Forty,
    /// `0, 0.1, …, 1`.
    Eleven,
}

impl RecallGrid {
    fn positions(self) -> Vec<f64> {
        match self {
            RecallGrid::Forty => (1..=40).map(|k| k as f64 / 40.0).collect(),
            RecallGrid::Eleven => (0..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

/// Precision/recall after each detection in descending confidence, with
/// one-to-one greedy matching at `iou_3d ≥ iou_threshold`.
pub fn pr_curve(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<(f64, f64)> {
    let map = gts_by_scene(gts);
    let mut taken: HashMap<(u64, usize), bool> = HashMap::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for i in by_confidence(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in map.get(&d.scene_id).into_iter().flatten().enumerate() {
            if g.class_id != d.class_id || taken.contains_key(&(d.scene_id, j)) {
                continue;
            }
            let iou = iou_3d(&d.bbox, &g.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken.insert((d.scene_id, j), true);
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// Interpolated average precision; `None` without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64, grid: RecallGrid) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let curve = pr_curve(dets, gts, iou_threshold);
    let positions = grid.positions();
    let total: f64 = positions
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / positions.len() as f64)
}

/// AP over 40 recall positions.
pub fn ap_40(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Option<f64> {
    average_precision(dets, gts, iou_threshold, RecallGrid::Forty)
}

/// One line of the detection interchange format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub scene_id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub class_id: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl BoxRecord {
    fn to_box(self) -> Result<Box3D> {
        Box3D::new([self.x, self.y, self.z], [self.h, self.w, self.l], self.yaw)
    }
}

fn parse_records(text: &str) -> Result<Vec<(usize, BoxRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn parse_detections_jsonl(text: &str) -> Result<Vec<Detection>> {
    parse_records(text)?
        .into_iter()
        .map(|(line, r)| {
            let confidence = r.score.ok_or_else(|| Error::Parse(format!("line {line}: missing score")))?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::Parse(format!("line {line}: score {confidence} outside [0, 1]")));
            }
            let bbox = r.to_box().map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
            Ok(Detection { scene_id: r.scene_id, bbox, confidence, class_id: r.class_id })
        })
        .collect()
}

/// Ground truth uses the same record without a score.
pub fn parse_ground_truth_jsonl(text: &str) -> Result<Vec<GroundTruth>> {
    parse_records(text)?
        .into_iter()
        .map(|(line, r)| {
            let bbox = r.to_box().map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
            Ok(GroundTruth { scene_id: r.scene_id, bbox, class_id: r.class_id })
        })
        .collect()
}

fn record(scene_id: u64, b: &Box3D, score: Option<f64>, class_id: usize) -> BoxRecord {
    BoxRecord { scene_id, x: b.x, y: b.y, z: b.z, h: b.h, w: b.w, l: b.l, yaw: b.yaw, score, class_id }
}

pub fn write_detections_jsonl(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let r = record(d.scene_id, &d.bbox, Some(d.confidence), d.class_id);
        let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("plain struct"));
    }
    out
}

pub fn write_ground_truth_jsonl(gts: &[GroundTruth]) -> String {
    let mut out = String::new();
    for g in gts {
        let r = record(g.scene_id, &g.bbox, None, g.class_id);
        let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("plain struct"));
    }
    out
}
