//! Instance-segmentation and detection metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::geom::Vec3;
use crate::objgen::{sorted_iou, FinalObject};
use crate::scene::{Scene, CLASS_NAMES, OBJECT_CLASSES};

/// IoU of two point-index sets given in any order; 0 when both are empty.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    sorted_iou(&a, &b)
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn volume(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).max(0.0)).product()
    }
}

/// Tight box around the masked points.
pub fn fit_box(mask: &[usize], scene: &Scene) -> Result<Aabb> {
    if let Some(&bad) = mask.iter().find(|&&i| i >= scene.len()) {
        return Err(MpaError::Invalid(format!("mask index {bad} outside {} points", scene.len())));
    }
    crate::geom::aabb(mask.iter().map(|&i| scene.points[i].position))
        .map(|(min, max)| Aabb { min, max })
        .ok_or_else(|| MpaError::Invalid("cannot fit a box to an empty mask".into()))
}

pub fn box_iou(a: &Aabb, b: &Aabb) -> Result<f64> {
    for bx in [a, b] {
        if (0..3).any(|k| bx.min[k] > bx.max[k]) {
            return Err(MpaError::Invalid(format!("degenerate box {bx:?}")));
        }
    }
    let inter: f64 = (0..3).map(|k| (a.max[k].min(b.max[k]) - a.min[k].max(b.min[k])).max(0.0)).product();
    let union = a.volume() + b.volume() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Mask,
    Box,
}

/// An object (ground truth or prediction) with both representations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalObject {
    pub class: usize,
    /// Ascending point indices.
    pub points: Vec<usize>,
    pub bbox: Aabb,
    /// Prediction confidence; unused for ground truth.
    pub confidence: f64,
}

/// One scene's ground truth and predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub scene_id: String,
    pub gt: Vec<EvalObject>,
    pub predictions: Vec<EvalObject>,
}

impl EvalScene {
    /// Ground truth from the scene's instances; predictions from final objects.
    pub fn new(scene: &Scene, predictions: &[FinalObject]) -> Result<Self> {
        let gt = scene
            .instances()
            .into_iter()
            .map(|inst| {
                let bbox = fit_box(&inst.points, scene)?;
                Ok(EvalObject { class: inst.class, points: inst.points, bbox, confidence: 1.0 })
            })
            .collect::<Result<_>>()?;
        let predictions = predictions
            .iter()
            .map(|p| {
                let mut points = p.points.clone();
                points.sort_unstable();
                points.dedup();
                let bbox = fit_box(&points, scene)?;
                Ok(EvalObject { class: p.class, points, bbox, confidence: p.confidence })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scene_id: scene.scene_id.clone(), gt, predictions })
    }
}

fn iou(a: &EvalObject, b: &EvalObject, kind: IouKind) -> f64 {
    match kind {
        IouKind::Mask => sorted_iou(&a.points, &b.points),
        IouKind::Box => box_iou(&a.bbox, &b.bbox).unwrap_or(0.0),
    }
}

/// Precision-recall outcome for one class at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub recall: f64,
}

/// Average precision of `class` at `threshold`, or `None` without ground truth.
///
/// Predictions are visited by descending confidence (ties by scene id, then
/// index). Each is a true positive when its best IoU against a still
/// unmatched ground-truth object of the same class and scene reaches the
/// threshold. AP integrates the precision envelope over every recall step.
pub fn average_precision(scenes: &[EvalScene], class: usize, threshold: f64, kind: IouKind) -> Option<ApResult> {
    let total_gt: usize = scenes.iter().map(|s| s.gt.iter().filter(|g| g.class == class).count()).sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        order.extend((0..s.predictions.len()).filter(|&pi| s.predictions[pi].class == class).map(|pi| (si, pi)));
    }
    order.sort_by(|&(sa, pa), &(sb, pb)| {
        let ca = scenes[sa].predictions[pa].confidence;
        let cb = scenes[sb].predictions[pb].confidence;
        cb.total_cmp(&ca).then_with(|| scenes[sa].scene_id.cmp(&scenes[sb].scene_id)).then(pa.cmp(&pb))
    });

    let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (k, &(si, pi)) in order.iter().enumerate() {
        let pred = &scenes[si].predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in scenes[si].gt.iter().enumerate() {
            if gt.class != class || matched[si][gi] {
                continue;
            }
            let v = iou(pred, gt, kind);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= threshold {
                matched[si][gi] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    Some(ApResult { ap: interpolated_ap(&precision, &recall), recall: tp as f64 / total_gt as f64 })
}

/// Area under the precision envelope, integrated over recall steps.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in envelope.iter().zip(recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Per-class scores; `None` marks a class without ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub name: String,
    pub gt_count: usize,
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    pub recall50: Option<f64>,
    pub box_ap25: Option<f64>,
    pub box_ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scenes: usize,
    pub classes: Vec<ClassScores>,
    #[serde(rename = "mAP@25")]
    pub map25: f64,
    #[serde(rename = "mAP@50")]
    pub map50: f64,
    #[serde(rename = "mAP@[.5:.95]")]
    pub map50_95: f64,
    #[serde(rename = "mAR@50")]
    pub mar50: f64,
    #[serde(rename = "box_mAP@25")]
    pub box_map25: f64,
    #[serde(rename = "box_mAP@50")]
    pub box_map50: f64,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Scores every object class over all scenes.
pub fn evaluate(scenes: &[EvalScene]) -> ScoreTable {
    let ap = |class, t, kind| average_precision(scenes, class, t, kind);
    let classes: Vec<ClassScores> = OBJECT_CLASSES
        .iter()
        .map(|&class| {
            let at50 = ap(class, 0.5, IouKind::Mask);
            let range: Option<Vec<f64>> =
                coco_thresholds().into_iter().map(|t| ap(class, t, IouKind::Mask).map(|r| r.ap)).collect();
            ClassScores {
                class,
                name: CLASS_NAMES[class].to_string(),
                gt_count: scenes.iter().map(|s| s.gt.iter().filter(|g| g.class == class).count()).sum(),
                ap25: ap(class, 0.25, IouKind::Mask).map(|r| r.ap),
                ap50: at50.map(|r| r.ap),
                ap50_95: range.map(|v| v.iter().sum::<f64>() / v.len() as f64),
                recall50: at50.map(|r| r.recall),
                box_ap25: ap(class, 0.25, IouKind::Box).map(|r| r.ap),
                box_ap50: ap(class, 0.5, IouKind::Box).map(|r| r.ap),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> Option<f64>| {
        let vals: Vec<f64> = classes.iter().filter_map(f).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    ScoreTable {
        scenes: scenes.len(),
        map25: mean(|c| c.ap25),
        map50: mean(|c| c.ap50),
        map50_95: mean(|c| c.ap50_95),
        mar50: mean(|c| c.recall50),
        box_map25: mean(|c| c.box_ap25),
        box_map50: mean(|c| c.box_ap50),
        classes,
    }
}

impl ScoreTable {
    /// Aligned text table, one row per class plus the mean row.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10}",
            "class", "gt", "mAP@25", "mAP@50", "mAP@.5:.95", "mAR@50", "boxAP@25", "boxAP@50"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10}",
                c.name,
                c.gt_count,
                cell(c.ap25),
                cell(c.ap50),
                cell(c.ap50_95),
                cell(c.recall50),
                cell(c.box_ap25),
                cell(c.box_ap50)
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10}",
            "mean",
            self.classes.iter().map(|c| c.gt_count).sum::<usize>(),
            cell(Some(self.map25)),
            cell(Some(self.map50)),
            cell(Some(self.map50_95)),
            cell(Some(self.mar50)),
            cell(Some(self.box_map25)),
            cell(Some(self.box_map50))
        );
        out
    }
}
