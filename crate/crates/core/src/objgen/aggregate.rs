//! Turning scored proposals into final objects: DBSCAN aggregation or NMS.

use serde::{Deserialize, Serialize};

use super::dbscan::{dbscan, NOISE};
use super::heads::ProposalHeads;
use crate::error::{MpaError, Result};
use crate::geom::{add, Vec3};
use crate::scene::OBJECT_CLASSES;

pub const NMS_IOU: f64 = 0.25;

/// How final objects are formed from proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Greedy suppression on mask IoU.
    Nms,
    /// Cluster proposal positions `y_i`.
    Positions,
    /// Cluster learned embeddings.
    Embedding,
    /// Cluster refined centers `y_i + Δy_i` with radii `r_i`.
    Geometric,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Nms, Mode::Positions, Mode::Embedding, Mode::Geometric];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Nms => "nms",
            Mode::Positions => "positions",
            Mode::Embedding => "embedding",
            Mode::Geometric => "geometric",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = MpaError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MpaError::Invalid(format!("unknown mode '{s}' (nms|positions|embedding|geometric)")))
    }
}

/// DBSCAN settings for the clustering modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps_positions: f64,
    pub eps_geometric: f64,
    pub eps_embedding: f64,
    pub min_pts: usize,
    pub nms_iou: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps_positions: 0.3, eps_geometric: 0.3, eps_embedding: 0.05, min_pts: 2, nms_iou: NMS_IOU }
    }
}

/// A proposal after all heads ran: position, head outputs and foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposal {
    pub position: Vec3,
    pub heads: ProposalHeads,
    /// Scene point indices predicted as foreground, ascending.
    pub mask: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalObject {
    /// Scene point indices, ascending and non-empty.
    pub points: Vec<usize>,
    pub class: usize,
    pub confidence: f64,
}

/// Final objects and, per input proposal, the object it went into.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub objects: Vec<FinalObject>,
    pub assignment: Vec<Option<usize>>,
}

/// Forms final objects with the given mode.
pub fn form_objects(proposals: &[ScoredProposal], mode: Mode, params: &ClusterParams) -> Result<Aggregation> {
    match mode {
        Mode::Nms => Ok(nms_baseline(proposals, params.nms_iou)),
        _ => aggregate(proposals, mode, params),
    }
}

/// Clusters predicted-positive proposals and merges each cluster into one object.
///
/// Noise proposals become singleton objects. A cluster whose members
/// predict no foreground point yields no object.
pub fn aggregate(proposals: &[ScoredProposal], mode: Mode, params: &ClusterParams) -> Result<Aggregation> {
    let active: Vec<usize> = (0..proposals.len()).filter(|&i| proposals[i].heads.is_positive()).collect();
    let mut features = Vec::with_capacity(active.len());
    for &i in &active {
        let p = &proposals[i];
        let f = match mode {
            Mode::Positions => p.position.to_vec(),
            Mode::Geometric => {
                let (dy, r) = p.heads.geometric.ok_or_else(|| missing("geometric"))?;
                let mut f = add(p.position, dy).to_vec();
                f.push(r);
                f
            }
            Mode::Embedding => p.heads.embedding.clone().ok_or_else(|| missing("embedding"))?,
            Mode::Nms => return Err(MpaError::Invalid("NMS is not a clustering mode".into())),
        };
        features.push(f);
    }
    let eps = match mode {
        Mode::Positions => params.eps_positions,
        Mode::Geometric => params.eps_geometric,
        _ => params.eps_embedding,
    };
    let labels = dbscan(&features, eps, params.min_pts);

    // Clusters first in id order, then noise singletons in proposal order.
    let clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (slot, &label) in labels.iter().enumerate() {
        if label == NOISE {
            members.push(vec![active[slot]]);
        } else {
            members[label as usize].push(active[slot]);
        }
    }

    let mut out = Aggregation { objects: Vec::new(), assignment: vec![None; proposals.len()] };
    for group in members {
        let Some(object) = merge(proposals, &group) else { continue };
        for &i in &group {
            out.assignment[i] = Some(out.objects.len());
        }
        out.objects.push(object);
    }
    Ok(out)
}

fn missing(what: &str) -> MpaError {
    MpaError::Invalid(format!("the model does not predict {what} aggregation features"))
}

/// Union of member masks, objectness-weighted class vote, mean objectness.
fn merge(proposals: &[ScoredProposal], group: &[usize]) -> Option<FinalObject> {
    let mut points: Vec<usize> = group.iter().flat_map(|&i| proposals[i].mask.iter().copied()).collect();
    points.sort_unstable();
    points.dedup();
    if points.is_empty() {
        return None;
    }
    let mut votes = [0.0; OBJECT_CLASSES.len()];
    let mut confidence = 0.0;
    for &i in group {
        let p = &proposals[i];
        let w = p.heads.positive_probability();
        votes[object_class_slot(&p.heads.semantic_logits)] += w;
        confidence += w;
    }
    let mut best = 0;
    for (k, v) in votes.iter().enumerate() {
        if *v > votes[best] {
            best = k;
        }
    }
    Some(FinalObject { points, class: OBJECT_CLASSES[best], confidence: confidence / group.len() as f64 })
}

/// Position in [`OBJECT_CLASSES`] of the highest-scoring object class.
fn object_class_slot(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &c) in OBJECT_CLASSES.iter().enumerate() {
        if logits[c] > logits[OBJECT_CLASSES[best]] {
            best = k;
        }
    }
    best
}

/// Greedy NMS on mask IoU over predicted-positive proposals.
pub fn nms_baseline(proposals: &[ScoredProposal], iou_threshold: f64) -> Aggregation {
    let mut order: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].heads.is_positive() && !proposals[i].mask.is_empty())
        .collect();
    let score = |i: usize| proposals[i].heads.positive_probability();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));

    let mut out = Aggregation { objects: Vec::new(), assignment: vec![None; proposals.len()] };
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().any(|&k| sorted_iou(&proposals[k].mask, &proposals[i].mask) > iou_threshold) {
            continue;
        }
        kept.push(i);
        out.assignment[i] = Some(out.objects.len());
        out.objects.push(merge(proposals, &[i]).expect("non-empty mask"));
    }
    out
}

/// IoU of two ascending index lists; 0 when both are empty.
pub fn sorted_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal(position: Vec3, geometric: (Vec3, f64), score: f64, mask: Vec<usize>) -> ScoredProposal {
        let logit = (score / (1.0 - score)).ln();
        ScoredProposal {
            position,
            heads: ProposalHeads {
                semantic_logits: vec![0.0, 0.0, 1.0, 0.0, 0.0],
                geometric: Some(geometric),
                embedding: None,
                objectness_logits: [0.0, logit],
            },
            mask,
        }
    }

    #[test]
    fn nms_hand_trace() {
        // IoU(A,B) = 0.5, IoU(A,C) = IoU(B,C) = 0.1 (approximately).
        let a: Vec<usize> = (0..60).collect();
        let b: Vec<usize> = (20..80).collect();
        let c: Vec<usize> = (50..61).chain(200..250).collect();
        let props = vec![
            proposal([0.0; 3], ([0.0; 3], 0.1), 0.9, a.clone()),
            proposal([0.0; 3], ([0.0; 3], 0.1), 0.8, b.clone()),
            proposal([0.0; 3], ([0.0; 3], 0.1), 0.7, c.clone()),
        ];
        assert!((sorted_iou(&a, &b) - 0.5).abs() < 1e-12);
        assert!(sorted_iou(&a, &c) < 0.25 && sorted_iou(&b, &c) < 0.25);
        let out = nms_baseline(&props, NMS_IOU);
        assert_eq!(out.assignment, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn perfect_geometric_features_merge_one_object() {
        // Both refined centers land on (1, 1, 0.3).
        let props = vec![
            proposal([1.1, 1.0, 0.3], ([-0.1, 0.0, 0.0], 0.3), 0.9, vec![0, 1, 2]),
            proposal([0.9, 1.05, 0.3], ([0.1, -0.05, 0.0], 0.3), 0.8, vec![2, 3]),
            proposal([3.0, 1.0, 0.3], ([0.0; 3], 0.3), 0.8, vec![7]),
        ];
        let out = aggregate(&props, Mode::Geometric, &ClusterParams::default()).unwrap();
        assert_eq!(out.objects.len(), 2);
        assert_eq!(out.objects[0].points, vec![0, 1, 2, 3]);
        assert_eq!(out.objects[1].points, vec![7]);
        assert!((out.objects[0].confidence - 0.85).abs() < 1e-12);
    }
}
