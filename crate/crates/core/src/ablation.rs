//! NMS versus proposal aggregation, scored on a set of scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use diffcore::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::eval::{evaluate, EvalScene, ScoreTable};
use crate::model::Model;
use crate::objgen::{form_objects, ClusterParams, FinalObject, Mode};
use crate::scene::Scene;

/// Final objects per scene for several modes, sharing one upstream pass per scene.
pub fn predict_modes(
    model: &Model,
    store: &ParamStore,
    scenes: &[Scene],
    modes: &[Mode],
    params: &ClusterParams,
    seed: u64,
) -> Result<BTreeMap<Mode, Vec<Vec<FinalObject>>>> {
    let mut out: BTreeMap<Mode, Vec<Vec<FinalObject>>> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for scene in scenes {
        let proposals = model.infer(store, scene, seed)?;
        for &mode in modes {
            let objects = form_objects(&proposals, mode, params)?.objects;
            out.get_mut(&mode).expect("mode present").push(objects);
        }
    }
    Ok(out)
}

/// Scores predictions (one list per scene) against the scenes' ground truth.
pub fn score(scenes: &[Scene], predictions: &[Vec<FinalObject>]) -> Result<ScoreTable> {
    if scenes.len() != predictions.len() {
        return Err(MpaError::Invalid(format!("{} prediction sets for {} scenes", predictions.len(), scenes.len())));
    }
    let eval: Vec<EvalScene> = scenes.iter().zip(predictions).map(|(s, p)| EvalScene::new(s, p)).collect::<Result<_>>()?;
    Ok(evaluate(&eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Experiment number, 1 to 5.
    pub id: usize,
    pub label: String,
    pub mode: Mode,
    pub gcn_layers: usize,
    #[serde(rename = "mAP@50")]
    pub map50: f64,
    /// `mAP@50` minus that of experiment 1.
    pub delta: f64,
    /// Reference improvement over experiment 1 on ScanNetV2, in mAP points.
    pub reference_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Full score tables keyed by experiment number.
    pub scores: BTreeMap<usize, ScoreTable>,
}

const EXPERIMENTS: [(usize, &str, Mode, bool, Option<f64>); 5] = [
    (1, "Proposals + NMS", Mode::Nms, false, None),
    (2, "Agg. Props. (proposal positions)", Mode::Positions, false, Some(4.9)),
    (3, "Agg. Props. (embedding features)", Mode::Embedding, false, Some(9.2)),
    (4, "Agg. Props. (geometric features)", Mode::Geometric, false, Some(10.3)),
    (5, "Agg. Props. (geometric features + GCN)", Mode::Geometric, true, Some(11.6)),
];

/// Runs experiments 1 to 4 on `plain` (a network without GCN that predicts
/// both kinds of aggregation features) and experiment 5 on `with_gcn`.
pub fn run_ablation(
    plain: (&Model, &ParamStore),
    with_gcn: (&Model, &ParamStore),
    scenes: &[Scene],
    params: &ClusterParams,
    seed: u64,
) -> Result<AblationTable> {
    if scenes.is_empty() {
        return Err(MpaError::Invalid("ablation needs at least one scene".into()));
    }
    let pf = plain.0.config.features;
    if !pf.has_geometric() || !pf.has_embedding() {
        return Err(MpaError::Invalid(format!(
            "experiments 1-4 need a checkpoint predicting both aggregation features, found {pf:?}"
        )));
    }
    if !with_gcn.0.config.features.has_geometric() {
        return Err(MpaError::Invalid("experiment 5 needs a checkpoint with geometric features".into()));
    }
    let plain_modes = [Mode::Nms, Mode::Positions, Mode::Embedding, Mode::Geometric];
    let plain_preds = predict_modes(plain.0, plain.1, scenes, &plain_modes, params, seed)?;
    let gcn_preds = predict_modes(with_gcn.0, with_gcn.1, scenes, &[Mode::Geometric], params, seed)?;

    let mut scores = BTreeMap::new();
    let mut rows = Vec::new();
    for (id, label, mode, gcn, reference_delta) in EXPERIMENTS {
        let (preds, layers) = if gcn {
            (&gcn_preds[&mode], with_gcn.0.config.gcn_layers)
        } else {
            (&plain_preds[&mode], plain.0.config.gcn_layers)
        };
        let table = score(scenes, preds)?;
        rows.push(AblationRow {
            id,
            label: label.to_string(),
            mode,
            gcn_layers: layers,
            map50: table.map50,
            delta: 0.0,
            reference_delta,
        });
        scores.insert(id, table);
    }
    let base = rows[0].map50;
    rows.iter_mut().for_each(|r| r.delta = r.map50 - base);
    Ok(AblationTable { rows, scores })
}

impl AblationTable {
    pub fn map50(&self, id: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.id == id).map(|r| r.map50)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<46} {:>8} {:>8} {:>10}", "Instance segmentation (synthetic val)", "mAP@50", "delta", "reference");
        for r in &self.rows {
            let delta = if r.id == 1 { String::new() } else { format!("{:+.1}", 100.0 * r.delta) };
            let reference = r.reference_delta.map_or_else(String::new, |d| format!("(+{d:.1})"));
            let _ = writeln!(out, "({}) {:<42} {:>8.1} {:>8} {:>10}", r.id, r.label, 100.0 * r.map50, delta, reference);
        }
        out
    }
}
