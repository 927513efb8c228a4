//! Flat run configuration: defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use mpa::model::ModelConfig;
use mpa::objgen::{AggFeatures, ClusterParams, Mode};
use mpa::proposals::Sampling;
use mpa::scene::{ObjectKind, SceneGenParams};
use mpa::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every output.
    pub out: PathBuf,
    /// Scene dataset with `train/` and `val/`; defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    /// Scene split used by `infer` and `eval`.
    pub split: String,
    /// Checkpoint for `infer`, `eval` and ablation row 5.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint without GCN for ablation rows 1 to 4.
    pub plain_checkpoint: Option<PathBuf>,
    /// Prediction directory for `infer` and `eval`.
    pub predictions: Option<PathBuf>,
    pub mode: Mode,
    pub jobs: usize,
    pub force: bool,
    /// Also write vote and proposal point clouds during `infer`.
    pub dump_votes: bool,

    pub train_scenes: usize,
    pub val_scenes: usize,
    pub room_extent: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_m2: f64,
    pub noise_sigma: f64,

    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving: usize,
    pub steps: usize,
    pub momentum: f64,
    pub clip_norm: f64,
    pub crop_size: f64,
    pub crop_points: usize,
    pub log_every: usize,

    pub features: AggFeatures,
    pub gcn_layers: usize,
    pub radius: f64,
    pub train_proposals: usize,
    pub infer_proposals: usize,
    pub group_cap: usize,
    pub sampling: Sampling,

    pub eps_positions: f64,
    pub eps_geometric: f64,
    pub eps_embedding: f64,
    pub min_pts: usize,
    pub nms_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = SceneGenParams::default();
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let cluster = ClusterParams::default();
        Self {
            seed: 0,
            out: PathBuf::from("mpa-out"),
            data: None,
            split: "val".into(),
            checkpoint: None,
            plain_checkpoint: None,
            predictions: None,
            mode: Mode::Geometric,
            jobs: 1,
            force: false,
            dump_votes: false,
            train_scenes: 64,
            val_scenes: 16,
            room_extent: gen.room_extent,
            min_objects: gen.objects_per_scene.0,
            max_objects: gen.objects_per_scene.1,
            points_per_m2: gen.points_per_m2,
            noise_sigma: gen.noise_sigma,
            batch_size: train.batch_size,
            lr: train.lr,
            lr_halving: train.lr_halving,
            steps: train.steps,
            momentum: train.momentum,
            clip_norm: train.clip_norm,
            crop_size: train.crop_size,
            crop_points: train.crop_points,
            log_every: train.log_every,
            features: model.features,
            gcn_layers: model.gcn_layers,
            radius: model.radius,
            train_proposals: model.train_proposals,
            infer_proposals: model.infer_proposals,
            group_cap: model.group_cap,
            sampling: model.sampling,
            eps_positions: cluster.eps_positions,
            eps_geometric: cluster.eps_geometric,
            eps_embedding: cluster.eps_embedding,
            min_pts: cluster.min_pts,
            nms_iou: cluster.nms_iou,
        }
    }
}

/// Merges defaults, the optional file and flag overrides (`key`, raw value),
/// rejecting unknown keys, then makes every path absolute.
pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig, String> {
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())? else {
        unreachable!("RunConfig serializes to an object")
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let Value::Object(map) = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))? else {
            return Err(format!("{}: expected a JSON object", path.display()));
        };
        overlay(&mut merged, map, &format!("{}", path.display()))?;
    }
    let mut from_flags = Map::new();
    for (key, raw) in flags {
        let textual = matches!(merged.get(key), Some(Value::String(_)) | Some(Value::Null));
        let value = if textual { Value::String(raw.clone()) } else { parse_flag_value(raw) };
        from_flags.insert(key.clone(), value);
    }
    overlay(&mut merged, from_flags, "command line")?;
    let mut config: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| format!("invalid configuration: {e}"))?;
    config.resolve_paths()?;
    Ok(config)
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>, origin: &str) -> Result<(), String> {
    for (key, value) in top {
        if !base.contains_key(&key) {
            return Err(format!("{origin}: unknown configuration key '{key}'"));
        }
        base.insert(key, value);
    }
    Ok(())
}

/// Non-text flag values are JSON when they parse as JSON, plain strings otherwise.
fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    fn resolve_paths(&mut self) -> Result<(), String> {
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| format!("{}: {e}", p.display()));
        self.out = abs(&self.out)?;
        for p in [&mut self.data, &mut self.checkpoint, &mut self.plain_checkpoint, &mut self.predictions] {
            if let Some(path) = p.as_mut() {
                *path = abs(path)?;
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// Training output directory for the configured architecture.
    pub fn train_dir(&self) -> PathBuf {
        train_dir(&self.out, self.gcn_layers, self.features)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.train_dir().join(mpa::trainer::CHECKPOINT_FILE))
    }

    pub fn plain_checkpoint_path(&self) -> PathBuf {
        self.plain_checkpoint
            .clone()
            .unwrap_or_else(|| train_dir(&self.out, 0, AggFeatures::Both).join(mpa::trainer::CHECKPOINT_FILE))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.predictions.clone().unwrap_or_else(|| self.out.join("predictions").join(self.mode.name()))
    }

    pub fn scene_params(&self, seed: u64) -> SceneGenParams {
        SceneGenParams {
            seed,
            room_extent: self.room_extent,
            objects_per_scene: (self.min_objects, self.max_objects),
            object_classes: vec![ObjectKind::Box, ObjectKind::Sphere, ObjectKind::Cylinder],
            points_per_m2: self.points_per_m2,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            features: self.features,
            gcn_layers: self.gcn_layers,
            radius: self.radius,
            train_proposals: self.train_proposals,
            infer_proposals: self.infer_proposals,
            group_cap: self.group_cap,
            sampling: self.sampling,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_halving: self.lr_halving,
            steps: self.steps,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            crop_size: self.crop_size,
            crop_points: self.crop_points,
            log_every: self.log_every,
            model: self.model_config(),
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            eps_positions: self.eps_positions,
            eps_geometric: self.eps_geometric,
            eps_embedding: self.eps_embedding,
            min_pts: self.min_pts,
            nms_iou: self.nms_iou,
        }
    }
}

pub fn train_dir(out: &Path, layers: usize, features: AggFeatures) -> PathBuf {
    let name = match features {
        AggFeatures::Geometric => "geometric",
        AggFeatures::Embedding => "embedding",
        AggFeatures::Both => "both",
    };
    out.join(format!("train-l{layers}-{name}"))
}
