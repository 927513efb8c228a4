//! End-to-end training on random crops and full-scene inference.

use std::io::Write as _;
use std::path::Path;

use diffcore::{clip_global_norm, Gradients, Graph, ParamStore, Sgd};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, MpaError, Result};
use crate::model::{LossValues, Model, ModelConfig};
use crate::objgen::{form_objects, Aggregation, ClusterParams, Mode, ScoredProposal};
use crate::scene::{augment, crop, Scene};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate halves every this many steps.
    pub lr_halving: usize,
    pub steps: usize,
    pub momentum: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Side of the square training crop, meters.
    pub crop_size: f64,
    /// Crops with more points are randomly subsampled to this many.
    pub crop_points: usize,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            lr: 0.1,
            lr_halving: 500,
            steps: 4000,
            momentum: 0.9,
            clip_norm: 1.0,
            crop_size: 3.0,
            crop_points: 768,
            log_every: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.lr > 0.0
            && self.lr_halving > 0
            && self.crop_size > 0.0
            && self.crop_points > 0
            && self.log_every > 0;
        if !positive || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm >= 0.0) {
            return Err(MpaError::Invalid("training settings out of range".into()));
        }
        self.model.validate()
    }

    /// Learning rate of 1-based `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let halvings = step.saturating_sub(1) / self.lr_halving;
        self.lr * 0.5f64.powi(halvings.min(1000) as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// Draws an augmented, cropped and subsampled training crop.
pub fn sample_crop<R: Rng>(scenes: &[Scene], config: &TrainConfig, rng: &mut R) -> Result<Scene> {
    const ATTEMPTS: usize = 1000;
    if scenes.is_empty() {
        return Err(MpaError::Invalid("no training scenes".into()));
    }
    for _ in 0..ATTEMPTS {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let augmented = augment(scene, rng.next_u64());
        let Some((lo, hi)) = crate::geom::aabb(augmented.positions()) else { continue };
        let center = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
        let cropped = match crop(&augmented, center, config.crop_size) {
            Ok(c) => c,
            Err(MpaError::EmptyCrop) => continue,
            Err(e) => return Err(e),
        };
        let cropped = if cropped.len() > config.crop_points {
            let mut keep = sample(rng, cropped.len(), config.crop_points).into_vec();
            keep.sort_unstable();
            cropped.subset(&keep)
        } else {
            cropped
        };
        if cropped.object_point_count() > 0 {
            return Ok(cropped);
        }
    }
    Err(MpaError::Invalid(format!("no crop with object points after {ATTEMPTS} attempts")))
}

/// Optimizer state around a model.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    sgd: Sgd,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::init(config.model.clone(), config.seed)?;
        let sgd = Sgd::new(&store, config.momentum);
        Ok(Self { config, model, store, sgd, step: 0 })
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One SGD step on the mean loss of `crops`. `seed` drives proposal sampling.
    pub fn step(&mut self, crops: &[Scene], seed: u64) -> Result<LogRecord> {
        let step = self.step + 1;
        let mut grads: Option<Gradients> = None;
        let mut mean = LossValues::default();
        for (b, scene) in crops.iter().enumerate() {
            let mut g = Graph::new();
            let (loss, _) = self.model.losses(&mut g, &self.store, scene, None, seed.wrapping_add(b as u64))?;
            let values = loss.values(&g);
            if !values.is_finite() {
                return Err(MpaError::NonFiniteLoss { step, detail: format!("crop {b} of {}: {values:?}", scene.scene_id) });
            }
            accumulate_values(&mut mean, &values, 1.0 / crops.len() as f64);
            let gr = g.backward(loss.total)?;
            match grads.as_mut() {
                Some(acc) => acc.accumulate(&gr),
                None => grads = Some(gr),
            }
        }
        let mut grads = grads.ok_or_else(|| MpaError::Invalid("empty batch".into()))?;
        grads.scale(1.0 / crops.len() as f64);
        if !grads.all_finite() {
            return Err(MpaError::NonFiniteLoss { step, detail: "non-finite gradient".into() });
        }
        let grad_norm =
            if self.config.clip_norm > 0.0 { clip_global_norm(&mut grads, self.config.clip_norm) } else { grads.global_norm() };
        let lr = self.config.learning_rate(step);
        self.sgd.step(&mut self.store, &grads, lr);
        self.step = step;
        Ok(LogRecord { step, lr, grad_norm, losses: mean })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.store.write_checkpoint(&mut buf, &self.meta())?;
        Ok(buf)
    }

    fn meta(&self) -> serde_json::Value {
        let mut meta = self.model.meta();
        meta["step"] = self.step.into();
        meta["train"] = serde_json::to_value(&self.config).unwrap_or_default();
        meta
    }
}

fn accumulate_values(acc: &mut LossValues, v: &LossValues, w: f64) {
    acc.total += w * v.total;
    acc.point += w * v.point;
    acc.point_semantic += w * v.point_semantic;
    acc.center += w * v.center;
    acc.objectness += w * v.objectness;
    acc.proposal_semantic += w * v.proposal_semantic;
    acc.mask += w * v.mask;
    acc.aggregation += w * v.aggregation;
}

/// Result of [`train`]: the final parameters as stored in the checkpoint.
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<LogRecord>,
    pub checkpoint: Vec<u8>,
}

/// Trains from scratch. With `out` set, writes the log and a checkpoint
/// after every epoch (one pass worth of crops over the training scenes).
pub fn train(config: &TrainConfig, scenes: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let epoch = scenes.len().div_ceil(config.batch_size).max(1);
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some((std::fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let started = std::time::Instant::now();
    for step in 1..=config.steps {
        let crops = (0..config.batch_size).map(|_| sample_crop(scenes, config, &mut rng)).collect::<Result<Vec<_>>>()?;
        let record = match trainer.step(&crops, rng.next_u64()) {
            Ok(r) => r,
            Err(e @ MpaError::NonFiniteLoss { .. }) => {
                if let Some(dir) = out {
                    dump_batch(dir, step, &crops);
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if step % config.log_every == 0 || step == config.steps {
            if let Some((file, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(file, "{line}").map_err(io_err(&*path))?;
            }
            log::info!(
                "step {step}/{} lr {:.4} loss {:.4} ({:.1}s)",
                config.steps,
                record.lr,
                record.losses.total,
                started.elapsed().as_secs_f64()
            );
            log.push(record);
        }
        if let Some(dir) = out {
            if step % epoch == 0 || step == config.steps {
                let path = dir.join(CHECKPOINT_FILE);
                std::fs::write(&path, trainer.checkpoint_bytes()?).map_err(io_err(&path))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint_bytes()?;
    let (store, _) = ParamStore::read_checkpoint(&mut checkpoint.as_slice())?;
    let model = Model::bind(config.model.clone(), &store)?;
    Ok(TrainOutcome { model, store, log, checkpoint })
}

/// Writes the crops of a failed step next to the run outputs.
fn dump_batch(dir: &Path, step: usize, crops: &[Scene]) {
    for (b, scene) in crops.iter().enumerate() {
        let named = Scene { scene_id: format!("diagnostic_step{step}_crop{b}"), points: scene.points.clone() };
        match crate::ply::save_scene(&named, dir) {
            Ok(path) => log::error!("dumped crop {b} of {} to {}", scene.scene_id, path.display()),
            Err(e) => log::error!("could not dump crop {b}: {e}"),
        }
    }
}

/// Full-scene inference followed by object formation.
pub fn infer(model: &Model, store: &ParamStore, scene: &Scene, mode: Mode, params: &ClusterParams, seed: u64) -> Result<Aggregation> {
    let proposals = model.infer(store, scene, seed)?;
    form_objects(&proposals, mode, params)
}

/// Upstream outputs of one scene shared by every object-formation mode.
pub fn infer_proposals(model: &Model, store: &ParamStore, scene: &Scene, seed: u64) -> Result<Vec<ScoredProposal>> {
    model.infer(store, scene, seed)
}
