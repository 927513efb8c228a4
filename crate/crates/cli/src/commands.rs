use std::path::{Path, PathBuf};

use log::{info, warn};
use mpa::ablation::{run_ablation, score};
use mpa::model::Model;
use mpa::objgen::{form_objects, read_predictions, write_predictions, FinalObject};
use mpa::ply::{load_scene, save_scene, save_tagged_points};
use mpa::scene::{generate_scene, Scene};
use mpa::trainer::{train, TrainConfig};
use mpa::MpaError;
use serde::Serialize;

use crate::config::RunConfig;

/// Exit status 2 for bad input, 3 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<MpaError> for CliError {
    fn from(e: MpaError) -> Self {
        match e {
            MpaError::Invalid(_) | MpaError::Parse { .. } | MpaError::InvalidScene(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Fails on a non-empty directory unless `force`, in which case it is cleared.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::Usage(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(runtime(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(runtime(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(runtime(path))
}

/// Scenes of one split, ordered by file name.
fn load_split(config: &RunConfig, split: &str) -> Result<Vec<Scene>> {
    let dir = config.data_dir().join(split);
    let entries = std::fs::read_dir(&dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p).map_err(CliError::from)).collect()
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<U>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..jobs)
            .map(|w| s.spawn(move || (w..items.len()).step_by(jobs).map(|i| (i, f(&items[i]))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item visited")).collect()
}

#[derive(Serialize)]
struct ManifestEntry {
    id: String,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    base_seed: u64,
    params: mpa::scene::SceneGenParams,
    train: Vec<ManifestEntry>,
    val: Vec<ManifestEntry>,
}

/// Seed of scene `index` in `split`.
fn scene_seed(base: u64, split: &str, index: usize) -> u64 {
    let offset = if split == "train" { 0 } else { 500_000 };
    base.wrapping_mul(1_000_000).wrapping_add(offset + index as u64)
}

pub fn synth(config: &RunConfig) -> Result<()> {
    let dir = config.data_dir();
    config.scene_params(0).validate()?;
    prepare_dir(&dir, config.force)?;
    let mut manifest =
        Manifest { base_seed: config.seed, params: config.scene_params(config.seed), train: Vec::new(), val: Vec::new() };
    for (split, count) in [("train", config.train_scenes), ("val", config.val_scenes)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir).map_err(runtime(&split_dir))?;
        let seeds: Vec<(usize, u64)> = (0..count).map(|i| (i, scene_seed(config.seed, split, i))).collect();
        let written = parallel_map(&seeds, config.jobs, |&(i, seed)| {
            let mut scene = generate_scene(&config.scene_params(seed))?;
            scene.scene_id = format!("{split}_{i:03}");
            save_scene(&scene, &split_dir)?;
            Ok(ManifestEntry { id: scene.scene_id, seed })
        })?;
        info!("wrote {} {split} scenes to {}", written.len(), split_dir.display());
        if split == "train" {
            manifest.train = written;
        } else {
            manifest.val = written;
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn train_cmd(config: &RunConfig) -> Result<()> {
    let train_config: TrainConfig = config.train_config();
    train_config.validate()?;
    let scenes = load_split(config, "train")?;
    if scenes.is_empty() {
        return Err(CliError::Usage(format!("no training scenes in {}", config.data_dir().join("train").display())));
    }
    let dir = config.train_dir();
    prepare_dir(&dir, config.force)?;
    write_json(&dir.join("config.json"), config)?;
    info!("training {} steps on {} scenes into {}", train_config.steps, scenes.len(), dir.display());
    let outcome = train(&train_config, &scenes, Some(&dir))?;

    let val = load_split(config, "val").unwrap_or_default();
    if !val.is_empty() {
        let params = config.cluster_params();
        let preds = parallel_map(&val, config.jobs, |scene| {
            let proposals = outcome.model.infer(&outcome.store, scene, config.seed)?;
            Ok(form_objects(&proposals, config.mode, &params)?.objects)
        })?;
        let table = score(&val, &preds)?;
        println!("validation ({}):\n{}", config.mode.name(), table.to_text());
        write_json(&dir.join("val_scores.json"), &table)?;
    }
    Ok(())
}

fn load_model(path: &Path, config: &RunConfig) -> Result<(Model, mpa::ParamStore)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let (mut model, store) = Model::load(path)?;
    model.config.infer_proposals = config.infer_proposals;
    Ok((model, store))
}

pub fn infer_cmd(config: &RunConfig) -> Result<()> {
    let (model, store) = load_model(&config.checkpoint_path(), config)?;
    let scenes = load_split(config, &config.split)?;
    let dir = config.predictions_dir();
    prepare_dir(&dir, config.force)?;
    let params = config.cluster_params();
    let counts = parallel_map(&scenes, config.jobs, |scene| {
        let (votes, proposals) = model.infer_with_votes(&store, scene, config.seed)?;
        let objects = form_objects(&proposals, config.mode, &params)?.objects;
        write_predictions(&dir, &scene.scene_id, scene.len(), &objects)?;
        if config.dump_votes {
            let votes: Vec<_> = votes.iter().map(|v| (v.position, v.point as i64)).collect();
            save_tagged_points(&dir.join(format!("{}_votes.ply", scene.scene_id)), &votes, "point")?;
            let props: Vec<_> = proposals.iter().map(|p| (p.position, i64::from(p.heads.is_positive()))).collect();
            save_tagged_points(&dir.join(format!("{}_props.ply", scene.scene_id)), &props, "positive")?;
        }
        Ok(objects.len())
    })?;
    info!("wrote {} objects for {} scenes to {}", counts.iter().sum::<usize>(), scenes.len(), dir.display());
    Ok(())
}

pub fn eval_cmd(config: &RunConfig) -> Result<()> {
    let scenes = load_split(config, &config.split)?;
    if scenes.is_empty() {
        return Err(CliError::Usage(format!("no scenes to evaluate in split '{}'", config.split)));
    }
    let dir = config.predictions_dir();
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("prediction directory {} does not exist", dir.display())));
    }
    let preds: Vec<Vec<FinalObject>> = scenes
        .iter()
        .map(|s| match read_predictions(&dir, &s.scene_id, s.len())? {
            Some(objects) => Ok(objects),
            None => {
                warn!("no predictions for scene {}; counting it as empty", s.scene_id);
                Ok(Vec::new())
            }
        })
        .collect::<Result<_>>()?;
    let table = score(&scenes, &preds)?;
    let text = table.to_text();
    println!("{text}");
    write_json(&dir.join("scores.json"), &table)?;
    std::fs::write(dir.join("scores.txt"), text).map_err(runtime(&dir))
}

pub fn ablate_cmd(config: &RunConfig) -> Result<()> {
    let (plain, plain_store) = load_model(&config.plain_checkpoint_path(), config)?;
    let (gcn, gcn_store) = load_model(&config.checkpoint_path(), config)?;
    let scenes = load_split(config, &config.split)?;
    let table = run_ablation((&plain, &plain_store), (&gcn, &gcn_store), &scenes, &config.cluster_params(), config.seed)?;
    let text = table.to_text();
    println!("{text}");
    std::fs::create_dir_all(&config.out).map_err(runtime(&config.out))?;
    write_json(&config.out.join("ablation.json"), &table)?;
    std::fs::write(config.out.join("ablation.txt"), text).map_err(runtime(&config.out))
}
