//! Per-point feature extractor with semantic and center-vote heads.
//!
//! Each point's input is `[local position, color, normal]`, where the
//! position is taken relative to the center of its coarse voxel. A shared MLP
//! encodes every point, the encodings are mean-pooled over a fine and a coarse
//! voxel grid, and the two pooled contexts are concatenated back onto each
//! point before a second MLP produces the feature `f_i`.

use std::collections::HashMap;

use diffcore::{huber_of_norms, Graph, Mlp, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{MpaError, Result};
use crate::geom::Vec3;
use crate::scene::{is_object_class, Scene, NUM_CLASSES};

pub const INPUT_WIDTH: usize = 9;
pub const FEATURE_WIDTH: usize = 64;
pub const FINE_VOXEL: f64 = 0.25;
pub const COARSE_VOXEL: f64 = 1.0;
/// Weight of the semantic term in the point loss.
pub const SEMANTIC_WEIGHT: f64 = 0.1;

const ENCODER: [usize; 3] = [INPUT_WIDTH, 32, 64];
const FUSE: [usize; 3] = [3 * 64, 128, FEATURE_WIDTH];
const SEMANTIC_HEAD: [usize; 3] = [FEATURE_WIDTH, 64, NUM_CLASSES];
const CENTER_HEAD: [usize; 3] = [FEATURE_WIDTH, 64, 3];

#[derive(Clone, Debug)]
pub struct Backbone {
    encoder: Mlp,
    fuse: Mlp,
    semantic: Mlp,
    center: Mlp,
}

/// Graph nodes for the three per-point outputs, all with one row per point.
#[derive(Clone, Copy, Debug)]
pub struct PointVars {
    pub features: Var,
    pub semantic_logits: Var,
    pub offsets: Var,
}

/// Evaluated per-point outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub features: Tensor,
    pub semantic_logits: Tensor,
    pub offsets: Tensor,
}

impl PointFeatures {
    pub fn from_graph(g: &Graph, vars: &PointVars) -> Self {
        Self {
            features: g.value(vars.features).clone(),
            semantic_logits: g.value(vars.semantic_logits).clone(),
            offsets: g.value(vars.offsets).clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self, i: usize) -> Vec3 {
        let r = self.offsets.row(i);
        [r[0], r[1], r[2]]
    }

    /// Argmax of the semantic logits, lowest class on ties.
    pub fn predicted_class(&self, i: usize) -> usize {
        argmax(self.semantic_logits.row(i))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            encoder: Mlp::new(store, "backbone.encoder", &ENCODER, rng),
            fuse: Mlp::new(store, "backbone.fuse", &FUSE, rng),
            semantic: Mlp::new(store, "backbone.semantic", &SEMANTIC_HEAD, rng),
            center: Mlp::new(store, "backbone.center", &CENTER_HEAD, rng),
        }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::bind(store, "backbone.encoder", &ENCODER)?,
            fuse: Mlp::bind(store, "backbone.fuse", &FUSE)?,
            semantic: Mlp::bind(store, "backbone.semantic", &SEMANTIC_HEAD)?,
            center: Mlp::bind(store, "backbone.center", &CENTER_HEAD)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, scene: &Scene) -> Result<PointVars> {
        if scene.is_empty() {
            return Err(MpaError::Invalid("feature extraction needs at least one point".into()));
        }
        let input = g.input(input_matrix(scene));
        let encoded = self.encoder.forward(g, store, input)?;
        let positions: Vec<Vec3> = scene.positions().collect();
        let mut parts = vec![encoded];
        for size in [FINE_VOXEL, COARSE_VOXEL] {
            let (ids, count) = voxel_ids(&positions, size);
            let pooled = g.segment_mean(encoded, ids.clone(), count)?;
            parts.push(g.gather_rows(pooled, ids)?);
        }
        let fused = g.concat_cols(&parts)?;
        let features = self.fuse.forward(g, store, fused)?;
        let semantic_logits = self.semantic.forward(g, store, features)?;
        let offsets = self.center.forward(g, store, features)?;
        Ok(PointVars { features, semantic_logits, offsets })
    }
}

/// Per-point input rows `[position − coarse voxel center, color, normal]`.
pub fn input_matrix(scene: &Scene) -> Tensor {
    let mut data = Vec::with_capacity(scene.len() * INPUT_WIDTH);
    for p in &scene.points {
        data.extend(p.position.map(|v| v - ((v / COARSE_VOXEL).floor() + 0.5) * COARSE_VOXEL));
        data.extend(p.color);
        data.extend(p.normal);
    }
    Tensor::matrix(scene.len(), INPUT_WIDTH, data)
}

/// Dense voxel ids numbered in order of first appearance, and the voxel count.
pub fn voxel_ids(positions: &[Vec3], size: f64) -> (Vec<usize>, usize) {
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let ids = positions
        .iter()
        .map(|p| {
            let key = p.map(|v| (v / size).floor() as i64);
            let next = index.len();
            *index.entry(key).or_insert(next)
        })
        .collect();
    (ids, index.len())
}

/// Per-point supervision derived from ground truth.
#[derive(Clone, Debug)]
pub struct PointTargets {
    pub semantic: Vec<usize>,
    /// `(point index, instance center)` for every object point.
    pub centers: Vec<(usize, Vec3)>,
}

impl PointTargets {
    /// Uses the instance box centers of `scene` itself, so a crop supervises
    /// toward the centers of its visible parts.
    pub fn from_scene(scene: &Scene) -> Self {
        let mut centers = Vec::with_capacity(scene.object_point_count());
        for inst in scene.instances() {
            centers.extend(inst.points.iter().map(|&i| (i, inst.center)));
        }
        centers.sort_by_key(|(i, _)| *i);
        debug_assert!(centers.iter().all(|(i, _)| is_object_class(scene.points[*i].semantic)));
        Self { semantic: scene.points.iter().map(|p| p.semantic).collect(), centers }
    }
}

/// Mean Huber norm of `x_i + Δx_i − c_i*` over object points; zero without any.
pub fn center_loss(g: &mut Graph, offsets: Var, scene: &Scene, targets: &PointTargets) -> Result<Var> {
    if targets.centers.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = targets.centers.iter().map(|(i, _)| *i).collect();
    let rows = g.gather_rows(offsets, idx)?;
    let shift: Vec<f64> = targets
        .centers
        .iter()
        .flat_map(|(i, c)| {
            let x = scene.points[*i].position;
            [x[0] - c[0], x[1] - c[1], x[2] - c[2]]
        })
        .collect();
    let shift = g.input(Tensor::matrix(targets.centers.len(), 3, shift));
    let residual = g.add(rows, shift)?;
    let h = huber_of_norms(g, residual);
    Ok(g.mean(h))
}

/// `0.1 · L_sem + L_cent`, returned with its two components.
pub fn point_loss(
    g: &mut Graph,
    vars: &PointVars,
    scene: &Scene,
    targets: &PointTargets,
) -> Result<(Var, Var, Var)> {
    let sem = g.cross_entropy(vars.semantic_logits, &targets.semantic)?;
    let cent = center_loss(g, vars.offsets, scene, targets)?;
    let weighted = g.scale(sem, SEMANTIC_WEIGHT);
    let total = g.add(weighted, cent)?;
    Ok((total, sem, cent))
}
