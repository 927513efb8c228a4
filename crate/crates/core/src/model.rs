//! The full network: backbone, proposal encoder, GCN, heads and mask head.
//!
//! Training runs one differentiable graph per crop. Inference works on full
//! scenes and evaluates the proposal stages in chunks so memory stays bounded.

use diffcore::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, point_loss, Backbone, PointFeatures, PointTargets};
use crate::error::{MpaError, Result};
use crate::gcn::{build_graph, Gcn, DEFAULT_LAYERS, EDGE_RADIUS};
use crate::geom::Vec3;
use crate::objgen::{
    assign_objectness, discriminative_loss, geometric_agg_loss, heads::DELTA_DIST, heads::DELTA_VAR,
    heads::GAMMA_REG, mask_loss, AggFeatures, Heads, MaskHead, Objectness, ProposalHeads, ScoredProposal,
};
use crate::proposals::{
    cast_votes, sample_proposals, ProposalEncoder, ProposalSet, Sampling, Vote, DEFAULT_PROPOSALS, DEFAULT_RADIUS,
};
use crate::scene::{is_object_class, InstanceGt, Scene};

/// Weight of the proposal semantic loss in the total.
pub const PROPOSAL_SEMANTIC_WEIGHT: f64 = 0.1;

/// Proposals per encoder chunk at inference.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: AggFeatures,
    pub gcn_layers: usize,
    /// Grouping radius `r`, meters.
    pub radius: f64,
    /// Proposals sampled per training crop.
    pub train_proposals: usize,
    /// Proposals sampled per full scene at inference.
    pub infer_proposals: usize,
    /// Members kept per proposal group during training.
    pub group_cap: usize,
    pub sampling: Sampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: AggFeatures::Geometric,
            gcn_layers: DEFAULT_LAYERS,
            radius: DEFAULT_RADIUS,
            train_proposals: 24,
            infer_proposals: DEFAULT_PROPOSALS,
            group_cap: 32,
            sampling: Sampling::Random,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.train_proposals == 0 || self.infer_proposals == 0 || self.group_cap == 0 {
            return Err(MpaError::Invalid("radius, proposal counts and group cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    backbone: Backbone,
    encoder: ProposalEncoder,
    gcn: Gcn,
    heads: Heads,
    mask: MaskHead,
}

/// Discrete choices made from the backbone's output: votes and proposals.
///
/// Fixing a plan makes the rest of the forward pass a smooth function of the
/// parameters, which is what gradient checks need.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub votes: Vec<Vote>,
    pub proposals: ProposalSet,
}

/// Loss graph nodes of one crop.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub point: Var,
    pub point_semantic: Var,
    pub center: Var,
    pub objectness: Var,
    pub proposal_semantic: Var,
    pub mask: Var,
    pub aggregation: Var,
}

/// Scalar values of [`LossVars`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub point: f64,
    pub point_semantic: f64,
    pub center: f64,
    pub objectness: f64,
    pub proposal_semantic: f64,
    pub mask: f64,
    pub aggregation: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).item();
        LossValues {
            total: v(self.total),
            point: v(self.point),
            point_semantic: v(self.point_semantic),
            center: v(self.center),
            objectness: v(self.objectness),
            proposal_semantic: v(self.proposal_semantic),
            mask: v(self.mask),
            aggregation: v(self.aggregation),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.point,
            self.point_semantic,
            self.center,
            self.objectness,
            self.proposal_semantic,
            self.mask,
            self.aggregation,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `L_point + L_obj + 0.1·L_sem + L_mask + L_agg`.
pub fn total_loss(g: &mut Graph, point: Var, objectness: Var, semantic: Var, mask: Var, aggregation: Var) -> Result<Var> {
    let sem = g.scale(semantic, PROPOSAL_SEMANTIC_WEIGHT);
    let mut total = g.add(point, objectness)?;
    for part in [sem, mask, aggregation] {
        total = g.add(total, part)?;
    }
    Ok(total)
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self {
            backbone: Backbone::new(&mut store, &mut rng),
            encoder: ProposalEncoder::new(&mut store, &mut rng),
            gcn: Gcn::new(&mut store, config.gcn_layers, &mut rng),
            heads: Heads::new(&mut store, config.features, &mut rng),
            mask: MaskHead::new(&mut store, &mut rng),
            config,
        };
        Ok((model, store))
    }

    /// Attaches to existing parameters, checking every name and shape.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone: Backbone::bind(store)?,
            encoder: ProposalEncoder::bind(store)?,
            gcn: Gcn::bind(store, config.gcn_layers)?,
            heads: Heads::bind(store, config.features)?,
            mask: MaskHead::bind(store)?,
            config,
        })
    }

    /// Training plan: ground-truth object points vote, proposals are sampled
    /// and their groups capped.
    pub fn training_plan(&self, scene: &Scene, offsets: &Tensor, seed: u64) -> Result<Plan> {
        let mask: Vec<bool> = scene.points.iter().map(|p| is_object_class(p.semantic)).collect();
        let votes = cast_votes(scene, offsets, &mask)?;
        let picks = sample_proposals(&votes, self.config.train_proposals, seed, self.config.sampling)?;
        let proposals = ProposalSet::build(&votes, &picks, self.config.radius)
            .capped(self.config.group_cap, seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Plan { votes, proposals })
    }

    /// Builds the multi-task loss of one training crop.
    ///
    /// With `plan = None` the plan comes from this forward pass's own offsets.
    pub fn losses(&self, g: &mut Graph, store: &ParamStore, scene: &Scene, plan: Option<&Plan>, seed: u64) -> Result<(LossVars, Plan)> {
        let vars = self.backbone.forward(g, store, scene)?;
        let targets = PointTargets::from_scene(scene);
        let (point, point_semantic, center) = point_loss(g, &vars, scene, &targets)?;
        let plan = match plan {
            Some(p) => p.clone(),
            None => self.training_plan(scene, g.value(vars.offsets), seed)?,
        };

        let enc = self.encoder.forward(g, store, vars.features, &plan.votes, &plan.proposals)?;
        let graph = build_graph(&plan.proposals.positions, EDGE_RADIUS);
        let h = self.gcn.consolidate(g, store, &graph, enc.pooled)?;
        let heads = self.heads.forward(g, store, h)?;

        let instances = scene.instances();
        let centers: Vec<Vec3> = instances.iter().map(|i| i.center).collect();
        let mut labelled = Vec::new();
        let mut labels = Vec::new();
        let mut positives: Vec<(usize, &InstanceGt)> = Vec::new();
        for (k, &y) in plan.proposals.positions.iter().enumerate() {
            match assign_objectness(y, &centers) {
                (Objectness::Positive, Some(nearest)) => {
                    labelled.push(k);
                    labels.push(1);
                    positives.push((k, &instances[nearest]));
                }
                (Objectness::Negative, _) => {
                    labelled.push(k);
                    labels.push(0);
                }
                _ => {}
            }
        }
        let zero = |g: &mut Graph| g.input(Tensor::scalar(0.0));

        let objectness = if labelled.is_empty() {
            zero(g)
        } else {
            let rows = g.gather_rows(heads.objectness, labelled)?;
            g.cross_entropy(rows, &labels)?
        };

        let pos_idx: Vec<usize> = positives.iter().map(|(k, _)| *k).collect();
        let (proposal_semantic, aggregation, mask) = if positives.is_empty() {
            (zero(g), zero(g), zero(g))
        } else {
            let sem_rows = g.gather_rows(heads.semantic, pos_idx.clone())?;
            let classes: Vec<usize> = positives.iter().map(|(_, gt)| gt.class).collect();
            let proposal_semantic = g.cross_entropy(sem_rows, &classes)?;

            let mut aggregation = zero(g);
            if let Some(geo) = heads.geometric {
                let rows = g.gather_rows(geo, pos_idx.clone())?;
                let targets: Vec<(Vec3, &InstanceGt)> =
                    positives.iter().map(|(k, gt)| (plan.proposals.positions[*k], *gt)).collect();
                let l = geometric_agg_loss(g, rows, &targets)?;
                aggregation = g.add(aggregation, l)?;
            }
            if let Some(emb) = heads.embedding {
                let rows = g.gather_rows(emb, pos_idx.clone())?;
                let ids: Vec<i64> = positives.iter().map(|(_, gt)| gt.id as i64).collect();
                let l = discriminative_loss(g, rows, &ids, DELTA_VAR, DELTA_DIST, GAMMA_REG)?;
                aggregation = g.add(aggregation, l.total)?;
            }

            // Mask rows of positive proposals: foreground iff the point
            // belongs to the instance nearest to the proposal.
            let mut is_pos = vec![None; plan.proposals.len()];
            for (k, gt) in &positives {
                is_pos[*k] = Some(gt.id);
            }
            let mut rows = Vec::new();
            let mut owner = Vec::new();
            let mut fg = Vec::new();
            for (r, (&k, &v)) in enc.rows.proposal.iter().zip(&enc.rows.vote).enumerate() {
                if let Some(id) = is_pos[k] {
                    rows.push(r);
                    owner.push(k);
                    fg.push(usize::from(scene.points[plan.votes[v].point].instance == id));
                }
            }
            let per_row = g.gather_rows(enc.per_row, rows)?;
            let logits = self.mask.forward(g, store, per_row, enc.pooled, &owner)?;
            let mask = mask_loss(g, logits, &fg)?;
            (proposal_semantic, aggregation, mask)
        };

        let total = total_loss(g, point, objectness, proposal_semantic, mask, aggregation)?;
        let vars = LossVars { total, point, point_semantic, center, objectness, proposal_semantic, mask, aggregation };
        Ok((vars, plan))
    }

    /// Full-scene forward up to scored proposals.
    ///
    /// Points predicted as an object class vote. Every aggregation mode
    /// consumes this same output.
    pub fn infer(&self, store: &ParamStore, scene: &Scene, seed: u64) -> Result<Vec<ScoredProposal>> {
        Ok(self.infer_with_votes(store, scene, seed)?.1)
    }

    /// [`Model::infer`] that also returns the votes cast.
    pub fn infer_with_votes(&self, store: &ParamStore, scene: &Scene, seed: u64) -> Result<(Vec<Vote>, Vec<ScoredProposal>)> {
        if scene.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let pf = {
            let mut g = Graph::new();
            let vars = self.backbone.forward(&mut g, store, scene)?;
            PointFeatures::from_graph(&g, &vars)
        };
        let object_mask: Vec<bool> =
            (0..scene.len()).map(|i| is_object_class(argmax(pf.semantic_logits.row(i)))).collect();
        let votes = match cast_votes(scene, &pf.offsets, &object_mask) {
            Ok(v) => v,
            Err(MpaError::NoVotes) => return Ok((Vec::new(), Vec::new())),
            Err(e) => return Err(e),
        };
        let picks = sample_proposals(&votes, self.config.infer_proposals, seed, self.config.sampling)?;
        let proposals = ProposalSet::build(&votes, &picks, self.config.radius);
        let k = proposals.len();

        let mut pooled = Vec::with_capacity(k * crate::proposals::PROPOSAL_WIDTH);
        for start in (0..k).step_by(CHUNK) {
            let chunk: Vec<usize> = (start..(start + CHUNK).min(k)).collect();
            let mut g = Graph::new();
            let features = g.input(pf.features.clone());
            let enc = self.encoder.forward(&mut g, store, features, &votes, &proposals.subset(&chunk))?;
            pooled.extend_from_slice(g.value(enc.pooled).data());
        }
        let pooled = Tensor::matrix(k, crate::proposals::PROPOSAL_WIDTH, pooled);
        let graph = build_graph(&proposals.positions, EDGE_RADIUS);
        let h = self.gcn.consolidate_values(store, &graph, pooled)?;
        let heads: Vec<ProposalHeads> = {
            let mut g = Graph::new();
            let h = g.input(h);
            self.heads.forward(&mut g, store, h)?.evaluate(&g)
        };

        let mut masks = vec![Vec::new(); k];
        let positive: Vec<usize> = (0..k).filter(|&i| heads[i].is_positive()).collect();
        for chunk in positive.chunks(CHUNK) {
            let mut g = Graph::new();
            let features = g.input(pf.features.clone());
            let enc = self.encoder.forward(&mut g, store, features, &votes, &proposals.subset(chunk))?;
            let logits = self.mask.forward(&mut g, store, enc.per_row, enc.pooled, &enc.rows.proposal)?;
            let logits = g.value(logits);
            for (r, (&slot, &v)) in enc.rows.proposal.iter().zip(&enc.rows.vote).enumerate() {
                if logits.get(r, 1) > logits.get(r, 0) {
                    masks[chunk[slot]].push(votes[v].point);
                }
            }
        }
        let scored = heads
            .into_iter()
            .zip(masks)
            .zip(&proposals.positions)
            .map(|((heads, mut mask), &position)| {
                mask.sort_unstable();
                mask.dedup();
                ScoredProposal { position, heads, mask }
            })
            .collect();
        Ok((votes, scored))
    }

    /// Checkpoint metadata describing this architecture.
    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config })
    }

    /// Loads a checkpoint written with [`Model::meta`].
    pub fn load(path: &std::path::Path) -> Result<(Self, ParamStore)> {
        let (store, meta) = ParamStore::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| MpaError::Invalid(format!("checkpoint {} has no usable model config: {e}", path.display())))?;
        Ok((Self::bind(config, &store)?, store))
    }
}
