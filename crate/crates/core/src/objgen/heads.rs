//! Per-proposal prediction heads and their losses.

use diffcore::{huber_of_norms, FocalParams, Graph, Mlp, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::geom::{dist, Vec3};
use crate::proposals::PROPOSAL_WIDTH;
use crate::scene::{InstanceGt, NUM_CLASSES};

pub const GEOMETRIC_WIDTH: usize = 4;
pub const EMBEDDING_WIDTH: usize = 5;

pub const POSITIVE_RADIUS: f64 = 0.3;
pub const NEGATIVE_RADIUS: f64 = 0.6;
pub const AMBIGUITY_RATIO: f64 = 0.6;

pub const DELTA_VAR: f64 = 0.1;
pub const DELTA_DIST: f64 = 0.1;
pub const GAMMA_REG: f64 = 0.001;

/// Which aggregation features the heads predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFeatures {
    /// Refined center and radius, `E = 4`.
    #[default]
    Geometric,
    /// Learned embedding, `E = 5`.
    Embedding,
    /// Both at once (`E = 9`), so one network serves either clustering mode.
    Both,
}

impl AggFeatures {
    pub fn width(self) -> usize {
        match self {
            Self::Geometric => GEOMETRIC_WIDTH,
            Self::Embedding => EMBEDDING_WIDTH,
            Self::Both => GEOMETRIC_WIDTH + EMBEDDING_WIDTH,
        }
    }

    pub fn has_geometric(self) -> bool {
        matches!(self, Self::Geometric | Self::Both)
    }

    pub fn has_embedding(self) -> bool {
        matches!(self, Self::Embedding | Self::Both)
    }

    /// Column range of the geometric block inside the aggregation block.
    fn geometric_cols(self) -> Option<(usize, usize)> {
        self.has_geometric().then_some((0, GEOMETRIC_WIDTH))
    }

    fn embedding_cols(self) -> Option<(usize, usize)> {
        match self {
            Self::Geometric => None,
            Self::Embedding => Some((0, EMBEDDING_WIDTH)),
            Self::Both => Some((GEOMETRIC_WIDTH, GEOMETRIC_WIDTH + EMBEDDING_WIDTH)),
        }
    }
}

/// Head MLP `(128, 128, D_out)` with `D_out = S + E + 2`, split `[S | E | 2]`.
#[derive(Clone, Debug)]
pub struct Heads {
    mlp: Mlp,
    features: AggFeatures,
}

/// Graph nodes of the split head output, each with one row per proposal.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub semantic: Var,
    pub geometric: Option<Var>,
    pub embedding: Option<Var>,
    /// Column 0 negative, column 1 positive.
    pub objectness: Var,
}

/// Evaluated heads of one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalHeads {
    pub semantic_logits: Vec<f64>,
    /// `(Δy, r)` when the model predicts geometric features.
    pub geometric: Option<(Vec3, f64)>,
    pub embedding: Option<Vec<f64>>,
    pub objectness_logits: [f64; 2],
}

impl ProposalHeads {
    /// Softmax probability of the positive objectness class.
    pub fn positive_probability(&self) -> f64 {
        let [n, p] = self.objectness_logits;
        1.0 / (1.0 + (n - p).exp())
    }

    pub fn is_positive(&self) -> bool {
        self.objectness_logits[1] > self.objectness_logits[0]
    }
}

fn head_widths(features: AggFeatures) -> [usize; 4] {
    [PROPOSAL_WIDTH, 128, 128, output_width(features)]
}

pub fn output_width(features: AggFeatures) -> usize {
    NUM_CLASSES + features.width() + 2
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, features: AggFeatures, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, "heads", &head_widths(features), rng), features }
    }

    pub fn bind(store: &ParamStore, features: AggFeatures) -> Result<Self> {
        Ok(Self { mlp: Mlp::bind(store, "heads", &head_widths(features))?, features })
    }

    pub fn features(&self) -> AggFeatures {
        self.features
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<HeadVars> {
        let out = self.mlp.forward(g, store, h)?;
        let s = NUM_CLASSES;
        let e = self.features.width();
        let semantic = g.slice_cols(out, 0, s)?;
        let block = |g: &mut Graph, cols: Option<(usize, usize)>| -> Result<Option<Var>> {
            cols.map(|(a, b)| g.slice_cols(out, s + a, s + b).map_err(Into::into)).transpose()
        };
        let geometric = block(g, self.features.geometric_cols())?;
        let embedding = block(g, self.features.embedding_cols())?;
        let objectness = g.slice_cols(out, s + e, s + e + 2)?;
        Ok(HeadVars { semantic, geometric, embedding, objectness })
    }
}

impl HeadVars {
    /// Reads back the per-proposal values.
    pub fn evaluate(&self, g: &Graph) -> Vec<ProposalHeads> {
        let k = g.value(self.semantic).rows();
        (0..k)
            .map(|i| {
                let o = g.value(self.objectness).row(i);
                ProposalHeads {
                    semantic_logits: g.value(self.semantic).row(i).to_vec(),
                    geometric: self.geometric.map(|v| {
                        let r = g.value(v).row(i);
                        ([r[0], r[1], r[2]], r[3])
                    }),
                    embedding: self.embedding.map(|v| g.value(v).row(i).to_vec()),
                    objectness_logits: [o[0], o[1]],
                }
            })
            .collect()
    }
}

/// Objectness label of one proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objectness {
    Positive,
    Negative,
    /// Between the two radii and unambiguous: no objectness loss.
    Ignored,
}

/// Labels a proposal at `y` from its distances to the ground-truth centers.
///
/// Returns the label and the index of the nearest center.
pub fn assign_objectness(y: Vec3, centers: &[Vec3]) -> (Objectness, Option<usize>) {
    let mut d1 = (f64::INFINITY, None);
    let mut d2 = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist(y, *c);
        if d < d1.0 {
            d2 = d1.0;
            d1 = (d, Some(i));
        } else if d < d2 {
            d2 = d;
        }
    }
    (objectness_from_distances(d1.0, d2), d1.1)
}

/// The labeling rule on the nearest (`d1`) and second-nearest (`d2`) center distances.
pub fn objectness_from_distances(d1: f64, d2: f64) -> Objectness {
    if d1 < POSITIVE_RADIUS {
        Objectness::Positive
    } else if d1 > NEGATIVE_RADIUS || d1 > AMBIGUITY_RATIO * d2 {
        Objectness::Negative
    } else {
        Objectness::Ignored
    }
}

/// `mean over positives of ‖y + Δy − c*‖_H + ‖r − r*‖_H`.
///
/// `geometric` holds the `P × 4` predictions of the positive proposals and
/// `targets` their positions and nearest ground-truth instances.
pub fn geometric_agg_loss(g: &mut Graph, geometric: Var, targets: &[(Vec3, &InstanceGt)]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let p = targets.len();
    if g.value(geometric).rows() != p {
        return Err(MpaError::Invalid(format!("{} rows for {p} positives", g.value(geometric).rows())));
    }
    let delta = g.slice_cols(geometric, 0, 3)?;
    let radius = g.slice_cols(geometric, 3, 4)?;
    let shift: Vec<f64> = targets.iter().flat_map(|(y, gt)| [0, 1, 2].map(|k| y[k] - gt.center[k])).collect();
    let shift = g.input(Tensor::matrix(p, 3, shift));
    let center_residual = g.add(delta, shift)?;
    let center_term = huber_of_norms(g, center_residual);
    let r_star = g.input(Tensor::matrix(p, 1, targets.iter().map(|(_, gt)| -gt.radius).collect()));
    let radius_residual = g.add(radius, r_star)?;
    let radius_term = huber_of_norms(g, radius_residual);
    let both = g.add(center_term, radius_term)?;
    Ok(g.mean(both))
}

/// Discriminative loss terms, returned as `(total, var, dist, reg)`.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminativeVars {
    pub total: Var,
    pub var: Var,
    pub dist: Var,
    pub reg: Var,
}

/// `L_var + L_dist + γ·L_reg` over positive-proposal embeddings.
///
/// `cluster[i]` is the ground-truth instance (any integer id) of row `i`.
/// The number of clusters `C` counts the distinct ids present.
pub fn discriminative_loss(
    g: &mut Graph,
    embedding: Var,
    cluster: &[i64],
    delta_v: f64,
    delta_d: f64,
    gamma: f64,
) -> Result<DiscriminativeVars> {
    let n = g.value(embedding).rows();
    if n != cluster.len() {
        return Err(MpaError::Invalid(format!("{} cluster ids for {n} rows", cluster.len())));
    }
    if n == 0 {
        let z = g.input(Tensor::scalar(0.0));
        return Ok(DiscriminativeVars { total: z, var: z, dist: z, reg: z });
    }
    let mut ids: Vec<i64> = cluster.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let c = ids.len();
    let seg: Vec<usize> = cluster.iter().map(|id| ids.binary_search(id).unwrap()).collect();
    let mut counts = vec![0usize; c];
    seg.iter().for_each(|&s| counts[s] += 1);

    let mu = g.segment_mean(embedding, seg.clone(), c)?;
    let own_mean = g.gather_rows(mu, seg.clone())?;
    let diff = g.sub(own_mean, embedding)?;
    let norms = g.row_norm(diff);
    let hinge = g.add_scalar(norms, -delta_v);
    let hinge = g.relu(hinge);
    let sq = g.square(hinge);
    let weights = seg.iter().map(|&s| 1.0 / (c as f64 * counts[s] as f64)).collect();
    let weighted = g.mul_const(sq, weights)?;
    let var = g.sum(weighted);

    let dist = if c > 1 {
        let (a, b): (Vec<usize>, Vec<usize>) =
            (0..c).flat_map(|a| (0..c).filter(move |&b| b != a).map(move |b| (a, b))).unzip();
        let ma = g.gather_rows(mu, a)?;
        let mb = g.gather_rows(mu, b)?;
        let d = g.sub(ma, mb)?;
        let d = g.row_norm(d);
        let push = g.scale(d, -1.0);
        let push = g.add_scalar(push, 2.0 * delta_d);
        let push = g.relu(push);
        let push = g.square(push);
        let s = g.sum(push);
        g.scale(s, 1.0 / (c * (c - 1)) as f64)
    } else {
        g.input(Tensor::scalar(0.0))
    };

    let mu_norms = g.row_norm(mu);
    let reg = g.mean(mu_norms);
    let weighted_reg = g.scale(reg, gamma);
    let total = g.add(var, dist)?;
    let total = g.add(total, weighted_reg)?;
    Ok(DiscriminativeVars { total, var, dist, reg })
}

/// Mask head: the proposal encoder's per-row features concatenated with the
/// pooled proposal feature, then an MLP `(256, 128, 64, 32, 2)`.
#[derive(Clone, Debug)]
pub struct MaskHead {
    mlp: Mlp,
}

const MASK_MLP: [usize; 5] = [2 * PROPOSAL_WIDTH, 128, 64, 32, 2];

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, "mask", &MASK_MLP, rng) }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(Self { mlp: Mlp::bind(store, "mask", &MASK_MLP)? })
    }

    /// `per_row` and `pooled` come from the proposal encoder; `proposal_of_row`
    /// maps each row to its pooled vector. Returns `rows × 2` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        per_row: Var,
        pooled: Var,
        proposal_of_row: &[usize],
    ) -> Result<Var> {
        let ctx = g.gather_rows(pooled, proposal_of_row.to_vec())?;
        let input = g.concat_cols(&[per_row, ctx])?;
        Ok(self.mlp.forward(g, store, input)?)
    }
}

/// Focal loss over mask rows; `targets` are 1 for foreground.
pub fn mask_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    Ok(diffcore::loss::focal_loss(g, logits, targets, FocalParams::default())?)
}
