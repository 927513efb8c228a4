//! Center votes, proposal sampling, radius grouping and proposal features.

use diffcore::{grouped_mlp_maxpool, Graph, Mlp, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PointFeatures, FEATURE_WIDTH};
use crate::error::{MpaError, Result};
use crate::geom::{dist2, sub, Vec3};
use crate::grid::Grid;
use crate::scene::Scene;

/// Width of the proposal feature `g_i`.
pub const PROPOSAL_WIDTH: usize = 128;
pub const DEFAULT_RADIUS: f64 = 0.3;
pub const DEFAULT_PROPOSALS: usize = 500;

const ENCODER: [usize; 3] = [FEATURE_WIDTH + 3, 128, PROPOSAL_WIDTH];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote {
    /// Index of the casting point in the scene.
    pub point: usize,
    pub position: Vec3,
}

/// One vote `x_i + Δx_i` per point with `object_mask[i]` set.
pub fn cast_votes(scene: &Scene, offsets: &Tensor, object_mask: &[bool]) -> Result<Vec<Vote>> {
    if offsets.rows() != scene.len() || object_mask.len() != scene.len() {
        return Err(MpaError::Invalid(format!(
            "{} points, {} offsets, {} mask entries",
            scene.len(),
            offsets.rows(),
            object_mask.len()
        )));
    }
    let votes: Vec<Vote> = (0..scene.len())
        .filter(|&i| object_mask[i])
        .map(|i| {
            let x = scene.points[i].position;
            let d = offsets.row(i);
            Vote { point: i, position: [x[0] + d[0], x[1] + d[1], x[2] + d[2]] }
        })
        .collect();
    if votes.is_empty() {
        return Err(MpaError::NoVotes);
    }
    Ok(votes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Random,
    /// Farthest point sampling, kept for comparison.
    Fps,
}

/// Picks `k` vote indices as proposal positions.
///
/// Random mode samples without replacement when there are at least `k`
/// votes and with replacement otherwise. FPS starts from vote 0 and pads with
/// random picks once every vote is taken.
pub fn sample_proposals(votes: &[Vote], k: usize, seed: u64, mode: Sampling) -> Result<Vec<usize>> {
    if votes.is_empty() {
        return Err(MpaError::NoVotes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = votes.len();
    let mut picked = match mode {
        Sampling::Random if n >= k => return Ok(sample(&mut rng, n, k).into_vec()),
        Sampling::Random => Vec::with_capacity(k),
        Sampling::Fps => farthest_point_sampling(votes, k.min(n)),
    };
    while picked.len() < k {
        picked.push(rng.random_range(0..n));
    }
    Ok(picked)
}

fn farthest_point_sampling(votes: &[Vote], k: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    if k == 0 {
        return picked;
    }
    let mut nearest = vec![f64::INFINITY; votes.len()];
    let mut current = 0;
    for _ in 0..k {
        picked.push(current);
        let c = votes[current].position;
        let mut best = 0;
        for (i, v) in votes.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(v.position, c));
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        current = best;
    }
    picked
}

/// Grid index over vote positions for radius grouping.
#[derive(Clone, Debug)]
pub struct VoteIndex {
    grid: Grid,
}

impl VoteIndex {
    pub fn new(votes: &[Vote], radius: f64) -> Self {
        let positions: Vec<Vec3> = votes.iter().map(|v| v.position).collect();
        Self { grid: Grid::new(&positions, radius) }
    }

    /// Votes strictly within `r` of `y`, ascending.
    pub fn group(&self, y: Vec3, r: f64) -> Vec<usize> {
        self.grid.within(y, r)
    }
}

/// Indices of votes strictly within `r` of `y` (linear scan).
pub fn group_votes(votes: &[Vote], y: Vec3, r: f64) -> Vec<usize> {
    (0..votes.len()).filter(|&i| dist2(votes[i].position, y).sqrt() < r).collect()
}

/// Sampled proposals with their vote groups `s_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub positions: Vec<Vec3>,
    /// Vote indices grouped into each proposal, ascending.
    pub groups: Vec<Vec<usize>>,
}

impl ProposalSet {
    pub fn build(votes: &[Vote], picks: &[usize], radius: f64) -> Self {
        let index = VoteIndex::new(votes, radius);
        let positions: Vec<Vec3> = picks.iter().map(|&i| votes[i].position).collect();
        let groups = positions.iter().map(|&y| index.group(y, radius)).collect();
        Self { positions, groups }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps at most `cap` random members per group (training-time cost bound).
    pub fn capped(&self, cap: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = self
            .groups
            .iter()
            .map(|g| {
                if g.len() <= cap {
                    return g.clone();
                }
                let mut keep: Vec<usize> = sample(&mut rng, g.len(), cap).into_iter().map(|i| g[i]).collect();
                keep.sort_unstable();
                keep
            })
            .collect();
        Self { positions: self.positions.clone(), groups }
    }

    pub fn subset(&self, which: &[usize]) -> Self {
        Self {
            positions: which.iter().map(|&i| self.positions[i]).collect(),
            groups: which.iter().map(|&i| self.groups[i].clone()).collect(),
        }
    }
}

/// Stacked member rows of several proposals, in proposal order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRows {
    /// Proposal (position in the batch) of every row.
    pub proposal: Vec<usize>,
    /// Vote index of every row.
    pub vote: Vec<usize>,
}

impl GroupRows {
    pub fn new(groups: &[Vec<usize>]) -> Self {
        let mut proposal = Vec::new();
        let mut vote = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            proposal.extend(std::iter::repeat_n(k, g.len()));
            vote.extend_from_slice(g);
        }
        Self { proposal, vote }
    }

    pub fn len(&self) -> usize {
        self.vote.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vote.is_empty()
    }
}

/// PointNet over `[f_j, vote_j − y_i]` rows of each proposal's group.
#[derive(Clone, Debug)]
pub struct ProposalEncoder {
    mlp: Mlp,
}

/// Output of [`ProposalEncoder::forward`].
#[derive(Clone, Debug)]
pub struct EncodedProposals {
    /// `K × D` pooled features `g_i`.
    pub pooled: Var,
    /// Shared-MLP output of every member row.
    pub per_row: Var,
    pub rows: GroupRows,
}

impl ProposalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, "proposal.encoder", &ENCODER, rng) }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(Self { mlp: Mlp::bind(store, "proposal.encoder", &ENCODER)? })
    }

    /// `features` holds one row per scene point. Vote offsets enter as
    /// constants: grouping geometry is not differentiated through.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        votes: &[Vote],
        proposals: &ProposalSet,
    ) -> Result<EncodedProposals> {
        if let Some(k) = proposals.groups.iter().position(Vec::is_empty) {
            return Err(diffcore::DiffError::EmptyGroup(format!("proposal {k} has no member votes")).into());
        }
        let rows = GroupRows::new(&proposals.groups);
        let points: Vec<usize> = rows.vote.iter().map(|&v| votes[v].point).collect();
        let f = g.gather_rows(features, points)?;
        let rel: Vec<f64> = rows
            .vote
            .iter()
            .zip(&rows.proposal)
            .flat_map(|(&v, &k)| sub(votes[v].position, proposals.positions[k]))
            .collect();
        let rel = g.input(Tensor::matrix(rows.len(), 3, rel));
        let input = g.concat_cols(&[f, rel])?;
        let (pooled, per_row) = grouped_mlp_maxpool(g, store, &self.mlp, input, &rows.proposal, proposals.len())?;
        Ok(EncodedProposals { pooled, per_row, rows })
    }
}

/// Single-proposal convenience over evaluated point features: returns `g_i`.
pub fn proposal_features(
    store: &ParamStore,
    encoder: &ProposalEncoder,
    pf: &PointFeatures,
    votes: &[Vote],
    group: &[usize],
    y: Vec3,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let features = g.input(pf.features.clone());
    let set = ProposalSet { positions: vec![y], groups: vec![group.to_vec()] };
    let enc = encoder.forward(&mut g, store, features, votes, &set)?;
    Ok(g.value(enc.pooled).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes_at(xs: &[f64]) -> Vec<Vote> {
        xs.iter().enumerate().map(|(i, &x)| Vote { point: i, position: [x, 0.0, 0.0] }).collect()
    }

    #[test]
    fn fps_picks_extremes() {
        let votes = votes_at(&[0.0, 0.1, 10.0]);
        let mut picks = sample_proposals(&votes, 2, 0, Sampling::Fps).unwrap();
        picks.sort_unstable();
        assert!(picks == vec![0, 2] || picks == vec![1, 2]);
    }

    #[test]
    fn random_sampling_with_k_equal_to_votes_is_a_permutation() {
        let votes = votes_at(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let mut picks = sample_proposals(&votes, 5, 9, Sampling::Random).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_proposals(&votes, 12, 1, Sampling::Random).unwrap().len(), 12);
    }

    #[test]
    fn grouping_separates_distant_clusters() {
        let votes = votes_at(&[0.0, 0.05, 0.1, 1.0, 1.05]);
        assert_eq!(group_votes(&votes, [0.0; 3], 0.3), vec![0, 1, 2]);
        let set = ProposalSet::build(&votes, &[0, 3], 0.3);
        assert_eq!(set.groups, vec![vec![0, 1, 2], vec![3, 4]]);
        assert_eq!(group_votes(&votes, [0.0; 3], f64::INFINITY).len(), 5);
    }
}
