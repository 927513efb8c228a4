//! Proposal graph and stacked EdgeConv consolidation.
//!
//! Each layer computes, for every edge `i → j`,
//! `e_ij = h([y_i, g_i], [y_j, g_j] − [y_i, g_i])` with a two-layer MLP `h`
//! and takes the channel-wise max over the edges leaving `i`. Because the
//! first layer of `h` is affine, it splits into per-node products:
//! `W_a x_i + W_b (x_j − x_i) = (W_a − W_b) x_i + W_b x_j`. Only the second
//! layer runs per edge. Stacked layers are residual: `h ← h + EdgeConv(h)`.

use diffcore::{Graph, Mlp, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{MpaError, Result};
use crate::geom::{dist2, Vec3};
use crate::grid::Grid;
use crate::proposals::PROPOSAL_WIDTH;

/// Proposals closer than this are connected.
pub const EDGE_RADIUS: f64 = 2.0;
pub const DEFAULT_LAYERS: usize = 10;

const NODE_WIDTH: usize = 3 + PROPOSAL_WIDTH;
const EDGE_MLP: [usize; 3] = [2 * NODE_WIDTH, 128, PROPOSAL_WIDTH];

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalGraph {
    pub positions: Vec<Vec3>,
    /// Sorted neighbor lists; symmetric, without self loops.
    pub neighbors: Vec<Vec<usize>>,
}

impl ProposalGraph {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Undirected edges as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Directed message list `(i, j)`; an isolated node gets the self edge `(i, i)`.
    fn messages(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            if nb.is_empty() {
                src.push(i);
                dst.push(i);
            }
            for &j in nb {
                src.push(i);
                dst.push(j);
            }
        }
        (src, dst)
    }
}

/// Connects every pair of proposals strictly closer than `radius`.
pub fn build_graph(positions: &[Vec3], radius: f64) -> ProposalGraph {
    let grid = Grid::new(positions, radius);
    let neighbors = positions
        .iter()
        .enumerate()
        .map(|(i, &y)| grid.within(y, radius).into_iter().filter(|&j| j != i).collect())
        .collect();
    ProposalGraph { positions: positions.to_vec(), neighbors }
}

/// All-pairs reference for [`build_graph`].
pub fn build_graph_brute_force(positions: &[Vec3], radius: f64) -> ProposalGraph {
    let neighbors = (0..positions.len())
        .map(|i| {
            (0..positions.len())
                .filter(|&j| j != i && dist2(positions[i], positions[j]).sqrt() < radius)
                .collect()
        })
        .collect();
    ProposalGraph { positions: positions.to_vec(), neighbors }
}

#[derive(Clone, Debug)]
pub struct EdgeConv {
    mlp: Mlp,
}

impl EdgeConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, name, &EDGE_MLP, rng) }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { mlp: Mlp::bind(store, name, &EDGE_MLP)? })
    }

    /// One layer: `features` is `K × 128`, positions come from `graph`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, graph: &ProposalGraph, features: Var) -> Result<Var> {
        let k = graph.len();
        if g.value(features).rows() != k {
            return Err(MpaError::Invalid(format!(
                "{} feature rows for {k} graph nodes",
                g.value(features).rows()
            )));
        }
        let node = node_descriptors(g, graph, features)?;
        let [(w1, b1), (w2, b2)] = [self.mlp.layer_params()[0], self.mlp.layer_params()[1]];
        let w1 = g.param(store, w1);
        let w_self = g.slice_rows(w1, 0, NODE_WIDTH)?;
        let w_diff = g.slice_rows(w1, NODE_WIDTH, 2 * NODE_WIDTH)?;
        let w_center = g.sub(w_self, w_diff)?;
        let a = g.matmul(node, w_center)?;
        let b = g.matmul(node, w_diff)?;

        let (src, dst) = graph.messages();
        let a = g.gather_rows(a, src.clone())?;
        let b = g.gather_rows(b, dst)?;
        let pre = g.add(a, b)?;
        let b1 = g.param(store, b1);
        let pre = g.add_row(pre, b1)?;
        let hidden = g.relu(pre);
        let w2 = g.param(store, w2);
        let b2 = g.param(store, b2);
        let edge = g.linear(hidden, w2, Some(b2))?;
        Ok(g.segment_max(edge, &src, k)?)
    }

    /// Forward-only evaluation over blocks of edges with reused buffers.
    /// Computes the same values as [`EdgeConv::forward`].
    pub fn forward_values(&self, store: &ParamStore, graph: &ProposalGraph, features: &Tensor) -> Result<Tensor> {
        const BLOCK: usize = 4096;
        let k = graph.len();
        if features.rows() != k || features.cols() != PROPOSAL_WIDTH {
            return Err(MpaError::Invalid(format!("{:?} features for {k} graph nodes", features.shape())));
        }
        let hidden = EDGE_MLP[1];
        let width = EDGE_MLP[2];
        let [(w1, b1), (w2, b2)] = [self.mlp.layer_params()[0], self.mlp.layer_params()[1]];
        let (w1, b1, w2, b2) = (store.get(w1).data(), store.get(b1).data(), store.get(w2).data(), store.get(b2).data());
        let (w_self, w_diff) = w1.split_at(NODE_WIDTH * hidden);
        let w_center: Vec<f64> = w_self.iter().zip(w_diff).map(|(s, d)| s - d).collect();

        let mut node = Vec::with_capacity(k * NODE_WIDTH);
        for (i, y) in graph.positions.iter().enumerate() {
            node.extend_from_slice(y);
            node.extend_from_slice(features.row(i));
        }
        let mut a = vec![0.0; k * hidden];
        let mut b = vec![0.0; k * hidden];
        gemm(k, NODE_WIDTH, hidden, &node, &w_center, &mut a);
        gemm(k, NODE_WIDTH, hidden, &node, w_diff, &mut b);
        for row in a.chunks_mut(hidden) {
            row.iter_mut().zip(b1).for_each(|(v, bias)| *v += bias);
        }

        let mut out = vec![f64::NEG_INFINITY; k * width];
        let mut pre = Vec::with_capacity(BLOCK * hidden);
        let mut owner = Vec::with_capacity(BLOCK);
        let mut post = vec![0.0; BLOCK * width];
        let mut flush = |pre: &mut Vec<f64>, owner: &mut Vec<usize>| {
            let rows = owner.len();
            gemm(rows, hidden, width, pre, w2, &mut post[..rows * width]);
            for (r, &i) in owner.iter().enumerate() {
                let dst = &mut out[i * width..(i + 1) * width];
                for ((o, z), bias) in dst.iter_mut().zip(&post[r * width..(r + 1) * width]).zip(b2) {
                    *o = o.max(z + bias);
                }
            }
            pre.clear();
            owner.clear();
        };
        for (i, nb) in graph.neighbors.iter().enumerate() {
            let self_edge = [i];
            let targets: &[usize] = if nb.is_empty() { &self_edge } else { nb };
            for &j in targets {
                let ai = &a[i * hidden..(i + 1) * hidden];
                let bj = &b[j * hidden..(j + 1) * hidden];
                pre.extend(ai.iter().zip(bj).map(|(x, y)| (x + y).max(0.0)));
                owner.push(i);
                if owner.len() == BLOCK {
                    flush(&mut pre, &mut owner);
                }
            }
        }
        if !owner.is_empty() {
            flush(&mut pre, &mut owner);
        }
        Ok(Tensor::matrix(k, width, out))
    }

    /// Direct evaluation of `h` on concatenated edge inputs, for testing.
    pub fn forward_reference(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProposalGraph,
        features: Var,
    ) -> Result<Var> {
        let node = node_descriptors(g, graph, features)?;
        let (src, dst) = graph.messages();
        let xi = g.gather_rows(node, src.clone())?;
        let xj = g.gather_rows(node, dst)?;
        let diff = g.sub(xj, xi)?;
        let input = g.concat_cols(&[xi, diff])?;
        let edge = self.mlp.forward(g, store, input)?;
        Ok(g.segment_max(edge, &src, graph.len())?)
    }
}

/// `c = a · b` for row-major `m × k` and `k × n` operands.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold at least m·k, k·n and m·n elements and the
    // strides describe dense row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn node_descriptors(g: &mut Graph, graph: &ProposalGraph, features: Var) -> Result<Var> {
    let pos: Vec<f64> = graph.positions.iter().flatten().copied().collect();
    let pos = g.input(Tensor::matrix(graph.len(), 3, pos));
    Ok(g.concat_cols(&[pos, features])?)
}

/// `l` stacked EdgeConv layers over a fixed graph.
#[derive(Clone, Debug)]
pub struct Gcn {
    layers: Vec<EdgeConv>,
}

impl Gcn {
    /// The last layer of every `h` starts at zero, so a fresh stack is the identity.
    pub fn new<R: Rng>(store: &mut ParamStore, layers: usize, rng: &mut R) -> Self {
        let layers: Vec<EdgeConv> = (0..layers).map(|i| EdgeConv::new(store, &format!("gcn.{i}"), rng)).collect();
        for layer in &layers {
            let (w, _) = layer.mlp.layer_params()[1];
            store.get_mut(w).data_mut().fill(0.0);
        }
        Self { layers }
    }

    pub fn bind(store: &ParamStore, layers: usize) -> Result<Self> {
        Ok(Self { layers: (0..layers).map(|i| EdgeConv::bind(store, &format!("gcn.{i}"))).collect::<Result<_>>()? })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Refined features `h_i`, each layer adding its EdgeConv output to its
    /// input. With zero layers returns `features` itself.
    pub fn consolidate(&self, g: &mut Graph, store: &ParamStore, graph: &ProposalGraph, features: Var) -> Result<Var> {
        let mut h = features;
        for layer in &self.layers {
            let update = layer.forward(g, store, graph, h)?;
            h = g.add(h, update)?;
        }
        Ok(h)
    }

    /// Forward-only variant for inference.
    pub fn consolidate_values(&self, store: &ParamStore, graph: &ProposalGraph, features: Tensor) -> Result<Tensor> {
        let mut h = features;
        for layer in &self.layers {
            let update = layer.forward_values(store, graph, &h)?;
            h.data_mut().iter_mut().zip(update.data()).for_each(|(a, b)| *a += b);
        }
        Ok(h)
    }
}
