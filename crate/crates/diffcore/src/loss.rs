//! Loss primitives shared by every head.

use crate::error::Result;
use crate::graph::{huber_value, Graph, Var};

/// Transition point between the quadratic and linear Huber branches.
pub const HUBER_DELTA: f64 = 1.0;

/// Huber loss of a non-negative residual magnitude.
pub fn huber(x: f64) -> f64 {
    huber_value(x, HUBER_DELTA)
}

/// `huber(‖row‖)` for every row of `residual`, as an `n×1` node.
pub fn huber_of_norms(g: &mut Graph, residual: Var) -> Var {
    let norms = g.row_norm(residual);
    g.huber(norms, HUBER_DELTA)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Two-class focal loss; column 1 of `logits` is the positive class.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[usize], params: FocalParams) -> Result<Var> {
    g.focal_loss(logits, targets, params.gamma, params.alpha)
}

pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}
