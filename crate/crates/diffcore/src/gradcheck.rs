//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Gradients, Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled); `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, tol: 1e-4, floor: 1e-3, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub non_finite: bool,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the parameters in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    compare_gradients(store, |s| eval(&f, s), &grads, opts)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Checks arbitrary analytic gradients against central differences of `value`.
///
/// Parameters absent from `analytic` are treated as having zero gradient.
pub fn compare_gradients<V>(
    store: &ParamStore,
    value: V,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    V: Fn(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        non_finite: false,
        passed: true,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let grad = analytic.param(id);
        for c in coords {
            let orig = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = orig + opts.h;
            let plus = value(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig - opts.h;
            let minus = value(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.map_or(0.0, |g| g[c]);
            report.checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = true;
                report.passed = false;
                report.worst = Some((store.name(id).to_string(), c));
                report.max_rel_error = f64::INFINITY;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), c));
            }
        }
    }
    report.passed = report.passed && report.max_rel_error <= opts.tol;
    Ok(report)
}
