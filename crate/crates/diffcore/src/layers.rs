//! Multi-layer perceptrons and the shared-MLP + max-pool set function.

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Stack of affine layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `widths.len() - 1` layers under `name` with He-normal weights and zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add_weight(format!("{name}.{i}.w"), w[0], w[1], 2.0, rng);
                let bias = store.add(format!("{name}.{i}.b"), Tensor::zeros(vec![1, w[1]]));
                (weight, bias)
            })
            .collect();
        Self { widths: widths.to_vec(), layers }
    }

    /// Looks up existing parameters by name, e.g. after loading a checkpoint.
    pub fn bind(store: &ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        for (i, w) in widths.windows(2).enumerate() {
            let find = |suffix: &str, shape: [usize; 2]| -> Result<ParamId> {
                let full = format!("{name}.{i}.{suffix}");
                let id = store
                    .find(&full)
                    .ok_or_else(|| DiffError::Invalid(format!("missing parameter {full}")))?;
                if store.get(id).shape() != shape {
                    return Err(DiffError::Shape(format!(
                        "{full}: stored {:?}, expected {:?}",
                        store.get(id).shape(),
                        shape
                    )));
                }
                Ok(id)
            };
            layers.push((find("w", [w[0], w[1]])?, find("b", [1, w[1]])?));
        }
        Ok(Self { widths: widths.to_vec(), layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Evaluates the MLP on every row of `input: B×Din`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let din = g.value(input).cols();
        if din != self.input_width() {
            return Err(DiffError::Shape(format!(
                "MLP expects width {}, got {din}",
                self.input_width()
            )));
        }
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let w = g.param(store, *w);
            let b = g.param(store, *b);
            x = g.linear(x, w, Some(b))?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Per-point MLP followed by a channel-wise max over rows.
///
/// Returns `(pooled: 1×Dout, per_point: n×Dout)`.
pub fn shared_mlp_maxpool(g: &mut Graph, store: &ParamStore, mlp: &Mlp, points: Var) -> Result<(Var, Var)> {
    if g.value(points).rows() == 0 {
        return Err(DiffError::EmptyGroup("shared MLP max-pool over zero rows".into()));
    }
    let per_point = mlp.forward(g, store, points)?;
    let pooled = g.max_rows(per_point)?;
    Ok((pooled, per_point))
}

/// Batched form of [`shared_mlp_maxpool`]: rows are tagged with a group id and
/// pooled per group, giving `groups × Dout`.
pub fn grouped_mlp_maxpool(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    rows: Var,
    group_of_row: &[usize],
    groups: usize,
) -> Result<(Var, Var)> {
    let per_point = mlp.forward(g, store, rows)?;
    let pooled = g.segment_max(per_point, group_of_row, groups)?;
    Ok((pooled, per_point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).len();
            set(&mut store, id, vec![0.0; n]);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "id", &[2, 2], &mut rng);
        let (w, _) = mlp.layer_params()[0];
        set(&mut store, w, vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 2, vec![-1.0, 5.0, 3.0, 2.0]));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 5.0, 3.0, 2.0]);
    }

    #[test]
    fn one_by_one_layer_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "s", &[1, 1], &mut rng);
        let (w, b) = mlp.layer_params()[0];
        set(&mut store, w, vec![2.0]);
        set(&mut store, b, vec![1.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).item(), 7.0);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 4, vec![0.0; 4]));
        assert!(matches!(mlp.forward(&mut g, &store, x), Err(DiffError::Shape(_))));
    }

    #[test]
    fn maxpool_hand_example_and_empty_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "id", &[2, 2], &mut rng);
        let (w, _) = mlp.layer_params()[0];
        set(&mut store, w, vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]));
        let (pooled, _) = shared_mlp_maxpool(&mut g, &store, &mlp, x).unwrap();
        assert_eq!(g.value(pooled).data(), &[3.0, 5.0]);

        let single = g.input(Tensor::matrix(1, 2, vec![4.0, -1.0]));
        let (pooled, per_point) = shared_mlp_maxpool(&mut g, &store, &mlp, single).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(per_point).data());

        let empty = g.input(Tensor::matrix(0, 2, vec![]));
        assert!(matches!(
            shared_mlp_maxpool(&mut g, &store, &mlp, empty),
            Err(DiffError::EmptyGroup(_))
        ));
    }

    #[test]
    fn bind_finds_registered_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "head", &[4, 8, 3], &mut rng);
        let bound = Mlp::bind(&store, "head", &[4, 8, 3]).unwrap();
        assert_eq!(mlp, bound);
        assert!(Mlp::bind(&store, "head", &[4, 9, 3]).is_err());
    }
}
