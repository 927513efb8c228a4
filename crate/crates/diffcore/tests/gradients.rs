use diffcore::{grad_check, shared_mlp_maxpool, GradCheckOptions, Graph, Mlp, ParamId, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Zero-initialized biases put dead units exactly on the ReLU kink; jitter them off it.
fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { h: 1e-5, tol: 1e-4, seed, ..Default::default() }
}

#[test]
fn three_layer_mlp_cross_entropy_matches_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[5, 8, 8, 4], &mut rng);
        let x = store.add("x", random_tensor(&mut rng, 6, 5));
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        jitter_biases(&mut store, &mut rng);
        let report = grad_check(
            &store,
            |g, s| {
                let xin = g.param(s, x);
                let logits = mlp.forward(g, s, xin)?;
                g.cross_entropy(logits, &targets)
            },
            &GradCheckOptions { h: 1e-4, ..opts(seed) },
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn focal_loss_matches_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let z = store.add("z", random_tensor(&mut rng, 7, 2));
        let targets: Vec<usize> = (0..7).map(|_| rng.random_range(0..2)).collect();
        let report = grad_check(&store, |g, s| {
            let z = g.param(s, z);
            let scaled = g.scale(z, 3.0);
            g.focal_loss(scaled, &targets, 2.0, 0.25)
        }, &opts(seed))
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn structural_ops_match_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, 5, 3));
        let b = store.add("b", random_tensor(&mut rng, 5, 3));
        let row = store.add("row", random_tensor(&mut rng, 1, 3));
        let seg = vec![0, 1, 0, 2, 1];
        let report = grad_check(
            &store,
            |g, s| {
                let a = g.param(s, a);
                let b = g.param(s, b);
                let row = g.param(s, row);
                let ab = g.mul(a, b)?;
                let d = g.sub(ab, b)?;
                let d = g.add_row(d, row)?;
                let cat = g.concat_cols(&[d, a])?;
                let sl = g.slice_cols(cat, 1, 5)?;
                let tail = g.slice_rows(sl, 3, 5)?;
                let tail = g.square(tail);
                let gathered = g.gather_rows(sl, vec![4, 0, 0, 2])?;
                let mean = g.segment_mean(sl, seg.clone(), 3)?;
                let mx = g.segment_max(sl, &seg, 3)?;
                let norms = g.row_norm(gathered);
                let hub = g.huber(norms, 1.0);
                let shifted = g.add_scalar(mean, -0.2);
                let r = g.relu(shifted);
                let sq = g.square(r);
                let masked = g.mul_const(mx, (0..12).map(|i| (i % 3) as f64 - 0.5).collect())?;
                let parts = [g.sum(hub), g.sum(sq), g.sum(masked), g.sum(tail)];
                let total = g.concat_cols(&parts)?;
                let s = g.sum(total);
                Ok(g.scale(s, 0.7))
            },
            &opts(seed),
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn loss_sum_of_parameters_and_zero_scaled_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng);
    let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);

    let mut g = Graph::new();
    let sums: Vec<_> = store.ids().map(|id| {
        let p = g.param(&store, id);
        g.sum(p)
    }).collect();
    let cat = g.concat_cols(&sums).unwrap();
    let total = g.sum(cat);
    let grads = g.backward(total).unwrap();
    for id in store.ids() {
        assert!(grads.param(id).unwrap().iter().all(|&v| v == 1.0));
    }

    let mut g = Graph::new();
    let xin = g.input(x);
    let y = mlp.forward(&mut g, &store, xin).unwrap();
    let s = g.sum(y);
    let zero = g.scale(s, 0.0);
    let grads = g.backward(zero).unwrap();
    for id in store.ids() {
        assert!(grads.param(id).unwrap().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn maxpool_backprop_matches_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "pn", &[4, 6, 5], &mut rng);
        let pts = store.add("pts", random_tensor(&mut rng, 9, 4));
        jitter_biases(&mut store, &mut rng);
        let report = grad_check(
            &store,
            |g, s| {
                let p = g.param(s, pts);
                let (pooled, _) = shared_mlp_maxpool(g, s, &mlp, p)?;
                let sq = g.square(pooled);
                Ok(g.sum(sq))
            },
            &opts(seed),
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

fn pooled_for(rows: &[[f64; 3]], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "pn", &[3, 8, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(rows).unwrap());
    let (pooled, _) = shared_mlp_maxpool(&mut g, &store, &mlp, x).unwrap();
    g.value(pooled).data().to_vec()
}

proptest! {
    #[test]
    fn maxpool_is_permutation_invariant(
        rows in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..20),
        seed in 0u64..50,
        rot in 0usize..20,
    ) {
        let mut permuted = rows.clone();
        permuted.reverse();
        let k = rot % permuted.len();
        permuted.rotate_left(k);
        prop_assert_eq!(pooled_for(&rows, seed), pooled_for(&permuted, seed));
    }
}

#[test]
fn param_leaf_is_shared_across_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let prod = g.mul(a, b).unwrap();
    let grads = g.backward(prod).unwrap();
    assert_eq!(grads.param(ParamId(0)).unwrap(), &[6.0]);
}
