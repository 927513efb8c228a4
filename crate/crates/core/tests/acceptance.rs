//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the terminal.
//! Criteria 6 and 7 train two full models twice and take the better part of
//! an hour on one core.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use diffcore::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};
use mpa::ablation::{run_ablation, AblationTable};
use mpa::backbone::Backbone;
use mpa::eval::{box_iou, evaluate, Aabb, EvalScene};
use mpa::gcn::{build_graph, EdgeConv, Gcn, EDGE_RADIUS};
use mpa::geom::{dist, Vec3};
use mpa::model::{total_loss, LossVars, Model, ModelConfig, Plan};
use mpa::objgen::heads::{DELTA_DIST, DELTA_VAR, GAMMA_REG};
use mpa::objgen::{
    assign_objectness, dbscan, discriminative_loss, form_objects, objectness_from_distances, AggFeatures,
    ClusterParams, FinalObject, Heads, MaskHead, Mode, Objectness, ProposalHeads, ScoredProposal, NOISE,
};
use mpa::proposals::{cast_votes, sample_proposals, ProposalEncoder, ProposalSet, Sampling, Vote};
use mpa::scene::{augment, crop_window, generate_scene, Scene, SceneGenParams, NUM_CLASSES, OBJECT_CLASSES};
use mpa::trainer::{train, TrainConfig, TrainOutcome};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: impl Into<String>) -> Outcome {
    let detail = detail.into();
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Moves biases off the ReLU kink and fills all-zero weight matrices, so every
/// parameter has a generic, non-degenerate gradient.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let is_bias = store.name(id).ends_with(".b");
        let all_zero = store.get(id).data().iter().all(|v| *v == 0.0);
        if is_bias || all_zero {
            let scale = if is_bias { 0.3 } else { 0.1 };
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
}

/// Random linear read-out of `v`, making any matrix output a scalar.
fn readout(g: &mut Graph, v: Var, rng: &mut ChaCha8Rng) -> Result<Var, diffcore::DiffError> {
    let n = g.value(v).len();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weighted = g.mul_const(v, w)?;
    Ok(g.sum(weighted))
}

fn check_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { h: 1e-6, tol: 1e-4, floor: 1e-3, max_coords_per_param: Some(4), seed }
}

/// A small crop around the first object of a generated scene.
fn small_crop(seed: u64, points: usize) -> Scene {
    let params = SceneGenParams { seed, room_extent: [4.0, 4.0, 2.5], objects_per_scene: (3, 4), ..Default::default() };
    let scene = generate_scene(&params).expect("scene");
    let c = scene.instances()[0].center;
    let window = crop_window(&scene, [c[0], c[1]], 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..window.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(points);
    idx.sort_unstable();
    window.subset(&idx)
}

/// Noisy near-perfect votes from every point, with some background points
/// voting into objects so proposal groups mix foreground and background.
fn noisy_plan(scene: &Scene, k: usize, cap: usize, seed: u64) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = scene.instances();
    let mut offsets = Vec::with_capacity(3 * scene.len());
    for p in &scene.points {
        let target = match instances.iter().find(|i| i.id == p.instance) {
            Some(inst) => inst.center,
            None if rng.random_bool(0.3) => instances[rng.random_range(0..instances.len())].center,
            None => p.position,
        };
        for a in 0..3 {
            offsets.push(target[a] - p.position[a] + rng.random_range(-0.08..0.08));
        }
    }
    let offsets = Tensor::matrix(scene.len(), 3, offsets);
    let votes = cast_votes(scene, &offsets, &vec![true; scene.len()]).expect("votes");
    let picks = sample_proposals(&votes, k, seed, Sampling::Random).expect("picks");
    let proposals = ProposalSet::build(&votes, &picks, 0.3).capped(cap, seed);
    Plan { votes, proposals }
}

fn record(worst: &mut BTreeMap<&'static str, f64>, what: &'static str, report: &GradCheckReport) -> Result<(), String> {
    let e = worst.entry(what).or_insert(0.0);
    *e = e.max(report.max_rel_error);
    if report.passed {
        Ok(())
    } else {
        Err(format!("{what}: {report:?}"))
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let crop = small_crop(seed, 90);

        // Backbone: every output head through a random read-out.
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng);
        randomize(&mut store, &mut rng);
        let r = grad_check(
            &store,
            |g, s| {
                let mut rr = ChaCha8Rng::seed_from_u64(seed);
                let v = backbone.forward(g, s, &crop).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let a = readout(g, v.features, &mut rr)?;
                let b = readout(g, v.semantic_logits, &mut rr)?;
                let c = readout(g, v.offsets, &mut rr)?;
                let ab = g.add(a, b)?;
                g.add(ab, c)
            },
            &check_opts(seed),
        )
        .map_err(|e| e.to_string())?;
        record(&mut worst, "backbone", &r)?;

        // Proposal features, with point features as a parameter.
        let plan = noisy_plan(&crop, 6, 12, seed);
        let mut store = ParamStore::new();
        let encoder = ProposalEncoder::new(&mut store, &mut rng);
        let feats = store.add("point_features", random_tensor(&mut rng, crop.len(), 64, 1.0));
        randomize(&mut store, &mut rng);
        let r = grad_check(
            &store,
            |g, s| {
                let mut rr = ChaCha8Rng::seed_from_u64(seed);
                let f = g.param(s, feats);
                let enc = encoder
                    .forward(g, s, f, &plan.votes, &plan.proposals)
                    .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let a = readout(g, enc.pooled, &mut rr)?;
                let b = readout(g, enc.per_row, &mut rr)?;
                g.add(a, b)
            },
            &check_opts(seed),
        )
        .map_err(|e| e.to_string())?;
        record(&mut worst, "proposal features", &r)?;

        // One EdgeConv layer and a residual stack, features as a parameter.
        let k = 9;
        let positions: Vec<Vec3> = (0..k).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..2.5))).collect();
        let graph = build_graph(&positions, EDGE_RADIUS);
        let mut store = ParamStore::new();
        let layer = EdgeConv::new(&mut store, "single", &mut rng);
        let gcn = Gcn::new(&mut store, 2, &mut rng);
        let h = store.add("h", random_tensor(&mut rng, k, 128, 1.0));
        randomize(&mut store, &mut rng);
        let r = grad_check(
            &store,
            |g, s| {
                let mut rr = ChaCha8Rng::seed_from_u64(seed);
                let x = g.param(s, h);
                let one = layer.forward(g, s, &graph, x).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let stacked = gcn.consolidate(g, s, &graph, x).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let a = readout(g, one, &mut rr)?;
                let b = readout(g, stacked, &mut rr)?;
                g.add(a, b)
            },
            &check_opts(seed),
        )
        .map_err(|e| e.to_string())?;
        record(&mut worst, "edgeconv", &r)?;

        // Proposal heads and mask head.
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, AggFeatures::Both, &mut rng);
        let mask = MaskHead::new(&mut store, &mut rng);
        let pooled = store.add("pooled", random_tensor(&mut rng, 4, 128, 1.0));
        let rows = store.add("rows", random_tensor(&mut rng, 7, 128, 1.0));
        let owner: Vec<usize> = (0..7).map(|i| i % 4).collect();
        randomize(&mut store, &mut rng);
        let r = grad_check(
            &store,
            |g, s| {
                let mut rr = ChaCha8Rng::seed_from_u64(seed);
                let p = g.param(s, pooled);
                let hv = heads.forward(g, s, p).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let per_row = g.param(s, rows);
                let logits = mask.forward(g, s, per_row, p, &owner).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let mut acc = readout(g, logits, &mut rr)?;
                for v in [Some(hv.semantic), hv.geometric, hv.embedding, Some(hv.objectness)].into_iter().flatten() {
                    let t = readout(g, v, &mut rr)?;
                    acc = g.add(acc, t)?;
                }
                Ok(acc)
            },
            &check_opts(seed),
        )
        .map_err(|e| e.to_string())?;
        record(&mut worst, "heads", &r)?;

        // Every loss of the full model on a fixed plan.
        let config = ModelConfig { features: AggFeatures::Both, gcn_layers: 2, ..Default::default() };
        let (model, mut store) = Model::init(config, seed).map_err(|e| e.to_string())?;
        randomize(&mut store, &mut rng);
        let plan = noisy_plan(&crop, 8, 10, seed + 7);
        let pick: [(&'static str, fn(&LossVars) -> Var); 6] = [
            ("point loss", |l| l.point),
            ("objectness loss", |l| l.objectness),
            ("proposal semantic loss", |l| l.proposal_semantic),
            ("mask loss", |l| l.mask),
            ("aggregation loss", |l| l.aggregation),
            ("total loss", |l| l.total),
        ];
        let mut probe = Graph::new();
        let (vars, _) = model.losses(&mut probe, &store, &crop, Some(&plan), seed).map_err(|e| e.to_string())?;
        let values = vars.values(&probe);
        if values.mask == 0.0 || values.aggregation == 0.0 || values.objectness == 0.0 {
            return Err(format!("seed {seed}: degenerate fixture {values:?}"));
        }
        for (what, get) in pick {
            let r = grad_check(
                &store,
                |g, s| {
                    let (vars, _) = model
                        .losses(g, s, &crop, Some(&plan), seed)
                        .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                    Ok(get(&vars))
                },
                &check_opts(seed),
            )
            .map_err(|e| e.to_string())?;
            record(&mut worst, what, &r)?;
        }

        // Geometric and discriminative aggregation losses in isolation, and
        // the weighted total of arbitrary component values.
        let mut store = ParamStore::new();
        let emb = store.add("embedding", random_tensor(&mut rng, 8, 5, 0.3));
        let parts = store.add("parts", random_tensor(&mut rng, 1, 5, 2.0));
        let clusters: Vec<i64> = (0..8).map(|i| i % 3).collect();
        let r = grad_check(
            &store,
            |g, s| {
                let e = g.param(s, emb);
                let d = discriminative_loss(g, e, &clusters, DELTA_VAR, DELTA_DIST, GAMMA_REG)
                    .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                let p = g.param(s, parts);
                let c: Vec<Var> = (0..5).map(|i| g.slice_cols(p, i, i + 1)).collect::<Result<_, _>>()?;
                let c: Vec<Var> = c.into_iter().map(|v| g.sum(v)).collect();
                let t = total_loss(g, c[0], c[1], c[2], c[3], c[4]).map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
                g.add(d.total, t)
            },
            &check_opts(seed),
        )
        .map_err(|e| e.to_string())?;
        record(&mut worst, "discriminative + total_loss", &r)?;
    }
    let elapsed = started.elapsed();
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    ensure(
        elapsed <= Duration::from_secs(120),
        format!("10 seeds each, worst relative errors: {}; {:.0}s", summary.join(", "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let h05 = diffcore::huber(0.5);
    let h2 = diffcore::huber(2.0);
    if h05 != 0.125 || h2 != 1.5 {
        return Err(format!("huber(0.5)={h05}, huber(2.0)={h2}"));
    }

    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(vec![3, 4]));
    let ce = g.cross_entropy(logits, &[0, 2, 3]).map_err(|e| e.to_string())?;
    let ce = g.value(ce).item();
    if (ce - 4f64.ln()).abs() > 1e-9 {
        return Err(format!("uniform 4-class cross-entropy {ce}"));
    }

    let disc = |rows: usize, cols: usize, data: Vec<f64>, ids: &[i64]| {
        let mut g = Graph::new();
        let e = g.input(Tensor::matrix(rows, cols, data));
        let l = discriminative_loss(&mut g, e, ids, DELTA_VAR, DELTA_DIST, GAMMA_REG).unwrap();
        let v = |x: Var| g.value(x).item();
        (v(l.total), v(l.dist), v(l.reg))
    };
    // One cluster at the origin, every feature inside the pull margin.
    let (inactive, _, _) = disc(3, 2, vec![0.05, 0.0, -0.05, 0.02, 0.0, -0.02], &[4, 4, 4]);
    if inactive.abs() > 1e-12 {
        return Err(format!("inactive-hinge fixture gives {inactive}"));
    }
    // Two tight one-dimensional clusters with means 0 and 0.1.
    let (total, d, reg) = disc(4, 1, vec![0.0, 0.0, 0.1, 0.1], &[0, 0, 1, 1]);
    let expected = 0.01 + GAMMA_REG * reg;
    ensure(
        (d - 0.01).abs() <= 1e-9 && (total - expected).abs() <= 1e-9,
        format!("huber 0.125/1.5, CE ln4 {ce:.12}, discriminative 0 and {total:.12} (dist {d:.12})"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let table = [
        ((0.2, 5.0), Objectness::Positive),
        ((0.7, 5.0), Objectness::Negative),
        ((0.4, 0.5), Objectness::Negative),
    ];
    for ((d1, d2), want) in table {
        let by_distance = objectness_from_distances(d1, d2);
        let by_centers = assign_objectness([0.0; 3], &[[d1, 0.0, 0.0], [0.0, -d2, 0.0]]).0;
        if by_distance != want || by_centers != want {
            return Err(format!("d1={d1}, d2={d2}: {by_distance:?}/{by_centers:?}, want {want:?}"));
        }
    }
    Ok("d1=0.2 positive, d1=0.7 negative, d1=0.4 d2=0.5 negative".into())
}

// ---------------------------------------------------------------- criterion 4

/// Reachability oracle: components of the core-point graph, with each border
/// point joining the lowest-numbered component that reaches it.
fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let d = |a: usize, b: usize| points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d(i, j) <= eps).count() >= min_pts).collect();
    // Union-find over core points.
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && d(i, j) <= eps {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut id_of_root = BTreeMap::new();
    let mut labels = vec![NOISE; n];
    for i in (0..n).filter(|&i| core[i]) {
        let r = root(&mut parent, i);
        let next = id_of_root.len() as i64;
        labels[i] = *id_of_root.entry(r).or_insert(next);
    }
    for i in (0..n).filter(|&i| !core[i]) {
        labels[i] = (0..n).filter(|&j| core[j] && d(i, j) <= eps).map(|j| labels[j]).min().unwrap_or(NOISE);
    }
    labels
}

/// Labels renumbered by first appearance, noise kept.
fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            if l == NOISE {
                NOISE
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut clusters_seen = 0;
    for case in 0..100 {
        let n = rng.random_range(0..=200);
        let dims = rng.random_range(1..=5);
        let blobs: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| (0..dims).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let b = &blobs[rng.random_range(0..blobs.len())];
                b.iter().map(|c| c + rng.random_range(-0.4..0.4)).collect()
            })
            .collect();
        let eps = rng.random_range(0.05..0.6);
        let min_pts = rng.random_range(1..6);
        let got = dbscan(&points, eps, min_pts);
        let want = dbscan_oracle(&points, eps, min_pts);
        if canonical(&got) != canonical(&want) {
            return Err(format!("case {case}: n={n} dims={dims} eps={eps} min_pts={min_pts}"));
        }
        clusters_seen += want.iter().copied().max().map_or(0, |m| m + 1);
    }
    Ok(format!("100 random instances agree ({clusters_seen} clusters in total)"))
}

// ---------------------------------------------------------------- criterion 5

/// Largest number of `preds` matched one-to-one to eligible ground truth.
fn max_matching(eligible: &[Vec<usize>], gt_count: usize) -> usize {
    fn augment(p: usize, eligible: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &eligible[p] {
            if !seen[g] {
                seen[g] = true;
                if owner[g].is_none_or(|q| augment(q, eligible, seen, owner)) {
                    owner[g] = Some(p);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; gt_count];
    (0..eligible.len()).filter(|&p| augment(p, eligible, &mut vec![false; gt_count], &mut owner)).count()
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP from the best achievable true-positive count of every confidence
/// prefix: `(1/G) Σ_j max{ TP(k)/k : TP(k) ≥ j }`.
fn oracle_ap(scenes: &[(Scene, Vec<FinalObject>)], class: usize, threshold: f64) -> Option<(f64, f64)> {
    let gts: Vec<(usize, Vec<usize>)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (scene, _))| scene.instances().into_iter().filter(|i| i.class == class).map(move |i| (s, i.points)))
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut preds: Vec<(f64, usize, usize, &FinalObject)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (_, objs))| objs.iter().enumerate().filter(|(_, o)| o.class == class).map(move |(i, o)| (o.confidence, s, i, o)))
        .collect();
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let eligible: Vec<Vec<usize>> = preds
        .iter()
        .map(|(_, s, _, o)| (0..gts.len()).filter(|&g| gts[g].0 == *s && iou(&o.points, &gts[g].1) >= threshold).collect())
        .collect();
    let tp: Vec<usize> = (1..=preds.len()).map(|k| max_matching(&eligible[..k], gts.len())).collect();
    let total = gts.len();
    let mut ap = 0.0;
    for j in 1..=total {
        let best = (0..tp.len()).filter(|&k| tp[k] >= j).map(|k| tp[k] as f64 / (k + 1) as f64).fold(0.0, f64::max);
        ap += best / total as f64;
    }
    let recall = tp.last().copied().unwrap_or(0) as f64 / total as f64;
    Some((ap, recall))
}

/// A scene with `objects` instances of random object classes on a line, each
/// of 10 points, plus 20 background points.
fn crafted_scene(id: usize, rng: &mut ChaCha8Rng) -> Scene {
    let mut points = Vec::new();
    let objects = rng.random_range(2..7);
    for inst in 0..objects {
        let class = OBJECT_CLASSES[rng.random_range(0..OBJECT_CLASSES.len())];
        for j in 0..10 {
            points.push(mpa::scene::ScenePoint {
                position: [inst as f64 * 2.0 + 0.05 * j as f64, 0.0, 0.5],
                normal: [0.0, 0.0, 1.0],
                color: [0.5; 3],
                semantic: class,
                instance: inst as i32,
            });
        }
    }
    for j in 0..20 {
        points.push(mpa::scene::ScenePoint {
            position: [0.3 * j as f64, 3.0, 0.0],
            normal: [0.0, 0.0, 1.0],
            color: [0.5; 3],
            semantic: 0,
            instance: -1,
        });
    }
    Scene { scene_id: format!("crafted_{id:02}"), points }
}

/// Predictions that each touch at most one instance: partial copies, copies
/// padded with background, duplicates, pure background, wrong classes.
fn crafted_predictions(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<FinalObject> {
    let background: Vec<usize> = (0..scene.len()).filter(|&i| scene.points[i].instance < 0).collect();
    let mut out = Vec::new();
    for gt in scene.instances() {
        for _ in 0..rng.random_range(0..3) {
            let keep = rng.random_range(1..=gt.points.len());
            let mut pts: Vec<usize> = gt.points[..keep].to_vec();
            pts.extend(background.iter().take(rng.random_range(0..8)));
            pts.sort_unstable();
            let class = if rng.random_bool(0.8) { gt.class } else { OBJECT_CLASSES[rng.random_range(0..3)] };
            out.push(FinalObject { points: pts, class, confidence: rng.random_range(0.0..1.0) });
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let start = rng.random_range(0..background.len() - 3);
        out.push(FinalObject {
            points: background[start..start + 3].to_vec(),
            class: OBJECT_CLASSES[rng.random_range(0..3)],
            confidence: rng.random_range(0.0..1.0),
        });
    }
    out
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let crafted: Vec<(Scene, Vec<FinalObject>)> = (0..10)
        .map(|i| {
            let s = crafted_scene(i, &mut rng);
            let p = crafted_predictions(&s, &mut rng);
            (s, p)
        })
        .collect();
    let eval: Vec<EvalScene> = crafted.iter().map(|(s, p)| EvalScene::new(s, p)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let table = evaluate(&eval);
    let mut worst: f64 = 0.0;
    let mut means = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for row in &table.classes {
        let o25 = oracle_ap(&crafted, row.class, 0.25);
        let o50 = oracle_ap(&crafted, row.class, 0.5);
        let o_range = o50.map(|_| {
            let ts = mpa::eval::coco_thresholds();
            ts.iter().map(|&t| oracle_ap(&crafted, row.class, t).unwrap().0).sum::<f64>() / ts.len() as f64
        });
        let pairs = [
            (row.ap25, o25.map(|o| o.0)),
            (row.ap50, o50.map(|o| o.0)),
            (row.ap50_95, o_range),
            (row.recall50, o50.map(|o| o.1)),
        ];
        for (slot, (got, want)) in pairs.into_iter().enumerate() {
            match (got, want) {
                (Some(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    means[slot].push(w);
                }
                (None, None) => {}
                _ => return Err(format!("class {}: applicability differs", row.class)),
            }
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    for (got, want) in [table.map25, table.map50, table.map50_95, table.mar50].into_iter().zip(means.iter().map(mean)) {
        worst = worst.max((got - want).abs());
    }
    let cube = |o: f64| Aabb { min: [o, 0.0, 0.0], max: [o + 1.0, 1.0, 1.0] };
    let b = box_iou(&cube(0.0), &cube(0.5)).map_err(|e| e.to_string())?;
    ensure(
        worst <= 1e-9 && (b - 1.0 / 3.0).abs() <= 1e-12,
        format!("max deviation from oracle {worst:.1e} (mAP@50 {:.4}); offset-cube IoU {b:.15}", table.map50),
    )
}

// ---------------------------------------------------------- criteria 6 and 7

const DATA_SEED: u64 = 0;
const TRAIN_SEED: u64 = 0;
const INFER_SEED: u64 = 0;
const TIME_LIMIT: Duration = Duration::from_secs(20 * 60);

fn scene_set(split: &str, count: usize, offset: u64) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let seed = DATA_SEED.wrapping_mul(1_000_000).wrapping_add(offset + i as u64);
            let mut s = generate_scene(&SceneGenParams { seed, ..Default::default() }).expect("scene");
            s.scene_id = format!("{split}_{i:03}");
            s
        })
        .collect()
}

struct DeskRun {
    geometric: TrainOutcome,
    plain: TrainOutcome,
    times: [Duration; 2],
    table: AblationTable,
}

fn desk_run(train_scenes: &[Scene], val: &[Scene]) -> Result<DeskRun, String> {
    let config = |layers, features| TrainConfig {
        seed: TRAIN_SEED,
        model: ModelConfig { gcn_layers: layers, features, ..Default::default() },
        ..Default::default()
    };
    let t = Instant::now();
    let geometric = train(&config(10, AggFeatures::Geometric), train_scenes, None).map_err(|e| e.to_string())?;
    let t_geo = t.elapsed();
    let t = Instant::now();
    let plain = train(&config(0, AggFeatures::Both), train_scenes, None).map_err(|e| e.to_string())?;
    let t_plain = t.elapsed();
    let table = run_ablation(
        (&plain.model, &plain.store),
        (&geometric.model, &geometric.store),
        val,
        &ClusterParams::default(),
        INFER_SEED,
    )
    .map_err(|e| e.to_string())?;
    Ok(DeskRun { geometric, plain, times: [t_geo, t_plain], table })
}

fn criterion_6(run: &DeskRun) -> Outcome {
    let m = |id| run.table.map50(id).unwrap_or(f64::NAN);
    let (nms, positions, geometric, gcn) = (m(1), m(2), m(4), m(5));
    let in_time = run.times.iter().all(|t| *t <= TIME_LIMIT);
    let detail = format!(
        "mAP@50 (1) {nms:.3} (2) {positions:.3} (3) {:.3} (4) {geometric:.3} (5) {gcn:.3}; training {:.1} + {:.1} min",
        m(3),
        run.times[0].as_secs_f64() / 60.0,
        run.times[1].as_secs_f64() / 60.0,
    );
    ensure(
        in_time && gcn >= 0.60 && gcn >= geometric && geometric >= positions && gcn >= nms + 0.02,
        detail,
    )
}

fn criterion_7(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same_ckpt = a.geometric.checkpoint == b.geometric.checkpoint && a.plain.checkpoint == b.plain.checkpoint;
    let same_scores = a.table == b.table;
    ensure(
        same_ckpt && same_scores,
        format!(
            "checkpoints identical: {same_ckpt} ({} + {} bytes); score tables identical: {same_scores}",
            a.geometric.checkpoint.len(),
            a.plain.checkpoint.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn random_proposals(rng: &mut ChaCha8Rng, n_points: usize) -> Vec<ScoredProposal> {
    (0..rng.random_range(0..40))
        .map(|_| {
            let position: Vec3 = [0, 1, 2].map(|_| rng.random_range(0.0..2.0));
            let mut mask: Vec<usize> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..n_points)).collect();
            mask.sort_unstable();
            mask.dedup();
            ScoredProposal {
                position,
                heads: ProposalHeads {
                    semantic_logits: (0..NUM_CLASSES).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    geometric: Some(([0, 1, 2].map(|_| rng.random_range(-0.3..0.3)), rng.random_range(0.1..0.5))),
                    embedding: Some((0..5).map(|_| rng.random_range(-0.1..0.1)).collect()),
                    objectness_logits: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                },
                mask,
            }
        })
        .collect()
}

fn criterion_8() -> Outcome {
    // Perfect votes: every object point votes exactly for its instance center.
    let mut proposals_checked = 0;
    for seed in 0..20 {
        let scene = generate_scene(&SceneGenParams { seed: 80_000 + seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let instances = scene.instances();
        let mask: Vec<bool> = scene.points.iter().map(|p| p.instance >= 0).collect();
        let mut offsets = vec![0.0; 3 * scene.len()];
        for inst in &instances {
            for &i in &inst.points {
                for a in 0..3 {
                    offsets[3 * i + a] = inst.center[a] - scene.points[i].position[a];
                }
            }
        }
        let votes: Vec<Vote> = cast_votes(&scene, &Tensor::matrix(scene.len(), 3, offsets), &mask).map_err(|e| e.to_string())?;
        for sampling in [Sampling::Random, Sampling::Fps] {
            let picks = sample_proposals(&votes, 64, seed, sampling).map_err(|e| e.to_string())?;
            let set = ProposalSet::build(&votes, &picks, 0.3);
            for (k, group) in set.groups.iter().enumerate() {
                let mut ids: Vec<i32> = group.iter().map(|&v| scene.points[votes[v].point].instance).collect();
                ids.dedup();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != 1 {
                    return Err(format!("scene seed {seed}: proposal {k} groups instances {ids:?}"));
                }
                proposals_checked += 1;
            }
        }
    }

    // Aggregation: proposal-to-object assignment is a partial function and
    // each object is exactly the union of its members' masks.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ClusterParams::default();
    for case in 0..300 {
        let props = random_proposals(&mut rng, 60);
        for mode in Mode::ALL {
            let agg = form_objects(&props, mode, &params).map_err(|e| e.to_string())?;
            for (o, object) in agg.objects.iter().enumerate() {
                let members: Vec<usize> = (0..props.len()).filter(|&i| agg.assignment[i] == Some(o)).collect();
                let mut union: Vec<usize> = members.iter().flat_map(|&i| props[i].mask.iter().copied()).collect();
                union.sort_unstable();
                union.dedup();
                if members.is_empty() || union != object.points {
                    return Err(format!("case {case} {mode:?}: object {o} does not match its members"));
                }
            }
            if agg.assignment.iter().flatten().any(|&o| o >= agg.objects.len()) {
                return Err(format!("case {case} {mode:?}: dangling assignment"));
            }
        }
    }

    // Augmentation keeps labels and unit normals.
    let base = generate_scene(&SceneGenParams { seed: 88, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut worst_normal: f64 = 0.0;
    for draw in 0..1000u64 {
        let a = augment(&base, draw);
        if a.len() != base.len() {
            return Err(format!("draw {draw}: point count changed"));
        }
        for (p, q) in base.points.iter().zip(&a.points) {
            if p.semantic != q.semantic || p.instance != q.instance {
                return Err(format!("draw {draw}: labels changed"));
            }
            worst_normal = worst_normal.max((mpa::geom::norm(q.normal) - 1.0).abs());
        }
        // Rigid up to uniform scale: pairwise distance ratios are preserved.
        let (i, j, k) = (0, base.len() / 2, base.len() - 1);
        let r0 = dist(base.points[i].position, base.points[j].position) / dist(base.points[i].position, base.points[k].position);
        let r1 = dist(a.points[i].position, a.points[j].position) / dist(a.points[i].position, a.points[k].position);
        if (r0 - r1).abs() > 1e-9 {
            return Err(format!("draw {draw}: shape distorted"));
        }
    }
    ensure(
        worst_normal <= 1e-5,
        format!("{proposals_checked} perfect-vote groups single-instance; 300x4 aggregations consistent; 1000 augmentations, worst normal error {worst_normal:.1e}"),
    )
}

// ---------------------------------------------------------------------- main

fn report(results: &mut Vec<bool>, n: usize, name: &str, outcome: Outcome) {
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("criterion {n} {}: {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    results.push(ok);
}

fn main() {
    // Positional arguments select criteria by number; any other filter (as
    // passed by `cargo test <name>` to every target) selects none.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let mut results = Vec::new();
    let cheap: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "gradient correctness", criterion_1),
        (2, "loss unit values", criterion_2),
        (3, "objectness rule table", criterion_3),
        (4, "clustering oracle", criterion_4),
        (5, "metric oracle", criterion_5),
    ];
    for (n, name, run) in cheap {
        if wanted(n) {
            report(&mut results, n, name, run());
        }
    }

    if wanted(6) || wanted(7) {
        let train_scenes = scene_set("train", 64, 0);
        let val = scene_set("val", 16, 500_000);
        match desk_run(&train_scenes, &val) {
            Ok(first) => {
                println!("{}", first.table.to_text());
                report(&mut results, 6, "end-to-end desk run", criterion_6(&first));
                if wanted(7) {
                    let repeat = desk_run(&train_scenes, &val);
                    report(&mut results, 7, "determinism", repeat.and_then(|second| criterion_7(&first, &second)));
                }
            }
            Err(e) => {
                report(&mut results, 6, "end-to-end desk run", Err(e.clone()));
                report(&mut results, 7, "determinism", Err(e));
            }
        }
    }
    if wanted(8) {
        report(&mut results, 8, "pipeline invariants", criterion_8());
    }

    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    // FAIL lines are the verdict; a failing exit status is opt-in.
    if passed != results.len() && std::env::var_os("MPA_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
