//! Density-based clustering of small feature sets.

/// Label of a point that belongs to no cluster.
pub const NOISE: i64 = -1;

/// DBSCAN over the rows of `points` (all of equal width).
///
/// A row is a core point when at least `min_pts` rows, itself included, lie
/// within `eps` (inclusive). Clusters grow from core points in input order,
/// so cluster ids are numbered by their lowest core row. A border row
/// reachable from several clusters joins the one with the lowest id.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| distance(&points[i], &points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        let mut stack = vec![seed];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if labels[q] != NOISE {
                    continue;
                }
                labels[q] = next;
                if core[q] {
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
