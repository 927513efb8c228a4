//! Uniform-grid spatial index for fixed-radius queries in 3D.

use std::collections::HashMap;

use crate::geom::{dist2, Vec3};

type Cell = [i64; 3];

/// Buckets points into cubic cells. Read-only after construction.
#[derive(Clone, Debug)]
pub struct Grid {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<Cell, Vec<usize>>,
}

impl Grid {
    /// `cell` must be positive and finite.
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive, got {cell}");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(*p, cell)).or_default().push(i);
        }
        Self { cell, points: points.to_vec(), cells }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Indices of points strictly closer than `r` to `q`, in ascending order.
    ///
    /// The test is `‖p − q‖ < r` on the rounded Euclidean distance.
    pub fn within(&self, q: Vec3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !(r > 0.0) {
            return out;
        }
        let reach = (r / self.cell).ceil();
        // Past this many cells a linear scan is cheaper than visiting empty cells.
        if !reach.is_finite() || (2.0 * reach + 1.0).powi(3) > self.cells.len() as f64 {
            out.extend((0..self.points.len()).filter(|&i| dist2(self.points[i], q).sqrt() < r));
            return out;
        }
        let reach = reach as i64;
        let c = cell_of(q, self.cell);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(members) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        out.extend(members.iter().copied().filter(|&i| dist2(self.points[i], q).sqrt() < r));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn cell_of(p: Vec3, cell: f64) -> Cell {
    p.map(|v| (v / cell).floor() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..400).map(|_| [0; 3].map(|_: i32| rng.random_range(-2.0..2.0))).collect();
        for cell in [0.1, 0.3, 1.0] {
            let grid = Grid::new(&pts, cell);
            for _ in 0..50 {
                let q = [0; 3].map(|_: i32| rng.random_range(-2.5..2.5));
                for r in [0.05, 0.3, 0.7, f64::INFINITY] {
                    let brute: Vec<usize> = (0..pts.len()).filter(|&i| dist2(pts[i], q).sqrt() < r).collect();
                    assert_eq!(grid.within(q, r), brute);
                }
            }
        }
    }

    #[test]
    fn boundary_is_excluded() {
        let grid = Grid::new(&[[0.0; 3], [0.3, 0.0, 0.0]], 0.3);
        assert_eq!(grid.within([0.0; 3], 0.3), vec![0]);
    }
}
