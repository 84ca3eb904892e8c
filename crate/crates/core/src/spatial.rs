//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

type CellKey = (i64, i64, i64);

/// The radius predicate shared by every neighborhood query in the crate.
#[inline]
pub fn within(a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> bool {
    (a - b).norm() <= radius
}

/// Points bucketed into cubic cells. Queries scan only the cells overlapping
/// the query ball and then apply [`within`] exactly.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
    points: Vec<Vector3<f64>>,
}

impl GridIndex {
    /// An empty grid; `cell` should be at least the typical query radius.
    pub fn new(cell: f64) -> Self {
        let cell = if cell > 0.0 && cell.is_finite() { cell } else { 1.0 };
        GridIndex {
            cell,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    pub fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut grid = GridIndex::new(cell);
        for p in points {
            grid.insert(*p);
        }
        grid
    }

    /// Cell size to use for queries of the given radius.
    pub fn cell_for_radius(radius: f64) -> f64 {
        if radius > 0.0 && radius.is_finite() {
            radius
        } else {
            1.0
        }
    }

    fn key(&self, p: &Vector3<f64>) -> CellKey {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, p: Vector3<f64>) -> usize {
        let idx = self.points.len();
        let key = self.key(&p);
        self.cells.entry(key).or_default().push(idx);
        self.points.push(p);
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &Vector3<f64> {
        &self.points[idx]
    }

    fn cell_range(&self, q: &Vector3<f64>, radius: f64) -> [(i64, i64); 3] {
        // Pad for rounding in q ± r so no point satisfying `within` is missed.
        let pad = 1e-9 * (radius + q.amax());
        let r = radius + pad;
        let axis = |v: f64| {
            (
                ((v - r) / self.cell).floor() as i64,
                ((v + r) / self.cell).floor() as i64,
            )
        };
        [axis(q.x), axis(q.y), axis(q.z)]
    }

    /// Calls `f` with the index of every point within `radius` of `q`, in no
    /// particular order; stops early when `f` returns `false`.
    pub fn for_each_within(&self, q: &Vector3<f64>, radius: f64, mut f: impl FnMut(usize) -> bool) {
        if !(radius >= 0.0) || self.points.is_empty() {
            return;
        }
        let [(x0, x1), (y0, y1), (z0, z1)] = self.cell_range(q, radius);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let Some(bucket) = self.cells.get(&(x, y, z)) else {
                        continue;
                    };
                    for &idx in bucket {
                        if within(&self.points[idx], q, radius) && !f(idx) {
                            return;
                        }
                    }
                }
            }
        }
    }

    pub fn any_within(&self, q: &Vector3<f64>, radius: f64) -> bool {
        let mut found = false;
        self.for_each_within(q, radius, |_| {
            found = true;
            false
        });
        found
    }

    /// Indices within `radius` of `q`, ascending.
    pub fn within_radius(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, radius, |i| {
            out.push(i);
            true
        });
        out.sort_unstable();
        out
    }
}
