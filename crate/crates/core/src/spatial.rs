//! Uniform voxel-hash grid for fixed-radius nearest-neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::scalar::Real;

type Cell = [i64; 3];

/// Hash grid whose cell size equals the query radius, so a radius query only
/// touches the 27 cells around the query point.
#[derive(Debug, Clone)]
pub struct VoxelGrid<'a, T: Real> {
    points: &'a [Vector3<T>],
    cell: T,
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a, T: Real> VoxelGrid<'a, T> {
    /// Panics if `cell` is not strictly positive.
    pub fn new(points: &'a [Vector3<T>], cell: T) -> Self {
        assert!(cell > T::zero(), "voxel size must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest stored point within `radius` (which must not exceed the cell
    /// size). Ties resolve to the lower index.
    pub fn nearest_within(&self, q: &Vector3<T>, radius: T) -> Option<(usize, T)> {
        debug_assert!(radius <= self.cell);
        let c = key(q, self.cell);
        let r2 = radius * radius;
        let mut best: Option<(usize, T)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    pub fn has_neighbor_within(&self, q: &Vector3<T>, radius: T) -> bool {
        self.nearest_within(q, radius).is_some()
    }
}

fn key<T: Real>(p: &Vector3<T>, cell: T) -> Cell {
    let k = |v: T| (v / cell).floor().to_f64_lossy() as i64;
    [k(p.x), k(p.y), k(p.z)]
}
