use std::collections::HashMap;

use super::{dist2, NeighborWindows, Point3, PointCloud};
use crate::error::{Error, Result};

pub type VoxelKey = [i64; 3];

/// Sparse voxel hash: integer cell key to the ascending indices of the
/// points inside that cell. Immutable once built.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    cell_size: f64,
    cells: HashMap<VoxelKey, Vec<usize>>,
    lo: VoxelKey,
    hi: VoxelKey,
}

#[inline]
pub(crate) fn key_of(p: &Point3, cell_size: f64) -> VoxelKey {
    [
        (p[0] / cell_size).floor() as i64,
        (p[1] / cell_size).floor() as i64,
        (p[2] / cell_size).floor() as i64,
    ]
}

impl VoxelGrid {
    pub fn build(coords: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be > 0, got {cell_size}")));
        }
        let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in coords.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
            }
            let k = key_of(p, cell_size);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            // indices arrive ascending, so every list stays sorted
            cells.entry(k).or_default().push(i);
        }
        Ok(Self {
            cell_size,
            cells,
            lo,
            hi,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn key_of(&self, p: &Point3) -> VoxelKey {
        key_of(p, self.cell_size)
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<&[usize]> {
        self.cells.get(key).map(Vec::as_slice)
    }

    /// Occupied keys in lexicographic order.
    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.cells.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Largest Chebyshev ring around `center` that still intersects the
    /// occupied key box.
    pub(crate) fn max_ring(&self, center: &VoxelKey) -> i64 {
        if self.cells.is_empty() {
            return -1;
        }
        (0..3)
            .map(|a| (center[a] - self.lo[a]).abs().max((self.hi[a] - center[a]).abs()))
            .max()
            .unwrap_or(0)
    }

    /// Visits the occupied cells at Chebyshev distance exactly `ring` from
    /// `center`, in lexicographic key order.
    pub(crate) fn for_each_ring_cell(
        &self,
        center: &VoxelKey,
        ring: i64,
        mut f: impl FnMut(&[usize]) -> bool,
    ) -> bool {
        let range = |a: usize| {
            let lo = (center[a] - ring).max(self.lo[a]);
            let hi = (center[a] + ring).min(self.hi[a]);
            lo..=hi
        };
        for x in range(0) {
            let dx = (x - center[0]).abs();
            for y in range(1) {
                let dy = (y - center[1]).abs();
                let dxy = dx.max(dy);
                if dxy > ring {
                    continue;
                }
                if dxy == ring {
                    for z in range(2) {
                        if let Some(c) = self.cells.get(&[x, y, z]) {
                            if !f(c) {
                                return false;
                            }
                        }
                    }
                } else {
                    // only the two z-faces of the shell remain
                    for z in [center[2] - ring, center[2] + ring] {
                        if z < self.lo[2] || z > self.hi[2] {
                            continue;
                        }
                        if let Some(c) = self.cells.get(&[x, y, z]) {
                            if !f(c) {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }
}

pub fn voxelize(cloud: &PointCloud, cell_size: f64) -> Result<VoxelGrid> {
    VoxelGrid::build(cloud.coords(), cell_size)
}

/// Ring-ordered collection of up to `m` points within `radius` of `center`.
/// `own` is placed first when given so a query point is never crowded out of
/// its own window.
fn collect(
    grid: &VoxelGrid,
    coords: &[Point3],
    center: &Point3,
    own: Option<usize>,
    radius: f64,
    m: usize,
) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(m);
    if let Some(i) = own {
        out.push(i);
    }
    if out.len() >= m {
        return out;
    }
    let ck = grid.key_of(center);
    let reach = (radius / grid.cell_size).ceil() as i64;
    let last = reach.min(grid.max_ring(&ck));
    for ring in 0..=last {
        let more = grid.for_each_ring_cell(&ck, ring, |cell| {
            for &j in cell {
                if Some(j) == own {
                    continue;
                }
                if dist2(center, &coords[j]) <= r2 {
                    out.push(j);
                    if out.len() >= m {
                        return false;
                    }
                }
            }
            true
        });
        if !more {
            break;
        }
    }
    out
}

/// Ball query by breadth-first expansion over voxel rings.
///
/// Cells are visited ring by ring in Chebyshev distance from the query's
/// cell, lexicographically within a ring, points ascending within a cell.
/// Collection stops after `m` in-radius points, so whenever a query has at
/// most `m` points within `radius` the window is the exact radius set.
pub fn voxel_query(
    grid: &VoxelGrid,
    coords: &[Point3],
    queries: &[usize],
    radius: f64,
    m: usize,
) -> Result<NeighborWindows> {
    check_radius(radius, m)?;
    if coords.is_empty() {
        return Ok(NeighborWindows::from_lists(Vec::new(), m));
    }
    let mut lists = Vec::with_capacity(queries.len());
    for &q in queries {
        let center = coords.get(q).ok_or(Error::IndexOutOfRange {
            index: q,
            len: coords.len(),
        })?;
        lists.push(collect(grid, coords, center, Some(q), radius, m));
    }
    Ok(NeighborWindows::from_lists(lists, m))
}

/// Same search centered on arbitrary locations instead of cloud points.
/// Windows may be empty.
pub fn voxel_query_at(
    grid: &VoxelGrid,
    coords: &[Point3],
    centers: &[Point3],
    radius: f64,
    m: usize,
) -> Result<NeighborWindows> {
    check_radius(radius, m)?;
    let lists = centers
        .iter()
        .map(|c| {
            if coords.is_empty() {
                Vec::new()
            } else {
                collect(grid, coords, c, None, radius, m)
            }
        })
        .collect();
    Ok(NeighborWindows::from_lists(lists, m))
}

/// Windows for every point of `coords`, with the grid cell tied to the
/// radius.
pub fn ball_windows(coords: &[Point3], radius: f64, m: usize) -> Result<NeighborWindows> {
    check_radius(radius, m)?;
    let grid = VoxelGrid::build(coords, radius)?;
    let all: Vec<usize> = (0..coords.len()).collect();
    voxel_query(&grid, coords, &all, radius, m)
}

fn check_radius(radius: f64, m: usize) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    if m == 0 {
        return Err(Error::invalid("window size must be >= 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_radius(coords: &[Point3], q: usize, radius: f64) -> Vec<usize> {
        (0..coords.len())
            .filter(|&j| dist2(&coords[q], &coords[j]) <= radius * radius)
            .collect()
    }

    #[test]
    fn voxelize_floor_keys() {
        let g = VoxelGrid::build(&[[0.3, 0.3, 0.3]], 1.0).unwrap();
        assert_eq!(g.cell(&[0, 0, 0]), Some(&[0usize][..]));

        let g = VoxelGrid::build(&[[0.2, 0.0, 0.0], [0.8, 0.0, 0.0]], 0.5).unwrap();
        assert_eq!(g.sorted_keys(), vec![[0, 0, 0], [1, 0, 0]]);

        let g = VoxelGrid::build(&[[-0.1, 0.0, 0.0]], 1.0).unwrap();
        assert_eq!(g.sorted_keys(), vec![[-1, 0, 0]]);
    }

    #[test]
    fn voxelize_rejects_bad_input() {
        assert!(VoxelGrid::build(&[[f64::INFINITY, 0.0, 0.0]], 1.0).is_err());
        assert!(VoxelGrid::build(&[[0.0; 3]], 0.0).is_err());
    }

    #[test]
    fn ring_cells_partition_the_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<Point3> = (0..300)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)])
            .collect();
        let g = VoxelGrid::build(&coords, 0.7).unwrap();
        let ck = g.key_of(&coords[5]);
        let mut seen = Vec::new();
        for ring in 0..=g.max_ring(&ck) {
            g.for_each_ring_cell(&ck, ring, |c| {
                seen.extend_from_slice(c);
                true
            });
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn isolated_point_sees_itself() {
        let coords = [[0.0; 3], [10.0, 0.0, 0.0]];
        let w = ball_windows(&coords, 0.5, 8).unwrap();
        assert_eq!(w.window(0), &[0]);
        assert_eq!(w.window(1), &[1]);
    }

    #[test]
    fn matches_exhaustive_search_when_under_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords: Vec<Point3> = (0..10)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let w = ball_windows(&coords, 2.0, 10).unwrap();
        for q in 0..10 {
            assert_eq!(w.window(q), brute_radius(&coords, q, 2.0).as_slice());
        }
    }

    #[test]
    fn capacity_limits_window() {
        let mut coords = vec![[0.0; 3]];
        for i in 0..8 {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            coords.push([0.3 * a.cos(), 0.3 * a.sin(), 0.0]);
        }
        let w = ball_windows(&coords, 0.5, 4).unwrap();
        let all = brute_radius(&coords, 0, 0.5);
        assert_eq!(all.len(), 9);
        assert_eq!(w.window(0).len(), 4);
        assert!(w.window(0).contains(&0));
        assert!(w.window(0).iter().all(|j| all.contains(j)));
    }

    #[test]
    fn out_of_range_query_errors() {
        let coords = [[0.0; 3]];
        let g = VoxelGrid::build(&coords, 1.0).unwrap();
        assert!(matches!(
            voxel_query(&g, &coords, &[1], 1.0, 2),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
        let empty = VoxelGrid::build(&[], 1.0).unwrap();
        assert!(voxel_query(&empty, &[], &[], 1.0, 2).unwrap().is_empty());
    }

    #[test]
    fn query_at_arbitrary_center() {
        let coords = [[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let g = VoxelGrid::build(&coords, 0.6).unwrap();
        let w = voxel_query_at(&g, &coords, &[[0.5, 0.0, 0.0], [20.0, 0.0, 0.0]], 0.6, 4).unwrap();
        assert_eq!(w.window(0), &[0, 1]);
        assert!(w.window(1).is_empty());
    }
}
