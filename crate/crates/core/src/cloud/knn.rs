use super::voxel::VoxelGrid;
use super::{dist2, NeighborWindows, Point3};
use crate::error::{Error, Result};

/// Cell edge giving roughly `k` points per cell for surface-like scans,
/// where density scales with the two largest extents.
fn cell_for(coords: &[Point3], k: usize) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
    ext.sort_by(|a, b| b.total_cmp(a));
    let area = ext[0] * ext[1].max(ext[0] * 1e-3);
    let cell = (area * k as f64 / coords.len() as f64).sqrt();
    if cell.is_finite() && cell > 0.0 {
        cell
    } else {
        1.0
    }
}

/// Exact k nearest neighbors (Euclidean, ties to the lower index) for each
/// query, found by growing voxel rings until no unvisited cell can beat the
/// current k-th distance.
pub fn knn_query(coords: &[Point3], queries: &[usize], k: usize) -> Result<NeighborWindows> {
    if k > coords.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} available points",
            coords.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let cell = cell_for(coords, k);
    let grid = VoxelGrid::build(coords, cell)?;
    let mut lists = Vec::with_capacity(queries.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &q in queries {
        let center = coords.get(q).ok_or(Error::IndexOutOfRange {
            index: q,
            len: coords.len(),
        })?;
        cand.clear();
        let ck = grid.key_of(center);
        let last = grid.max_ring(&ck);
        for ring in 0..=last {
            grid.for_each_ring_cell(&ck, ring, |cell| {
                cand.extend(cell.iter().map(|&j| (dist2(center, &coords[j]), j)));
                true
            });
            if cand.len() >= k {
                cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
                // every point beyond this ring is farther than ring * cell
                let bound = ring as f64 * cell * (1.0 - 1e-9);
                let kth = cand.iter().map(|c| c.0).fold(0.0, f64::max);
                if kth <= bound * bound {
                    break;
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        lists.push(cand.iter().take(k).map(|c| c.1).collect());
    }
    Ok(NeighborWindows::from_lists(lists, k))
}
