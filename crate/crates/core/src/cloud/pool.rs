use std::collections::HashMap;

use super::voxel::key_of;
use super::{Point3, PointCloud};
use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Assignment of fine points to coarse cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMap {
    assign: Vec<usize>,
    coarse_len: usize,
}

impl PoolMap {
    pub fn new(assign: Vec<usize>, coarse_len: usize) -> Result<Self> {
        let mut hit = vec![false; coarse_len];
        for &a in &assign {
            if a >= coarse_len {
                return Err(Error::IndexOutOfRange {
                    index: a,
                    len: coarse_len,
                });
            }
            hit[a] = true;
        }
        if let Some(c) = hit.iter().position(|h| !h) {
            return Err(Error::invalid(format!("coarse point {c} has no members")));
        }
        Ok(Self { assign, coarse_len })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            assign: (0..n).collect(),
            coarse_len: n,
        }
    }

    /// Groups `coords` by voxel cell. Coarse points follow lexicographic
    /// cell order and sit at the mean of their members.
    pub fn build(coords: &[Point3], cell_size: f64) -> Result<(PoolMap, Vec<Point3>)> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be > 0, got {cell_size}")));
        }
        let keys: Vec<[i64; 3]> = coords.iter().map(|p| key_of(p, cell_size)).collect();
        let mut uniq = keys.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let slot: HashMap<[i64; 3], usize> = uniq.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let assign: Vec<usize> = keys.iter().map(|k| slot[k]).collect();

        let mut sums = vec![[0.0; 3]; uniq.len()];
        let mut counts = vec![0usize; uniq.len()];
        for (p, &a) in coords.iter().zip(&assign) {
            for ax in 0..3 {
                sums[a][ax] += p[ax];
            }
            counts[a] += 1;
        }
        let centers = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let n = c as f64;
                [s[0] / n, s[1] / n, s[2] / n]
            })
            .collect();
        Ok((
            PoolMap {
                assign,
                coarse_len: uniq.len(),
            },
            centers,
        ))
    }

    pub fn assign(&self) -> &[usize] {
        &self.assign
    }

    pub fn fine_len(&self) -> usize {
        self.assign.len()
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_len
    }
}

/// Mean-pools coordinates and max-pools features per voxel cell.
pub fn grid_pool(cloud: &PointCloud, cell_size: f64) -> Result<(PointCloud, PoolMap)> {
    let (map, centers) = PoolMap::build(cloud.coords(), cell_size)?;
    let c = cloud.channels();
    let mut feats = vec![f64::NEG_INFINITY; map.coarse_len * c];
    for (i, &a) in map.assign.iter().enumerate() {
        for (dst, &v) in feats[a * c..(a + 1) * c].iter_mut().zip(cloud.feat_row(i)) {
            if v > *dst {
                *dst = v;
            }
        }
    }
    Ok((PointCloud::new(centers, feats, c)?, map))
}

/// Broadcasts each coarse feature row back to its member points.
pub fn grid_unpool(coarse: &Array, map: &PoolMap) -> Result<Array> {
    let (rows, cols) = coarse.dims2()?;
    if rows != map.coarse_len {
        return Err(Error::Shape {
            op: "grid_unpool",
            lhs: coarse.shape().to_vec(),
            rhs: vec![map.coarse_len],
        });
    }
    let mut out = Vec::with_capacity(map.assign.len() * cols);
    for &a in &map.assign {
        out.extend_from_slice(coarse.row(a));
    }
    Array::new(vec![map.assign.len(), cols], out)
}
