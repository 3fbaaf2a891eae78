//! Point-cloud container and the geometric kernels built on it: voxel
//! hashing, voxel-query ball search, exact kNN, farthest point sampling and
//! grid pooling.

mod fps;
mod knn;
mod pool;
mod voxel;

pub use fps::fps;
pub use knn::knn_query;
pub use pool::{grid_pool, grid_unpool, PoolMap};
pub use voxel::{ball_windows, voxel_query, voxel_query_at, voxelize, VoxelGrid, VoxelKey};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Coordinates, per-point features and optional semantic labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    feats: Vec<f64>,
    channels: usize,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>, feats: Vec<f64>, channels: usize) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::invalid(format!(
                "feature buffer holds {} values, expected {} points x {} channels",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            coords,
            feats,
            channels,
            labels: None,
        })
    }

    /// A cloud with no feature channels, handy for pure geometry.
    pub fn from_coords(coords: Vec<Point3>) -> Result<Self> {
        Self::new(coords, Vec::new(), 0)
    }

    pub fn with_labels(mut self, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                self.coords.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feat_row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn coords_mut(&mut self) -> &mut [Point3] {
        &mut self.coords
    }

    /// Keeps points with `min <= p < max` on every axis. Returns the cropped
    /// cloud and the original indices of the kept points.
    pub fn crop(&self, min: Point3, max: Point3) -> (PointCloud, Vec<usize>) {
        let kept: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let p = &self.coords[i];
                (0..3).all(|a| p[a] >= min[a] && p[a] < max[a])
            })
            .collect();
        (self.select(&kept), kept)
    }

    /// Sub-cloud holding the given points in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let mut feats = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            feats.extend_from_slice(self.feat_row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud {
            coords,
            feats,
            channels: self.channels,
            labels,
        }
    }
}

/// Per-query neighbor lists in compressed row form.
///
/// Every window is sorted ascending so that two searches returning the same
/// set compare equal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborWindows {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    max_size: usize,
}

impl NeighborWindows {
    pub(crate) fn from_lists(lists: Vec<Vec<usize>>, max_size: usize) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for mut l in lists {
            l.sort_unstable();
            indices.extend_from_slice(&l);
            offsets.push(indices.len());
        }
        Self {
            offsets,
            indices,
            max_size,
        }
    }

    /// Number of query points.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn window(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(move |i| self.window(i))
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    /// Flattened (query, neighbor) pairs in window order.
    pub fn edges(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(self.indices.len());
        for i in 0..self.len() {
            src.extend(std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        (src, self.indices.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_feats() {
        assert!(PointCloud::from_coords(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![1.0, 2.0], 1).is_err());
        let c = PointCloud::new(vec![[0.0; 3]], vec![1.0], 1).unwrap();
        assert!(c.clone().with_labels(vec![5], 5).is_err());
        assert!(c.with_labels(vec![4], 5).is_ok());
    }

    #[test]
    fn crop_is_half_open() {
        let c = PointCloud::from_coords(vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        let (out, kept) = c.crop([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]);
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn windows_are_sorted() {
        let w = NeighborWindows::from_lists(vec![vec![3, 1, 2], vec![0]], 3);
        assert_eq!(w.window(0), &[1, 2, 3]);
        assert_eq!(w.edges(), (vec![0, 0, 0, 1], vec![1, 2, 3, 0]));
    }
}
