//! The multi-task network: a U-Net of point-attention stages with a
//! per-point segmentation head and a query-based detection head.

mod boxes;
mod net;

pub use boxes::{decode_boxes, pseudo_foreground_labels, wrap_angle, Box3D, BoxPrediction, BOX_EPS};
pub use net::{
    decode_unet, detect_head, encode, forward, param_specs, segment_head, select_queries,
    stage_windows, thing_scores, DetOutput, EncodedStage, ForwardOutput, QuerySet, Task,
};

use crate::error::{Error, Result};

/// Neighbor search used to build attention windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SearchMethod {
    /// Voxel-hashed ball query, up to `M` points within the radius.
    Voxel,
    /// Exact `min(M, N)` nearest neighbors.
    Knn,
}

impl SearchMethod {
    pub fn name(self) -> &'static str {
        match self {
            SearchMethod::Voxel => "vq",
            SearchMethod::Knn => "knn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vq" | "voxel" | "voxel_query" => Some(SearchMethod::Voxel),
            "knn" => Some(SearchMethod::Knn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// Pooling cell edge, meters. Stage 0 is never pooled.
    pub grid: f64,
    pub window: usize,
    pub radius: f64,
    pub layers: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub heads: usize,
    /// Layers in the segmentation head's attention block.
    pub seg_layers: usize,
    pub dec_layers: usize,
    pub queries: usize,
    pub fg_threshold: f64,
    pub num_semantic: usize,
    /// Semantic ids with boxes; detection class `c` is `thing_ids[c]`.
    pub thing_ids: Vec<u32>,
    pub search: SearchMethod,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stages = (0..4)
            .map(|s| {
                let f = f64::from(1u32 << s);
                StageConfig {
                    grid: 0.1 * f,
                    window: 32,
                    radius: 0.4 * f,
                    layers: 2,
                    dim: 32 << s,
                }
            })
            .collect();
        Self {
            in_channels: 1,
            stages,
            heads: 4,
            seg_layers: 1,
            dec_layers: 3,
            queries: 200,
            fg_threshold: 0.2,
            num_semantic: 5,
            thing_ids: vec![2, 3, 4],
            search: SearchMethod::Voxel,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_det_classes(&self) -> usize {
        self.thing_ids.len()
    }

    pub fn query_dim(&self) -> usize {
        self.stages[0].dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        for (s, st) in self.stages.iter().enumerate() {
            if !(st.grid > 0.0 && st.grid.is_finite()) || !(st.radius > 0.0 && st.radius.is_finite()) {
                return bad(format!("stage {s}: grid and radius must be positive"));
            }
            if st.window == 0 || st.layers == 0 || st.dim == 0 {
                return bad(format!("stage {s}: window, layers and dim must be positive"));
            }
            if st.dim % self.heads.max(1) != 0 {
                return bad(format!("stage {s}: dim {} not divisible by {} heads", st.dim, self.heads));
            }
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if self.stages.windows(2).any(|w| w[1].grid <= w[0].grid) {
            return bad("grid sizes must increase strictly over stages".into());
        }
        if self.queries == 0 {
            return bad("queries must be at least 1".into());
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return bad(format!("fg_threshold {} outside (0, 1)", self.fg_threshold));
        }
        if self.seg_layers == 0 || self.dec_layers == 0 {
            return bad("seg_layers and dec_layers must be positive".into());
        }
        if self.num_semantic == 0 || self.thing_ids.is_empty() {
            return bad("need at least one semantic and one thing class".into());
        }
        if let Some(t) = self.thing_ids.iter().find(|&&t| t as usize >= self.num_semantic) {
            return bad(format!("thing id {t} is not a semantic class"));
        }
        Ok(())
    }

    /// Detection class of a semantic id, if it is a thing.
    pub fn det_class_of(&self, semantic: u32) -> Option<usize> {
        self.thing_ids.iter().position(|&t| t == semantic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn grid_must_increase() {
        let mut c = ModelConfig::default();
        c.stages[2].grid = c.stages[1].grid;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.fg_threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.queries = 0;
        assert!(c.validate().is_err());
    }
}
