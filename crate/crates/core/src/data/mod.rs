//! Synthetic scenes, on-disk formats and configuration files.

mod config;
mod io;
mod synth;

pub use config::{parse_config, parse_config_str, write_config_echo, Config, CONFIG_KEYS};
pub use io::{
    load_boxes, load_dataset, load_labels, load_points, load_scene, save_boxes, save_dataset, save_labels,
    save_points, save_scene, scene_paths,
};
pub use synth::{synth_dataset, synth_scene, SynthConfig, DET_CLASS_NAMES, SEMANTIC_CLASS_NAMES, THING_IDS};

use crate::cloud::{Point3, PointCloud};
use crate::model::Box3D;

/// A labeled scan: points with one intensity channel and semantic labels,
/// plus ground-truth boxes whose `class` is the detection class index.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
}

impl SceneSample {
    /// Points inside the half-open range, and boxes whose center is.
    pub fn cropped(&self, min: Point3, max: Point3) -> SceneSample {
        let inside = |p: &Point3| (0..3).all(|a| p[a] >= min[a] && p[a] < max[a]);
        if self.cloud.coords().iter().all(inside) && self.boxes.iter().all(|b| inside(&b.center)) {
            return self.clone();
        }
        let (cloud, _) = self.cloud.crop(min, max);
        SceneSample {
            cloud,
            boxes: self.boxes.iter().filter(|b| inside(&b.center)).copied().collect(),
        }
    }

    pub fn labels(&self) -> &[u32] {
        self.cloud.labels().unwrap_or(&[])
    }
}
