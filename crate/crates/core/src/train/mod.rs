//! Losses, target assignment, optimization and the training loop.

mod augment;
mod hungarian;
mod losses;
mod optim;
mod run;
mod targets;

pub use augment::{apply_transform, augment, noisy_gt_queries, AugmentConfig, Transform};
pub use hungarian::{assignment_cost, hungarian_match};
pub use losses::{cross_entropy, focal_loss, lovasz_grad, lovasz_softmax, smooth_l1, uncertainty_weighted};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
pub use run::{
    evaluate_losses, full_specs, infer_task, init_store, param_group, scene_loss, train_loop, write_loss_csv, LossParts, LossReport,
    TrainOutcome, LOSS_CSV_HEADER,
};
pub use targets::{detection_targets, match_cost, DetTargets};

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Caps the total number of steps; one step is one scene.
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub aug: AugmentConfig,
    pub crop_min: Point3,
    pub crop_max: Point3,
    pub seed: u64,
    /// Adds one noisy copy of every ground-truth box as an extra query.
    pub gt_queries: bool,
    pub gt_noise: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Semantic label excluded from the segmentation losses.
    pub ignore_id: Option<u32>,
    /// Global gradient norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Multi,
            lr: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            epochs: 36,
            max_steps: None,
            augment: true,
            aug: AugmentConfig::default(),
            crop_min: [-50.0, -50.0, -5.0],
            crop_max: [50.0, 50.0, 3.0],
            seed: 42,
            gt_queries: true,
            gt_noise: 0.3,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            ignore_id: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad(format!("learning rates need 0 <= lr_min <= lr, lr > 0 (got {}, {})", self.lr_min, self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if (0..3).any(|a| !(self.crop_min[a] < self.crop_max[a])) {
            return bad(format!("crop range {:?}..{:?} is not ordered", self.crop_min, self.crop_max));
        }
        if !(self.gt_noise >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return bad("gt_noise, focal_alpha or focal_gamma out of range".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.aug.validate()
    }

    /// Steps the loop will run over a dataset of `n` scenes. `max_steps`,
    /// when set, replaces the epoch count.
    pub fn total_steps(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        self.max_steps.unwrap_or(self.epochs * n)
    }
}
