//! Post-processing, metrics, connectivity analysis and the neighbor-search
//! benchmark.

mod bench;
mod connectivity;
mod iou;
mod metrics;

pub use bench::{bench_cloud, bench_search, check_search, BenchRow, BENCH_CSV_HEADER};
pub use connectivity::{connectivity, hop_counts, ConnectivityReport};
pub use iou::{bev_rotated_iou, clip_polygon, nms, nms_indices, polygon_area, AREA_EPS};
pub use metrics::{
    ap_from_matches, average_precision, average_precision_scenes, detection_recall, miou, ApReport,
    ConfusionMatrix, IouReport, Matcher, SceneDetections, RECALL_POINTS,
};

use std::fmt::Write as _;

use crate::autodiff::{Mode, ParamStore, Tape};
use crate::cloud::{Point3, PointCloud};
use crate::data::{SceneSample, DET_CLASS_NAMES, SEMANTIC_CLASS_NAMES};
use crate::error::Result;
use crate::model::{decode_boxes, forward, Box3D, ModelConfig, Task};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub matcher: Matcher,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.2,
            nms_iou: 0.4,
            matcher: Matcher::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub seg: Option<Vec<u32>>,
    pub boxes: Vec<Box3D>,
}

/// Inference with running normalization statistics: per-point argmax
/// labels and boxes after thresholding and NMS.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, task: Task, cloud: &PointCloud, ecfg: &EvalConfig) -> Result<Prediction> {
    let mut tape = Tape::new(store, Mode::Eval);
    let out = forward(&mut tape, cfg, task, cloud, &[])?;
    let seg = out.seg_logits.map(|l| {
        let v = tape.value(l);
        (0..v.rows())
            .map(|i| {
                let r = v.row(i);
                (0..r.len()).fold(0, |b, c| if r[c] > r[b] { c } else { b }) as u32
            })
            .collect()
    });
    let boxes = match &out.det {
        Some(d) => {
            let decoded = decode_boxes(&d.prediction(&tape), ecfg.score_threshold);
            nms(&decoded, ecfg.nms_iou, ecfg.score_threshold)
        }
        None => Vec::new(),
    };
    Ok(Prediction { seg, boxes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: Option<ConfusionMatrix>,
    pub iou: Option<IouReport>,
    pub ap: Option<ApReport>,
    pub recall: Option<f64>,
}

impl EvalReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.confusion.as_ref().map(ConfusionMatrix::accuracy)
    }

    /// `metric,class,value` rows, then a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        if let Some(r) = &self.iou {
            for (c, v) in r.per_class.iter().enumerate() {
                let _ = writeln!(s, "iou,{},{}", SEMANTIC_CLASS_NAMES.get(c).unwrap_or(&"?"), fmt(*v));
            }
        }
        if let Some(r) = &self.ap {
            for (c, v) in r.per_class.iter().enumerate() {
                let _ = writeln!(s, "ap,{},{}", DET_CLASS_NAMES.get(c).unwrap_or(&"?"), fmt(*v));
            }
        }
        let _ = writeln!(
            s,
            "# mIoU={} accuracy={} mAP={} recall={}",
            fmt(self.iou.as_ref().map(|r| r.mean)),
            fmt(self.accuracy()),
            fmt(self.ap.as_ref().map(|r| r.map)),
            fmt(self.recall)
        );
        s
    }
}

/// Runs `predict` over every scene (cropped to `crop`) and aggregates
/// segmentation and detection metrics. Detection metrics are absent when
/// the dataset holds no boxes.
pub fn evaluate_dataset(
    store: &ParamStore,
    cfg: &ModelConfig,
    task: Task,
    scenes: &[SceneSample],
    crop: (Point3, Point3),
    ecfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut cm = task.has_seg().then(|| ConfusionMatrix::new(cfg.num_semantic));
    let mut dets = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let scene = scene.cropped(crop.0, crop.1);
        let p = predict(store, cfg, task, &scene.cloud, ecfg)?;
        if let (Some(cm), Some(seg)) = (cm.as_mut(), &p.seg) {
            cm.add(scene.labels(), seg)?;
        }
        dets.push(SceneDetections {
            preds: p.boxes,
            gts: scene.boxes.clone(),
        });
    }
    let iou = cm.as_ref().and_then(|c| miou(c).ok());
    let has_gt = dets.iter().any(|d| !d.gts.is_empty());
    let (ap, recall) = if task.has_det() && has_gt {
        let nc = cfg.num_det_classes();
        (
            Some(average_precision_scenes(&dets, nc, ecfg.matcher)?),
            detection_recall(&dets, nc, ecfg.matcher),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        confusion: cm,
        iou,
        ap,
        recall,
    })
}
