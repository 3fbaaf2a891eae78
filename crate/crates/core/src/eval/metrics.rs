use super::iou::bev_rotated_iou;
use crate::error::{Error, Result};
use crate::model::Box3D;

/// Point counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: &[u32], pred: &[u32]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![gt.len()],
                rhs: vec![pred.len()],
            });
        }
        for (&g, &p) in gt.iter().zip(pred) {
            let (g, p) = (g as usize, p as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::IndexOutOfRange {
                    index: g.max(p),
                    len: self.k,
                });
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("merging confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Fraction of points on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `TP / (TP + FP + FN)` per class, averaged over classes that occur.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.k;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("mIoU: no class occurs in ground truth or prediction"));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// How a prediction is paired with a ground-truth box of the same class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Matcher {
    /// BEV center distance at most this many meters; nearest wins.
    CenterDist(f64),
    /// BEV IoU at least this; highest wins.
    Iou(f64),
}

impl Default for Matcher {
    fn default() -> Self {
        Matcher::CenterDist(2.0)
    }
}

impl Matcher {
    /// Larger is better; `None` when the pair does not qualify.
    fn quality(&self, p: &Box3D, g: &Box3D) -> Option<f64> {
        match *self {
            Matcher::CenterDist(t) => {
                let d = p.bev_center_dist(g);
                (d <= t).then_some(-d)
            }
            Matcher::Iou(t) => {
                let v = bev_rotated_iou(p, g);
                (v >= t && v > 0.0).then_some(v)
            }
        }
    }
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneDetections {
    pub preds: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

/// True/false positive flags of class `c` predictions in descending score
/// (ties by scene, then index), and the class's ground-truth count.
fn class_matches(scenes: &[SceneDetections], c: usize, matcher: Matcher) -> (Vec<bool>, usize) {
    let mut preds: Vec<(usize, usize)> = Vec::new();
    for (s, sc) in scenes.iter().enumerate() {
        preds.extend((0..sc.preds.len()).filter(|&i| sc.preds[i].class == c).map(|i| (s, i)));
    }
    preds.sort_by(|a, b| {
        let (sa, sb) = (scenes[a.0].preds[a.1].score, scenes[b.0].preds[b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let n_gt = scenes.iter().map(|s| s.gts.iter().filter(|g| g.class == c).count()).sum();
    let tp = preds
        .iter()
        .map(|&(s, i)| {
            let p = &scenes[s].preds[i];
            let best = scenes[s]
                .gts
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class == c && !used[s][*j])
                .filter_map(|(j, g)| matcher.quality(p, g).map(|q| (j, q)))
                .fold(None::<(usize, f64)>, |b, (j, q)| match b {
                    Some((_, bq)) if bq >= q => b,
                    _ => Some((j, q)),
                });
            if let Some((j, _)) = best {
                used[s][j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (tp, n_gt)
}

pub const RECALL_POINTS: usize = 40;

/// Interpolated precision averaged over recall levels `1/40, …, 1`.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut pr = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        pr.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    (1..=RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / RECALL_POINTS as f64;
            pr.iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / RECALL_POINTS as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

pub fn average_precision_scenes(scenes: &[SceneDetections], num_classes: usize, matcher: Matcher) -> Result<ApReport> {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let (tp, n_gt) = class_matches(scenes, c, matcher);
            (n_gt > 0).then(|| ap_from_matches(&tp, n_gt))
        })
        .collect();
    let with_gt: Vec<f64> = per_class.iter().flatten().copied().collect();
    if with_gt.is_empty() {
        return Err(Error::invalid("average precision: no ground-truth boxes"));
    }
    let map = with_gt.iter().sum::<f64>() / with_gt.len() as f64;
    Ok(ApReport { per_class, map })
}

/// Single-scene convenience form.
pub fn average_precision(preds: &[Box3D], gts: &[Box3D], num_classes: usize, matcher: Matcher) -> Result<ApReport> {
    average_precision_scenes(
        &[SceneDetections {
            preds: preds.to_vec(),
            gts: gts.to_vec(),
        }],
        num_classes,
        matcher,
    )
}

/// Fraction of ground-truth boxes matched, class-aware, by the same greedy
/// rule as average precision.
pub fn detection_recall(scenes: &[SceneDetections], num_classes: usize, matcher: Matcher) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for c in 0..num_classes {
        let (tp, n) = class_matches(scenes, c, matcher);
        hit += tp.iter().filter(|&&t| t).count();
        total += n;
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
