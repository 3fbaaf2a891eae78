use super::hungarian::hungarian_match;
use crate::cloud::Point3;
use crate::error::Result;
use crate::model::{Box3D, BoxPrediction};

/// Per-query supervision for the detection head.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// Class index per query; `num_classes` is background.
    pub class: Vec<usize>,
    pub objectness: Vec<f64>,
    /// Matched ground-truth box per query.
    pub assigned: Vec<Option<usize>>,
}

impl DetTargets {
    pub fn matched(&self) -> Vec<(usize, usize)> {
        self.assigned
            .iter()
            .enumerate()
            .filter_map(|(q, g)| g.map(|g| (q, g)))
            .collect()
    }

    /// Center offset from the query reference, log size and `(sin, cos)`
    /// of the yaw, for each matched query in query order.
    pub fn regression(&self, refs: &[Point3], gts: &[Box3D]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut c, mut s, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (q, g) in self.matched() {
            let b = &gts[g];
            c.extend((0..3).map(|a| b.center[a] - refs[q][a]));
            s.extend(b.size.iter().map(|v| v.ln()));
            y.extend([b.yaw.sin(), b.yaw.cos()]);
        }
        (c, s, y)
    }
}

/// `(1 − p_class) + |Δcenter|₁ + |Δsize|₁` between a query's decoded box and
/// a ground-truth box; sizes in meters.
pub fn match_cost(pred: &BoxPrediction, q: usize, gt: &Box3D) -> f64 {
    let l = &pred.class_logits[q];
    let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
    let p = (l[gt.class] - mx).exp() / z;
    let r = pred.refs[q];
    let o = pred.center_offset[q];
    let ls = pred.log_size[q];
    let dc: f64 = (0..3).map(|a| (r[a] + o[a] - gt.center[a]).abs()).sum();
    let ds: f64 = (0..3).map(|a| (ls[a].exp() - gt.size[a]).abs()).sum();
    (1.0 - p) + dc + ds
}

/// Minimum-cost assignment of the first `num_matched` queries to boxes;
/// query `num_matched + k` (a noisy copy of box `k`) is assigned to box
/// `k` directly.
pub fn detection_targets(
    pred: &BoxPrediction,
    gts: &[Box3D],
    num_matched: usize,
    num_classes: usize,
) -> Result<DetTargets> {
    let nq = pred.len();
    let mut assigned = vec![None; nq];
    let g = gts.len();
    let mut cost = Vec::with_capacity(num_matched * g);
    for q in 0..num_matched {
        for b in gts {
            cost.push(match_cost(pred, q, b));
        }
    }
    for (q, gi) in hungarian_match(&cost, num_matched, g)? {
        assigned[q] = Some(gi);
    }
    for (k, slot) in assigned.iter_mut().enumerate().skip(num_matched) {
        let gi = k - num_matched;
        if gi < g {
            *slot = Some(gi);
        }
    }
    let class = assigned
        .iter()
        .map(|a| a.map_or(num_classes, |gi| gts[gi].class))
        .collect();
    let objectness = assigned.iter().map(|a| f64::from(u8::from(a.is_some()))).collect();
    Ok(DetTargets {
        class,
        objectness,
        assigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(refs: Vec<Point3>) -> BoxPrediction {
        let n = refs.len();
        BoxPrediction {
            class_logits: vec![vec![0.0; 3]; n],
            objectness: vec![0.0; n],
            center_offset: vec![[0.0; 3]; n],
            log_size: vec![[0.0; 3]; n],
            yaw: vec![[0.0, 1.0]; n],
            refs,
        }
    }

    #[test]
    fn no_boxes_is_all_background() {
        let t = detection_targets(&pred(vec![[0.0; 3]; 3]), &[], 3, 2).unwrap();
        assert_eq!(t.class, vec![2, 2, 2]);
        assert_eq!(t.objectness, vec![0.0; 3]);
    }

    #[test]
    fn single_pair_and_extras() {
        let gts = [Box3D::new([1.0, 0.0, 0.0], [1.0; 3], 0.0, 1)];
        let t = detection_targets(&pred(vec![[0.0; 3]]), &gts, 1, 2).unwrap();
        assert_eq!(t.assigned, vec![Some(0)]);
        assert_eq!(t.class, vec![1]);
        let (c, s, y) = t.regression(&[[0.0; 3]], &gts);
        assert_eq!(c, vec![1.0, 0.0, 0.0]);
        assert_eq!(s, vec![0.0; 3]);
        assert_eq!(y, vec![0.0, 1.0]);

        // one matched query far away, one noisy copy of the box
        let t = detection_targets(&pred(vec![[50.0, 0.0, 0.0], [1.0, 0.1, 0.0]]), &gts, 1, 2).unwrap();
        assert_eq!(t.assigned, vec![Some(0), Some(0)]);
    }
}
