use crate::model::Box3D;

/// Intersections smaller than this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

type P2 = [f64; 2];

fn cross(o: &P2, a: &P2, b: &P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area, positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
}

/// Sutherland–Hodgman clipping of `subject` by a convex counter-clockwise
/// `clip` polygon.
pub fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cin = cross(&a, &b, &cur) >= 0.0;
            let pin = cross(&a, &b, &prev) >= 0.0;
            if cin != pin {
                // edge prev→cur crosses the clip line
                let dp = cross(&a, &b, &prev);
                let dc = cross(&a, &b, &cur);
                let t = dp / (dp - dc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cin {
                out.push(cur);
            }
        }
    }
    out
}

/// Intersection over union of the two yaw-rotated footprints.
pub fn bev_rotated_iou(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.size[0] * a.size[1];
    let area_b = b.size[0] * b.size[1];
    if !(area_a > AREA_EPS && area_b > AREA_EPS) {
        return 0.0;
    }
    let inter = polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())).max(0.0);
    if inter < AREA_EPS {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression, class-agnostic. Boxes at or below
/// `score_thresh` are dropped first; then, in descending score with ties
/// to the lower input index, a box is kept unless its BEV IoU with an
/// already kept box exceeds `iou_thresh`. Returns kept input indices in
/// keep order.
pub fn nms_indices(boxes: &[Box3D], iou_thresh: f64, score_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].score > score_thresh).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| bev_rotated_iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(boxes: &[Box3D], iou_thresh: f64, score_thresh: f64) -> Vec<Box3D> {
    nms_indices(boxes, iou_thresh, score_thresh)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
