use std::f64::consts::PI;

use crate::cloud::Point3;

/// Membership tolerance for points lying on a box face.
pub const BOX_EPS: f64 = 1e-9;

/// Oriented 3D box: center, full extents along the box axes, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64, class: usize) -> Self {
        Self {
            center,
            size,
            yaw,
            class,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// `p` expressed in the box frame.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn from_local(&self, l: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            self.center[2] + l[2],
        ]
    }

    /// Inclusive containment, with [`BOX_EPS`] slack on every face.
    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a] + BOX_EPS)
    }

    /// Bird's-eye footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let (s, c) = self.yaw.sin_cos();
        [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)].map(|(x, y)| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        })
    }

    pub fn bev_center_dist(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Raw detection-head outputs for a set of queries, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    /// `[Q, classes + 1]`, the last column is background.
    pub class_logits: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
    /// Offset from the query reference point, meters.
    pub center_offset: Vec<[f64; 3]>,
    pub log_size: Vec<[f64; 3]>,
    /// `(sin, cos)` of the yaw, unnormalized.
    pub yaw: Vec<[f64; 2]>,
    pub refs: Vec<Point3>,
}

impl BoxPrediction {
    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }

    /// Best foreground class and its softmax probability (background
    /// included in the normalization, excluded from the argmax).
    pub fn best_class(&self, k: usize) -> (usize, f64) {
        let l = &self.class_logits[k];
        let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        let fg = &l[..l.len() - 1];
        let (c, v) = fg
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        (c, (v - mx).exp() / z)
    }

    pub fn decode(&self, k: usize) -> Box3D {
        let r = self.refs[k];
        let o = self.center_offset[k];
        let ls = self.log_size[k];
        let [s, c] = self.yaw[k];
        let (class, p) = self.best_class(k);
        let obj = 1.0 / (1.0 + (-self.objectness[k]).exp());
        Box3D {
            center: [r[0] + o[0], r[1] + o[1], r[2] + o[2]],
            size: [ls[0].exp(), ls[1].exp(), ls[2].exp()],
            yaw: s.atan2(c),
            class,
            score: obj * p,
        }
    }
}

/// Boxes whose score `sigmoid(objectness) * max foreground class prob`
/// exceeds `score_threshold`, in query order.
pub fn decode_boxes(preds: &BoxPrediction, score_threshold: f64) -> Vec<Box3D> {
    (0..preds.len())
        .map(|k| preds.decode(k))
        .filter(|b| b.score > score_threshold)
        .collect()
}

/// 1 for points inside any box (inclusive), else 0.
pub fn pseudo_foreground_labels(coords: &[Point3], boxes: &[Box3D]) -> Vec<u8> {
    coords
        .iter()
        .map(|p| u8::from(boxes.iter().any(|b| b.contains(p))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(obj: f64, logsize: [f64; 3], yaw: [f64; 2]) -> BoxPrediction {
        BoxPrediction {
            class_logits: vec![vec![5.0, 0.0, 0.0, 0.0]],
            objectness: vec![obj],
            center_offset: vec![[1.0, 0.0, 0.0]],
            log_size: vec![logsize],
            yaw: vec![yaw],
            refs: vec![[1.0, 2.0, 3.0]],
        }
    }

    #[test]
    fn decode_examples() {
        assert!(decode_boxes(&pred(-1e3, [0.0; 3], [0.0, 1.0]), 0.2).is_empty());
        let b = decode_boxes(&pred(10.0, [0.0; 3], [1.0, 0.0]), 0.2);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].size, [1.0, 1.0, 1.0]);
        assert!((b[0].yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(b[0].center, [2.0, 2.0, 3.0]);
        assert_eq!(b[0].class, 0);
    }

    #[test]
    fn pseudo_labels() {
        let b = Box3D::new([1.0, 1.0, 0.5], [2.0, 1.0, 1.0], 0.7, 0);
        let pts = [b.center, [10.0, 0.0, 0.0], b.from_local(&[1.0, 0.5, -0.5])];
        assert_eq!(pseudo_foreground_labels(&pts, &[b]), vec![1, 0, 1]);
    }

    #[test]
    fn wrap() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
    }
}
