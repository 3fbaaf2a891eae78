use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SceneSample;
use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::model::Box3D;

pub const SEMANTIC_CLASS_NAMES: [&str; 5] = ["ground", "manmade", "car", "pedestrian", "cyclist"];
pub const DET_CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];
/// Semantic ids of the detection classes, in detection-class order.
pub const THING_IDS: [u32; 3] = [2, 3, 4];

const GROUND: u32 = 0;
const MANMADE: u32 = 1;
const INTENSITY: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
const OBJECT_GAP: f64 = 0.3;
const PLACEMENT_TRIES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Ground-plane extent in x and y, meters.
    pub range_min: [f64; 2],
    pub range_max: [f64; 2],
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Inclusive wall count range.
    pub walls: [usize; 2],
    /// Wall points per square meter of wall face.
    pub wall_density: f64,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    /// Object points per square meter of box surface.
    pub object_density: f64,
    pub min_object_points: usize,
    /// Mean box size per detection class.
    pub sizes: [[f64; 3]; 3],
    /// Relative uniform jitter on each box dimension.
    pub size_jitter: f64,
    /// Yaw range, radians.
    pub yaw_range: [f64; 2],
    /// Gaussian coordinate noise, meters.
    pub noise: f64,
    pub intensity_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            range_min: [-20.0, -20.0],
            range_max: [20.0, 20.0],
            ground_density: 1.5,
            walls: [1, 3],
            wall_density: 3.0,
            objects: [2, 6],
            object_density: 12.0,
            min_object_points: 12,
            sizes: [[4.2, 1.8, 1.6], [0.8, 0.7, 1.75], [1.8, 0.7, 1.6]],
            size_jitter: 0.1,
            yaw_range: [-PI, PI],
            noise: 0.02,
            intensity_noise: 0.05,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if (0..2).any(|a| !(self.range_min[a] < self.range_max[a])) {
            return bad("synthetic range extents must be ordered");
        }
        if !(self.ground_density > 0.0 && self.wall_density > 0.0 && self.object_density > 0.0) {
            return bad("synthetic densities must be positive");
        }
        if self.walls[0] > self.walls[1] || self.objects[0] > self.objects[1] {
            return bad("synthetic count ranges must be ordered");
        }
        if !(self.noise >= 0.0 && self.intensity_noise >= 0.0) {
            return bad("synthetic noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.size_jitter) || self.sizes.iter().flatten().any(|s| !(*s > 0.0)) {
            return bad("box sizes must stay positive");
        }
        if self.yaw_range[0] > self.yaw_range[1] {
            return bad("yaw range must be ordered");
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Gauss(Option<Normal<f64>>);

impl Gauss {
    fn new(sigma: f64) -> Self {
        Gauss((sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma checked positive")))
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.0.as_ref().map_or(0.0, |n| n.sample(rng))
    }

    fn jitter<R: Rng + ?Sized>(&self, p: Point3, rng: &mut R) -> Point3 {
        [p[0] + self.draw(rng), p[1] + self.draw(rng), p[2] + self.draw(rng)]
    }
}

fn place_boxes<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<Box3D> {
    let k = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(k);
    for _ in 0..k {
        let class = rng.random_range(0..DET_CLASS_NAMES.len());
        let size = cfg.sizes[class].map(|s| s * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter)));
        let yaw = uniform(rng, cfg.yaw_range[0], cfg.yaw_range[1]);
        let r = 0.5 * size[0].hypot(size[1]);
        for _ in 0..PLACEMENT_TRIES {
            let lo = [cfg.range_min[0] + r, cfg.range_min[1] + r];
            let hi = [cfg.range_max[0] - r, cfg.range_max[1] - r];
            if lo[0] > hi[0] || lo[1] > hi[1] {
                break;
            }
            let c = [uniform(rng, lo[0], hi[0]), uniform(rng, lo[1], hi[1]), 0.5 * size[2]];
            let cand = Box3D::new(c, size, yaw, class);
            let clear = boxes.iter().all(|b| {
                let rb = 0.5 * b.size[0].hypot(b.size[1]);
                b.bev_center_dist(&cand) > r + rb + OBJECT_GAP
            });
            if clear {
                boxes.push(cand);
                break;
            }
        }
    }
    boxes
}

/// Samples a point uniformly on the five visible faces of a box (no
/// bottom), in box-local coordinates.
fn surface_point<R: Rng + ?Sized>(size: &[f64; 3], rng: &mut R) -> Point3 {
    let [dx, dy, dz] = *size;
    let areas = [dy * dz, dy * dz, dx * dz, dx * dz, dx * dy];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = areas.len() - 1;
    for (f, a) in areas.iter().enumerate() {
        if pick < *a {
            face = f;
            break;
        }
        pick -= a;
    }
    let (hx, hy, hz) = (0.5 * dx, 0.5 * dy, 0.5 * dz);
    let u = |rng: &mut R, h: f64| rng.random_range(-h..=h);
    match face {
        0 => [hx, u(rng, hy), u(rng, hz)],
        1 => [-hx, u(rng, hy), u(rng, hz)],
        2 => [u(rng, hx), hy, u(rng, hz)],
        3 => [u(rng, hx), -hy, u(rng, hz)],
        _ => [u(rng, hx), u(rng, hy), hz],
    }
}

/// A synthetic scene: a ground plane, a few vertical walls and oriented
/// objects sampled on their surfaces. Ground and wall points that land
/// inside a box are discarded, so every point inside a box belongs to it.
pub fn synth_scene<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SceneSample> {
    cfg.validate()?;
    let gauss = Gauss::new(cfg.noise);
    let inorm = Gauss::new(cfg.intensity_noise);
    let boxes = place_boxes(cfg, rng);
    let in_box = |p: &Point3| boxes.iter().any(|b| b.contains(p));

    let mut coords: Vec<Point3> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();

    let area = (cfg.range_max[0] - cfg.range_min[0]) * (cfg.range_max[1] - cfg.range_min[1]);
    let n_ground = (cfg.ground_density * area).round() as usize;
    for _ in 0..n_ground {
        let p = [
            uniform(rng, cfg.range_min[0], cfg.range_max[0]),
            uniform(rng, cfg.range_min[1], cfg.range_max[1]),
            0.0,
        ];
        let p = gauss.jitter(p, rng);
        if !in_box(&p) {
            coords.push(p);
            labels.push(GROUND);
        }
    }

    let n_walls = rng.random_range(cfg.walls[0]..=cfg.walls[1]);
    for _ in 0..n_walls {
        let c = [
            uniform(rng, cfg.range_min[0], cfg.range_max[0]),
            uniform(rng, cfg.range_min[1], cfg.range_max[1]),
        ];
        let len = uniform(rng, 3.0, 10.0);
        let height = uniform(rng, 1.5, 3.0);
        let (s, co) = uniform(rng, 0.0, PI).sin_cos();
        let n = (cfg.wall_density * len * height).round() as usize;
        for _ in 0..n {
            let t = uniform(rng, -0.5 * len, 0.5 * len);
            let p = [c[0] + co * t, c[1] + s * t, uniform(rng, 0.0, height)];
            let p = gauss.jitter(p, rng);
            if !in_box(&p) {
                coords.push(p);
                labels.push(MANMADE);
            }
        }
    }

    for b in &boxes {
        let [dx, dy, dz] = b.size;
        let surf = 2.0 * (dy * dz + dx * dz) + dx * dy;
        let n = ((cfg.object_density * surf).round() as usize).max(cfg.min_object_points);
        for _ in 0..n {
            let local = surface_point(&b.size, rng);
            coords.push(gauss.jitter(b.from_local(&local), rng));
            labels.push(THING_IDS[b.class]);
        }
    }

    let feats: Vec<f64> = labels
        .iter()
        .map(|&l| INTENSITY[l as usize] + inorm.draw(rng))
        .collect();
    let cloud = PointCloud::new(coords, feats, 1)?.with_labels(labels, SEMANTIC_CLASS_NAMES.len() as u32)?;
    Ok(SceneSample { cloud, boxes })
}

/// `count` scenes; scene `i` draws from stream `i` of a generator seeded
/// with `cfg.seed`, so it does not depend on `count`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            synth_scene(cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pseudo_foreground_labels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_objects() {
        let cfg = SynthConfig {
            objects: [0, 0],
            ..SynthConfig::default()
        };
        let s = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.labels().iter().all(|&l| l < 2));
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_points_lie_on_surfaces() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let s = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(!s.boxes.is_empty());
        let thing: Vec<u8> = s.labels().iter().map(|l| u8::from(THING_IDS.contains(l))).collect();
        assert_eq!(pseudo_foreground_labels(s.cloud.coords(), &s.boxes), thing);
        for (p, &l) in s.cloud.coords().iter().zip(s.labels()) {
            if let Some(c) = THING_IDS.iter().position(|&t| t == l) {
                let b = s.boxes.iter().find(|b| b.class == c && b.contains(p)).unwrap();
                let q = b.to_local(p);
                let on_face = (0..3).any(|a| ((q[a].abs() - 0.5 * b.size[a]).abs()) < 1e-9);
                assert!(on_face);
            }
        }
    }

    #[test]
    fn rejects_bad_extents() {
        let cfg = SynthConfig {
            range_min: [1.0, 0.0],
            range_max: [0.0, 1.0],
            ..SynthConfig::default()
        };
        assert!(synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
