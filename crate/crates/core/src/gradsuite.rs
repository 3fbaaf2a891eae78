//! Named finite-difference checks for every differentiable operator, from
//! tape primitives up to the full multi-task loss of a tiny model.
//!
//! Each case builds its own parameters from the seed and reduces the
//! operator output to a scalar through fixed random weights, so no output
//! entry has a vanishing derivative by symmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_bias, deformable_attention, neighborhood_attention, patt_layer, DeformConfig, PattConfig, ScaleLevel,
};
use crate::autodiff::{gradcheck, init_params, Array, GradCheckOptions, GradReport, ParamStore, Tape, Var};
use crate::cloud::{ball_windows, Point3, PointCloud, VoxelGrid};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::model::{Box3D, ModelConfig, StageConfig, Task};
use crate::train::{
    cross_entropy, focal_loss, full_specs, lovasz_softmax, scene_loss, smooth_l1, uncertainty_weighted, TrainConfig,
};

pub const OPERATORS: &[&str] = &[
    "matmul",
    "softmax",
    "log_softmax",
    "segment_softmax",
    "scatter_max",
    "batch_norm",
    "mlp",
    "attention_bias",
    "neighborhood_attention",
    "patt_layer",
    "deformable_attention",
    "cross_entropy",
    "lovasz_softmax",
    "focal_loss",
    "smooth_l1",
    "uncertainty_weighting",
    "multitask_loss",
];

type Objective = Box<dyn Fn(&mut Tape<'_>) -> Result<Var>>;

struct Case {
    store: ParamStore,
    f: Objective,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Result<()> {
    store.insert(name, Array::new(vec![rows, cols], rand_vec(rng, rows * cols, -1.0, 1.0))?)
}

/// `Σ w ⊙ v` with weights fixed at construction.
fn weighted_sum(tape: &mut Tape<'_>, v: Var, w: &[f64]) -> Result<Var> {
    let p = tape.mul_const(v, w)?;
    Ok(tape.sum(p))
}

fn cloud_coords(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(0.0..side / 2.0)])
        .collect()
}

/// Tiny multi-task model: two stages of width 8, four queries.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        stages: (0..2)
            .map(|s| StageConfig {
                grid: 0.5 * f64::from(1u32 << s),
                window: 8,
                radius: f64::from(1u32 << s),
                layers: 1,
                dim: 8,
            })
            .collect(),
        heads: 2,
        seg_layers: 1,
        dec_layers: 1,
        queries: 4,
        // every point counts as foreground, so query selection does not
        // move under parameter perturbations
        fg_threshold: 1e-6,
        ..ModelConfig::default()
    }
}

/// A 64-point labeled scene with two boxes.
pub fn tiny_scene(seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = vec![
        Box3D::new([1.0, 1.0, 0.5], [1.4, 1.2, 1.0], 0.3, 0),
        Box3D::new([3.0, 3.0, 0.5], [1.0, 1.0, 1.0], -0.2, 1),
    ];
    let coords = cloud_coords(&mut rng, 64, 4.0);
    let labels: Vec<u32> = coords
        .iter()
        .map(|p| match boxes.iter().position(|b| b.contains(p)) {
            Some(0) => 2,
            Some(_) => 3,
            None if p[2] < 0.3 => 0,
            None => 1,
        })
        .collect();
    let feats = rand_vec(&mut rng, 64, 0.0, 1.0);
    let cloud = PointCloud::new(coords, feats, 1)?.with_labels(labels, 5)?;
    Ok(SceneSample { cloud, boxes })
}

fn build(op: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f: Objective = match op {
        "matmul" => {
            param(&mut store, &mut rng, "a", 4, 3)?;
            param(&mut store, &mut rng, "b", 3, 5)?;
            let w = rand_vec(&mut rng, 20, -1.0, 1.0);
            Box::new(move |t| {
                let (a, b) = (t.param("a")?, t.param("b")?);
                let c = t.matmul(a, b)?;
                weighted_sum(t, c, &w)
            })
        }
        "softmax" | "log_softmax" => {
            param(&mut store, &mut rng, "x", 4, 5)?;
            let w = rand_vec(&mut rng, 20, -1.0, 1.0);
            let log = op == "log_softmax";
            Box::new(move |t| {
                let x = t.param("x")?;
                let y = if log { t.log_softmax(x)? } else { t.softmax(x)? };
                weighted_sum(t, y, &w)
            })
        }
        "segment_softmax" => {
            param(&mut store, &mut rng, "x", 9, 2)?;
            let seg = vec![0, 0, 1, 1, 1, 2, 0, 2, 1];
            let w = rand_vec(&mut rng, 18, -1.0, 1.0);
            Box::new(move |t| {
                let x = t.param("x")?;
                let y = t.segment_softmax(x, &seg, 3)?;
                weighted_sum(t, y, &w)
            })
        }
        "scatter_max" => {
            param(&mut store, &mut rng, "x", 8, 3)?;
            let idx = vec![0, 1, 0, 2, 1, 0, 2, 2];
            let w = rand_vec(&mut rng, 9, -1.0, 1.0);
            Box::new(move |t| {
                let x = t.param("x")?;
                let y = t.scatter_max_rows(x, &idx, 3)?;
                weighted_sum(t, y, &w)
            })
        }
        "batch_norm" => {
            param(&mut store, &mut rng, "x", 6, 4)?;
            store.insert("gamma", Array::new(vec![4], rand_vec(&mut rng, 4, 0.5, 1.5))?)?;
            store.insert("beta", Array::new(vec![4], rand_vec(&mut rng, 4, -0.5, 0.5))?)?;
            store.insert_buffer("bn.running_mean", Array::zeros(vec![4]))?;
            store.insert_buffer("bn.running_var", Array::full(vec![4], 1.0))?;
            let w = rand_vec(&mut rng, 24, -1.0, 1.0);
            Box::new(move |t| {
                let (x, g, b) = (t.param("x")?, t.param("gamma")?, t.param("beta")?);
                let y = t.batch_norm(x, g, b, "bn")?;
                weighted_sum(t, y, &w)
            })
        }
        "mlp" => {
            param(&mut store, &mut rng, "x", 5, 3)?;
            param(&mut store, &mut rng, "w1", 3, 6)?;
            param(&mut store, &mut rng, "b1", 1, 6)?;
            param(&mut store, &mut rng, "w2", 6, 2)?;
            param(&mut store, &mut rng, "b2", 1, 2)?;
            let w = rand_vec(&mut rng, 10, -1.0, 1.0);
            Box::new(move |t| {
                let x = t.param("x")?;
                let (w1, b1, w2, b2) = (t.param("w1")?, t.param("b1")?, t.param("w2")?, t.param("b2")?);
                let y = t.mlp2(x, w1, b1, w2, b2)?;
                weighted_sum(t, y, &w)
            })
        }
        "attention_bias" => {
            param(&mut store, &mut rng, "x", 6, 8)?;
            param(&mut store, &mut rng, "wr", 8, 2 * 3)?;
            param(&mut store, &mut rng, "r", 6, 3)?;
            let w = rand_vec(&mut rng, 12, -1.0, 1.0);
            Box::new(move |t| {
                let (x, wr, r) = (t.param("x")?, t.param("wr")?, t.param("r")?);
                let b = attention_bias(t, x, wr, r, 2)?;
                weighted_sum(t, b, &w)
            })
        }
        "neighborhood_attention" | "patt_layer" => {
            let n = 12;
            let coords = cloud_coords(&mut rng, n, 2.0);
            let windows = ball_windows(&coords, 1.0, 6)?;
            let cfg = PattConfig::new(8, 2);
            store = init_params(&cfg.layer_specs("l"), &mut rng)?;
            param(&mut store, &mut rng, "x", n, 8)?;
            let w = rand_vec(&mut rng, n * 8, -1.0, 1.0);
            let full = op == "patt_layer";
            Box::new(move |t| {
                let x = t.param("x")?;
                let y = if full {
                    patt_layer(t, x, &coords, &windows, "l", &cfg)?
                } else {
                    neighborhood_attention(t, x, &coords, &windows, "l", &cfg)?
                };
                weighted_sum(t, y, &w)
            })
        }
        "deformable_attention" => {
            let cfg = DeformConfig {
                dim: 8,
                heads: 2,
                scale_dims: [8, 4],
                // windows cover each scale cloud, so sampled sets stay fixed
                windows: [16, 16],
                radii: [5.0, 5.0],
                pos_dim: 4,
                pos_hidden: 4,
            };
            store = init_params(&cfg.specs("da"), &mut rng)?;
            let c0 = cloud_coords(&mut rng, 10, 2.0);
            let c1 = cloud_coords(&mut rng, 5, 2.0);
            let refs = cloud_coords(&mut rng, 3, 2.0);
            param(&mut store, &mut rng, "q", 3, 8)?;
            param(&mut store, &mut rng, "f0", 10, 8)?;
            param(&mut store, &mut rng, "f1", 5, 4)?;
            let g0 = VoxelGrid::build(&c0, 5.0)?;
            let g1 = VoxelGrid::build(&c1, 5.0)?;
            let w = rand_vec(&mut rng, 24, -1.0, 1.0);
            Box::new(move |t| {
                let (q, f0, f1) = (t.param("q")?, t.param("f0")?, t.param("f1")?);
                let levels = [
                    ScaleLevel {
                        coords: &c0,
                        grid: &g0,
                        feats: f0,
                    },
                    ScaleLevel {
                        coords: &c1,
                        grid: &g1,
                        feats: f1,
                    },
                ];
                let y = deformable_attention(t, q, &refs, &levels, "da", &cfg)?;
                weighted_sum(t, y, &w)
            })
        }
        "cross_entropy" => {
            param(&mut store, &mut rng, "x", 7, 4)?;
            let labels: Vec<u32> = (0..7).map(|_| rng.random_range(0..4)).collect();
            Box::new(move |t| {
                let x = t.param("x")?;
                cross_entropy(t, x, &labels, None)
            })
        }
        "lovasz_softmax" => {
            param(&mut store, &mut rng, "x", 10, 3)?;
            let labels: Vec<u32> = (0..10).map(|i| (i % 3) as u32).collect();
            Box::new(move |t| {
                let x = t.param("x")?;
                let p = t.softmax(x)?;
                lovasz_softmax(t, p, &labels, None)
            })
        }
        "focal_loss" => {
            param(&mut store, &mut rng, "x", 8, 1)?;
            let targets: Vec<f64> = (0..8).map(|i| f64::from(i % 2)).collect();
            Box::new(move |t| {
                let x = t.param("x")?;
                focal_loss(t, x, &targets, Some(0.25), 2.0)
            })
        }
        "smooth_l1" => {
            param(&mut store, &mut rng, "x", 6, 3)?;
            // differences away from the transition at |d| = beta
            let target: Vec<f64> = (0..18)
                .map(|k| {
                    let v = store.get("x").unwrap().value().data()[k];
                    v - if k % 2 == 0 { 0.3 } else { 2.1 }
                })
                .collect();
            Box::new(move |t| {
                let x = t.param("x")?;
                smooth_l1(t, x, &target, 1.0)
            })
        }
        "uncertainty_weighting" => {
            store.insert("l1", Array::scalar(1.3))?;
            store.insert("l2", Array::scalar(0.4))?;
            store.insert("r1", Array::scalar(0.2))?;
            store.insert("r2", Array::scalar(-0.7))?;
            Box::new(|t| {
                let (l1, l2, r1, r2) = (t.param("l1")?, t.param("l2")?, t.param("r1")?, t.param("r2")?);
                uncertainty_weighted(t, &[(l1, r1), (l2, r2)])
            })
        }
        "multitask_loss" => {
            let mcfg = tiny_model();
            let tcfg = TrainConfig {
                task: Task::Multi,
                ..TrainConfig::default()
            };
            store = init_params(&full_specs(&mcfg, Task::Multi), &mut rng)?;
            for (name, v) in [("uncertainty.seg", 0.3), ("uncertainty.det", -0.2)] {
                store.get_mut(name).unwrap().value_mut().data_mut()[0] = v;
            }
            let scene = tiny_scene(seed)?;
            let extras: Vec<Point3> = scene.boxes.iter().map(|b| b.center).collect();
            Box::new(move |t| Ok(scene_loss(t, &mcfg, &tcfg, &scene, &extras)?.total))
        }
        other => return Err(Error::invalid(format!("unknown gradcheck operator `{other}`"))),
    };
    Ok(Case { store, f })
}

/// Finite-difference check of one named operator.
pub fn check_operator(op: &str, seed: u64, opts: GradCheckOptions) -> Result<GradReport> {
    let case = build(op, seed)?;
    gradcheck(&case.store, opts, case.f)
}

/// Operators selected by `all` or a single name.
pub fn select_operators(sel: &str) -> Result<Vec<&'static str>> {
    if sel == "all" {
        return Ok(OPERATORS.to_vec());
    }
    OPERATORS
        .iter()
        .find(|&&o| o == sel)
        .map(|&o| vec![o])
        .ok_or_else(|| Error::invalid(format!("unknown gradcheck operator `{sel}`; expected all or one of {}", OPERATORS.join(", "))))
}
