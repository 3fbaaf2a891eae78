use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, noisy_gt_queries};
use super::losses::{cross_entropy, focal_loss, lovasz_softmax, smooth_l1, uncertainty_weighted};
use super::optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
use super::targets::detection_targets;
use super::TrainConfig;
use crate::autodiff::{init_params, save_checkpoint, Array, Mode, ParamSpec, ParamStore, Tape, Var};
use crate::cloud::Point3;
use crate::data::{write_config_echo, SceneSample};
use crate::error::{Error, Result};
use crate::model::{forward, param_specs, pseudo_foreground_labels, ModelConfig, Task};

pub const LOSS_CSV_HEADER: &str =
    "step,lr,L_cls_s,L_lov_s,L_obj_d,L_cls_d,L_center_d,L_size_d,L_yaw_d,rho_seg,rho_det,total";

const RHO_SEG: &str = "uncertainty.seg";
const RHO_DET: &str = "uncertainty.det";

// independent rng streams derived from the seed
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_QUERIES: u64 = 3;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Model parameters for `task` plus the task log-variances in multi-task
/// mode.
pub fn full_specs(cfg: &ModelConfig, task: Task) -> Vec<ParamSpec> {
    let mut s = param_specs(cfg, task);
    if task == Task::Multi {
        s.push(ParamSpec::zeros(RHO_SEG, 1));
        s.push(ParamSpec::zeros(RHO_DET, 1));
    }
    s
}

/// The parameters `train_loop` starts from.
pub fn init_store(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<ParamStore> {
    init_params(&full_specs(mcfg, tcfg.task), &mut stream(tcfg.seed, STREAM_INIT))
}

/// Coarse grouping of parameter names: `backbone`, `seg`, `fg`, `det` or
/// `uncertainty`.
pub fn param_group(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "seg" => "seg",
        "fg" => "fg",
        "det" => "det",
        "uncertainty" => "uncertainty",
        _ => "backbone",
    }
}

/// The task a parameter store was built for, read from its head groups.
pub fn infer_task(store: &ParamStore) -> Result<Task> {
    let has = |g: &str| store.iter().any(|(n, _)| param_group(n) == g);
    match (has("seg"), has("det"), has("fg")) {
        (true, true, _) => Ok(Task::Multi),
        (true, false, _) => Ok(Task::Seg),
        (false, true, true) => Ok(Task::Det),
        _ => Err(Error::Config("parameters hold no complete task head".into())),
    }
}

/// Loss terms of one scene on the tape. In detection-only mode `cls_s`
/// holds the foreground focal loss that stands in for segmentation.
pub struct LossParts {
    pub cls_s: Option<Var>,
    pub lov_s: Option<Var>,
    pub obj_d: Option<Var>,
    pub cls_d: Option<Var>,
    pub center_d: Option<Var>,
    pub size_d: Option<Var>,
    pub yaw_d: Option<Var>,
    pub seg: Option<Var>,
    pub det: Option<Var>,
    pub total: Var,
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Forward pass and every loss term for one scene. `extra_refs` are the
/// reference points of training-only queries, one per ground-truth box in
/// box order.
pub fn scene_loss(
    tape: &mut Tape<'_>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    scene: &SceneSample,
    extra_refs: &[Point3],
) -> Result<LossParts> {
    let task = tcfg.task;
    let out = forward(tape, mcfg, task, &scene.cloud, extra_refs)?;
    let alpha = Some(tcfg.focal_alpha);
    let gamma = tcfg.focal_gamma;

    let (mut cls_s, mut lov_s, mut seg) = (None, None, None);
    if let Some(logits) = out.seg_logits {
        let labels = scene
            .cloud
            .labels()
            .ok_or_else(|| Error::invalid("segmentation training needs point labels"))?;
        let ce = cross_entropy(tape, logits, labels, tcfg.ignore_id)?;
        let probs = tape.softmax(logits)?;
        let lov = lovasz_softmax(tape, probs, labels, tcfg.ignore_id)?;
        seg = Some(tape.add(ce, lov)?);
        cls_s = Some(ce);
        lov_s = Some(lov);
    }
    if let Some(fg) = out.fg_logits {
        let pseudo: Vec<f64> = pseudo_foreground_labels(scene.cloud.coords(), &scene.boxes)
            .into_iter()
            .map(f64::from)
            .collect();
        let l = focal_loss(tape, fg, &pseudo, alpha, gamma)?;
        cls_s = Some(l);
        seg = Some(l);
    }

    let (mut obj_d, mut cls_d, mut center_d, mut size_d, mut yaw_d, mut det) = (None, None, None, None, None, None);
    if let Some(d) = &out.det {
        let values = d.all_values(tape);
        let nc = mcfg.num_det_classes();
        let t = detection_targets(&values, &scene.boxes, d.num_selected, nc)?;
        let obj = focal_loss(tape, d.objectness, &t.objectness, alpha, gamma)?;
        let cls_t: Vec<u32> = t.class.iter().map(|&c| c as u32).collect();
        let cls = cross_entropy(tape, d.class_logits, &cls_t, None)?;
        let matched: Vec<usize> = t.matched().into_iter().map(|(q, _)| q).collect();
        let (c, s, y) = if matched.is_empty() {
            let z = tape.constant(Array::scalar(0.0));
            (z, z, z)
        } else {
            let (ct, st, yt) = t.regression(&d.queries.refs, &scene.boxes);
            let cp = tape.gather_rows(d.center_offset, &matched)?;
            let sp = tape.gather_rows(d.log_size, &matched)?;
            let yp = tape.gather_rows(d.yaw, &matched)?;
            (
                smooth_l1(tape, cp, &ct, 1.0)?,
                smooth_l1(tape, sp, &st, 1.0)?,
                smooth_l1(tape, yp, &yt, 1.0)?,
            )
        };
        det = Some(sum_vars(tape, &[obj, cls, c, s, y])?);
        obj_d = Some(obj);
        cls_d = Some(cls);
        center_d = Some(c);
        size_d = Some(s);
        yaw_d = Some(y);
    }

    let total = match (task, seg, det) {
        (Task::Multi, Some(s), Some(d)) => {
            let rs = tape.param(RHO_SEG)?;
            let rd = tape.param(RHO_DET)?;
            uncertainty_weighted(tape, &[(s, rs), (d, rd)])?
        }
        (Task::Seg, Some(s), _) => s,
        (Task::Det, Some(s), Some(d)) => tape.add(s, d)?,
        _ => unreachable!("every task produces its loss groups"),
    };
    Ok(LossParts {
        cls_s,
        lov_s,
        obj_d,
        cls_d,
        center_d,
        size_d,
        yaw_d,
        seg,
        det,
        total,
    })
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub cls_s: Option<f64>,
    pub lov_s: Option<f64>,
    pub obj_d: Option<f64>,
    pub cls_d: Option<f64>,
    pub center_d: Option<f64>,
    pub size_d: Option<f64>,
    pub yaw_d: Option<f64>,
    pub rho_seg: Option<f64>,
    pub rho_det: Option<f64>,
    pub total: f64,
}

impl LossReport {
    fn from_parts(step: usize, lr: f64, tape: &Tape<'_>, p: &LossParts, store: &ParamStore) -> Self {
        let v = |x: Option<Var>| x.map(|x| tape.scalar(x));
        let rho = |n: &str| store.get(n).map(|p| p.value().data()[0]);
        Self {
            step,
            lr,
            cls_s: v(p.cls_s),
            lov_s: v(p.lov_s),
            obj_d: v(p.obj_d),
            cls_d: v(p.cls_d),
            center_d: v(p.center_d),
            size_d: v(p.size_d),
            yaw_d: v(p.yaw_d),
            rho_seg: rho(RHO_SEG),
            rho_det: rho(RHO_DET),
            total: tape.scalar(p.total),
        }
    }

    pub fn csv_row(&self) -> String {
        let f = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:e}"));
        format!(
            "{},{:e},{},{},{},{},{},{},{},{},{},{:e}",
            self.step,
            self.lr,
            f(self.cls_s),
            f(self.lov_s),
            f(self.obj_d),
            f(self.cls_d),
            f(self.center_d),
            f(self.size_d),
            f(self.yaw_d),
            f(self.rho_seg),
            f(self.rho_det),
            self.total
        )
    }
}

pub fn write_loss_csv(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    /// Parameter groups that received a gradient at least once.
    pub trained_groups: Vec<&'static str>,
}

fn checkpoint(dir: &Path, epoch: usize, store: &ParamStore, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<PathBuf> {
    let p = dir.join(format!("epoch_{epoch:04}.ckpt"));
    save_checkpoint(store, &p)?;
    write_config_echo(&p.with_extension("toml"), mcfg, tcfg)?;
    Ok(p)
}

/// Mean task losses over a dataset under the given parameters, without
/// augmentation and with noise-free extra queries. Batch statistics are
/// used as in training; nothing is updated.
pub fn evaluate_losses(
    store: &ParamStore,
    dataset: &[SceneSample],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let (mut seg, mut det) = (None::<f64>, None::<f64>);
    for scene in dataset {
        let scene = scene.cropped(tcfg.crop_min, tcfg.crop_max);
        let extra: Vec<Point3> = if tcfg.task.has_det() && tcfg.gt_queries {
            scene.boxes.iter().map(|b| b.center).collect()
        } else {
            Vec::new()
        };
        let mut tape = Tape::new(store, Mode::Train);
        let parts = scene_loss(&mut tape, mcfg, tcfg, &scene, &extra)?;
        if let Some(s) = parts.seg {
            *seg.get_or_insert(0.0) += tape.scalar(s) / dataset.len() as f64;
        }
        if let Some(d) = parts.det {
            *det.get_or_insert(0.0) += tape.scalar(d) / dataset.len() as f64;
        }
    }
    Ok((seg, det))
}

/// Trains from a fresh initialization. One step is one scene; scenes are
/// visited in a seeded shuffle per epoch. When `out_dir` is given a
/// checkpoint is written after every epoch (or once, untrained, when there
/// are no steps) together with `loss.csv`.
pub fn train_loop(
    dataset: &[SceneSample],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut store = init_store(mcfg, tcfg)?;
    let mut order_rng = stream(tcfg.seed, STREAM_ORDER);
    let mut aug_rng = stream(tcfg.seed, STREAM_AUG);
    let mut query_rng = stream(tcfg.seed, STREAM_QUERIES);
    let mut adam = AdamState::new();
    let total = tcfg.total_steps(dataset.len());
    let mut log = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let mut groups: Vec<&'static str> = Vec::new();

    if total == 0 {
        if let Some(d) = out_dir {
            checkpoints.push(checkpoint(d, 0, &store, mcfg, tcfg)?);
        }
    }
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        epoch += 1;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut order_rng);
        for &i in &order {
            if step == total {
                break;
            }
            let mut scene = dataset[i].cropped(tcfg.crop_min, tcfg.crop_max);
            if tcfg.augment {
                scene = augment(&scene, &mut aug_rng, &tcfg.aug);
            }
            let extra = if tcfg.task.has_det() && tcfg.gt_queries {
                noisy_gt_queries(&scene.boxes, tcfg.gt_noise, &mut query_rng)
            } else {
                Vec::new()
            };
            let lr = cosine_lr(step, total, tcfg.lr, tcfg.lr_min);
            let mut tape = Tape::new(&store, Mode::Train);
            let parts = scene_loss(&mut tape, mcfg, tcfg, &scene, &extra)?;
            let report = LossReport::from_parts(step, lr, &tape, &parts, &store);
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (epoch {epoch}, scene {i}): {}",
                    report.csv_row()
                )));
            }
            let mut grads = tape.backward(parts.total)?;
            let norm = grads.param_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm {norm} at step {step} (epoch {epoch}, scene {i})"
                )));
            }
            if let Some(c) = tcfg.grad_clip {
                if norm > c {
                    grads.scale_params(c / norm);
                }
            }
            for (name, _) in grads.params() {
                let g = param_group(name);
                if !groups.contains(&g) {
                    groups.push(g);
                }
            }
            let updates = tape.take_buffer_updates();
            drop(tape);
            adamw_step(&mut store, &grads, &mut adam, lr, tcfg.weight_decay, AdamWConfig::default(), |n| {
                param_group(n) != "uncertainty"
            });
            store.apply_buffer_updates(updates)?;
            log.push(report);
            step += 1;
        }
        if let Some(d) = out_dir {
            checkpoints.push(checkpoint(d, epoch, &store, mcfg, tcfg)?);
        }
    }
    if let Some(d) = out_dir {
        write_loss_csv(&d.join("loss.csv"), &log)?;
    }
    Ok(TrainOutcome {
        store,
        log,
        checkpoints,
        trained_groups: groups,
    })
}
