//! C interface to `patt`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_new`/`*_load` function and released by the matching `*_free`. Every
//! fallible call returns a [`PattStatus`]; on failure a message describing
//! the most recent error on the calling thread is available from
//! [`patt_last_error`]. Output pointers are written only on success. No
//! panic unwinds into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use patt::autodiff::{load_checkpoint, ParamStore};
use patt::cloud::{ball_windows, knn_query, NeighborWindows, PointCloud};
use patt::data::{load_points, parse_config};
use patt::eval::{bev_rotated_iou, predict, EvalConfig, Prediction};
use patt::model::{Box3D, ModelConfig, Task};
use patt::train::infer_task;
use patt::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PattStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file was malformed.
    Format = 4,
    /// A configuration was rejected.
    Config = 5,
    /// A computation produced NaN or infinity.
    NonFinite = 6,
    /// A caller buffer was too small; the required size was still reported.
    BufferTooSmall = 7,
    /// An internal invariant failed; the library state is unaffected.
    Internal = 8,
}

/// Neighbor search used by [`patt_neighbor_windows`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PattSearch {
    Voxel = 0,
    Knn = 1,
}

/// An oriented 3D box; `yaw` rotates about the vertical axis.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PattBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    pub class_id: u32,
}

impl From<&Box3D> for PattBox {
    fn from(b: &Box3D) -> Self {
        Self {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            score: b.score,
            class_id: b.class as u32,
        }
    }
}

impl From<&PattBox> for Box3D {
    fn from(b: &PattBox) -> Self {
        Box3D::new(b.center, b.size, b.yaw, b.class_id as usize).with_score(b.score)
    }
}

/// A point cloud with per-point features.
pub struct PattCloud(PointCloud);

/// Trained parameters together with the network configuration.
pub struct PattModel {
    store: ParamStore,
    config: ModelConfig,
    task: Task,
}

/// Per-point labels (segmentation models) and boxes (detection models).
pub struct PattPrediction(Prediction);

/// Neighbor lists, one per point.
pub struct PattWindows(NeighborWindows);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PattStatus {
    match e {
        Error::Io { .. } => PattStatus::Io,
        Error::Format { .. } | Error::Parse { .. } => PattStatus::Format,
        Error::Config(_) | Error::ConfigType { .. } => PattStatus::Config,
        Error::NonFinite(_) => PattStatus::NonFinite,
        _ => PattStatus::InvalidArgument,
    }
}

struct Fail(PattStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: PattStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PattStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PattStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PattStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(PattStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PattStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn patt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null when none has
/// failed. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn patt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a cloud from `n` xyz triples and `n × channels` features, both
/// row-major. `feats` may be null when `channels` is 0.
///
/// # Safety
/// `xyz` must hold `3n` doubles and `feats` `n × channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn patt_cloud_new(
    xyz: *const f64,
    n: usize,
    feats: *const f64,
    channels: usize,
    out: *mut *mut PattCloud,
) -> PattStatus {
    guard(|| {
        non_null(out, "out")?;
        let n3 = n
            .checked_mul(3)
            .ok_or_else(|| fail(PattStatus::InvalidArgument, "n overflows"))?;
        let xyz = slice_arg(xyz, n3, "xyz")?;
        let nf = n
            .checked_mul(channels)
            .ok_or_else(|| fail(PattStatus::InvalidArgument, "n x channels overflows"))?;
        let feats = slice_arg(feats, nf, "feats")?;
        let coords = xyz.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let cloud = PointCloud::new(coords, feats.to_vec(), channels)?;
        *out = boxed(PattCloud(cloud));
        Ok(())
    })
}

/// Reads a binary point file (x, y, z, intensity as little-endian floats).
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn patt_cloud_load(path: *const c_char, out: *mut *mut PattCloud) -> PattStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path, "path")?;
        *out = boxed(PattCloud(load_points(&p)?));
        Ok(())
    })
}

/// Number of points, 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_cloud_len(cloud: *const PattCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn patt_cloud_free(cloud: *mut PattCloud) {
    release(cloud);
}

/// Loads a checkpoint and the configuration it was trained with. The task
/// is inferred from the stored heads.
///
/// # Safety
/// Both paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn patt_model_load(
    checkpoint: *const c_char,
    config: *const c_char,
    out: *mut *mut PattModel,
) -> PattStatus {
    guard(|| {
        non_null(out, "out")?;
        let ck = path_arg(checkpoint, "checkpoint")?;
        let cfg = parse_config(&path_arg(config, "config")?)?;
        let store = load_checkpoint(&ck)?;
        let task = infer_task(&store)?;
        *out = boxed(PattModel {
            store,
            config: cfg.model,
            task,
        });
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn patt_model_free(model: *mut PattModel) {
    release(model);
}

/// Runs inference. Boxes scoring at or below `score_threshold` are dropped
/// and the rest pass through non-maximum suppression at `nms_iou`.
///
/// # Safety
/// `model` and `cloud` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn patt_model_predict(
    model: *const PattModel,
    cloud: *const PattCloud,
    score_threshold: f64,
    nms_iou: f64,
    out: *mut *mut PattPrediction,
) -> PattStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(model, "model")?;
        non_null(cloud, "cloud")?;
        let (m, c) = (&*model, &*cloud);
        let ecfg = EvalConfig {
            score_threshold,
            nms_iou,
            ..EvalConfig::default()
        };
        let p = predict(&m.store, &m.config, m.task, &c.0, &ecfg)?;
        *out = boxed(PattPrediction(p));
        Ok(())
    })
}

/// Copies per-point labels into `labels` (capacity `cap`) and reports the
/// count in `len`. A null `labels` only queries the count. Models without a
/// segmentation head report 0.
///
/// # Safety
/// `pred` must be a live handle; `labels` must hold `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn patt_prediction_labels(
    pred: *const PattPrediction,
    labels: *mut u32,
    cap: usize,
    len: *mut usize,
) -> PattStatus {
    guard(|| {
        non_null(pred, "prediction")?;
        non_null(len, "len")?;
        let seg = (*pred).0.seg.as_deref().unwrap_or(&[]);
        *len = seg.len();
        if labels.is_null() {
            return Ok(());
        }
        if cap < seg.len() {
            return Err(fail(PattStatus::BufferTooSmall, format!("need {} labels, buffer holds {cap}", seg.len())));
        }
        ptr::copy_nonoverlapping(seg.as_ptr(), labels, seg.len());
        Ok(())
    })
}

/// Number of boxes, 0 for a null handle.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_prediction_num_boxes(pred: *const PattPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.0.boxes.len())
}

/// Box `index`, in descending score order.
///
/// # Safety
/// `pred` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_prediction_box(pred: *const PattPrediction, index: usize, out: *mut PattBox) -> PattStatus {
    guard(|| {
        non_null(pred, "prediction")?;
        non_null(out, "out")?;
        let boxes = &(*pred).0.boxes;
        let b = boxes.get(index).ok_or_else(|| {
            fail(PattStatus::InvalidArgument, format!("box {index} of {}", boxes.len()))
        })?;
        *out = PattBox::from(b);
        Ok(())
    })
}

/// # Safety
/// `pred` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn patt_prediction_free(pred: *mut PattPrediction) {
    release(pred);
}

/// Attention windows of every point: up to `m` neighbors within `radius`
/// (voxel search) or exactly `min(m, n)` nearest neighbors (kNN, `radius`
/// ignored).
///
/// # Safety
/// `cloud` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_neighbor_windows(
    cloud: *const PattCloud,
    search: PattSearch,
    radius: f64,
    m: usize,
    out: *mut *mut PattWindows,
) -> PattStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(cloud, "cloud")?;
        let coords = (*cloud).0.coords();
        let w = match search {
            PattSearch::Voxel => ball_windows(coords, radius, m)?,
            PattSearch::Knn => {
                let all: Vec<usize> = (0..coords.len()).collect();
                knn_query(coords, &all, m.min(coords.len()))?
            }
        };
        *out = boxed(PattWindows(w));
        Ok(())
    })
}

/// Number of windows (one per point), 0 for a null handle.
///
/// # Safety
/// `w` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_windows_len(w: *const PattWindows) -> usize {
    w.as_ref().map_or(0, |w| w.0.len())
}

/// Borrows window `i`: ascending point indices, valid while `w` lives.
///
/// # Safety
/// `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn patt_windows_get(
    w: *const PattWindows,
    i: usize,
    indices: *mut *const usize,
    len: *mut usize,
) -> PattStatus {
    guard(|| {
        non_null(w, "windows")?;
        non_null(indices, "indices")?;
        non_null(len, "len")?;
        let w = &(*w).0;
        if i >= w.len() {
            return Err(fail(PattStatus::InvalidArgument, format!("window {i} of {}", w.len())));
        }
        let s = w.window(i);
        *indices = s.as_ptr();
        *len = s.len();
        Ok(())
    })
}

/// # Safety
/// `w` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn patt_windows_free(w: *mut PattWindows) {
    release(w);
}

/// Birds-eye intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn patt_bev_iou(a: *const PattBox, b: *const PattBox, out: *mut f64) -> PattStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        *out = bev_rotated_iou(&Box3D::from(&*a), &Box3D::from(&*b));
        Ok(())
    })
}
