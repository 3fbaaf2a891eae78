use std::fs;
use std::path::{Path, PathBuf};

use super::synth::SEMANTIC_CLASS_NAMES;
use super::SceneSample;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::model::{wrap_angle, Box3D};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `N × 4` little-endian `f32`: x, y, z, intensity. The intensity is the
/// first feature channel, 0 without features.
pub fn save_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut b = Vec::with_capacity(cloud.len() * 16);
    for i in 0..cloud.len() {
        let p = cloud.coords()[i];
        let inten = cloud.feat_row(i).first().copied().unwrap_or(0.0);
        for v in [p[0], p[1], p[2], inten] {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write(path, &b)
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    let b = read(path)?;
    if b.len() % 16 != 0 {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} bytes is not a whole number of 16-byte points", b.len()),
        });
    }
    let n = b.len() / 16;
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for rec in b.chunks_exact(16) {
        let f = |k: usize| f64::from(f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        coords.push([f(0), f(1), f(2)]);
        feats.push(f(3));
    }
    PointCloud::new(coords, feats, 1).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// `N` little-endian `u32`.
pub fn save_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let b: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(path, &b)
}

pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let b = read(path)?;
    if b.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} bytes is not a whole number of 4-byte labels", b.len()),
        });
    }
    Ok(b.chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// One box per line: `cx cy cz dx dy dz yaw class_id`, yaw wrapped into
/// `(−π, π]`. Values use the shortest decimal that reads back exactly.
pub fn save_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        let [cx, cy, cz] = b.center;
        let [dx, dy, dz] = b.size;
        s.push_str(&format!(
            "{cx} {cy} {cz} {dx} {dy} {dz} {} {}\n",
            wrap_angle(b.yaw),
            b.class
        ));
    }
    write(path, s.as_bytes())
}

pub fn load_boxes(path: &Path) -> Result<Vec<Box3D>> {
    let b = read(path)?;
    let text = String::from_utf8(b).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", tok.len())));
        }
        let mut v = [0.0; 7];
        for (k, t) in tok[..7].iter().enumerate() {
            v[k] = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("field {} is not a finite number: {t:?}", k + 1)))?;
        }
        let class: usize = tok[7]
            .parse()
            .map_err(|_| err(format!("class id is not a non-negative integer: {:?}", tok[7])))?;
        if v[3..6].iter().any(|s| *s <= 0.0) {
            return Err(err("box sizes must be positive".into()));
        }
        out.push(Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class));
    }
    Ok(out)
}

/// `points/NNNN.bin`, `labels/NNNN.label`, `boxes/NNNN.txt` under `root`.
pub fn scene_paths(root: &Path, index: usize) -> [PathBuf; 3] {
    [
        root.join("points").join(format!("{index:04}.bin")),
        root.join("labels").join(format!("{index:04}.label")),
        root.join("boxes").join(format!("{index:04}.txt")),
    ]
}

fn make_dirs(root: &Path) -> Result<()> {
    for d in ["points", "labels", "boxes"] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn save_scene(root: &Path, index: usize, scene: &SceneSample) -> Result<()> {
    make_dirs(root)?;
    let [p, l, b] = scene_paths(root, index);
    save_points(&p, &scene.cloud)?;
    save_labels(&l, scene.labels())?;
    save_boxes(&b, &scene.boxes)
}

pub fn load_scene(root: &Path, index: usize) -> Result<SceneSample> {
    let [p, l, b] = scene_paths(root, index);
    let cloud = load_points(&p)?;
    let labels = load_labels(&l)?;
    if labels.len() != cloud.len() {
        return Err(Error::Format {
            path: l,
            msg: format!("{} labels for {} points", labels.len(), cloud.len()),
        });
    }
    let cloud = cloud
        .with_labels(labels, SEMANTIC_CLASS_NAMES.len() as u32)
        .map_err(|e| Error::Format {
            path: l.clone(),
            msg: e.to_string(),
        })?;
    let boxes = load_boxes(&b)?;
    Ok(SceneSample { cloud, boxes })
}

/// Writes the dataset directories (even when `scenes` is empty).
pub fn save_dataset(root: &Path, scenes: &[SceneSample]) -> Result<()> {
    make_dirs(root)?;
    scenes.iter().enumerate().try_for_each(|(i, s)| save_scene(root, i, s))
}

/// Loads scenes `0000, 0001, …` for every point file present.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneSample>> {
    let dir = root.join("points");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut idx = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".bin") {
            let i: usize = stem.parse().map_err(|_| Error::Format {
                path: e.path(),
                msg: "point files must be named NNNN.bin".into(),
            })?;
            idx.push(i);
        }
    }
    idx.sort_unstable();
    if let Some(pos) = idx.iter().enumerate().position(|(k, &i)| k != i) {
        return Err(Error::Format {
            path: dir,
            msg: format!("scene index {pos:04} is missing"),
        });
    }
    idx.into_iter().map(|i| load_scene(root, i)).collect()
}
