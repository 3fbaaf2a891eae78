use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use toml::{Table, Value};

use super::synth::{SynthConfig, DET_CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SearchMethod, StageConfig, Task};
use crate::train::TrainConfig;

/// Every accepted key. Anything else in a config file is rejected.
pub const CONFIG_KEYS: &[&str] = &[
    // model
    "stages",
    "grid_size",
    "grid_sizes",
    "radius",
    "radii",
    "window_size",
    "window_sizes",
    "layers",
    "stage_layers",
    "channels",
    "stage_channels",
    "heads",
    "seg_layers",
    "dec_layers",
    "queries",
    "fg_threshold",
    "search",
    // training
    "task",
    "optimizer",
    "schedule",
    "lr",
    "lr_min",
    "weight_decay",
    "epochs",
    "max_steps",
    "augment",
    "aug_scale",
    "aug_rotate",
    "aug_flip",
    "range_min",
    "range_max",
    "seed",
    "gt_queries",
    "gt_noise",
    "focal_alpha",
    "focal_gamma",
    "ignore_id",
    "grad_clip",
    // synthetic data
    "synth_range_min",
    "synth_range_max",
    "ground_density",
    "wall_count",
    "wall_density",
    "object_count",
    "object_density",
    "min_object_points",
    "car_size",
    "pedestrian_size",
    "cyclist_size",
    "size_jitter",
    "yaw_range",
    "noise_sigma",
    "intensity_noise",
];

/// Everything a run needs, resolved from defaults plus one config file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

struct Reader {
    table: Table,
    used: BTreeSet<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Value> {
        debug_assert!(CONFIG_KEYS.contains(&key), "undeclared key {key}");
        self.used.insert(key.to_string());
        self.table.get(key).cloned()
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key).map(|v| as_f64(key, &v)).transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key).map(|v| as_usize(key, &v)).transpose()
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| match v {
                Value::Integer(i) if i >= 0 => Ok(i as u64),
                _ => Err(type_err(key, "non-negative integer")),
            })
            .transpose()
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.take(key)
            .map(|v| v.as_bool().ok_or_else(|| type_err(key, "boolean")))
            .transpose()
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key)
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| type_err(key, "string")))
            .transpose()
    }

    fn f64s(&mut self, key: &str, len: Option<usize>) -> Result<Option<Vec<f64>>> {
        let what = "array of numbers";
        self.take(key)
            .map(|v| {
                let a = v.as_array().ok_or_else(|| type_err(key, what))?;
                let out = a.iter().map(|x| as_f64(key, x)).collect::<Result<Vec<_>>>()
                    .map_err(|_| type_err(key, what))?;
                check_len(key, &out, len)?;
                Ok(out)
            })
            .transpose()
    }

    fn usizes(&mut self, key: &str, len: Option<usize>) -> Result<Option<Vec<usize>>> {
        let what = "array of non-negative integers";
        self.take(key)
            .map(|v| {
                let a = v.as_array().ok_or_else(|| type_err(key, what))?;
                let out = a.iter().map(|x| as_usize(key, x)).collect::<Result<Vec<_>>>()
                    .map_err(|_| type_err(key, what))?;
                check_len(key, &out, len)?;
                Ok(out)
            })
            .transpose()
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.table.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key{} {}",
                if unknown.len() > 1 { "s" } else { "" },
                unknown.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

fn type_err(key: &str, expected: &'static str) -> Error {
    Error::ConfigType {
        key: key.to_string(),
        expected,
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_err(key, "non-negative integer")),
    }
}

fn check_len<T>(key: &str, v: &[T], len: Option<usize>) -> Result<()> {
    match len {
        Some(n) if v.len() != n => Err(Error::Config(format!("`{key}` needs {n} entries, found {}", v.len()))),
        _ => Ok(()),
    }
}

fn arr<const N: usize>(v: Vec<f64>) -> [f64; N] {
    v.try_into().expect("length checked")
}

/// Per-stage values: an explicit array, or a base value that is scaled by
/// `growth^stage`.
fn per_stage<T: Copy>(
    r: &mut Reader,
    single: &str,
    many: &str,
    stages: usize,
    read_one: fn(&mut Reader, &str) -> Result<Option<T>>,
    read_many: fn(&mut Reader, &str, Option<usize>) -> Result<Option<Vec<T>>>,
    default: Vec<T>,
    grow: fn(T, usize) -> T,
) -> Result<Vec<T>> {
    let one = read_one(r, single)?;
    let all = read_many(r, many, Some(stages))?;
    match (one, all) {
        (Some(_), Some(_)) => Err(Error::Config(format!("set either `{single}` or `{many}`, not both"))),
        (Some(v), None) => Ok((0..stages).map(|s| grow(v, s)).collect()),
        (None, Some(v)) => Ok(v),
        (None, None) => Ok(default),
    }
}

fn model_config(r: &mut Reader) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let stages = r.usize("stages")?.unwrap_or(d.num_stages());
    if stages == 0 {
        return Err(Error::Config("`stages` must be at least 1".into()));
    }
    // defaults extend the default pattern to any stage count
    let doubling = |base: f64, s: usize| base * f64::from(1u32 << s.min(31));
    let d0 = &d.stages[0];
    let grid = per_stage(r, "grid_size", "grid_sizes", stages, Reader::f64, Reader::f64s,
        (0..stages).map(|s| doubling(d0.grid, s)).collect(), doubling)?;
    let radius = per_stage(r, "radius", "radii", stages, Reader::f64, Reader::f64s,
        (0..stages).map(|s| doubling(d0.radius, s)).collect(), doubling)?;
    let window = per_stage(r, "window_size", "window_sizes", stages, Reader::usize, Reader::usizes,
        vec![d0.window; stages], |v, _| v)?;
    let layers = per_stage(r, "layers", "stage_layers", stages, Reader::usize, Reader::usizes,
        vec![d0.layers; stages], |v, _| v)?;
    let dim = per_stage(r, "channels", "stage_channels", stages, Reader::usize, Reader::usizes,
        (0..stages).map(|s| d0.dim << s).collect(), |v, s| v << s)?;
    let search = match r.string("search")? {
        None => d.search,
        Some(s) => SearchMethod::parse(&s)
            .ok_or_else(|| Error::Config(format!("`search` must be \"vq\" or \"knn\", got {s:?}")))?,
    };
    let cfg = ModelConfig {
        in_channels: d.in_channels,
        stages: (0..stages)
            .map(|s| StageConfig {
                grid: grid[s],
                window: window[s],
                radius: radius[s],
                layers: layers[s],
                dim: dim[s],
            })
            .collect(),
        heads: r.usize("heads")?.unwrap_or(d.heads),
        seg_layers: r.usize("seg_layers")?.unwrap_or(d.seg_layers),
        dec_layers: r.usize("dec_layers")?.unwrap_or(d.dec_layers),
        queries: r.usize("queries")?.unwrap_or(d.queries),
        fg_threshold: r.f64("fg_threshold")?.unwrap_or(d.fg_threshold),
        num_semantic: d.num_semantic,
        thing_ids: d.thing_ids,
        search,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(r: &mut Reader) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    if let Some(o) = r.string("optimizer")? {
        if !o.eq_ignore_ascii_case("adamw") {
            return Err(Error::Config(format!("only the AdamW optimizer is available, got {o:?}")));
        }
    }
    if let Some(s) = r.string("schedule")? {
        if s != "cosine" {
            return Err(Error::Config(format!("only the cosine schedule is available, got {s:?}")));
        }
    }
    let task = match r.string("task")? {
        None => d.task,
        Some(s) => Task::parse(&s)
            .ok_or_else(|| Error::Config(format!("`task` must be seg, det or multi, got {s:?}")))?,
    };
    let mut aug = d.aug;
    if let Some(v) = r.f64s("aug_scale", Some(2))? {
        aug.scale = arr(v);
    }
    if let Some(v) = r.f64s("aug_rotate", Some(2))? {
        aug.rotate_deg = arr(v);
    }
    if let Some(v) = r.f64("aug_flip")? {
        aug.flip_p = v;
    }
    let ignore_id = r
        .u64("ignore_id")?
        .map(|v| u32::try_from(v).map_err(|_| type_err("ignore_id", "32-bit unsigned integer")))
        .transpose()?;
    let cfg = TrainConfig {
        task,
        lr: r.f64("lr")?.unwrap_or(d.lr),
        lr_min: r.f64("lr_min")?.unwrap_or(d.lr_min),
        weight_decay: r.f64("weight_decay")?.unwrap_or(d.weight_decay),
        epochs: r.usize("epochs")?.unwrap_or(d.epochs),
        max_steps: r.usize("max_steps")?.or(d.max_steps),
        augment: r.bool("augment")?.unwrap_or(d.augment),
        aug,
        crop_min: r.f64s("range_min", Some(3))?.map_or(d.crop_min, arr),
        crop_max: r.f64s("range_max", Some(3))?.map_or(d.crop_max, arr),
        seed: r.u64("seed")?.unwrap_or(d.seed),
        gt_queries: r.bool("gt_queries")?.unwrap_or(d.gt_queries),
        gt_noise: r.f64("gt_noise")?.unwrap_or(d.gt_noise),
        focal_alpha: r.f64("focal_alpha")?.unwrap_or(d.focal_alpha),
        focal_gamma: r.f64("focal_gamma")?.unwrap_or(d.focal_gamma),
        ignore_id: ignore_id.or(d.ignore_id),
        grad_clip: r.f64("grad_clip")?.or(d.grad_clip),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn synth_config(r: &mut Reader, seed: u64) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let pair = |v: Vec<usize>| [v[0], v[1]];
    let mut sizes = d.sizes;
    for (c, key) in ["car_size", "pedestrian_size", "cyclist_size"].into_iter().enumerate() {
        debug_assert_eq!(DET_CLASS_NAMES[c], key.trim_end_matches("_size"));
        if let Some(v) = r.f64s(key, Some(3))? {
            sizes[c] = arr(v);
        }
    }
    let cfg = SynthConfig {
        range_min: r.f64s("synth_range_min", Some(2))?.map_or(d.range_min, arr),
        range_max: r.f64s("synth_range_max", Some(2))?.map_or(d.range_max, arr),
        ground_density: r.f64("ground_density")?.unwrap_or(d.ground_density),
        walls: r.usizes("wall_count", Some(2))?.map_or(d.walls, pair),
        wall_density: r.f64("wall_density")?.unwrap_or(d.wall_density),
        objects: r.usizes("object_count", Some(2))?.map_or(d.objects, pair),
        object_density: r.f64("object_density")?.unwrap_or(d.object_density),
        min_object_points: r.usize("min_object_points")?.unwrap_or(d.min_object_points),
        sizes,
        size_jitter: r.f64("size_jitter")?.unwrap_or(d.size_jitter),
        yaw_range: r.f64s("yaw_range", Some(2))?.map_or(d.yaw_range, arr),
        noise: r.f64("noise_sigma")?.unwrap_or(d.noise),
        intensity_noise: r.f64("intensity_noise")?.unwrap_or(d.intensity_noise),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a flat key/value document. Missing keys take their defaults;
/// unknown keys and wrongly typed values are errors.
pub fn parse_config_str(text: &str) -> Result<Config> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("syntax: {}", e.message())))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(Error::Config(format!("config is flat, `{k}` is a section")));
    }
    let mut r = Reader {
        table,
        used: BTreeSet::new(),
    };
    let model = model_config(&mut r)?;
    let train = train_config(&mut r)?;
    let synth = synth_config(&mut r, train.seed)?;
    r.finish()?;
    Ok(Config { model, train, synth })
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn fl(v: f64) -> String {
    format!("{v:?}")
}

fn fls(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| fl(*x)).collect::<Vec<_>>().join(", "))
}

fn ints(v: &[usize]) -> String {
    format!("[{}]", v.iter().map(usize::to_string).collect::<Vec<_>>().join(", "))
}

impl Config {
    /// The resolved configuration as a document `parse_config_str` reads
    /// back to an equal value.
    pub fn to_toml_string(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let st = &m.stages;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("stages", st.len().to_string());
        kv("grid_sizes", fls(&st.iter().map(|x| x.grid).collect::<Vec<_>>()));
        kv("radii", fls(&st.iter().map(|x| x.radius).collect::<Vec<_>>()));
        kv("window_sizes", ints(&st.iter().map(|x| x.window).collect::<Vec<_>>()));
        kv("stage_layers", ints(&st.iter().map(|x| x.layers).collect::<Vec<_>>()));
        kv("stage_channels", ints(&st.iter().map(|x| x.dim).collect::<Vec<_>>()));
        kv("heads", m.heads.to_string());
        kv("seg_layers", m.seg_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("queries", m.queries.to_string());
        kv("fg_threshold", fl(m.fg_threshold));
        kv("search", format!("{:?}", m.search.name()));

        kv("task", format!("{:?}", t.task.name()));
        kv("optimizer", "\"adamw\"".into());
        kv("schedule", "\"cosine\"".into());
        kv("lr", fl(t.lr));
        kv("lr_min", fl(t.lr_min));
        kv("weight_decay", fl(t.weight_decay));
        kv("epochs", t.epochs.to_string());
        if let Some(v) = t.max_steps {
            kv("max_steps", v.to_string());
        }
        kv("augment", t.augment.to_string());
        kv("aug_scale", fls(&t.aug.scale));
        kv("aug_rotate", fls(&t.aug.rotate_deg));
        kv("aug_flip", fl(t.aug.flip_p));
        kv("range_min", fls(&t.crop_min));
        kv("range_max", fls(&t.crop_max));
        kv("seed", t.seed.to_string());
        kv("gt_queries", t.gt_queries.to_string());
        kv("gt_noise", fl(t.gt_noise));
        kv("focal_alpha", fl(t.focal_alpha));
        kv("focal_gamma", fl(t.focal_gamma));
        if let Some(v) = t.ignore_id {
            kv("ignore_id", v.to_string());
        }
        if let Some(v) = t.grad_clip {
            kv("grad_clip", fl(v));
        }

        kv("synth_range_min", fls(&s.range_min));
        kv("synth_range_max", fls(&s.range_max));
        kv("ground_density", fl(s.ground_density));
        kv("wall_count", ints(&s.walls));
        kv("wall_density", fl(s.wall_density));
        kv("object_count", ints(&s.objects));
        kv("object_density", fl(s.object_density));
        kv("min_object_points", s.min_object_points.to_string());
        kv("car_size", fls(&s.sizes[0]));
        kv("pedestrian_size", fls(&s.sizes[1]));
        kv("cyclist_size", fls(&s.sizes[2]));
        kv("size_jitter", fl(s.size_jitter));
        kv("yaw_range", fls(&s.yaw_range));
        kv("noise_sigma", fl(s.noise));
        kv("intensity_noise", fl(s.intensity_noise));
        o
    }
}

/// Writes the model and training configuration next to a checkpoint.
pub fn write_config_echo(path: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let c = Config {
        model: model.clone(),
        train: train.clone(),
        synth: SynthConfig {
            seed: train.seed,
            ..SynthConfig::default()
        },
    };
    fs::write(path, c.to_toml_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.model.queries, 200);
        assert_eq!(c.model.fg_threshold, 0.2);
        assert_eq!(c.train.aug.scale, [0.95, 1.05]);
        assert_eq!(c.train.aug.rotate_deg, [-45.0, 45.0]);
        assert_eq!(c.train.aug.flip_p, 0.5);
    }

    #[test]
    fn window_size_applies_to_all_stages() {
        let c = parse_config_str("window_size = 32\nstages = 3").unwrap();
        assert!(c.model.stages.iter().all(|s| s.window == 32));
        assert_eq!(c.model.stages.len(), 3);
    }

    #[test]
    fn type_errors_name_the_key() {
        match parse_config_str("window_size = \"big\"") {
            Err(Error::ConfigType { key, expected }) => {
                assert_eq!(key, "window_size");
                assert_eq!(expected, "non-negative integer");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_config_str("lr = true"), Err(Error::ConfigType { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_config_str("learning_rate = 0.1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"));
        assert!(parse_config_str("[model]\nstages = 2").is_err());
        assert!(parse_config_str("window_size = 8\nwindow_sizes = [8, 8, 8, 8]").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = parse_config_str("stages = 2\nsearch = \"knn\"\ntask = \"det\"\nmax_steps = 7\nignore_id = 0").unwrap();
        c.train.grad_clip = Some(2.5);
        let back = parse_config_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
