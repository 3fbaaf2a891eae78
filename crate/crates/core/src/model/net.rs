use super::boxes::BoxPrediction;
use super::{ModelConfig, SearchMethod, StageConfig};
use crate::attention::{
    deformable_attention, bn, bn_specs, linear, linear_specs, mlp2, mlp2_specs, patt_block, DeformConfig, PattConfig,
    ScaleLevel, NUM_SCALES,
};
use crate::autodiff::{Array, ParamSpec, Tape, Var};
use crate::cloud::{ball_windows, dist2, fps, knn_query, NeighborWindows, Point3, PointCloud, PoolMap, VoxelGrid};
use crate::error::{Error, Result};

/// Which heads are built and supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Seg,
    Det,
    Multi,
}

impl Task {
    pub fn has_seg(self) -> bool {
        matches!(self, Task::Seg | Task::Multi)
    }

    pub fn has_det(self) -> bool {
        matches!(self, Task::Det | Task::Multi)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Det => "det",
            Task::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seg" => Some(Task::Seg),
            "det" => Some(Task::Det),
            "multi" => Some(Task::Multi),
            _ => None,
        }
    }
}

fn patt_cfg(cfg: &ModelConfig, dim: usize) -> PattConfig {
    PattConfig::new(dim, cfg.heads)
}

/// Windows for every point of a stage under the configured search.
pub fn stage_windows(coords: &[Point3], stage: &StageConfig, search: SearchMethod) -> Result<NeighborWindows> {
    match search {
        SearchMethod::Voxel => ball_windows(coords, stage.radius, stage.window),
        SearchMethod::Knn => {
            let all: Vec<usize> = (0..coords.len()).collect();
            knn_query(coords, &all, stage.window.min(coords.len()))
        }
    }
}

/// The two scale clouds read by the detection head: the coarsest decoder
/// stage first, then the one above it (stage 0 twice for a single stage).
fn scale_stages(cfg: &ModelConfig) -> [usize; NUM_SCALES] {
    let s = cfg.num_stages();
    [s - 1, s.saturating_sub(2)]
}

fn deform_cfg(cfg: &ModelConfig) -> DeformConfig {
    let sc = scale_stages(cfg);
    let d = cfg.query_dim();
    let pos_dim = d / cfg.heads;
    DeformConfig {
        dim: d,
        heads: cfg.heads,
        scale_dims: sc.map(|s| cfg.stages[s].dim),
        windows: sc.map(|s| cfg.stages[s].window),
        radii: sc.map(|s| cfg.stages[s].radius),
        pos_dim,
        pos_hidden: pos_dim,
    }
}

fn box_width(cfg: &ModelConfig) -> usize {
    cfg.num_det_classes() + 1 + 1 + 3 + 3 + 2
}

/// Every parameter and buffer the network reads for `task`.
pub fn param_specs(cfg: &ModelConfig, task: Task) -> Vec<ParamSpec> {
    let st = &cfg.stages;
    let mut s = linear_specs("stem", cfg.in_channels, st[0].dim);
    for (i, stage) in st.iter().enumerate() {
        if i > 0 {
            s.extend(linear_specs(&format!("down{i}"), st[i - 1].dim, stage.dim));
        }
        s.extend(patt_cfg(cfg, stage.dim).block_specs(&format!("enc{i}"), stage.layers));
    }
    for i in (0..st.len().saturating_sub(1)).rev() {
        s.extend(linear_specs(&format!("up{i}"), st[i + 1].dim + st[i].dim, st[i].dim));
        s.extend(patt_cfg(cfg, st[i].dim).block_specs(&format!("dec{i}"), st[i].layers));
    }
    for (i, stage) in st.iter().enumerate() {
        s.extend(bn_specs(&format!("norm{i}"), stage.dim));
    }
    let d = cfg.query_dim();
    if task.has_seg() {
        s.extend(patt_cfg(cfg, d).block_specs("seg", cfg.seg_layers));
        s.extend(linear_specs("seg.cls", d, cfg.num_semantic));
    }
    if task.has_det() {
        if task == Task::Det {
            s.extend(linear_specs("fg.cls", d, 1));
        }
        let dc = deform_cfg(cfg);
        for l in 0..cfg.dec_layers {
            s.extend(dc.specs(&format!("det.l{l}.attn")));
            s.extend(mlp2_specs(&format!("det.l{l}.ffn"), d, 2 * d, d));
        }
        s.extend(mlp2_specs("det.box", d, d, box_width(cfg)));
    }
    s
}

/// One encoder stage: its points, the pooling map from the previous stage
/// (identity at stage 0), its attention windows and its output features.
pub struct EncodedStage {
    pub coords: Vec<Point3>,
    pub map: PoolMap,
    pub windows: NeighborWindows,
    pub feats: Var,
}

/// Stem projection and attention block at full resolution, then grid
/// pooling (max features, mean coordinates) and a block per later stage.
pub fn encode(tape: &mut Tape<'_>, cfg: &ModelConfig, cloud: &PointCloud) -> Result<Vec<EncodedStage>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::invalid("cannot encode an empty cloud"));
    }
    if cloud.channels() != cfg.in_channels {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![cloud.len(), cloud.channels()],
            rhs: vec![cloud.len(), cfg.in_channels],
        });
    }
    let mut out: Vec<EncodedStage> = Vec::with_capacity(cfg.num_stages());
    for (s, stage) in cfg.stages.iter().enumerate() {
        let (coords, map, x) = if s == 0 {
            let x = tape.constant_rows(cloud.len(), cloud.channels(), cloud.feats().to_vec())?;
            let x = linear(tape, "stem", x)?;
            (cloud.coords().to_vec(), PoolMap::identity(cloud.len()), x)
        } else {
            let prev = &out[s - 1];
            let (map, centers) = PoolMap::build(&prev.coords, stage.grid)?;
            if centers.is_empty() {
                return Err(Error::invalid(format!("stage {s} pooled to zero points")));
            }
            let x = tape.scatter_max_rows(prev.feats, map.assign(), map.coarse_len())?;
            let x = linear(tape, &format!("down{s}"), x)?;
            (centers, map, x)
        };
        let windows = stage_windows(&coords, stage, cfg.search)?;
        let feats = patt_block(tape, x, &coords, &windows, stage.layers, &format!("enc{s}"), &patt_cfg(cfg, stage.dim))?;
        out.push(EncodedStage {
            coords,
            map,
            windows,
            feats,
        });
    }
    Ok(out)
}

/// Top-down path. Returns normalized decoder features for every stage,
/// index 0 at full resolution; the coarsest entry comes from the encoder
/// output itself. The final normalization keeps the residual stream from
/// reaching the heads at an arbitrary scale.
pub fn decode_unet(tape: &mut Tape<'_>, cfg: &ModelConfig, stages: &[EncodedStage]) -> Result<Vec<Var>> {
    if stages.len() != cfg.num_stages() {
        return Err(Error::invalid(format!(
            "expected {} encoder stages, got {}",
            cfg.num_stages(),
            stages.len()
        )));
    }
    let n = stages.len();
    let mut dec = vec![stages[n - 1].feats; n];
    for s in (0..n - 1).rev() {
        let up = tape.gather_rows(dec[s + 1], stages[s + 1].map.assign())?;
        let cat = tape.concat_cols(&[up, stages[s].feats])?;
        let x = linear(tape, &format!("up{s}"), cat)?;
        let st = &cfg.stages[s];
        dec[s] = patt_block(tape, x, &stages[s].coords, &stages[s].windows, st.layers, &format!("dec{s}"), &patt_cfg(cfg, st.dim))?;
    }
    for (s, d) in dec.iter_mut().enumerate() {
        *d = bn(tape, &format!("norm{s}"), *d)?;
    }
    Ok(dec)
}

/// Attention block over the full-resolution cloud, then a per-point
/// linear classifier.
pub fn segment_head(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    feats: Var,
    coords: &[Point3],
    windows: &NeighborWindows,
) -> Result<Var> {
    let d = cfg.query_dim();
    let h = patt_block(tape, feats, coords, windows, cfg.seg_layers, "seg", &patt_cfg(cfg, d))?;
    linear(tape, "seg.cls", h)
}

/// Per point, the largest softmax probability among the thing classes.
pub fn thing_scores(logits: &Array, thing_ids: &[u32]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            thing_ids
                .iter()
                .map(|&t| (r[t as usize] - mx).exp() / z)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Detection queries: source points into the full-resolution cloud and
/// their reference points.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub sources: Vec<usize>,
    pub refs: Vec<Point3>,
}

impl QuerySet {
    pub fn from_sources(sources: Vec<usize>, coords: &[Point3]) -> Self {
        let refs = sources.iter().map(|&i| coords[i]).collect();
        Self { sources, refs }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Foreground is `score > threshold`. With at least `q` foreground points,
/// farthest point sampling picks `q` of them starting from the lowest
/// index; otherwise all foreground points are kept and the rest is filled
/// with the highest-scoring background points, ties to the lower index.
pub fn select_queries(scores: &[f64], coords: &[Point3], threshold: f64, q: usize) -> Result<QuerySet> {
    let n = coords.len();
    if scores.len() != n {
        return Err(Error::Shape {
            op: "select_queries",
            lhs: vec![scores.len()],
            rhs: vec![n],
        });
    }
    if n < q {
        return Err(Error::invalid(format!("cannot select {q} queries from {n} points")));
    }
    let fg: Vec<usize> = (0..n).filter(|&i| scores[i] > threshold).collect();
    let sources = if fg.len() >= q {
        let sub: Vec<Point3> = fg.iter().map(|&i| coords[i]).collect();
        fps(&sub, q, 0)?.into_iter().map(|k| fg[k]).collect()
    } else {
        let mut rest: Vec<usize> = (0..n).filter(|&i| scores[i] <= threshold).collect();
        rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut s = fg;
        s.extend(rest.into_iter().take(q - s.len()));
        s
    };
    Ok(QuerySet::from_sources(sources, coords))
}

/// Detection head outputs on the tape.
pub struct DetOutput {
    pub class_logits: Var,
    pub objectness: Var,
    pub center_offset: Var,
    pub log_size: Var,
    pub yaw: Var,
    pub queries: QuerySet,
    /// Leading queries that came from foreground selection; any after
    /// these are training-only extras.
    pub num_selected: usize,
}

impl DetOutput {
    /// Plain values for the selected queries, extras excluded.
    pub fn prediction(&self, tape: &Tape<'_>) -> BoxPrediction {
        self.values(tape, self.num_selected)
    }

    /// Plain values for every query, extras included.
    pub fn all_values(&self, tape: &Tape<'_>) -> BoxPrediction {
        self.values(tape, self.queries.len())
    }

    fn values(&self, tape: &Tape<'_>, k: usize) -> BoxPrediction {
        let rows = |v: Var| -> Vec<Vec<f64>> { (0..k).map(|i| tape.value(v).row(i).to_vec()).collect() };
        let three = |v: Var| -> Vec<[f64; 3]> {
            (0..k)
                .map(|i| {
                    let r = tape.value(v).row(i);
                    [r[0], r[1], r[2]]
                })
                .collect()
        };
        BoxPrediction {
            class_logits: rows(self.class_logits),
            objectness: (0..k).map(|i| tape.value(self.objectness).get(i, 0)).collect(),
            center_offset: three(self.center_offset),
            log_size: three(self.log_size),
            yaw: (0..k)
                .map(|i| {
                    let r = tape.value(self.yaw).row(i);
                    [r[0], r[1]]
                })
                .collect(),
            refs: self.queries.refs[..k].to_vec(),
        }
    }
}

/// `dec_layers` rounds of deformable cross-attention and a residual
/// feed-forward layer, then the box/class regressor.
pub fn detect_head(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    query_feats: Var,
    refs: &[Point3],
    scales: &[ScaleLevel<'_>],
) -> Result<[Var; 5]> {
    let dc = deform_cfg(cfg);
    let mut q = query_feats;
    for l in 0..cfg.dec_layers {
        q = deformable_attention(tape, q, refs, scales, &format!("det.l{l}.attn"), &dc)?;
        let f = mlp2(tape, &format!("det.l{l}.ffn"), q)?;
        q = tape.add(q, f)?;
    }
    let out = mlp2(tape, "det.box", q)?;
    let c = cfg.num_det_classes() + 1;
    Ok([
        tape.slice_cols(out, 0, c)?,
        tape.slice_cols(out, c, c + 1)?,
        tape.slice_cols(out, c + 1, c + 4)?,
        tape.slice_cols(out, c + 4, c + 7)?,
        tape.slice_cols(out, c + 7, c + 9)?,
    ])
}

fn nearest_point(coords: &[Point3], p: &Point3) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in coords.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub struct ForwardOutput {
    pub stages: Vec<EncodedStage>,
    /// Full-resolution decoder features.
    pub feats: Var,
    pub seg_logits: Option<Var>,
    /// Single-column foreground logits (detection-only task).
    pub fg_logits: Option<Var>,
    pub det: Option<DetOutput>,
}

/// Full network. `extra_refs` adds training-only queries at the given
/// reference points, carrying the features of the nearest cloud point.
pub fn forward(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    task: Task,
    cloud: &PointCloud,
    extra_refs: &[Point3],
) -> Result<ForwardOutput> {
    let stages = encode(tape, cfg, cloud)?;
    let dec = decode_unet(tape, cfg, &stages)?;
    let feats = dec[0];
    let coords = cloud.coords();
    let seg_logits = if task.has_seg() {
        Some(segment_head(tape, cfg, feats, coords, &stages[0].windows)?)
    } else {
        None
    };
    let fg_logits = if task == Task::Det {
        Some(linear(tape, "fg.cls", feats)?)
    } else {
        None
    };
    let det = if task.has_det() {
        let scores = match (seg_logits, fg_logits) {
            (Some(l), _) => thing_scores(tape.value(l), &cfg.thing_ids),
            (None, Some(l)) => tape.value(l).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            (None, None) => unreachable!("detection always has a foreground score"),
        };
        let mut queries = select_queries(&scores, coords, cfg.fg_threshold, cfg.queries)?;
        let num_selected = queries.len();
        for r in extra_refs {
            queries.sources.push(nearest_point(coords, r));
            queries.refs.push(*r);
        }
        let qf = tape.gather_rows(feats, &queries.sources)?;
        let sc = scale_stages(cfg);
        let grids = sc
            .iter()
            .map(|&s| VoxelGrid::build(&stages[s].coords, cfg.stages[s].radius))
            .collect::<Result<Vec<_>>>()?;
        let levels: Vec<ScaleLevel<'_>> = sc
            .iter()
            .zip(&grids)
            .map(|(&s, grid)| ScaleLevel {
                coords: &stages[s].coords,
                grid,
                feats: dec[s],
            })
            .collect();
        let [class_logits, objectness, center_offset, log_size, yaw] =
            detect_head(tape, cfg, qf, &queries.refs, &levels)?;
        Some(DetOutput {
            class_logits,
            objectness,
            center_offset,
            log_size,
            yaw,
            queries,
            num_selected,
        })
    } else {
        None
    };
    Ok(ForwardOutput {
        stages,
        feats,
        seg_logits,
        fg_logits,
        det,
    })
}
