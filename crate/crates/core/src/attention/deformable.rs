use super::{linear, linear_specs, mlp2, mlp2_specs};
use crate::autodiff::{ParamSpec, Tape, Var};
use crate::cloud::{voxel_query_at, Point3, VoxelGrid};
use crate::error::{Error, Result};

pub const NUM_SCALES: usize = 2;

/// One key/value scale for deformable attention.
pub struct ScaleLevel<'a> {
    pub coords: &'a [Point3],
    /// Voxel grid over `coords` with cell size equal to the scale's radius.
    pub grid: &'a VoxelGrid,
    pub feats: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformConfig {
    /// Query width.
    pub dim: usize,
    pub heads: usize,
    /// Feature width of each scale cloud.
    pub scale_dims: [usize; NUM_SCALES],
    /// Sampling window size per scale.
    pub windows: [usize; NUM_SCALES],
    /// Sampling radius per scale, meters.
    pub radii: [f64; NUM_SCALES],
    pub pos_dim: usize,
    pub pos_hidden: usize,
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "query width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.windows.contains(&0) || self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("deformable windows and radii must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Column offset of the `(head, scale)` sampling offset in the packed
    /// offset projection.
    fn offset_col(&self, head: usize, scale: usize) -> usize {
        (head * NUM_SCALES + scale) * 3
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        // one independent 3-output linear map per (head, scale), packed
        let mut s = linear_specs(&format!("{prefix}.off"), d, self.heads * NUM_SCALES * 3);
        s.push(ParamSpec::weight(format!("{prefix}.wq"), d, d));
        s.push(ParamSpec::weight(format!("{prefix}.wr"), d, self.heads * self.pos_dim));
        for (sc, &sd) in self.scale_dims.iter().enumerate() {
            s.push(ParamSpec::weight(format!("{prefix}.s{sc}.wk"), sd, d));
            s.push(ParamSpec::weight(format!("{prefix}.s{sc}.wv"), sd, d));
            s.extend(mlp2_specs(&format!("{prefix}.s{sc}.pos"), 3, self.pos_hidden, self.pos_dim));
        }
        s.extend(linear_specs(&format!("{prefix}.out"), d, d));
        s
    }
}

/// Sampling locations `r_k + Δr_{k,h,s}` read from a forward offset value.
pub(crate) fn sampling_points(
    offsets: &[f64],
    refs: &[Point3],
    cfg: &DeformConfig,
    head: usize,
    scale: usize,
) -> Vec<Point3> {
    let width = cfg.heads * NUM_SCALES * 3;
    let c = cfg.offset_col(head, scale);
    refs.iter()
        .enumerate()
        .map(|(k, r)| {
            let o = &offsets[k * width + c..k * width + c + 3];
            [r[0] + o[0], r[1] + o[1], r[2] + o[2]]
        })
        .collect()
}

/// Point-space multi-scale deformable cross-attention.
///
/// For each query `k`, head `h` and scale `s` a voxel query of up to
/// `windows[s]` points within `radii[s]` is taken around the sampling point
/// `r_k + φ_off(q_k)_{h,s}`. The query attends over that window with
/// scaled dot-product logits plus a relative position bias measured from
/// the sampling point, which is what carries gradient into the offsets.
/// Heads are concatenated, scales averaged, then projected and added to the
/// query. An empty window contributes zeros.
pub fn deformable_attention(
    tape: &mut Tape<'_>,
    queries: Var,
    refs: &[Point3],
    scales: &[ScaleLevel<'_>],
    prefix: &str,
    cfg: &DeformConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (nq, d) = tape.value(queries).dims2()?;
    if d != cfg.dim || refs.len() != nq {
        return Err(Error::Shape {
            op: "deformable_attention",
            lhs: vec![nq, d],
            rhs: vec![refs.len(), cfg.dim],
        });
    }
    if scales.len() != NUM_SCALES {
        return Err(Error::invalid(format!(
            "deformable attention takes {NUM_SCALES} scale levels, got {}",
            scales.len()
        )));
    }
    if let Some(s) = scales.iter().position(|s| s.coords.is_empty()) {
        return Err(Error::invalid(format!("scale level {s} is empty")));
    }
    let hd = cfg.head_dim();
    let off = linear(tape, &format!("{prefix}.off"), queries)?;
    let off_vals = tape.value(off).data().to_vec();
    let wq = tape.param(&format!("{prefix}.wq"))?;
    let wr = tape.param(&format!("{prefix}.wr"))?;
    let qp = tape.matmul(queries, wq)?;
    let qr = tape.matmul(queries, wr)?;

    let mut per_scale = Vec::with_capacity(NUM_SCALES);
    for (s, level) in scales.iter().enumerate() {
        let sd = tape.value(level.feats).cols();
        if sd != cfg.scale_dims[s] || tape.value(level.feats).rows() != level.coords.len() {
            return Err(Error::Shape {
                op: "deformable_attention scale",
                lhs: tape.value(level.feats).shape().to_vec(),
                rhs: vec![level.coords.len(), cfg.scale_dims[s]],
            });
        }
        let wk = tape.param(&format!("{prefix}.s{s}.wk"))?;
        let wv = tape.param(&format!("{prefix}.s{s}.wv"))?;
        let keys = tape.matmul(level.feats, wk)?;
        let vals = tape.matmul(level.feats, wv)?;

        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let centers = sampling_points(&off_vals, refs, cfg, h, s);
            let win = voxel_query_at(level.grid, level.coords, &centers, cfg.radii[s], cfg.windows[s])?;
            let (src, dst) = win.edges();
            if src.is_empty() {
                heads.push(tape.constant_rows(nq, hd, vec![0.0; nq * hd])?);
                continue;
            }
            // sampling point minus neighbor, differentiable in the offset
            let c = cfg.offset_col(h, s);
            let o = tape.slice_cols(off, c, c + 3)?;
            let oe = tape.gather_rows(o, &src)?;
            let mut base = Vec::with_capacity(src.len() * 3);
            for (&k, &j) in src.iter().zip(&dst) {
                let (r, p) = (refs[k], level.coords[j]);
                base.extend_from_slice(&[r[0] - p[0], r[1] - p[1], r[2] - p[2]]);
            }
            let delta = tape.add_const(oe, &base)?;
            let rpe = mlp2(tape, &format!("{prefix}.s{s}.pos"), delta)?;

            let qh = tape.slice_cols(qp, h * hd, (h + 1) * hd)?;
            let kh = tape.slice_cols(keys, h * hd, (h + 1) * hd)?;
            let vh = tape.slice_cols(vals, h * hd, (h + 1) * hd)?;
            let logits = tape.edge_dot(qh, kh, &src, &dst, hd)?;
            let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());

            let qrh = tape.slice_cols(qr, h * cfg.pos_dim, (h + 1) * cfg.pos_dim)?;
            let bias = tape.edge_bias(qrh, rpe, &src)?;
            let logits = tape.add(logits, bias)?;

            let w = tape.segment_softmax(logits, &src, nq)?;
            heads.push(tape.edge_aggregate(w, vh, &src, &dst, nq)?);
        }
        per_scale.push(tape.concat_cols(&heads)?);
    }
    let mut acc = per_scale[0];
    for &p in &per_scale[1..] {
        acc = tape.add(acc, p)?;
    }
    let avg = tape.scale(acc, 1.0 / NUM_SCALES as f64);
    let proj = linear(tape, &format!("{prefix}.out"), avg)?;
    tape.add(queries, proj)
}
