use super::{bn, bn_specs, mlp2, mlp2_specs};
use crate::autodiff::{ParamSpec, Tape, Var};
use crate::cloud::{NeighborWindows, Point3};
use crate::error::{Error, Result};

/// Shape of one point-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PattConfig {
    /// Feature width; the attention output has the same width so the
    /// residual connection lines up.
    pub dim: usize,
    pub heads: usize,
    /// Width of the relative position encoding, per head bias.
    pub pos_dim: usize,
    pub pos_hidden: usize,
    pub ffn_hidden: usize,
}

impl PattConfig {
    /// Defaults: position width `dim / heads`, position hidden width equal
    /// to that, feed-forward hidden width `4 * dim`.
    pub fn new(dim: usize, heads: usize) -> Self {
        let pos_dim = (dim / heads.max(1)).max(1);
        Self {
            dim,
            heads,
            pos_dim,
            pos_hidden: pos_dim,
            ffn_hidden: 4 * dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.pos_dim == 0 || self.pos_hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::invalid("attention widths must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Parameters of one layer under `prefix`.
    pub fn layer_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut s = vec![
            ParamSpec::weight(format!("{prefix}.wq"), d, d),
            ParamSpec::weight(format!("{prefix}.wk"), d, d),
            ParamSpec::weight(format!("{prefix}.wv"), d, d),
            ParamSpec::weight(format!("{prefix}.wr"), d, self.heads * self.pos_dim),
        ];
        s.extend(mlp2_specs(&format!("{prefix}.pos"), 3, self.pos_hidden, self.pos_dim));
        s.extend(bn_specs(&format!("{prefix}.bn1"), d));
        s.extend(bn_specs(&format!("{prefix}.bn2"), d));
        s.extend(mlp2_specs(&format!("{prefix}.ffn"), d, self.ffn_hidden, d));
        s
    }

    pub fn block_specs(&self, prefix: &str, layers: usize) -> Vec<ParamSpec> {
        (0..layers)
            .flat_map(|l| self.layer_specs(&format!("{prefix}.l{l}")))
            .collect()
    }
}

/// `φ_z(p_i − p_j)` for paired rows of `from` and `to`.
pub fn rel_pos_encode(tape: &mut Tape<'_>, prefix: &str, from: &[Point3], to: &[Point3]) -> Result<Var> {
    if from.len() != to.len() {
        return Err(Error::Shape {
            op: "rel_pos_encode",
            lhs: vec![from.len(), 3],
            rhs: vec![to.len(), 3],
        });
    }
    let mut d = Vec::with_capacity(from.len() * 3);
    for (a, b) in from.iter().zip(to) {
        d.extend_from_slice(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
    }
    let delta = tape.constant_rows(from.len(), 3, d)?;
    mlp2(tape, prefix, delta)
}

/// Per-head bias `(x W_r)_h · r` for paired rows of `x` and `r`.
pub fn attention_bias(tape: &mut Tape<'_>, x: Var, w_r: Var, r: Var, heads: usize) -> Result<Var> {
    let xw = tape.matmul(x, w_r)?;
    let rows: Vec<usize> = (0..tape.value(x).rows()).collect();
    let b = tape.edge_bias(xw, r, &rows)?;
    if tape.value(b).cols() != heads {
        return Err(Error::Shape {
            op: "attention_bias",
            lhs: tape.value(xw).shape().to_vec(),
            rhs: vec![heads, tape.value(r).cols()],
        });
    }
    Ok(b)
}

/// Multi-head scaled dot-product attention inside each neighbor window:
/// logits `(W_q x_i)·(W_k x_j) / sqrt(d/H) + b_ij`, softmax over the window,
/// output `Σ_j w_ij W_v x_j`, heads concatenated.
pub fn neighborhood_attention(
    tape: &mut Tape<'_>,
    x: Var,
    coords: &[Point3],
    windows: &NeighborWindows,
    prefix: &str,
    cfg: &PattConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, d) = tape.value(x).dims2()?;
    if d != cfg.dim || n != coords.len() || windows.len() != n {
        return Err(Error::Shape {
            op: "neighborhood_attention",
            lhs: vec![n, d],
            rhs: vec![coords.len(), windows.len(), cfg.dim],
        });
    }
    if let Some(i) = (0..n).find(|&i| windows.window(i).is_empty()) {
        return Err(Error::invalid(format!("point {i} has an empty attention window")));
    }
    let (src, dst) = windows.edges();
    let hd = cfg.head_dim();

    let pi: Vec<Point3> = src.iter().map(|&i| coords[i]).collect();
    let pj: Vec<Point3> = dst.iter().map(|&j| coords[j]).collect();
    let r = rel_pos_encode(tape, &format!("{prefix}.pos"), &pi, &pj)?;

    let wq = tape.param(&format!("{prefix}.wq"))?;
    let wk = tape.param(&format!("{prefix}.wk"))?;
    let wv = tape.param(&format!("{prefix}.wv"))?;
    let wr = tape.param(&format!("{prefix}.wr"))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let xr = tape.matmul(x, wr)?;

    let logits = tape.edge_dot(q, k, &src, &dst, hd)?;
    let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
    let bias = tape.edge_bias(xr, r, &src)?;
    let logits = tape.add(logits, bias)?;

    let w = tape.segment_softmax(logits, &src, n)?;
    tape.edge_aggregate(w, v, &src, &dst, n)
}

/// Pre-norm transformer layer: `x + Attn(BN(x))`, then `+ FFN(BN(·))`.
pub fn patt_layer(
    tape: &mut Tape<'_>,
    x: Var,
    coords: &[Point3],
    windows: &NeighborWindows,
    prefix: &str,
    cfg: &PattConfig,
) -> Result<Var> {
    let h = bn(tape, &format!("{prefix}.bn1"), x)?;
    let a = neighborhood_attention(tape, h, coords, windows, prefix, cfg)?;
    let x = tape.add(x, a)?;
    let h = bn(tape, &format!("{prefix}.bn2"), x)?;
    let f = mlp2(tape, &format!("{prefix}.ffn"), h)?;
    tape.add(x, f)
}

/// `layers` consecutive layers sharing one set of windows.
pub fn patt_block(
    tape: &mut Tape<'_>,
    x: Var,
    coords: &[Point3],
    windows: &NeighborWindows,
    layers: usize,
    prefix: &str,
    cfg: &PattConfig,
) -> Result<Var> {
    if layers == 0 {
        return Err(Error::invalid("a block needs at least one layer"));
    }
    let mut h = x;
    for l in 0..layers {
        h = patt_layer(tape, h, coords, windows, &format!("{prefix}.l{l}"), cfg)?;
    }
    Ok(h)
}
