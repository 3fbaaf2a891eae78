use std::collections::HashMap;

use super::{Array, ParamStore};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour: batch statistics in `Train`, running statistics in
/// `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ScatterMaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    GroupSum(Var, usize),
    RepeatCols(Var, usize),
    EdgeDot {
        a: Var,
        b: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
        group: usize,
    },
    EdgeBias {
        a: Var,
        r: Var,
        src: Vec<usize>,
    },
    EdgeAggregate {
        w: Var,
        v: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Pow(Var, f64),
    SmoothL1(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
    buffer_updates: Vec<(String, Vec<f64>)>,
}

/// Gradients of one scalar with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound parameter; `None` when the parameter did not
    /// influence the output.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every parameter reached by backpropagation,
    /// in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every parameter gradient by `c`.
    pub fn scale_params(&mut self, c: f64) {
        for (_, v) in &self.params {
            if let Some(g) = self.grads.get_mut(v.0).and_then(Option::as_mut) {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Array::new(vec![rows, cols], data)?))
    }

    /// Binds a stored parameter, once per tape.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.bound_order
    }

    /// Running-statistic updates produced by train-mode batch norm. They are
    /// not applied to the store until the caller commits them.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = av.dims2()?;
        let (k2, m) = bv.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += x * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a[n, m] + b[m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m) = av.dims2()?;
        if bv.len() != m {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.data().to_vec();
        for r in 0..n {
            for (o, &x) in out[r * m..(r + 1) * m].iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(vec![n, m], out)?, Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let v = Array {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x * c).collect(),
        };
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let v = Array {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x + c).collect(),
        };
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    /// Adds a constant array of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: av.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let v = Array {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(c).map(|(x, y)| x + y).collect(),
        };
        let ng = self.ng(a);
        Ok(self.push(v, Op::Shift(a), ng))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: av.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let v = Array {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(c).map(|(x, y)| x * y).collect(),
        };
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c.to_vec()), ng))
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let n = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Array::new(vec![n, m], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = av.dims2()?;
        if start > end || end > m {
            return Err(Error::invalid(format!("column slice {start}..{end} of width {m}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&av.data()[r * m + start..r * m + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![n, w], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = av.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            out.extend_from_slice(&av.data()[i * m..(i + 1) * m]);
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![idx.len(), m], out)?, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// `out[idx[e]] += a[e]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let av = self.value(a);
        let (e, m) = av.dims2()?;
        if idx.len() != e {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; n_out * m];
        for (r, &t) in idx.iter().enumerate() {
            if t >= n_out {
                return Err(Error::IndexOutOfRange { index: t, len: n_out });
            }
            for (o, &x) in out[t * m..(t + 1) * m].iter_mut().zip(&av.data()[r * m..(r + 1) * m]) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![n_out, m], out)?, Op::ScatterAddRows(a, idx.to_vec()), ng))
    }

    /// Columnwise max of the rows mapped to each output row. Output rows with
    /// no members are zero. Ties keep the first (lowest) source row.
    pub fn scatter_max_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let av = self.value(a);
        let (e, m) = av.dims2()?;
        if idx.len() != e {
            return Err(Error::Shape {
                op: "scatter_max_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![f64::NEG_INFINITY; n_out * m];
        let mut arg = vec![usize::MAX; n_out * m];
        for (r, &t) in idx.iter().enumerate() {
            if t >= n_out {
                return Err(Error::IndexOutOfRange { index: t, len: n_out });
            }
            for c in 0..m {
                let x = av.data()[r * m + c];
                if x > out[t * m + c] {
                    out[t * m + c] = x;
                    arg[t * m + c] = r;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&arg) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![n_out, m], out)?, Op::ScatterMaxRows(a, arg), ng))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        let ng = self.ng(a);
        self.push(Array::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let s = av.data().iter().fold(0.0, |acc, x| acc + x) / n;
        let ng = self.ng(a);
        self.push(Array::scalar(s), Op::Mean(a), ng)
    }

    pub fn max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (mut best, mut at) = (f64::NEG_INFINITY, usize::MAX);
        for (i, &x) in av.data().iter().enumerate() {
            if x > best {
                best = x;
                at = i;
            }
        }
        if at == usize::MAX {
            return Err(Error::invalid("max of an empty array"));
        }
        let ng = self.ng(a);
        Ok(self.push(Array::scalar(best), Op::Max(a, at), ng))
    }

    /// Sums consecutive column groups of width `group`: `[n, h*group] -> [n, h]`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = av.dims2()?;
        if group == 0 || m % group != 0 {
            return Err(Error::invalid(format!("width {m} not divisible into groups of {group}")));
        }
        let h = m / group;
        let mut out = vec![0.0; n * h];
        for r in 0..n {
            for g in 0..h {
                out[r * h + g] = av.data()[r * m + g * group..r * m + (g + 1) * group]
                    .iter()
                    .fold(0.0, |acc, x| acc + x);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![n, h], out)?, Op::GroupSum(a, group), ng))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).dims2()?.1;
        self.group_sum(a, m.max(1))
    }

    // ---- fused edge operations ----
    //
    // Attention over neighbor windows touches every (point, neighbor) edge.
    // These ops work on edge lists `src[e] -> dst[e]` directly, so no
    // per-edge copy of a feature row is ever recorded.

    fn check_edges(&self, op: &'static str, src: &[usize], dst: &[usize], ns: usize, nd: usize) -> Result<()> {
        if src.len() != dst.len() {
            return Err(Error::Shape {
                op,
                lhs: vec![src.len()],
                rhs: vec![dst.len()],
            });
        }
        if let Some(&i) = src.iter().find(|&&i| i >= ns) {
            return Err(Error::IndexOutOfRange { index: i, len: ns });
        }
        if let Some(&j) = dst.iter().find(|&&j| j >= nd) {
            return Err(Error::IndexOutOfRange { index: j, len: nd });
        }
        Ok(())
    }

    /// Per-edge, per-group dot products:
    /// `out[e, h] = Σ_c a[src[e], h*group + c] · b[dst[e], h*group + c]`.
    pub fn edge_dot(&mut self, a: Var, b: Var, src: &[usize], dst: &[usize], group: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((na, m), (nb, mb)) = (av.dims2()?, bv.dims2()?);
        if m != mb || group == 0 || m % group != 0 {
            return Err(shape_err("edge_dot", av, bv));
        }
        self.check_edges("edge_dot", src, dst, na, nb)?;
        let h = m / group;
        let mut out = Vec::with_capacity(src.len() * h);
        for (&i, &j) in src.iter().zip(dst) {
            let (ra, rb) = (&av.data()[i * m..(i + 1) * m], &bv.data()[j * m..(j + 1) * m]);
            for k in 0..h {
                let s = k * group..(k + 1) * group;
                out.push(ra[s.clone()].iter().zip(&rb[s]).fold(0.0, |acc, (x, y)| acc + x * y));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let op = Op::EdgeDot {
            a,
            b,
            src: src.to_vec(),
            dst: dst.to_vec(),
            group,
        };
        Ok(self.push(Array::new(vec![src.len(), h], out)?, op, ng))
    }

    /// Per-edge bias of every column group of `a` against one per-edge row:
    /// `out[e, h] = Σ_c a[src[e], h*g + c] · r[e, c]` with `g` the width of `r`.
    pub fn edge_bias(&mut self, a: Var, r: Var, src: &[usize]) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let ((na, m), (e, g)) = (av.dims2()?, rv.dims2()?);
        if e != src.len() || g == 0 || m % g != 0 {
            return Err(shape_err("edge_bias", av, rv));
        }
        self.check_edges("edge_bias", src, src, na, na)?;
        let h = m / g;
        let mut out = Vec::with_capacity(e * h);
        for (k, &i) in src.iter().enumerate() {
            let rr = &rv.data()[k * g..(k + 1) * g];
            for hh in 0..h {
                let ra = &av.data()[i * m + hh * g..i * m + (hh + 1) * g];
                out.push(ra.iter().zip(rr).fold(0.0, |acc, (x, y)| acc + x * y));
            }
        }
        let ng = self.ng(a) || self.ng(r);
        let op = Op::EdgeBias { a, r, src: src.to_vec() };
        Ok(self.push(Array::new(vec![e, h], out)?, op, ng))
    }

    /// Weighted sum of neighbor rows per head:
    /// `out[i, h*g + c] = Σ_{e: src[e] = i} w[e, h] · v[dst[e], h*g + c]`
    /// where `h` ranges over the columns of `w` and `g = cols(v) / cols(w)`.
    pub fn edge_aggregate(&mut self, w: Var, v: Var, src: &[usize], dst: &[usize], n_out: usize) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let ((e, h), (nv, m)) = (wv.dims2()?, vv.dims2()?);
        if e != src.len() || h == 0 || m % h != 0 {
            return Err(shape_err("edge_aggregate", wv, vv));
        }
        self.check_edges("edge_aggregate", src, dst, n_out, nv)?;
        let g = m / h;
        let mut out = vec![0.0; n_out * m];
        for (k, (&i, &j)) in src.iter().zip(dst).enumerate() {
            for hh in 0..h {
                let wk = wv.data()[k * h + hh];
                let o = &mut out[i * m + hh * g..i * m + (hh + 1) * g];
                for (x, y) in o.iter_mut().zip(&vv.data()[j * m + hh * g..j * m + (hh + 1) * g]) {
                    *x += wk * y;
                }
            }
        }
        let ng = self.ng(w) || self.ng(v);
        let op = Op::EdgeAggregate {
            w,
            v,
            src: src.to_vec(),
            dst: dst.to_vec(),
        };
        Ok(self.push(Array::new(vec![n_out, m], out)?, op, ng))
    }

    /// Repeats each column `times` times in place: `[n, h] -> [n, h*times]`.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, h) = av.dims2()?;
        let mut out = Vec::with_capacity(n * h * times);
        for r in 0..n {
            for g in 0..h {
                out.extend(std::iter::repeat_n(av.data()[r * h + g], times));
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![n, h * times], out)?, Op::RepeatCols(a, times), ng))
    }

    // ---- normalizers ----

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = av.dims2()?;
        let mut out = av.data().to_vec();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(av.shape().to_vec(), out)?, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = av.dims2()?;
        let mut out = av.data().to_vec();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().fold(0.0, |acc, x| acc + (x - mx).exp()).ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(av.shape().to_vec(), out)?, Op::LogSoftmax(a), ng))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let av = self.value(a);
        let (e, h) = av.dims2()?;
        if seg.len() != e {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![seg.len()],
            });
        }
        let mut mx = vec![f64::NEG_INFINITY; n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            if s >= n_seg {
                return Err(Error::IndexOutOfRange { index: s, len: n_seg });
            }
            for c in 0..h {
                mx[s * h + c] = mx[s * h + c].max(av.data()[r * h + c]);
            }
        }
        let mut out = vec![0.0; e * h];
        let mut tot = vec![0.0; n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let x = (av.data()[r * h + c] - mx[s * h + c]).exp();
                out[r * h + c] = x;
                tot[s * h + c] += x;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                out[r * h + c] /= tot[s * h + c];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Array::new(vec![e, h], out)?, Op::SegmentSoftmax(a, seg.to_vec()), ng))
    }

    // ---- elementwise ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let v = Array {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// `x^p` for non-negative inputs.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.max(0.0).powf(p), Op::Pow(a, p))
    }

    /// Elementwise Huber-style smooth L1 of the input itself.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.unary(
            a,
            |x| {
                let ax = x.abs();
                if ax < beta {
                    0.5 * x * x / beta
                } else {
                    ax - 0.5 * beta
                }
            },
            Op::SmoothL1(a, beta),
        )
    }

    // ---- composites ----

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Two-layer perceptron with a GELU between the layers.
    pub fn mlp2(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.linear(x, w1, b1)?;
        let h = self.gelu(h);
        self.linear(h, w2, b2)
    }

    /// Batch norm over rows (points play the batch role), per column.
    ///
    /// `prefix` names the running statistics buffers `{prefix}.running_mean`
    /// and `{prefix}.running_var`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, prefix: &str) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(shape_err("batch_norm", xv, self.value(gamma)));
        }
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        mean[c] += xv.data()[r * m + c];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= n.max(1) as f64);
                let mut var = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let d = xv.data()[r * m + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n.max(1) as f64);
                (mean, var, true)
            }
            Mode::Eval => {
                let rm = self.buffer(&format!("{prefix}.running_mean"), m)?;
                let rv = self.buffer(&format!("{prefix}.running_var"), m)?;
                (rm, rv, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                let h = (xv.data()[r * m + c] - mean[c]) * inv_std[c];
                xhat[r * m + c] = h;
                out[r * m + c] = g[c] * h + b[c];
            }
        }
        if batch_stats {
            let rm = self.buffer(&format!("{prefix}.running_mean"), m)?;
            let rv = self.buffer(&format!("{prefix}.running_var"), m)?;
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let new_mean = rm
                .iter()
                .zip(&mean)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                .collect();
            let new_var = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b * unbias)
                .collect();
            self.buffer_updates.push((format!("{prefix}.running_mean"), new_mean));
            self.buffer_updates.push((format!("{prefix}.running_var"), new_var));
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Array::new(vec![n, m], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    fn buffer(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let b = self
            .store
            .buffer(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if b.len() != len {
            return Err(Error::invalid(format!("buffer {name} has {} values, expected {len}", b.len())));
        }
        Ok(b.data().to_vec())
    }

    // ---- backward ----

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                ov.shape()
            )));
        }
        if !ov.is_finite() {
            return Err(Error::NonFinite("backward from a non-finite output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match (&node.op, grads[i].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().unwrap(),
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.bound_order.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2().unwrap();
                let m = bv.cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            ga[r * k + p] += grow.iter().zip(brow).fold(0.0, |s, (x, y)| s + x * y);
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = av.data()[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let m = self.value(*b).len();
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::Shift(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |ga| {
                    for ((o, x), k) in ga.iter_mut().zip(g).zip(c) {
                        *o += x * k;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, m) = out.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |gp| {
                        for r in 0..n {
                            for c in 0..w {
                                gp[r * w + c] += g[r * m + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, w) = out.dims2().unwrap();
                let m = self.value(*a).cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        for c in 0..w {
                            ga[r * m + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let m = out.cols();
                self.acc(grads, *a, |ga| {
                    for (r, &t) in idx.iter().enumerate() {
                        for c in 0..m {
                            ga[t * m + c] += g[r * m + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let m = out.cols();
                self.acc(grads, *a, |ga| {
                    for (r, &t) in idx.iter().enumerate() {
                        for c in 0..m {
                            ga[r * m + c] += g[t * m + c];
                        }
                    }
                });
            }
            Op::ScatterMaxRows(a, arg) => {
                let m = out.cols();
                self.acc(grads, *a, |ga| {
                    for (k, &src) in arg.iter().enumerate() {
                        if src != usize::MAX {
                            ga[src * m + k % m] += g[k];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Max(a, at) => {
                self.acc(grads, *a, |ga| ga[*at] += g[0]);
            }
            Op::GroupSum(a, group) => {
                self.acc(grads, *a, |ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += g[k / group];
                    }
                });
            }
            Op::EdgeDot { a, b, src, dst, group } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let m = self.value(*a).cols();
                let h = m / group;
                self.acc(grads, *a, |ga| {
                    for (k, (&i, &j)) in src.iter().zip(dst).enumerate() {
                        for c in 0..m {
                            ga[i * m + c] += g[k * h + c / group] * bv[j * m + c];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (k, (&i, &j)) in src.iter().zip(dst).enumerate() {
                        for c in 0..m {
                            gb[j * m + c] += g[k * h + c / group] * av[i * m + c];
                        }
                    }
                });
            }
            Op::EdgeBias { a, r, src } => {
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                let m = self.value(*a).cols();
                let w = self.value(*r).cols();
                let h = m / w;
                self.acc(grads, *a, |ga| {
                    for (k, &i) in src.iter().enumerate() {
                        for c in 0..m {
                            ga[i * m + c] += g[k * h + c / w] * rv[k * w + c % w];
                        }
                    }
                });
                self.acc(grads, *r, |gr| {
                    for (k, &i) in src.iter().enumerate() {
                        for c in 0..m {
                            gr[k * w + c % w] += g[k * h + c / w] * av[i * m + c];
                        }
                    }
                });
            }
            Op::EdgeAggregate { w, v, src, dst } => {
                let (wv, vv) = (self.value(*w).data(), self.value(*v).data());
                let h = self.value(*w).cols();
                let m = self.value(*v).cols();
                let width = m / h;
                self.acc(grads, *w, |gw| {
                    for (k, (&i, &j)) in src.iter().zip(dst).enumerate() {
                        for c in 0..m {
                            gw[k * h + c / width] += g[i * m + c] * vv[j * m + c];
                        }
                    }
                });
                self.acc(grads, *v, |gv| {
                    for (k, (&i, &j)) in src.iter().zip(dst).enumerate() {
                        for c in 0..m {
                            gv[j * m + c] += wv[k * h + c / width] * g[i * m + c];
                        }
                    }
                });
            }
            Op::RepeatCols(a, times) => {
                self.acc(grads, *a, |ga| {
                    for (k, x) in g.iter().enumerate() {
                        ga[k / times] += x;
                    }
                });
            }
            Op::Softmax(a) => {
                let (n, m) = out.dims2().unwrap();
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        let s = (0..m).fold(0.0, |acc, c| acc + y[r * m + c] * g[r * m + c]);
                        for c in 0..m {
                            ga[r * m + c] += y[r * m + c] * (g[r * m + c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (n, m) = out.dims2().unwrap();
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        let s = (0..m).fold(0.0, |acc, c| acc + g[r * m + c]);
                        for c in 0..m {
                            ga[r * m + c] += g[r * m + c] - y[r * m + c].exp() * s;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, seg) => {
                let h = out.cols();
                let y = out.data();
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg * h];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        dot[s * h + c] += y[r * h + c] * g[r * h + c];
                    }
                }
                self.acc(grads, *a, |ga| {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..h {
                            ga[r * h + c] += y[r * h + c] * (g[r * h + c] - dot[s * h + c]);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        let v = x[k];
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / x[k];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * sigmoid(-x[k]);
                    }
                });
            }
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        let v = x[k].max(0.0);
                        let d = if v == 0.0 {
                            if *p == 1.0 { 1.0 } else { 0.0 }
                        } else {
                            p * v.powf(p - 1.0)
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::SmoothL1(a, beta) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for k in 0..ga.len() {
                        let d = if x[k].abs() < *beta { x[k] / beta } else { x[k].signum() };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, m) = out.dims2().unwrap();
                let gam = self.value(*gamma).data();
                self.acc(grads, *beta, |gb| {
                    for r in 0..n {
                        for c in 0..m {
                            gb[c] += g[r * m + c];
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..n {
                        for c in 0..m {
                            gg[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    if *batch_stats {
                        let nf = n as f64;
                        let mut s1 = vec![0.0; m];
                        let mut s2 = vec![0.0; m];
                        for r in 0..n {
                            for c in 0..m {
                                let dh = g[r * m + c] * gam[c];
                                s1[c] += dh;
                                s2[c] += dh * xhat[r * m + c];
                            }
                        }
                        for r in 0..n {
                            for c in 0..m {
                                let dh = g[r * m + c] * gam[c];
                                gx[r * m + c] +=
                                    inv_std[c] / nf * (nf * dh - s1[c] - xhat[r * m + c] * s2[c]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..m {
                                gx[r * m + c] += g[r * m + c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                });
            }
        }
    }
}
