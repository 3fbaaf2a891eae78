use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::{Array, Gradients};
use crate::error::{Error, Result};

/// A learnable array with an on-demand gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffArray {
    value: Array,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl DiffArray {
    pub fn new(value: Array) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Declarative description of one stored array.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamSpec {
    /// Glorot-uniform `[fan_in, fan_out]` weight.
    Weight { name: String, fan_in: usize, fan_out: usize },
    /// Zero-initialized vector.
    Zeros { name: String, len: usize },
    /// One-initialized vector (batch-norm scale).
    Ones { name: String, len: usize },
    /// Non-learnable state such as running statistics.
    Buffer { name: String, len: usize, fill: f64 },
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec::Weight {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        ParamSpec::Zeros { name: name.into(), len }
    }

    pub fn ones(name: impl Into<String>, len: usize) -> Self {
        ParamSpec::Ones { name: name.into(), len }
    }

    pub fn buffer(name: impl Into<String>, len: usize, fill: f64) -> Self {
        ParamSpec::Buffer {
            name: name.into(),
            len,
            fill,
        }
    }
}

/// Named parameters and buffers in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, DiffArray)>,
    index: HashMap<String, usize>,
    buffers: Vec<(String, Array)>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, DiffArray::new(value)));
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate buffer name `{name}`")));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].1)
    }

    pub fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let i = *self
            .buffer_index
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let shape = self.buffers[i].1.shape().to_vec();
        self.buffers[i].1 = Array::new(shape, data)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> + '_ {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray)> + '_ {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Array)> + '_ {
        self.buffers.iter().map(|(n, b)| (n.as_str(), b))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|(_, p)| p.zero_grad());
    }

    /// Adds every reached parameter gradient into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (name, g) in grads.params() {
            if let Some(p) = self.get_mut(name) {
                p.accumulate(g);
            }
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, data) in updates {
            self.set_buffer(&name, data)?;
        }
        Ok(())
    }
}

/// Builds a store from specs. Weights are uniform in `±sqrt(6 / (fan_in +
/// fan_out))`, drawn in spec order.
pub fn init_params<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        match spec {
            ParamSpec::Weight { name, fan_in, fan_out } => {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
                store.insert(name.clone(), Array::new(vec![*fan_in, *fan_out], data)?)?;
            }
            ParamSpec::Zeros { name, len } => store.insert(name.clone(), Array::zeros(vec![*len]))?,
            ParamSpec::Ones { name, len } => store.insert(name.clone(), Array::full(vec![*len], 1.0))?,
            ParamSpec::Buffer { name, len, fill } => {
                store.insert_buffer(name.clone(), Array::full(vec![*len], *fill))?
            }
        }
    }
    Ok(store)
}

const MAGIC: &str = "PATT-CHECKPOINT 1";

/// Writes a text header (`param|buffer name d0xd1...` per entry, store
/// order) terminated by `END`, followed by the raw little-endian `f64`
/// values of every entry concatenated in header order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let entries: Vec<(&str, &str, &Array)> = store
        .params
        .iter()
        .map(|(n, p)| ("param", n.as_str(), &p.value))
        .chain(store.buffers.iter().map(|(n, b)| ("buffer", n.as_str(), b)))
        .collect();
    for (kind, name, a) in &entries {
        let dims: Vec<String> = a.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{kind} {name} {}\n", dims.join("x")));
    }
    header.push_str("END\n");
    let mut bytes = header.into_bytes();
    for (_, _, a) in &entries {
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt("unterminated header".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| fmt("header is not UTF-8".into()))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != MAGIC {
        return Err(fmt("missing checkpoint magic".into()));
    }
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "END" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [kind, name, dims] = parts.as_slice() else {
            return Err(fmt(format!("bad header line `{line}`")));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fmt(format!("bad shape in `{line}`")))?;
        let is_param = match *kind {
            "param" => true,
            "buffer" => false,
            other => return Err(fmt(format!("unknown entry kind `{other}`"))),
        };
        entries.push((is_param, name.to_string(), shape));
    }
    let body = &bytes[pos..];
    let need: usize = entries.iter().map(|e| e.2.iter().product::<usize>() * 8).sum();
    if body.len() != need {
        return Err(fmt(format!(
            "payload holds {} bytes, header declares {need}",
            body.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for (is_param, name, shape) in entries {
        let n: usize = shape.iter().product();
        let data = body[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n * 8;
        let a = Array::new(shape, data)?;
        if is_param {
            store.insert(name, a)?;
        } else {
            store.insert_buffer(name, a)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("w", 4, 4),
            ParamSpec::zeros("b", 4),
            ParamSpec::ones("g", 4),
            ParamSpec::buffer("bn.running_var", 4, 1.0),
        ]
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&specs(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let s = (6.0f64 / 8.0).sqrt();
        assert!(a.get("w").unwrap().value().data().iter().all(|v| v.abs() <= s));
        assert!(a.get("b").unwrap().value().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.buffer("bn.running_var").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Array::scalar(1.0)).unwrap();
        assert!(s.insert("a", Array::scalar(2.0)).is_err());
        assert!(s.insert_buffer("a", Array::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let store = init_params(&specs(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&store, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, store);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        fs::write(&p, b"garbage\n").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
    }
}
