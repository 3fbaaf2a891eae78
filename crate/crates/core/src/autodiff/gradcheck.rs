use super::{Mode, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub mode: Mode,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            mode: Mode::Train,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradFailure>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn eval<F>(store: &ParamStore, mode: Mode, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store, mode);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::invalid("gradcheck target must be scalar"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck target evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of a scalar function of the store's
/// parameters against central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by
/// entry. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store, opts.mode);
    let out = f(&mut tape)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("gradcheck target is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<(String, Option<Vec<f64>>)> = store
        .iter()
        .map(|(n, _)| (n.to_string(), grads.param(n).map(<[f64]>::to_vec)))
        .collect();
    drop(tape);

    let mut report = GradReport::default();
    let mut probe = store.clone();
    for (name, g) in analytic {
        let len = store.get(&name).unwrap().value().len();
        for k in 0..len {
            let orig = store.get(&name).unwrap().value().data()[k];
            probe.get_mut(&name).unwrap().value_mut().data_mut()[k] = orig + opts.eps;
            let up = eval(&probe, opts.mode, &f)?;
            probe.get_mut(&name).unwrap().value_mut().data_mut()[k] = orig - opts.eps;
            let down = eval(&probe, opts.mode, &f)?;
            probe.get_mut(&name).unwrap().value_mut().data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let a = g.as_ref().map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > opts.tol {
                report.failures.push(GradFailure {
                    param: name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
