//! Central finite-difference checks of tape gradients.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-4)`: the
//! floor keeps coordinates whose true gradient is ~0 from dividing
//! round-off noise by round-off noise.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinate with the largest relative error.
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

/// Checks `d f / d inputs` for a scalar function of leaf tensors.
pub fn check_leaf_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.grad_wrt(out, &vars)?;

    let mut report = GradReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..work[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(grad.data()[i], numeric, || format!("input {ti}[{i}]"));
        }
    }
    Ok(report)
}

/// Checks `d f / d θ` for every scalar of every parameter in `store`.
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out, store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        tape.value(out).item()
    };

    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradReport::new();
    for name in &names {
        let len = store.get(name).map(Tensor::len).unwrap_or(0);
        let g = grads.get(name).expect("gradient for every parameter").clone();
        for i in 0..len {
            let orig = store.get(name).unwrap().data()[i];
            work.value_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(g.data()[i], numeric, || format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
