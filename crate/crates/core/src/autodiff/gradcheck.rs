//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

const WORST_KEPT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    /// Entries above `tol`, worst first (at most ten).
    pub failures: Vec<GradMismatch>,
    /// Worst entry per tensor, in tensor order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Collector {
    tol: f64,
    checked: usize,
    max_rel: f64,
    failures: Vec<GradMismatch>,
    per_tensor: Vec<(String, f64)>,
}

impl Collector {
    fn new(tol: f64) -> Self {
        Self {
            tol,
            checked: 0,
            max_rel: 0.0,
            failures: Vec::new(),
            per_tensor: Vec::new(),
        }
    }

    fn push(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        self.max_rel = self.max_rel.max(rel);
        match self.per_tensor.last_mut() {
            Some((name, worst)) if name == tensor => *worst = worst.max(rel),
            _ => self.per_tensor.push((tensor.to_string(), rel)),
        }
        if rel > self.tol || !rel.is_finite() {
            self.failures.push(GradMismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }

    fn finish(mut self) -> GradCheckReport {
        self.failures
            .sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        self.failures.truncate(WORST_KEPT);
        GradCheckReport {
            checked: self.checked,
            max_rel_error: self.max_rel,
            tol: self.tol,
            failures: self.failures,
            per_tensor: self.per_tensor,
        }
    }
}

/// Checks `f` with respect to free input tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut work = inputs.to_vec();
    let mut out = Collector::new(tol);
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            out.push(&format!("input{t}"), i, analytic[t].data()[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(out.finish())
}

/// Checks `f` with respect to every parameter in `store`.
pub fn grad_check_store<F>(store: &mut ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss)?.accumulate_into(store);
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };

    let ids: Vec<_> = store.ids().collect();
    let mut out = Collector::new(tol);
    for id in ids {
        let name = store.name(id).to_string();
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            out.push(&name, i, store.grad(id)[i], (plus - minus) / (2.0 * h));
        }
    }
    store.zero_grad();
    Ok(out.finish())
}
