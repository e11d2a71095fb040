//! Central finite-difference checks of analytic gradients.

use crate::error::{NritError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Entries whose relative error exceeds this are flagged.
    pub tol: f64,
    /// Denominator floor: errors are relative to `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.flagged.is_empty())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares parameter gradients of the scalar built by `build` against
/// central differences, perturbing every entry of each listed parameter.
///
/// `build` must be deterministic; two evaluations at the probe point that
/// disagree bitwise are reported as [`NritError::NonDeterministic`].
pub fn gradient_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    opts: CheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<NodeId>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NritError::NonDeterministic(format!(
            "two evaluations gave {first} and {second}"
        )));
    }

    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?.param_grads(&g);

    let mut work = store.clone();
    let mut tensors = Vec::new();
    for &id in params {
        let n = store.value(id).len();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * opts.h);
        }
        tensors.push(compare(&store.get(id).name, analytic.data(), &numeric, opts));
    }
    Ok(GradCheckReport { tensors })
}

/// Same check with respect to free input tensors rather than parameters.
/// `build` receives one graph input node per tensor in `inputs`.
pub fn gradient_check_inputs<F>(inputs: &[Tensor], opts: CheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };
    let first = eval(inputs)?;
    if first.to_bits() != eval(inputs)?.to_bits() {
        return Err(NritError::NonDeterministic("input closure".into()));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let back = g.backward(loss)?;

    let mut work = inputs.to_vec();
    let mut tensors = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let analytic = back.grad_or_zero(&g, id);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * opts.h);
        }
        tensors.push(compare(&format!("input{k}"), analytic.data(), &numeric, opts));
    }
    Ok(GradCheckReport { tensors })
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], opts: CheckOptions) -> TensorCheck {
    let mut check = TensorCheck {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        flagged: Vec::new(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, opts.floor);
        if e > check.max_rel_error || e.is_nan() {
            check.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            check.worst_index = i;
        }
        if !(e <= opts.tol) {
            check.flagged.push(i);
        }
    }
    check
}
