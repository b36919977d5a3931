//! Central finite-difference oracle for gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward rules it validates.

use super::{forward_backward, DiffError, Graph, ParamStore, Tensor, Trainable, Var};

/// Denominator floor when comparing near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input or parameter, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = Some((name.to_string(), index));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x;
            report.record(&format!("input{k}"), i, analytic[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks gradients of every parameter in `store` (at most `max_per_param`
/// evenly spaced entries per tensor).
pub fn check_params<F>(store: &ParamStore, eps: f64, max_per_param: usize, build: F) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    let (_, grads) = forward_backward(store, Trainable::All, &build)?;
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::with_params(s, Trainable::Nothing);
        let out = build(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck::new();
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let len = store.get(&name).map_or(0, Tensor::len);
        let step = (len / max_per_param.max(1)).max(1);
        let zeros = Tensor::zeros(&[len]);
        let analytic = grads.get(&name).unwrap_or(&zeros);
        for i in (0..len).step_by(step) {
            let x = store.get(&name).unwrap().data()[i];
            set(&mut work, &name, i, x + eps);
            let plus = eval(&work)?;
            set(&mut work, &name, i, x - eps);
            let minus = eval(&work)?;
            set(&mut work, &name, i, x);
            report.record(&name, i, analytic.data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    store.get_mut(name).expect("parameter present").data_mut()[i] = v;
}
