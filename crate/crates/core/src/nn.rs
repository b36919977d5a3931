//! Shared layer helpers. A linear layer `name` owns `name.w` `[in, out]`
//! and `name.b` `[out]` and maps row vectors: `y = x·W + b`.

use rand::Rng;

use crate::diffcore::{DiffError, Graph, ParamStore, Tensor, Var};

/// Inserts `name.w ~ N(0, (gain/√in)²)` and `name.b = 0`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn linear(g: &mut Graph<'_>, name: &str, x: Var) -> Result<Var, DiffError> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Tape-free evaluation of the same layer, used on inference paths.
pub fn linear_eval(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor, DiffError> {
    let w = store
        .get(&format!("{name}.w"))
        .ok_or_else(|| DiffError::UnknownParam(format!("{name}.w")))?;
    let b = store
        .get(&format!("{name}.b"))
        .ok_or_else(|| DiffError::UnknownParam(format!("{name}.b")))?;
    affine(x, w, b)
}

/// `x[m,k]·w[k,n] + b[n]` without a tape.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let (m, k) = (x.rows(), x.cols());
    if w.rank() != 2 || w.shape()[0] != k || b.len() != w.shape()[1] {
        return Err(DiffError::Shape(format!(
            "affine: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let n = w.shape()[1];
    let mut out: Vec<f64> = b.data().iter().copied().cycle().take(m * n).collect();
    crate::diffcore::matmul_acc(x.data(), w.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}
