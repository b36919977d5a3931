//! Low-rank weight deltas: `W_eff = W + (alpha / r)·B·A` with `W[m, n]`,
//! `A[r, n]`, `B[m, r]`.

use crate::diffcore::{matmul_acc, DiffError, Graph, Tensor, Var};

fn check(w: &[usize], a: &[usize], b: &[usize]) -> Result<(usize, usize, usize), DiffError> {
    let ok = w.len() == 2 && a.len() == 2 && b.len() == 2 && a[1] == w[1] && b[0] == w[0] && b[1] == a[0] && a[0] >= 1;
    if !ok {
        return Err(DiffError::Shape(format!("lora: W {w:?}, A {a:?}, B {b:?}")));
    }
    Ok((w[0], a[0], w[1]))
}

pub fn lora_apply(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor, DiffError> {
    let (m, r, n) = check(w.shape(), a.shape(), b.shape())?;
    let mut delta = vec![0.0; m * n];
    matmul_acc(b.data(), a.data(), &mut delta, m, r, n);
    let scale = alpha / r as f64;
    let data = w.data().iter().zip(&delta).map(|(x, d)| x + scale * d).collect();
    Tensor::new(vec![m, n], data)
}

pub fn lora_weight(g: &mut Graph<'_>, w: Var, a: Var, b: Var, alpha: f64) -> Result<Var, DiffError> {
    let (_, r, _) = check(g.shape(w), g.shape(a), g.shape(b))?;
    let ba = g.matmul(b, a)?;
    let delta = g.scale(ba, alpha / r as f64)?;
    g.add(w, delta)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::diffcore::{forward_backward, ParamStore, Trainable};

    #[test]
    fn zero_b_is_bit_exact_identity() {
        let w = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-17, 5.0, -7.25]).unwrap();
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::zeros(&[2, 2]);
        assert_eq!(lora_apply(&w, &a, &b, 16.0).unwrap(), w);
    }

    #[test]
    fn scalar_arithmetic() {
        let one = |v| Tensor::matrix(1, 1, vec![v]).unwrap();
        assert_eq!(lora_apply(&one(2.0), &one(3.0), &one(4.0), 1.0).unwrap().item(), 14.0);
        assert!(lora_apply(&one(2.0), &Tensor::zeros(&[1, 2]), &one(4.0), 1.0).is_err());
    }

    #[test]
    fn base_weight_gets_no_gradient_when_frozen() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        s.insert("a", Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        s.insert("b", Tensor::matrix(2, 1, vec![0.2, 0.9]).unwrap());
        let trainable: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let x = Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap();
        let build = |g: &mut Graph<'_>| {
            let (w, a, b) = (g.param("w")?, g.param("a")?, g.param("b")?);
            let we = lora_weight(g, w, a, b, 2.0)?;
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, we)?;
            let y = g.gelu(y)?;
            g.sum(y)
        };
        let (_, grads) = forward_backward(&s, Trainable::Only(&trainable), build).unwrap();
        assert!(!grads.contains_key("w"));
        assert!(grads["a"].data().iter().any(|&v| v != 0.0));

        // The full-gradient oracle for the same loss.
        let r = crate::diffcore::gradcheck::check_params(&s, 1e-5, 8, build).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
