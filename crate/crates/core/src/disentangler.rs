//! The two feature-disentanglement blocks: a learnable softmax-weighted sum
//! over encoder layers, a frame-wise GELU encoder, and diagonal Gaussian
//! posterior heads.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::nn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Content,
    Descriptor,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Content, Branch::Descriptor];

    /// Parameter-name prefix of the branch block.
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Content => "content",
            Branch::Descriptor => "descriptor",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchDims {
    pub n_layers: usize,
    pub dim: usize,
    pub hidden: usize,
    pub latent: usize,
}

/// Parameter names owned by one branch block.
pub fn branch_param_names(branch: Branch) -> Vec<String> {
    let p = branch.prefix();
    let mut names = vec![format!("{p}.layer_logits")];
    for layer in ["enc1", "enc2", "mu", "logsigma"] {
        names.push(format!("{p}.{layer}.w"));
        names.push(format!("{p}.{layer}.b"));
    }
    names
}

/// Layer logits start at zero (uniform weights); the log-sigma head starts
/// small so initial posteriors sit near the prior.
pub fn init_branch<R: Rng + ?Sized>(store: &mut ParamStore, branch: Branch, dims: BranchDims, rng: &mut R) {
    let p = branch.prefix();
    store.insert(format!("{p}.layer_logits"), Tensor::zeros(&[dims.n_layers]));
    nn::init_linear(store, &format!("{p}.enc1"), dims.dim, dims.hidden, 1.0, rng);
    nn::init_linear(store, &format!("{p}.enc2"), dims.hidden, dims.hidden, 1.0, rng);
    nn::init_linear(store, &format!("{p}.mu"), dims.hidden, dims.latent, 1.0, rng);
    nn::init_linear(store, &format!("{p}.logsigma"), dims.hidden, dims.latent, 0.1, rng);
}

/// `softmax(logits)`-weighted sum over the first axis of `x[L, T, D]`.
/// `logits` may have shape `[L]` or `[1, L]`.
pub fn weighted_sum(g: &mut Graph<'_>, x: Var, logits: Var) -> Result<Var, DiffError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(DiffError::Shape(format!("weighted_sum expects [L, T, D], got {shape:?}")));
    }
    let (l, t, d) = (shape[0], shape[1], shape[2]);
    if g.value(logits).len() != l {
        return Err(DiffError::Shape(format!(
            "weighted_sum: {l} layers vs logits {:?}",
            g.shape(logits)
        )));
    }
    let row = g.reshape(logits, &[1, l])?;
    let weights = g.softmax(row)?;
    let flat = g.reshape(x, &[l, t * d])?;
    let mixed = g.matmul(weights, flat)?;
    g.reshape(mixed, &[t, d])
}

/// Softmax layer weights of a branch, read straight from the store.
pub fn layer_weights(store: &ParamStore, branch: Branch) -> Option<Vec<f64>> {
    let mut w = store.get(&format!("{}.layer_logits", branch.prefix()))?.data().to_vec();
    crate::diffcore::softmax_in_place(&mut w);
    Some(w)
}

/// Per-frame diagonal Gaussian `N(mu, sigma²)`, both `[T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub sigma: Var,
}

/// `mu = mu_head(enc(h))`, `sigma = exp(logsigma_head(enc(h)))`, frame-wise.
pub fn encode_posterior(g: &mut Graph<'_>, branch: Branch, h: Var) -> Result<Posterior, DiffError> {
    let p = branch.prefix();
    let a = nn::linear(g, &format!("{p}.enc1"), h)?;
    let a = g.gelu(a)?;
    let e = nn::linear(g, &format!("{p}.enc2"), a)?;
    let mu = nn::linear(g, &format!("{p}.mu"), e)?;
    let ls = nn::linear(g, &format!("{p}.logsigma"), e)?;
    let sigma = g.exp(ls)?;
    Ok(Posterior { mu, sigma })
}

/// Weighted sum followed by the posterior heads.
pub fn branch_posterior(g: &mut Graph<'_>, branch: Branch, features: Var) -> Result<Posterior, DiffError> {
    let logits = g.param(&format!("{}.layer_logits", branch.prefix()))?;
    let h = weighted_sum(g, features, logits)?;
    encode_posterior(g, branch, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatentError {
    #[error("train-mode sampling needs a noise tensor")]
    MissingNoise,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Train mode: `z = mu + sigma ⊙ noise`. Infer mode: `z = mu` (the same node).
pub fn sample_latent(
    g: &mut Graph<'_>,
    post: Posterior,
    mode: SampleMode,
    noise: Option<Tensor>,
) -> Result<Var, LatentError> {
    match mode {
        SampleMode::Infer => Ok(post.mu),
        SampleMode::Train => {
            let noise = noise.ok_or(LatentError::MissingNoise)?;
            Ok(g.reparameterize(post.mu, post.sigma, noise)?)
        }
    }
}

/// KL to the standard normal: summed over latent dims, averaged over frames.
pub fn branch_kl(g: &mut Graph<'_>, post: Posterior) -> Result<Var, DiffError> {
    let frames = g.shape(post.mu)[0];
    let total = g.kl_std_normal(post.mu, post.sigma)?;
    g.scale(total, 1.0 / frames as f64)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::LN_2;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::gradcheck::{check_inputs, check_params};
    use crate::diffcore::Trainable;

    const DIMS: BranchDims = BranchDims {
        n_layers: 3,
        dim: 4,
        hidden: 4,
        latent: 2,
    };

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_branch(&mut s, Branch::Content, DIMS, &mut rng);
        init_branch(&mut s, Branch::Descriptor, DIMS, &mut rng);
        s
    }

    fn ws(x: Tensor, logits: Vec<f64>) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(x);
        let l = g.constant(Tensor::vector(logits));
        let out = weighted_sum(&mut g, x, l).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn weighted_sum_examples() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(ws(x, vec![0.5, 0.5]).data(), &[2.0, 4.0]);

        let x = Tensor::new(vec![2, 1, 1], vec![4.0, 0.0]).unwrap();
        let y = ws(x, vec![3f64.ln(), 0.0]);
        assert!((y.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 5, 4], 1.0, &mut rng);
        let logits = vec![0.3, -1.2, 2.0];
        let a = ws(x.clone(), logits.clone());
        let b = ws(x, logits.iter().map(|v| v + 17.5).collect());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let logits = Tensor::vector(vec![0.1, -0.4, 0.7]);
        let proj = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let r = check_inputs(&[x, logits], 1e-5, |g, v| {
            let y = weighted_sum(g, v[0], v[1])?;
            let p = g.constant(proj.clone());
            let m = g.mul(y, p)?;
            let s = g.gelu(m)?;
            g.sum(s)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    fn zero_store() -> ParamStore {
        let mut s = store(0);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        s
    }

    #[test]
    fn zero_network_gives_prior() {
        let s = zero_store();
        let mut g = Graph::with_params(&s, Trainable::Nothing);
        let x = g.constant(Tensor::filled(&[3, 5, 4], 0.7));
        let post = branch_posterior(&mut g, Branch::Content, x).unwrap();
        assert_eq!(g.shape(post.mu), &[5, 2]);
        assert_eq!(g.shape(post.sigma), &[5, 2]);
        assert!(g.value(post.mu).data().iter().all(|&v| v == 0.0));
        assert!(g.value(post.sigma).data().iter().all(|&v| v == 1.0));
        let kl = branch_kl(&mut g, post).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    #[test]
    fn hand_evaluated_one_frame_forward() {
        // D = H = d = 1: three weights carry the computation.
        let mut s = ParamStore::new();
        let put = |s: &mut ParamStore, n: &str, v: f64| s.insert(format!("content.{n}"), Tensor::matrix(1, 1, vec![v]).unwrap());
        s.insert("content.layer_logits", Tensor::vector(vec![0.0]));
        put(&mut s, "enc1.w", 0.5);
        put(&mut s, "enc2.w", -1.5);
        put(&mut s, "mu.w", 2.0);
        put(&mut s, "logsigma.w", 0.25);
        for n in ["enc1", "enc2", "mu", "logsigma"] {
            s.insert(format!("content.{n}.b"), Tensor::vector(vec![0.0]));
        }
        let mut g = Graph::with_params(&s, Trainable::Nothing);
        let x = g.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let post = branch_posterior(&mut g, Branch::Content, x).unwrap();

        // gelu(1.0) with the tanh approximation, evaluated by hand.
        let inner = (2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715);
        let gelu1 = 0.5 * (1.0 + inner.tanh());
        let e = -1.5 * gelu1;
        assert!((g.value(post.mu).item() - 2.0 * e).abs() < 1e-6);
        assert!((g.value(post.sigma).item() - (0.25 * e).exp()).abs() < 1e-6);
    }

    #[test]
    fn infer_mode_returns_mu_node() {
        let s = store(1);
        let mut g = Graph::with_params(&s, Trainable::All);
        let x = g.constant(Tensor::filled(&[3, 2, 4], 0.2));
        let post = branch_posterior(&mut g, Branch::Content, x).unwrap();
        let z = sample_latent(&mut g, post, SampleMode::Infer, None).unwrap();
        assert_eq!(z, post.mu);
        let z0 = sample_latent(&mut g, post, SampleMode::Train, Some(Tensor::zeros(&[2, 2]))).unwrap();
        assert_eq!(g.value(z0), g.value(post.mu));
        assert_eq!(
            sample_latent(&mut g, post, SampleMode::Train, None),
            Err(LatentError::MissingNoise)
        );
    }

    #[test]
    fn train_mode_gradients_reach_both_heads() {
        let s = store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let noise = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let target = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let build = |g: &mut Graph<'_>| {
            let xv = g.constant(x.clone());
            let post = branch_posterior(g, Branch::Content, xv)?;
            let z = sample_latent(g, post, SampleMode::Train, Some(noise.clone())).map_err(|e| match e {
                LatentError::Diff(d) => d,
                LatentError::MissingNoise => unreachable!(),
            })?;
            let t = g.constant(target.clone());
            let m = g.mul(z, t)?;
            let m = g.gelu(m)?;
            let kl = branch_kl(g, post)?;
            let s = g.sum(m)?;
            g.add(s, kl)
        };
        let r = check_params(&s.subset("content."), 1e-5, 16, build).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let (_, grads) = crate::diffcore::forward_backward(&s, Trainable::All, build).unwrap();
        for head in ["content.mu.w", "content.logsigma.w", "content.layer_logits"] {
            assert!(grads[head].data().iter().any(|&v| v != 0.0), "{head}");
        }
        assert!(grads.get("descriptor.mu.w").is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn kl_is_frame_mean() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::matrix(2, 1, vec![1.0, 3f64.sqrt()]).unwrap());
        let sigma = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let kl = branch_kl(&mut g, Posterior { mu, sigma }).unwrap();
        // Per-frame KLs are 0.5 and 1.5.
        assert!((g.value(kl).item() - 1.0).abs() < 1e-12);

        let mu = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let sigma = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let kl = branch_kl(&mut g, Posterior { mu, sigma }).unwrap();
        assert!((g.value(kl).item() - (1.5 - LN_2)).abs() < 1e-12);
    }

    #[test]
    fn branches_share_no_parameters() {
        let s = store(3);
        let con = branch_param_names(Branch::Content);
        let des = branch_param_names(Branch::Descriptor);
        assert!(con.iter().all(|n| !des.contains(n)));
        assert_eq!(con.len() + des.len(), s.len());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let descriptor_mu = |s: &ParamStore| {
            let mut g = Graph::with_params(s, Trainable::Nothing);
            let xv = g.constant(x.clone());
            let post = branch_posterior(&mut g, Branch::Descriptor, xv).unwrap();
            g.value(post.mu).clone()
        };
        let before = descriptor_mu(&s);
        let mut mutated = s.clone();
        for n in &con {
            mutated.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 1.0);
        }
        assert_eq!(descriptor_mu(&mutated), before);
    }

    #[test]
    fn layer_weights_are_a_distribution() {
        let mut s = store(4);
        s.get_mut("content.layer_logits").unwrap().data_mut().copy_from_slice(&[5.0, -3.0, 0.5]);
        let w = layer_weights(&s, Branch::Content).unwrap();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
