//! Per-branch adapters into the decoder embedding space:
//! `S = Linear(ReLU(Linear(DownSample(Z))))`.

use rand::Rng;

use crate::diffcore::{DiffError, Graph, ParamStore, Var};
use crate::disentangler::Branch;
use crate::nn;

pub fn adapter_prefix(branch: Branch) -> String {
    format!("{}_adapter", branch.prefix())
}

pub fn adapter_param_names(branch: Branch) -> Vec<String> {
    let p = adapter_prefix(branch);
    ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]
        .iter()
        .map(|n| format!("{p}.{n}"))
        .collect()
}

pub fn init_adapter<R: Rng + ?Sized>(
    store: &mut ParamStore,
    branch: Branch,
    factor: usize,
    latent: usize,
    embed: usize,
    rng: &mut R,
) {
    let p = adapter_prefix(branch);
    nn::init_linear(store, &format!("{p}.fc1"), factor * latent, embed, 2f64.sqrt(), rng);
    nn::init_linear(store, &format!("{p}.fc2"), embed, embed, 1.0, rng);
}

/// Output length for `frames` inputs: `ceil(frames / factor)`.
pub fn downsampled_len(frames: usize, factor: usize) -> usize {
    frames.div_ceil(factor)
}

/// Stacks each run of `factor` consecutive frames into one row of width
/// `factor·d`; a short final run is padded with zero frames.
pub fn downsample(g: &mut Graph<'_>, z: Var, factor: usize) -> Result<Var, DiffError> {
    if factor == 0 {
        return Err(DiffError::Shape("downsample factor must be positive".into()));
    }
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(DiffError::Shape(format!("downsample expects [T, d], got {shape:?}")));
    }
    let (t, d) = (shape[0], shape[1]);
    let out_rows = downsampled_len(t, factor);
    if factor == 1 {
        return Ok(z);
    }
    let padded = if out_rows * factor == t {
        z
    } else {
        g.pad_rows(z, out_rows * factor)?
    };
    g.reshape(padded, &[out_rows, factor * d])
}

pub fn adapt(g: &mut Graph<'_>, branch: Branch, z: Var, factor: usize) -> Result<Var, DiffError> {
    let p = adapter_prefix(branch);
    let x = downsample(g, z, factor)?;
    let h = nn::linear(g, &format!("{p}.fc1"), x)?;
    let h = g.relu(h)?;
    nn::linear(g, &format!("{p}.fc2"), h)
}
