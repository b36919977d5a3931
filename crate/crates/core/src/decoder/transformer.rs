//! Toy pre-norm causal transformer with learned positions and an output
//! projection tied to the token embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{lora_apply, lora_weight};
use crate::diffcore::{gelu, matmul_acc, softmax_in_place, DiffError, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub context: usize,
    /// 0 disables the low-rank deltas.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            heads: 4,
            blocks: 2,
            ffn: 128,
            context: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

/// Projections that carry low-rank deltas, with their (in, out) widths.
pub fn projections(cfg: &DecoderConfig) -> [(&'static str, usize, usize); 6] {
    let (e, f) = (cfg.embed, cfg.ffn);
    [("q", e, e), ("k", e, e), ("v", e, e), ("o", e, e), ("ffn1", e, f), ("ffn2", f, e)]
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(format!("embed {} must be a positive multiple of heads {}", self.embed, self.heads));
        }
        if self.blocks == 0 || self.ffn == 0 || self.context < super::prompt::TEMPLATE_LEN + 1 {
            return Err("blocks, ffn and context must be positive (context above the template length)".into());
        }
        if self.lora_rank > 0 && !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err("lora_alpha must be positive".into());
        }
        Ok(())
    }
}

/// A key bias adds the same `q·b` to every score in a row, which the
/// softmax cancels, so the key projection has none.
pub fn has_bias(proj: &str) -> bool {
    proj != "k"
}

pub fn block_name(i: usize, proj: &str) -> String {
    format!("decoder.block{i}.{proj}")
}

pub fn lora_names(i: usize, proj: &str) -> (String, String) {
    (format!("lora.block{i}.{proj}.a"), format!("lora.block{i}.{proj}.b"))
}

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, vocab: usize, rng: &mut R) {
    let e = cfg.embed;
    store.insert("decoder.tok_emb", Tensor::randn(&[vocab, e], 1.0 / (e as f64).sqrt(), rng));
    store.insert("decoder.pos_emb", Tensor::randn(&[cfg.context, e], 0.1 / (e as f64).sqrt(), rng));
    for i in 0..cfg.blocks {
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{}.g", block_name(i, ln)), Tensor::filled(&[e], 1.0));
            store.insert(format!("{}.b", block_name(i, ln)), Tensor::zeros(&[e]));
        }
        for (proj, fan_in, fan_out) in projections(cfg) {
            let gain = if proj == "o" || proj == "ffn2" { 0.5 } else { 1.0 };
            let name = block_name(i, proj);
            store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng));
            if has_bias(proj) {
                store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
            }
            if cfg.lora_rank > 0 {
                let (a, b) = lora_names(i, proj);
                let r = cfg.lora_rank;
                store.insert(a, Tensor::randn(&[r, fan_out], 1.0 / (fan_out as f64).sqrt(), rng));
                store.insert(b, Tensor::zeros(&[fan_in, r]));
            }
        }
    }
    store.insert("decoder.ln_f.g", Tensor::filled(&[e], 1.0));
    store.insert("decoder.ln_f.b", Tensor::zeros(&[e]));
}

fn proj(g: &mut Graph<'_>, cfg: &DecoderConfig, i: usize, name: &str, x: Var) -> Result<Var, DiffError> {
    let base = block_name(i, name);
    let mut w = g.param(&format!("{base}.w"))?;
    if cfg.lora_rank > 0 {
        let (an, bn) = lora_names(i, name);
        let (a, b) = (g.param(&an)?, g.param(&bn)?);
        w = lora_weight(g, w, a, b, cfg.lora_alpha)?;
    }
    let y = g.matmul(x, w)?;
    if !has_bias(name) {
        return Ok(y);
    }
    let bias = g.param(&format!("{base}.b"))?;
    g.add_row(y, bias)
}

fn layer_norm(g: &mut Graph<'_>, name: &str, x: Var) -> Result<Var, DiffError> {
    let gain = g.param(&format!("{name}.g"))?;
    let bias = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Runs the blocks over input embeddings `x[S, E]` (positions are added
/// here) and returns the final-norm hidden states `[S, E]`.
pub fn hidden_states(g: &mut Graph<'_>, cfg: &DecoderConfig, x: Var) -> Result<Var, DiffError> {
    let s = g.shape(x)[0];
    if s > cfg.context {
        return Err(DiffError::Shape(format!("sequence of {s} exceeds context {}", cfg.context)));
    }
    let pos_table = g.param("decoder.pos_emb")?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = g.embedding(pos_table, &positions)?;
    let mut h = g.add(x, pos)?;
    let hd = cfg.embed / cfg.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    for i in 0..cfg.blocks {
        let a = layer_norm(g, &block_name(i, "ln1"), h)?;
        let q = proj(g, cfg, i, "q", a)?;
        let k = proj(g, cfg, i, "k", a)?;
        let v = proj(g, cfg, i, "v", a)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.causal_softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = proj(g, cfg, i, "o", cat)?;
        h = g.add(h, o)?;
        let b = layer_norm(g, &block_name(i, "ln2"), h)?;
        let f = proj(g, cfg, i, "ffn1", b)?;
        let f = g.gelu(f)?;
        let f = proj(g, cfg, i, "ffn2", f)?;
        h = g.add(h, f)?;
    }
    layer_norm(g, "decoder.ln_f", h)
}

/// Logits `[rows, V]` from hidden states through the tied projection.
pub fn output_logits(g: &mut Graph<'_>, hidden: Var) -> Result<Var, DiffError> {
    let table = g.param("decoder.tok_emb")?;
    g.matmul_nt(hidden, table)
}

struct BlockWeights {
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    /// (effective weight `[in, out]`, bias) for q, k, v, o, ffn1, ffn2.
    proj: Vec<(Tensor, Vec<f64>)>,
}

/// Decoder weights with low-rank deltas merged, for tape-free inference.
pub struct DecoderWeights {
    cfg: DecoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<BlockWeights>,
    ln_f: (Vec<f64>, Vec<f64>),
}

fn fetch<'s>(store: &'s ParamStore, name: &str) -> Result<&'s Tensor, DiffError> {
    store.get(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))
}

impl DecoderWeights {
    pub fn from_store(store: &ParamStore, cfg: &DecoderConfig) -> Result<Self, DiffError> {
        let ln = |name: &str| -> Result<(Vec<f64>, Vec<f64>), DiffError> {
            Ok((
                fetch(store, &format!("{name}.g"))?.data().to_vec(),
                fetch(store, &format!("{name}.b"))?.data().to_vec(),
            ))
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut proj = Vec::new();
            for (name, _, _) in projections(cfg) {
                let base = block_name(i, name);
                let mut w = fetch(store, &format!("{base}.w"))?.clone();
                if cfg.lora_rank > 0 {
                    let (an, bn) = lora_names(i, name);
                    w = lora_apply(&w, fetch(store, &an)?, fetch(store, &bn)?, cfg.lora_alpha)?;
                }
                let bias = if has_bias(name) {
                    fetch(store, &format!("{base}.b"))?.data().to_vec()
                } else {
                    vec![0.0; w.cols()]
                };
                proj.push((w, bias));
            }
            blocks.push(BlockWeights {
                ln1: ln(&block_name(i, "ln1"))?,
                ln2: ln(&block_name(i, "ln2"))?,
                proj,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb: fetch(store, "decoder.tok_emb")?.clone(),
            pos_emb: fetch(store, "decoder.pos_emb")?.clone(),
            blocks,
            ln_f: ln("decoder.ln_f")?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.tok_emb
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            w: self,
            keys: vec![Vec::new(); self.cfg.blocks],
            values: vec![Vec::new(); self.cfg.blocks],
            len: 0,
        }
    }
}

fn layer_norm_row(x: &[f64], (g, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) * rstd * g[j] + b[j]).collect()
}

fn affine_row(x: &[f64], (w, b): &(Tensor, Vec<f64>)) -> Vec<f64> {
    let mut out = b.clone();
    matmul_acc(x, w.data(), &mut out, 1, x.len(), b.len());
    out
}

/// Incremental decoding state: cached keys and values per block.
pub struct Session<'w> {
    w: &'w DecoderWeights,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one input embedding and returns the next-token logits.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>, DiffError> {
        let cfg = &self.w.cfg;
        let e = cfg.embed;
        if self.len >= cfg.context {
            return Err(DiffError::Shape(format!("context {} exhausted", cfg.context)));
        }
        let mut h: Vec<f64> = x.iter().zip(self.w.pos_emb.row(self.len)).map(|(a, p)| a + p).collect();
        let hd = e / cfg.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let t = self.len + 1;
        for (bi, blk) in self.w.blocks.iter().enumerate() {
            let a = layer_norm_row(&h, &blk.ln1);
            let q = affine_row(&a, &blk.proj[0]);
            self.keys[bi].extend(affine_row(&a, &blk.proj[1]));
            self.values[bi].extend(affine_row(&a, &blk.proj[2]));
            let (keys, values) = (&self.keys[bi], &self.values[bi]);
            let mut cat = vec![0.0; e];
            let mut scores = vec![0.0; t];
            for head in 0..cfg.heads {
                let lo = head * hd;
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * e + lo..j * e + lo + hd];
                    *s = q[lo..lo + hd].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    let v = &values[j * e + lo..j * e + lo + hd];
                    for (c, vv) in cat[lo..lo + hd].iter_mut().zip(v) {
                        *c += p * vv;
                    }
                }
            }
            let o = affine_row(&cat, &blk.proj[3]);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let b = layer_norm_row(&h, &blk.ln2);
            let f: Vec<f64> = affine_row(&b, &blk.proj[4]).into_iter().map(gelu).collect();
            let f = affine_row(&f, &blk.proj[5]);
            h.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
        }
        self.len = t;
        let hf = layer_norm_row(&h, &self.w.ln_f);
        let v = self.w.tok_emb.rows();
        let mut logits = vec![0.0; v];
        for (id, l) in logits.iter_mut().enumerate() {
            *l = hf.iter().zip(self.w.tok_emb.row(id)).map(|(a, b)| a * b).sum();
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "decoder step" });
        }
        Ok(logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from prompt embeddings `[S, E]`. Stops after emitting
/// `eos` or `max_len` tokens, or when the context is full.
pub fn generate(w: &DecoderWeights, prompt: &Tensor, eos: usize, max_len: usize) -> Result<Vec<usize>, DiffError> {
    let mut sess = w.session();
    let mut logits = Vec::new();
    for r in 0..prompt.rows() {
        logits = sess.step(prompt.row(r))?;
    }
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax(&logits);
        out.push(next);
        if next == eos || sess.len() >= w.cfg.context {
            break;
        }
        logits = sess.step(w.tok_emb.row(next))?;
    }
    Ok(out)
}
