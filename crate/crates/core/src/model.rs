//! The assembled model: both disentanglement branches, their adapters and
//! the decoder, plus the per-utterance forward pass shared by training,
//! evaluation and the sweep.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{self, downsampled_len};
use crate::datagen::Utterance;
use crate::decoder::{
    self, assemble_prompt, decode_loss, embed_sequence_eval, generate, response_tokens, CheckpointError,
    DecoderConfig, DecoderError, DecoderWeights, PromptError, Task, Vocab,
};
use crate::diffcore::{DiffError, Graph, ParamStore, Tensor, Trainable, Var};
use crate::disentangler::{self, Branch, BranchDims, LatentError, SampleMode};
use crate::metrics::normalize;
use crate::seeding;

pub const CHECKPOINT_FILE: &str = "model.serd";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Branch encoder width; `None` uses the feature dimension.
    pub hidden: Option<usize>,
    pub latent: usize,
    /// Frames stacked per adapter output row.
    pub downsample: usize,
    /// Cap on generated response length.
    pub max_response: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            latent: 16,
            downsample: 4,
            max_response: 64,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.latent == 0 {
            return Err("model.latent must be positive".into());
        }
        if self.hidden == Some(0) {
            return Err("model.hidden must be positive".into());
        }
        if self.downsample == 0 {
            return Err("model.downsample must be positive".into());
        }
        if self.max_response == 0 {
            return Err("model.max_response must be positive".into());
        }
        self.decoder.validate().map_err(|e| format!("model.decoder: {e}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("token `{0}` is not in the model vocabulary")]
    UnknownToken(String),
    #[error("utterance {id}: features are {got:?}, model expects [{layers}, T, {dim}]")]
    FeatureShape {
        id: String,
        got: Vec<usize>,
        layers: usize,
        dim: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl From<DecoderError> for ModelError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::Prompt(p) => ModelError::Prompt(p),
            DecoderError::Diff(d) => ModelError::Diff(d),
        }
    }
}

impl From<LatentError> for ModelError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Diff(d) => ModelError::Diff(d),
            LatentError::MissingNoise => ModelError::Diff(DiffError::Shape(e.to_string())),
        }
    }
}

/// Coarse ownership of a parameter, used by the freeze schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ContentBranch,
    ContentAdapter,
    DescriptorBranch,
    DescriptorAdapter,
    DecoderBase,
    DecoderLowRank,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Some(match head {
            "content" => ParamGroup::ContentBranch,
            "content_adapter" => ParamGroup::ContentAdapter,
            "descriptor" => ParamGroup::DescriptorBranch,
            "descriptor_adapter" => ParamGroup::DescriptorAdapter,
            "decoder" => ParamGroup::DecoderBase,
            "lora" => ParamGroup::DecoderLowRank,
            _ => return None,
        })
    }
}

/// Which prompt slots carry live branch outputs. A dead slot keeps its
/// length but is filled with zero vectors and its branch is not run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slots {
    pub content: bool,
    pub descriptor: bool,
}

impl Slots {
    pub const BOTH: Slots = Slots {
        content: true,
        descriptor: true,
    };
    pub const CONTENT_ONLY: Slots = Slots {
        content: true,
        descriptor: false,
    };
    pub const NONE: Slots = Slots {
        content: false,
        descriptor: false,
    };
}

/// Loss terms for one utterance. `kl_des` is `None` when the descriptor
/// slot is dead.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub task: Var,
    pub kl_con: Option<Var>,
    pub kl_des: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SerModel {
    pub config: ModelConfig,
    pub dims: BranchDims,
    pub vocab: Vocab,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: ModelConfig,
    dims: BranchDims,
    vocab: Vocab,
}

/// Vocabulary over every normalized transcript and caption word.
pub fn corpus_vocab(corpus: &[Utterance]) -> Vocab {
    let words: Vec<String> = corpus
        .iter()
        .flat_map(|u| normalize(&u.transcript).into_iter().chain(normalize(&u.descriptor_caption)))
        .collect();
    Vocab::build(words.iter().map(String::as_str))
}

impl SerModel {
    pub fn new(config: ModelConfig, n_layers: usize, dim: usize, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let dims = BranchDims {
            n_layers,
            dim,
            hidden: config.hidden.unwrap_or(dim),
            latent: config.latent,
        };
        let mut params = ParamStore::new();
        for (i, branch) in Branch::BOTH.into_iter().enumerate() {
            let mut rng = seeding::rng(seeding::derive_path(seed, &[1, i as u64]));
            disentangler::init_branch(&mut params, branch, dims, &mut rng);
            let mut rng = seeding::rng(seeding::derive_path(seed, &[2, i as u64]));
            adapters::init_adapter(
                &mut params,
                branch,
                config.downsample,
                config.latent,
                config.decoder.embed,
                &mut rng,
            );
        }
        let mut rng = seeding::rng(seeding::derive(seed, 3));
        decoder::init_decoder(&mut params, &config.decoder, vocab.len(), &mut rng);
        Ok(Self {
            config,
            dims,
            vocab,
            params,
        })
    }

    pub fn for_corpus(config: ModelConfig, corpus: &[Utterance], seed: u64) -> Result<Self, ModelError> {
        let first = corpus
            .first()
            .ok_or_else(|| ModelError::Config("cannot size a model from an empty corpus".into()))?;
        Self::new(config, first.n_layers(), first.dim(), corpus_vocab(corpus), seed)
    }

    pub fn names_in(&self, groups: &[ParamGroup]) -> Vec<String> {
        self.params
            .names()
            .filter(|n| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
            .map(str::to_string)
            .collect()
    }

    fn check_shape(&self, utt: &Utterance) -> Result<(), ModelError> {
        let s = utt.features.shape();
        if s.len() != 3 || s[0] != self.dims.n_layers || s[2] != self.dims.dim {
            return Err(ModelError::FeatureShape {
                id: utt.id.clone(),
                got: s.to_vec(),
                layers: self.dims.n_layers,
                dim: self.dims.dim,
            });
        }
        Ok(())
    }

    pub fn slot_len(&self, frames: usize) -> usize {
        downsampled_len(frames, self.config.downsample)
    }

    /// Target ids for `task`, words normalized as in evaluation.
    pub fn target_ids(&self, utt: &Utterance, task: Task) -> Result<Vec<usize>, ModelError> {
        response_tokens(task, &normalize(&utt.transcript), &normalize(&utt.descriptor_caption), utt.emotion)
            .iter()
            .map(|t| self.vocab.id(t).ok_or_else(|| ModelError::UnknownToken(t.clone())))
            .collect()
    }

    /// Runs one branch to its adapter output. Returns the slot embeddings
    /// and the branch KL.
    fn branch_slot(
        &self,
        g: &mut Graph<'_>,
        branch: Branch,
        x: Var,
        noise: Option<Tensor>,
    ) -> Result<(Var, Var), ModelError> {
        let post = disentangler::branch_posterior(g, branch, x)?;
        let mode = if noise.is_some() { SampleMode::Train } else { SampleMode::Infer };
        let z = disentangler::sample_latent(g, post, mode, noise)?;
        let kl = disentangler::branch_kl(g, post)?;
        let s = adapters::adapt(g, branch, z, self.config.downsample)?;
        Ok((s, kl))
    }

    fn zero_slot(&self, g: &mut Graph<'_>, frames: usize) -> Var {
        g.constant(Tensor::zeros(&[self.slot_len(frames), self.config.decoder.embed]))
    }

    /// Builds the slot embeddings for `utt`. With `noise_seed` the latents
    /// are sampled; without it they are the posterior means.
    fn slots(
        &self,
        g: &mut Graph<'_>,
        utt: &Utterance,
        slots: Slots,
        noise_seed: Option<u64>,
    ) -> Result<(Var, Var, Option<Var>, Option<Var>), ModelError> {
        self.check_shape(utt)?;
        let frames = utt.n_frames();
        let x = g.constant(utt.features.clone());
        let mut rng = noise_seed.map(seeding::rng);
        let mut noise = || {
            rng.as_mut()
                .map(|r| Tensor::randn(&[frames, self.dims.latent], 1.0, r))
        };
        let (n_con, n_des) = (noise(), noise());
        let (s_con, kl_con) = if slots.content {
            let (s, kl) = self.branch_slot(g, Branch::Content, x, n_con)?;
            (s, Some(kl))
        } else {
            (self.zero_slot(g, frames), None)
        };
        let (s_des, kl_des) = if slots.descriptor {
            let (s, kl) = self.branch_slot(g, Branch::Descriptor, x, n_des)?;
            (s, Some(kl))
        } else {
            (self.zero_slot(g, frames), None)
        };
        Ok((s_con, s_des, kl_con, kl_des))
    }

    /// Teacher-forced task loss plus branch KLs for one utterance. `g` must
    /// be bound to `self.params`.
    pub fn terms(
        &self,
        g: &mut Graph<'_>,
        utt: &Utterance,
        task: Task,
        slots: Slots,
        noise_seed: Option<u64>,
    ) -> Result<Terms, ModelError> {
        let target = self.target_ids(utt, task)?;
        let (s_con, s_des, kl_con, kl_des) = self.slots(g, utt, slots, noise_seed)?;
        let n = self.slot_len(utt.n_frames());
        let prompt = assemble_prompt(&self.vocab, task, Some(n), Some(n), self.config.decoder.context)?;
        let task = decode_loss(g, &self.config.decoder, &prompt, Some(s_con), Some(s_des), &target)?;
        Ok(Terms { task, kl_con, kl_des })
    }

    /// Text-only loss used to fit the decoder base: each slot holds the
    /// token embeddings of the words it stands for. The transcript is
    /// stretched evenly over the acoustic content-slot length so positions
    /// line up with what the content branch will later supply; the caption
    /// keeps one row per word.
    pub fn text_loss(&self, g: &mut Graph<'_>, utt: &Utterance, task: Task) -> Result<Var, ModelError> {
        let target = self.target_ids(utt, task)?;
        let ids = |words: &[String]| -> Result<Vec<usize>, ModelError> {
            normalize(words)
                .iter()
                .map(|t| self.vocab.id(t).ok_or_else(|| ModelError::UnknownToken(t.clone())))
                .collect()
        };
        let (words, des) = (ids(&utt.transcript)?, ids(&utt.descriptor_caption)?);
        let rows = self.slot_len(utt.n_frames());
        let con: Vec<usize> = if words.is_empty() {
            Vec::new()
        } else {
            (0..rows).map(|r| words[r * words.len() / rows]).collect()
        };
        let tok = g.param("decoder.tok_emb")?;
        let mut slot = |ids: &[usize]| -> Result<Option<Var>, ModelError> {
            Ok(if ids.is_empty() { None } else { Some(g.embedding(tok, ids)?) })
        };
        let (s_con, s_des) = (slot(&con)?, slot(&des)?);
        let len = |ids: &[usize]| (!ids.is_empty()).then_some(ids.len());
        let prompt = assemble_prompt(&self.vocab, task, len(&con), len(&des), self.config.decoder.context)?;
        Ok(decode_loss(g, &self.config.decoder, &prompt, s_con, s_des, &target)?)
    }

    /// Posterior-mean KL of each branch, `(content, descriptor)`.
    pub fn kl(&self, utt: &Utterance) -> Result<(f64, f64), ModelError> {
        let mut g = Graph::with_params(&self.params, Trainable::Nothing);
        let (_, _, kc, kd) = self.slots(&mut g, utt, Slots::BOTH, None)?;
        let v = |k: Option<Var>| k.map_or(0.0, |k| g.value(k).item());
        Ok((v(kc), v(kd)))
    }

    /// Merged decoder weights for tape-free generation.
    pub fn inference_weights(&self) -> Result<DecoderWeights, ModelError> {
        Ok(DecoderWeights::from_store(&self.params, &self.config.decoder)?)
    }

    /// Greedy response tokens, up to but excluding EOS. `ablate_descriptor`
    /// zeroes the descriptor slot.
    pub fn respond(
        &self,
        weights: &DecoderWeights,
        utt: &Utterance,
        task: Task,
        ablate_descriptor: bool,
    ) -> Result<Vec<String>, ModelError> {
        let slots = Slots {
            content: true,
            descriptor: !ablate_descriptor,
        };
        let mut g = Graph::with_params(&self.params, Trainable::Nothing);
        let (s_con, s_des, _, _) = self.slots(&mut g, utt, slots, None)?;
        let n = self.slot_len(utt.n_frames());
        let ctx = self.config.decoder.context;
        let prompt = assemble_prompt(&self.vocab, task, Some(n), Some(n), ctx)?;
        let x = embed_sequence_eval(&prompt, weights.tok_emb(), Some(g.value(s_con)), Some(g.value(s_des)))?;
        let room = ctx.saturating_sub(prompt.len()) + 1;
        let ids = generate(weights, &x, self.vocab.eos(), self.config.max_response.min(room))?;
        let eos = self.vocab.eos();
        Ok(ids.into_iter().filter(|&i| i != eos).map(|i| self.vocab.token(i).to_string()).collect())
    }

    /// Softmax layer weights of a branch.
    pub fn layer_weights(&self, branch: Branch) -> Vec<f64> {
        disentangler::layer_weights(&self.params, branch).expect("model owns both branches")
    }

    pub fn sidecar_json(&self) -> String {
        let side = Sidecar {
            config: self.config.clone(),
            dims: self.dims,
            vocab: self.vocab.clone(),
        };
        serde_json::to_string_pretty(&side).expect("sidecar serializes") + "\n"
    }

    /// Writes `model.serd` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(CheckpointError::from)?;
        decoder::write_checkpoint(&self.params, &dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(MODEL_FILE), self.sidecar_json()).map_err(CheckpointError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(dir.join(MODEL_FILE)).map_err(CheckpointError::from)?;
        let side: Sidecar = serde_json::from_str(&text)?;
        side.config.validate().map_err(ModelError::Config)?;
        let params = decoder::read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let model = Self {
            config: side.config,
            dims: side.dims,
            vocab: side.vocab,
            params,
        };
        let fresh = Self::new(model.config.clone(), model.dims.n_layers, model.dims.dim, model.vocab.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match model.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if model.params.len() != fresh.params.len() {
            return Err(ModelError::Config("checkpoint has unexpected parameters".into()));
        }
        Ok(model)
    }
}
