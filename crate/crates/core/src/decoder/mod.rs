//! Toy autoregressive decoder: prompt splicing, teacher-forced loss, greedy
//! generation, response parsing and checkpoints.

mod checkpoint;
mod lora;
mod parse;
mod prompt;
mod transformer;
pub mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, round_to_f32, write_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use lora::{lora_apply, lora_weight};
pub use parse::{parse_response, ParsedResponse};
pub use prompt::{
    assemble_prompt, embed_sequence, embed_sequence_eval, PromptError, PromptItem, PromptSequence, TEMPLATE_LEN,
};
pub use transformer::{
    argmax, generate, hidden_states, init_decoder, lora_names, output_logits, projections, DecoderConfig,
    DecoderWeights, Session,
};
pub use vocab::Vocab;

use crate::diffcore::{DiffError, Graph, Var};
use crate::emotion::Emotion;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "asr")]
    Asr,
    #[serde(rename = "ser_sed")]
    SerSed,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Asr, Task::SerSed];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::SerSed => "ser_sed",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Target response tokens, ending in EOS.
pub fn response_tokens(task: Task, transcript: &[String], caption: &[String], emotion: Emotion) -> Vec<String> {
    let mut out = vec![vocab::TRANSCRIPT_KEY.to_string()];
    out.extend(transcript.iter().cloned());
    if task == Task::SerSed {
        out.push(vocab::SEP.into());
        out.push(vocab::DESCRIPTOR_KEY.into());
        out.extend(caption.iter().cloned());
        out.push(vocab::SEP.into());
        out.push(vocab::EMOTION_KEY.into());
        out.push(emotion.as_str().into());
    }
    out.push(vocab::EOS.into());
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecoderError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Teacher-forced loss: the summed cross-entropy of the `M` target tokens,
/// each predicted from the prompt and the targets before it. Prompt
/// positions contribute nothing.
pub fn decode_loss(
    g: &mut Graph<'_>,
    cfg: &DecoderConfig,
    prompt: &PromptSequence,
    s_con: Option<Var>,
    s_des: Option<Var>,
    target: &[usize],
) -> Result<Var, DecoderError> {
    let logits = target_logits(g, cfg, prompt, s_con, s_des, target)?;
    Ok(g.cross_entropy(logits, target)?)
}

/// Logits `[M, V]` at the positions that predict each target token.
pub fn target_logits(
    g: &mut Graph<'_>,
    cfg: &DecoderConfig,
    prompt: &PromptSequence,
    s_con: Option<Var>,
    s_des: Option<Var>,
    target: &[usize],
) -> Result<Var, DecoderError> {
    let m = target.len();
    if m == 0 {
        return Err(PromptError::EmptyTarget.into());
    }
    let p = prompt.len();
    if p + m - 1 > cfg.context {
        return Err(PromptError::ContextOverflow {
            len: p + m - 1,
            limit: cfg.context,
        }
        .into());
    }
    let tok = g.param("decoder.tok_emb")?;
    let x = embed_sequence(g, prompt, tok, s_con, s_des, &target[..m - 1])?;
    let h = hidden_states(g, cfg, x)?;
    let rows = g.slice_rows(h, p - 1, p - 1 + m)?;
    Ok(output_logits(g, rows)?)
}
