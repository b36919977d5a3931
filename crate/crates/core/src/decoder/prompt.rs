use std::ops::Range;

use super::vocab::{Vocab, BOS, CONTENT_KEY, DESCRIPTOR_KEY, RESPONSE_KEY, TASK_KEY};
use super::Task;
use crate::diffcore::{DiffError, Graph, Tensor, Var};

/// One prompt position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptItem {
    Token(usize),
    /// Row `i` of the content-adapter output.
    Content(usize),
    /// Row `i` of the descriptor-adapter output.
    Descriptor(usize),
    /// The all-zero vector standing in for an absent or zeroed slot.
    Zero,
}

/// Layout of the decoder prompt: literal template tokens with the two slot
/// regions spliced in. Slot embeddings are supplied when the prompt is
/// embedded, so the layout stays a plain value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSequence {
    pub items: Vec<PromptItem>,
    pub content: Range<usize>,
    pub descriptor: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("sequence of {len} positions exceeds the context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("target sequence is empty")]
    EmptyTarget,
}

/// Number of literal tokens in the template, slot markers included.
pub const TEMPLATE_LEN: usize = 8;

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `BOS task: <task> content: [content rows] descriptor: [descriptor rows] response:`.
///
/// `None` for a slot means absent or zeroed: it occupies one zero vector.
pub fn assemble_prompt(
    vocab: &Vocab,
    task: Task,
    content_rows: Option<usize>,
    descriptor_rows: Option<usize>,
    context: usize,
) -> Result<PromptSequence, PromptError> {
    let tok = |s: &str| PromptItem::Token(vocab.fixed(s));
    let mut items = vec![
        tok(BOS),
        tok(TASK_KEY),
        tok(task.as_str()),
        tok(CONTENT_KEY),
    ];
    let fill = |items: &mut Vec<PromptItem>, rows: Option<usize>, make: fn(usize) -> PromptItem| -> Range<usize> {
        let start = items.len();
        match rows {
            Some(n) if n > 0 => items.extend((0..n).map(make)),
            _ => items.push(PromptItem::Zero),
        }
        start..items.len()
    };
    let content = fill(&mut items, content_rows, PromptItem::Content);
    items.push(tok(DESCRIPTOR_KEY));
    let descriptor = fill(&mut items, descriptor_rows, PromptItem::Descriptor);
    items.push(tok(RESPONSE_KEY));
    if items.len() > context {
        return Err(PromptError::ContextOverflow {
            len: items.len(),
            limit: context,
        });
    }
    Ok(PromptSequence {
        items,
        content,
        descriptor,
    })
}

/// Embeds the prompt followed by `extra` token ids as an `[S, E]` matrix.
/// Runs of literal tokens are gathered from `tok_emb` in one lookup.
pub fn embed_sequence(
    g: &mut Graph<'_>,
    prompt: &PromptSequence,
    tok_emb: Var,
    s_con: Option<Var>,
    s_des: Option<Var>,
    extra: &[usize],
) -> Result<Var, DiffError> {
    let e = g.shape(tok_emb)[1];
    let mut parts = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let flush = |g: &mut Graph<'_>, run: &mut Vec<usize>, parts: &mut Vec<Var>| -> Result<(), DiffError> {
        if !run.is_empty() {
            parts.push(g.embedding(tok_emb, run)?);
            run.clear();
        }
        Ok(())
    };
    let mut i = 0;
    while i < prompt.items.len() {
        match prompt.items[i] {
            PromptItem::Token(id) => {
                run.push(id);
                i += 1;
            }
            PromptItem::Zero => {
                flush(g, &mut run, &mut parts)?;
                parts.push(g.constant(Tensor::zeros(&[1, e])));
                i += 1;
            }
            PromptItem::Content(_) | PromptItem::Descriptor(_) => {
                flush(g, &mut run, &mut parts)?;
                let (span, slot, name) = if matches!(prompt.items[i], PromptItem::Content(_)) {
                    (prompt.content.clone(), s_con, "content")
                } else {
                    (prompt.descriptor.clone(), s_des, "descriptor")
                };
                let v = slot.ok_or_else(|| DiffError::Shape(format!("prompt has a {name} slot but no embeddings")))?;
                if g.shape(v) != [span.len(), e] {
                    return Err(DiffError::Shape(format!(
                        "{name} slot spans {} rows of width {e}, embeddings are {:?}",
                        span.len(),
                        g.shape(v)
                    )));
                }
                parts.push(v);
                i = span.end;
            }
        }
    }
    run.extend_from_slice(extra);
    flush(g, &mut run, &mut parts)?;
    g.concat_rows(&parts)
}

/// Tape-free counterpart of [`embed_sequence`].
pub fn embed_sequence_eval(
    prompt: &PromptSequence,
    tok_emb: &Tensor,
    s_con: Option<&Tensor>,
    s_des: Option<&Tensor>,
) -> Result<Tensor, DiffError> {
    let e = tok_emb.cols();
    let mut data = Vec::with_capacity(prompt.len() * e);
    for item in &prompt.items {
        match *item {
            PromptItem::Token(id) => data.extend_from_slice(tok_emb.row(id)),
            PromptItem::Zero => data.extend(std::iter::repeat_n(0.0, e)),
            PromptItem::Content(r) | PromptItem::Descriptor(r) => {
                let slot = if matches!(item, PromptItem::Content(_)) { s_con } else { s_des };
                let t = slot.ok_or_else(|| DiffError::Shape("prompt slot has no embeddings".into()))?;
                if t.cols() != e || r >= t.rows() {
                    return Err(DiffError::Shape(format!("slot row {r} of {:?}", t.shape())));
                }
                data.extend_from_slice(t.row(r));
            }
        }
    }
    Tensor::new(vec![prompt.len(), e], data)
}
