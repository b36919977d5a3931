use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    align, bleu4, cider_scores, meteor_lite, normalize, present_classes, rouge_l, unweighted_accuracy, CaptionPair,
    MetricError,
};
use crate::datagen::{Fold, Utterance};
use crate::decoder::parse_response;
use crate::emotion::Emotion;

/// Raw generated tokens for one utterance, one response per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub asr: Vec<String>,
    pub ser_sed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScores {
    pub id: String,
    pub wer: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub emotion: Emotion,
    pub predicted: Option<Emotion>,
    pub parseable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub n: usize,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub wer: f64,
    pub ua: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Corpus WER: total edits over total reference words.
    pub wer: f64,
    pub ua: f64,
    pub n_unparseable: usize,
    pub per_utterance: Vec<UtteranceScores>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldScores>,
}

pub const FIELDS: [&str; 6] = ["b4", "meteor", "rouge_l", "cider", "wer", "ua"];

impl FoldScores {
    pub fn get(&self, field: &str) -> Option<f64> {
        Some(match field {
            "b4" => self.b4,
            "meteor" => self.meteor,
            "rouge_l" => self.rouge_l,
            "cider" => self.cider,
            "wer" => self.wer,
            "ua" => self.ua,
            _ => return None,
        })
    }
}

impl MetricReport {
    pub fn get(&self, field: &str) -> Option<f64> {
        Some(match field {
            "b4" => self.b4,
            "meteor" => self.meteor,
            "rouge_l" => self.rouge_l,
            "cider" => self.cider,
            "wer" => self.wer,
            "ua" => self.ua,
            _ => return None,
        })
    }

    /// Paired samples of `field` for significance testing: per-fold scores
    /// when the report has folds, otherwise per-utterance scores (emotion
    /// correctness as 0/1 for `ua`). Corpus-only BLEU needs folds.
    pub fn samples(&self, field: &str) -> Result<Vec<f64>, MetricError> {
        if !FIELDS.contains(&field) {
            return Err(MetricError::UnknownField(field.to_string()));
        }
        if !self.folds.is_empty() {
            return Ok(self.folds.iter().filter_map(|f| f.get(field)).collect());
        }
        let pick = |u: &UtteranceScores| match field {
            "meteor" => Some(u.meteor),
            "rouge_l" => Some(u.rouge_l),
            "cider" => Some(u.cider),
            "wer" => Some(u.wer),
            "ua" => Some(f64::from(u8::from(u.predicted == Some(u.emotion)))),
            _ => None,
        };
        self.per_utterance
            .iter()
            .map(pick)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| MetricError::UnknownField(format!("{field} (per-utterance scores need --folds)")))
    }
}

struct Scored {
    wer_edits: usize,
    ref_len: usize,
    caption: CaptionPair,
    meteor: f64,
    rouge_l: f64,
    predicted: Option<Emotion>,
    parseable: bool,
}

fn score_one(resp: &Response, utt: &Utterance) -> Scored {
    let asr = parse_response(&resp.asr);
    let full = parse_response(&resp.ser_sed);
    let reference = normalize(&utt.transcript);
    let hyp = normalize(&asr.transcript.unwrap_or_default());
    let caption_ref = normalize(&utt.descriptor_caption);
    let parseable = full.transcript.is_some() && full.descriptor.is_some() && full.emotion.is_some();
    let caption = normalize(&full.descriptor.unwrap_or_default());
    Scored {
        wer_edits: align(&reference, &hyp).total(),
        ref_len: reference.len(),
        meteor: meteor_lite(&caption, &caption_ref),
        rouge_l: rouge_l(&caption, &caption_ref),
        caption: (caption, vec![caption_ref]),
        predicted: full.emotion,
        parseable,
    }
}

/// Scores responses against their references. Both slices must list the
/// same ids in the same order.
pub fn evaluate_corpus(responses: &[Response], references: &[Utterance]) -> Result<MetricReport, MetricError> {
    if responses.len() != references.len() {
        return Err(MetricError::LengthMismatch(responses.len(), references.len()));
    }
    for (i, (r, u)) in responses.iter().zip(references).enumerate() {
        if r.id != u.id {
            return Err(MetricError::IdMismatch {
                index: i,
                expected: u.id.clone(),
                got: r.id.clone(),
            });
        }
    }
    if references.len() < 2 {
        return Err(MetricError::TooFew {
            need: 2,
            got: references.len(),
        });
    }
    let scored: Vec<Scored> = responses.par_iter().zip(references).map(|(r, u)| score_one(r, u)).collect();
    let captions: Vec<CaptionPair> = scored.iter().map(|s| s.caption.clone()).collect();
    let cider = cider_scores(&captions)?;
    let n = scored.len();
    let ref_words: usize = scored.iter().map(|s| s.ref_len).sum();
    if ref_words == 0 {
        return Err(MetricError::EmptyReference);
    }
    let pairs: Vec<(Emotion, Option<Emotion>)> = scored.iter().zip(references).map(|(s, u)| (u.emotion, s.predicted)).collect();
    let classes = present_classes(references.iter().map(|u| u.emotion));
    let per_utterance = scored
        .iter()
        .zip(references)
        .zip(&cider)
        .map(|((s, u), &c)| UtteranceScores {
            id: u.id.clone(),
            wer: s.wer_edits as f64 / s.ref_len.max(1) as f64,
            meteor: s.meteor,
            rouge_l: s.rouge_l,
            cider: c,
            emotion: u.emotion,
            predicted: s.predicted,
            parseable: s.parseable,
        })
        .collect();
    Ok(MetricReport {
        n,
        b4: bleu4(&captions),
        meteor: scored.iter().map(|s| s.meteor).sum::<f64>() / n as f64,
        rouge_l: scored.iter().map(|s| s.rouge_l).sum::<f64>() / n as f64,
        cider: cider.iter().sum::<f64>() / n as f64,
        wer: scored.iter().map(|s| s.wer_edits).sum::<usize>() as f64 / ref_words as f64,
        ua: unweighted_accuracy(&pairs, &classes)?,
        n_unparseable: scored.iter().filter(|s| !s.parseable).count(),
        per_utterance,
        folds: Vec::new(),
    })
}

/// Scores each fold's test part separately.
pub fn fold_scores(responses: &[Response], references: &[Utterance], folds: &[Fold]) -> Result<Vec<FoldScores>, MetricError> {
    folds
        .iter()
        .enumerate()
        .map(|(k, fold)| {
            let resp: Vec<Response> = fold.test.iter().map(|&i| responses[i].clone()).collect();
            let refs: Vec<Utterance> = fold.test.iter().map(|&i| references[i].clone()).collect();
            let r = evaluate_corpus(&resp, &refs)?;
            Ok(FoldScores {
                fold: k,
                n: r.n,
                b4: r.b4,
                meteor: r.meteor,
                rouge_l: r.rouge_l,
                cider: r.cider,
                wer: r.wer,
                ua: r.ua,
            })
        })
        .collect()
}
