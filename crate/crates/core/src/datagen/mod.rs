//! Synthetic emotional-utterance corpora with planted layer structure.
//!
//! Each utterance carries an `[L, T, D]` stack of frame features standing in
//! for the hidden states of a frozen multi-layer speech encoder. Layers in
//! the content set encode the transcript frame by frame, layers in the
//! descriptor set encode the paralinguistic attributes and the emotion, and
//! every other layer is pure noise.

mod folds;
mod grammar;
mod io;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::emotion::Emotion;
use crate::seeding;

pub use folds::{split_folds, Fold, FoldError};
pub use grammar::{transcript_vocabulary, TranscriptGrammar, MAX_TOKENS, MIN_TOKENS};
pub use io::{decode_features, encode_features, read_dataset, write_dataset, DataError, FEATURE_MAGIC, FEATURE_VERSION, MANIFEST_FILE};
pub use synth::{synth_features, FeatureSynth};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("invalid corpus spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Medium,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Age {
    Young,
    Adult,
    Senior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emphasis {
    Weak,
    Strong,
}

/// The tone tags the generator draws from.
pub const TONES: [&str; 4] = ["excited", "calm", "gloomy", "harsh"];

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];
    pub fn as_str(self) -> &'static str {
        ["low", "medium", "high"][self as usize]
    }
}

impl Speed {
    pub const ALL: [Speed; 3] = [Speed::Slow, Speed::Medium, Speed::Fast];
    pub fn as_str(self) -> &'static str {
        ["slow", "medium", "fast"][self as usize]
    }
}

impl Age {
    pub const ALL: [Age; 3] = [Age::Young, Age::Adult, Age::Senior];
    pub fn as_str(self) -> &'static str {
        ["young", "adult", "senior"][self as usize]
    }
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];
    pub fn as_str(self) -> &'static str {
        ["male", "female"][self as usize]
    }
}

impl Emphasis {
    pub const ALL: [Emphasis; 2] = [Emphasis::Weak, Emphasis::Strong];
    pub fn as_str(self) -> &'static str {
        ["weak", "strong"][self as usize]
    }
}

/// Fine-grained paralinguistic attributes of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorAttrs {
    pub pitch: Level,
    pub energy: Level,
    pub speed: Speed,
    pub age: Age,
    pub gender: Gender,
    pub tone: String,
    pub emphasis: Emphasis,
}

/// Renders the fixed caption template, one token per whitespace-separated word.
///
/// Energy has no slot in the template; it only reaches the features.
pub fn render_descriptor_caption(attrs: &DescriptorAttrs) -> Vec<String> {
    format!(
        "a {} pitched {} speech with {} emphasis spoken by a {} {} in a {} tone",
        attrs.pitch.as_str(),
        attrs.speed.as_str(),
        attrs.emphasis.as_str(),
        attrs.age.as_str(),
        attrs.gender.as_str(),
        attrs.tone,
    )
    .split_whitespace()
    .map(str::to_string)
    .collect()
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[L, T, D]`, values exactly representable as `f32`.
    pub features: Tensor,
    pub transcript: Vec<String>,
    pub descriptor_caption: Vec<String>,
    pub emotion: Emotion,
}

impl Utterance {
    pub fn n_layers(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Label side of a generated utterance, before features are synthesized.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceLabels {
    pub transcript: Vec<String>,
    pub attrs: DescriptorAttrs,
    pub emotion: Emotion,
    pub noise_seed: u64,
}

fn default_prior() -> BTreeMap<Emotion, f64> {
    [
        (Emotion::Happy, 0.24),
        (Emotion::Sad, 0.24),
        (Emotion::Angry, 0.24),
        (Emotion::Neutral, 0.24),
        (Emotion::Surprised, 0.02),
        (Emotion::Disgusted, 0.01),
        (Emotion::Fearful, 0.01),
    ]
    .into_iter()
    .collect()
}

/// Everything that determines a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub n_layers: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub content_layers: Vec<usize>,
    pub descriptor_layers: Vec<usize>,
    pub class_prior: BTreeMap<Emotion, f64>,
    pub noise_std: f64,
    /// Std of the layers outside both sets.
    pub distractor_std: f64,
    /// Probability that an attribute takes its emotion-preferred value.
    pub descriptor_correlation: f64,
    /// Seeds the fixed synthetic "encoder" (embedding tables and layer
    /// projections). Corpora that share it are drawn from the same encoder.
    pub encoder_seed: u64,
    /// Sampling seed; the run config supplies it.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 200,
            n_layers: 6,
            min_frames: 20,
            max_frames: 60,
            dim: 32,
            vocab_size: 200,
            content_layers: vec![0, 1],
            descriptor_layers: vec![4, 5],
            class_prior: default_prior(),
            noise_std: 0.05,
            distractor_std: 1.0,
            descriptor_correlation: 0.8,
            encoder_seed: 0x5EED_F00D,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive".into());
        }
        if self.n_layers < 2 {
            return bad(format!("n_layers must be at least 2, got {}", self.n_layers));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("frame range [{}, {}] is empty", self.min_frames, self.max_frames));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.vocab_size < 2 || self.vocab_size > grammar::MAX_VOCAB {
            return bad(format!("vocab_size must be in [2, {}]", grammar::MAX_VOCAB));
        }
        if self.content_layers.is_empty() || self.descriptor_layers.is_empty() {
            return bad("content and descriptor layer sets must be non-empty".into());
        }
        for &l in self.content_layers.iter().chain(&self.descriptor_layers) {
            if l >= self.n_layers {
                return bad(format!("layer index {l} outside [0, {})", self.n_layers));
            }
        }
        if self.content_layers.iter().any(|l| self.descriptor_layers.contains(l)) {
            return bad("content and descriptor layer sets overlap".into());
        }
        if self.class_prior.values().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return bad("class prior weights must be finite and non-negative".into());
        }
        if self.class_prior.values().sum::<f64>() <= 0.0 {
            return bad("class prior has no mass".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be finite and non-negative".into());
        }
        if !(self.distractor_std >= 0.0) || !self.distractor_std.is_finite() {
            return bad("distractor_std must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.descriptor_correlation) {
            return bad("descriptor_correlation must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Frames for a transcript of `n_tokens`: linear in length across the
    /// configured frame range.
    pub fn frames_for(&self, n_tokens: usize) -> usize {
        let n = n_tokens.clamp(MIN_TOKENS, MAX_TOKENS);
        self.min_frames + (n - MIN_TOKENS) * (self.max_frames - self.min_frames) / (MAX_TOKENS - MIN_TOKENS)
    }

    /// A balanced prior over the given classes.
    pub fn balanced_prior(classes: &[Emotion]) -> BTreeMap<Emotion, f64> {
        classes.iter().map(|&e| (e, 1.0)).collect()
    }
}

/// Exact per-class counts for `n` draws: largest-remainder apportionment of
/// the prior, ties broken by class order.
pub fn stratified_counts(prior: &BTreeMap<Emotion, f64>, n: usize) -> Vec<(Emotion, usize)> {
    let total: f64 = prior.values().sum();
    let mut rows: Vec<(Emotion, usize, f64)> = prior
        .iter()
        .map(|(&e, &p)| {
            let quota = n as f64 * p / total;
            (e, quota.floor() as usize, quota - quota.floor())
        })
        .collect();
    let assigned: usize = rows.iter().map(|r| r.1).sum();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].2.total_cmp(&rows[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        rows[i].1 += 1;
    }
    rows.into_iter().map(|(e, c, _)| (e, c)).collect()
}

/// Preferred attribute values per emotion: (pitch, energy, speed, tone, emphasis).
fn preferred(emotion: Emotion) -> (Level, Level, Speed, &'static str, Emphasis) {
    use Emphasis::*;
    use Level::*;
    match emotion {
        Emotion::Happy => (High, High, Speed::Fast, "excited", Strong),
        Emotion::Sad => (Low, Low, Speed::Slow, "gloomy", Weak),
        Emotion::Angry => (High, High, Speed::Fast, "harsh", Strong),
        Emotion::Neutral => (Medium, Medium, Speed::Medium, "calm", Weak),
        Emotion::Surprised => (High, High, Speed::Medium, "excited", Strong),
        Emotion::Disgusted => (Low, Medium, Speed::Slow, "harsh", Strong),
        Emotion::Fearful => (High, Low, Speed::Fast, "gloomy", Weak),
    }
}

/// Draws attributes conditioned on the emotion: each correlated attribute
/// takes its preferred value with probability `correlation`, otherwise a
/// uniform draw. Age and gender are independent of the emotion.
pub fn sample_attrs<R: Rng + ?Sized>(emotion: Emotion, correlation: f64, rng: &mut R) -> DescriptorAttrs {
    let (pitch, energy, speed, tone, emphasis) = preferred(emotion);
    let mut pick = |pref: usize, n: usize| -> usize {
        if rng.random::<f64>() < correlation {
            pref
        } else {
            rng.random_range(0..n)
        }
    };
    let pitch = Level::ALL[pick(pitch as usize, 3)];
    let energy = Level::ALL[pick(energy as usize, 3)];
    let speed = Speed::ALL[pick(speed as usize, 3)];
    let tone_idx = TONES.iter().position(|&t| t == tone).unwrap_or(0);
    let tone = TONES[pick(tone_idx, TONES.len())].to_string();
    let emphasis = Emphasis::ALL[pick(emphasis as usize, 2)];
    let age = Age::ALL[rng.random_range(0..3)];
    let gender = Gender::ALL[rng.random_range(0..2)];
    DescriptorAttrs {
        pitch,
        energy,
        speed,
        age,
        gender,
        tone,
        emphasis,
    }
}

/// Samples transcripts, attributes, and stratified emotions for every utterance.
pub fn sample_labels(spec: &CorpusSpec) -> Result<Vec<UtteranceLabels>, SpecError> {
    spec.validate()?;
    let mut emotions: Vec<Emotion> = stratified_counts(&spec.class_prior, spec.n_utterances)
        .into_iter()
        .flat_map(|(e, c)| std::iter::repeat_n(e, c))
        .collect();
    emotions.shuffle(&mut seeding::rng(seeding::derive(spec.seed, u64::MAX)));

    let grammar = TranscriptGrammar::new(spec.vocab_size);
    Ok(emotions
        .into_iter()
        .enumerate()
        .map(|(i, emotion)| {
            let utt_seed = seeding::derive(spec.seed, i as u64);
            let mut rng = seeding::rng(utt_seed);
            let transcript = grammar.sample(&mut rng);
            let attrs = sample_attrs(emotion, spec.descriptor_correlation, &mut rng);
            UtteranceLabels {
                transcript,
                attrs,
                emotion,
                noise_seed: seeding::derive(utt_seed, 1),
            }
        })
        .collect())
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:05}")
}

/// Generates the whole corpus; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>, SpecError> {
    let labels = sample_labels(spec)?;
    let synth = FeatureSynth::new(spec)?;
    Ok(labels
        .into_par_iter()
        .enumerate()
        .map(|(i, l)| Utterance {
            id: utterance_id(i),
            features: synth.synth(&l.transcript, &l.attrs, l.emotion, l.noise_seed),
            descriptor_caption: render_descriptor_caption(&l.attrs),
            transcript: l.transcript,
            emotion: l.emotion,
        })
        .collect())
}

#[cfg(test)]
mod tests;
