use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CorpusSpec, DescriptorAttrs, SpecError, TONES};
use crate::diffcore::Tensor;
use crate::emotion::Emotion;
use crate::seeding;

/// Number of additive components in a descriptor-layer vector: seven
/// attributes plus the emotion.
const COMPONENTS: f64 = 8.0;

/// The fixed synthetic encoder: per-layer token tables for content layers
/// and per-layer attribute tables for descriptor layers, all derived from
/// `spec.encoder_seed`.
#[derive(Clone, Debug)]
pub struct FeatureSynth {
    spec: CorpusSpec,
    word_index: HashMap<String, usize>,
    /// Per content layer, `[vocab, D]`.
    token_tables: Vec<Tensor>,
    /// Per descriptor layer, attribute-value vectors keyed by "field=value".
    attr_tables: Vec<HashMap<String, Vec<f64>>>,
}

fn attr_keys() -> Vec<String> {
    let mut keys = Vec::new();
    let mut add = |field: &str, values: &[&str]| {
        keys.extend(values.iter().map(|v| format!("{field}={v}")));
    };
    add("pitch", &["low", "medium", "high"]);
    add("energy", &["low", "medium", "high"]);
    add("speed", &["slow", "medium", "fast"]);
    add("age", &["young", "adult", "senior"]);
    add("gender", &["male", "female"]);
    add("tone", &TONES);
    add("emphasis", &["weak", "strong"]);
    let emotions: Vec<&str> = Emotion::ALL.iter().map(|e| e.as_str()).collect();
    add("emotion", &emotions);
    keys
}

fn keys_for(attrs: &DescriptorAttrs, emotion: Emotion) -> [String; 8] {
    [
        format!("pitch={}", attrs.pitch.as_str()),
        format!("energy={}", attrs.energy.as_str()),
        format!("speed={}", attrs.speed.as_str()),
        format!("age={}", attrs.age.as_str()),
        format!("gender={}", attrs.gender.as_str()),
        format!("tone={}", attrs.tone),
        format!("emphasis={}", attrs.emphasis.as_str()),
        format!("emotion={}", emotion.as_str()),
    ]
}

fn gaussian_vec(seed: u64, dim: usize, std: f64) -> Vec<f64> {
    let mut rng = seeding::rng(seed);
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl FeatureSynth {
    pub fn new(spec: &CorpusSpec) -> Result<Self, SpecError> {
        spec.validate()?;
        let d = spec.dim;
        let words = super::transcript_vocabulary(spec.vocab_size);
        let token_tables = spec
            .content_layers
            .iter()
            .map(|&l| {
                let mut rng = seeding::rng(seeding::derive_path(spec.encoder_seed, &[1, l as u64]));
                Tensor::randn(&[words.len(), d], 1.0, &mut rng)
            })
            .collect();
        let std = (1.0 / COMPONENTS).sqrt();
        let attr_tables = spec
            .descriptor_layers
            .iter()
            .map(|&l| {
                attr_keys()
                    .into_iter()
                    .map(|k| {
                        let seed = seeding::derive_path(spec.encoder_seed, &[2, l as u64, seeding::hash_str(&k)]);
                        let v = gaussian_vec(seed, d, std);
                        (k, v)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            word_index: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
            spec: spec.clone(),
            token_tables,
            attr_tables,
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    /// `[L, T, D]` features. `T` follows from the transcript length. Words
    /// outside the vocabulary hash onto a vocabulary row.
    pub fn synth(&self, transcript: &[String], attrs: &DescriptorAttrs, emotion: Emotion, noise_seed: u64) -> Tensor {
        let spec = &self.spec;
        let (l_n, d) = (spec.n_layers, spec.dim);
        let t_n = spec.frames_for(transcript.len());
        let n_tok = transcript.len().max(1);
        let rows: Vec<usize> = transcript
            .iter()
            .map(|w| {
                self.word_index
                    .get(w)
                    .copied()
                    .unwrap_or_else(|| (seeding::hash_str(w) % spec.vocab_size as u64) as usize)
            })
            .collect();
        let keys = keys_for(attrs, emotion);

        let mut rng = seeding::rng(noise_seed);
        let mut data = Vec::with_capacity(l_n * t_n * d);
        for l in 0..l_n {
            let content = spec.content_layers.iter().position(|&c| c == l);
            let descriptor = spec.descriptor_layers.iter().position(|&q| q == l);
            let desc_vec: Option<Vec<f64>> = descriptor.map(|qi| {
                let table = &self.attr_tables[qi];
                let mut v = vec![0.0; d];
                for k in &keys {
                    // Unknown tones contribute nothing.
                    if let Some(a) = table.get(k) {
                        v.iter_mut().zip(a).for_each(|(x, y)| *x += y);
                    }
                }
                v
            });
            for t in 0..t_n {
                for j in 0..d {
                    let clean = if let Some(ci) = content {
                        if rows.is_empty() {
                            0.0
                        } else {
                            let tok = rows[t * n_tok / t_n];
                            self.token_tables[ci].data()[tok * d + j]
                        }
                    } else if let Some(v) = &desc_vec {
                        v[j]
                    } else {
                        0.0
                    };
                    let std = if content.is_some() || descriptor.is_some() {
                        spec.noise_std
                    } else {
                        spec.distractor_std
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(round_f32(clean + std * noise));
                }
            }
        }
        Tensor::new(vec![l_n, t_n, d], data).expect("shape matches data")
    }
}

/// One-off synthesis; builds the encoder tables from `spec` each call.
pub fn synth_features(
    transcript: &[String],
    attrs: &DescriptorAttrs,
    emotion: Emotion,
    spec: &CorpusSpec,
    noise_seed: u64,
) -> Result<Tensor, SpecError> {
    Ok(FeatureSynth::new(spec)?.synth(transcript, attrs, emotion, noise_seed))
}
