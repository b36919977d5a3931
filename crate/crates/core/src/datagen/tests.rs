use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;

fn spec(n: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_utterances: n,
        seed,
        ..CorpusSpec::default()
    }
}

fn attrs(pitch: Level, speed: Speed, emphasis: Emphasis, age: Age, gender: Gender, tone: &str) -> DescriptorAttrs {
    DescriptorAttrs {
        pitch,
        energy: Level::Medium,
        speed,
        age,
        gender,
        tone: tone.to_string(),
        emphasis,
    }
}

#[test]
fn balanced_prior_is_stratified_exactly() {
    let s = CorpusSpec {
        class_prior: CorpusSpec::balanced_prior(&Emotion::CORE),
        ..spec(100, 11)
    };
    let corpus = generate_corpus(&s).unwrap();
    let mut counts = BTreeMap::new();
    for u in &corpus {
        *counts.entry(u.emotion).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.values().all(|&c| c == 25), "{counts:?}");
}

#[test]
fn generation_is_deterministic() {
    let a = generate_corpus(&spec(30, 5)).unwrap();
    let b = generate_corpus(&spec(30, 5)).unwrap();
    assert_eq!(a, b);
    let bytes = |c: &[Utterance]| c.iter().flat_map(|u| encode_features(&u.features)).collect::<Vec<u8>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(a, generate_corpus(&spec(30, 6)).unwrap());
}

#[test]
fn utterances_satisfy_type_invariants() {
    let s = spec(50, 2);
    let vocab: BTreeSet<String> = transcript_vocabulary(s.vocab_size).into_iter().collect();
    for u in generate_corpus(&s).unwrap() {
        assert_eq!(u.n_layers(), 6);
        assert_eq!(u.dim(), 32);
        assert!((20..=60).contains(&u.n_frames()));
        assert_eq!(u.n_frames(), s.frames_for(u.transcript.len()));
        assert!((5..=12).contains(&u.transcript.len()));
        assert!(u.transcript.iter().all(|w| vocab.contains(w)));
        assert!(u.features.data().iter().all(|&v| v == v as f32 as f64));
    }
}

#[test]
fn infeasible_specs_are_rejected() {
    let cases = [
        CorpusSpec {
            content_layers: vec![0, 6],
            ..spec(10, 0)
        },
        CorpusSpec {
            content_layers: vec![0, 1],
            descriptor_layers: vec![1, 2],
            ..spec(10, 0)
        },
        CorpusSpec {
            n_layers: 1,
            content_layers: vec![0],
            descriptor_layers: vec![0],
            ..spec(10, 0)
        },
        CorpusSpec {
            min_frames: 30,
            max_frames: 20,
            ..spec(10, 0)
        },
        spec(0, 0),
    ];
    for c in cases {
        assert!(generate_corpus(&c).is_err(), "{c:?}");
    }
}

#[test]
fn caption_template() {
    let a = DescriptorAttrs {
        pitch: Level::High,
        energy: Level::High,
        speed: Speed::Fast,
        age: Age::Young,
        gender: Gender::Female,
        tone: "excited".into(),
        emphasis: Emphasis::Strong,
    };
    assert_eq!(
        render_descriptor_caption(&a).join(" "),
        "a high pitched fast speech with strong emphasis spoken by a young female in a excited tone"
    );
    assert_eq!(render_descriptor_caption(&a), render_descriptor_caption(&a.clone()));
}

#[test]
fn captions_are_distinct_over_all_visible_combinations() {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for p in Level::ALL {
        for s in Speed::ALL {
            for e in Emphasis::ALL {
                for a in Age::ALL {
                    for g in Gender::ALL {
                        for t in TONES {
                            seen.insert(render_descriptor_caption(&attrs(p, s, e, a, g, t)));
                            total += 1;
                        }
                    }
                }
            }
        }
    }
    assert_eq!(total, 3 * 3 * 2 * 3 * 2 * 4);
    assert_eq!(seen.len(), total);
}

fn layer_slice(t: &Tensor, l: usize) -> &[f64] {
    let stride = t.shape()[1] * t.shape()[2];
    &t.data()[l * stride..(l + 1) * stride]
}

#[test]
fn zero_noise_layers_are_deterministic_functions_of_labels() {
    let s = CorpusSpec {
        noise_std: 0.0,
        ..spec(1, 0)
    };
    let synth = FeatureSynth::new(&s).unwrap();
    let words = transcript_vocabulary(s.vocab_size);
    let tr: Vec<String> = words[..7].to_vec();
    let a1 = attrs(Level::Low, Speed::Slow, Emphasis::Weak, Age::Adult, Gender::Male, "calm");
    let a2 = attrs(Level::High, Speed::Fast, Emphasis::Strong, Age::Young, Gender::Female, "harsh");

    let x = synth.synth(&tr, &a1, Emotion::Sad, 1);
    let y = synth.synth(&tr, &a2, Emotion::Angry, 2);
    for &l in &s.content_layers {
        assert_eq!(layer_slice(&x, l), layer_slice(&y, l));
    }
    for &l in &s.descriptor_layers {
        assert_ne!(layer_slice(&x, l), layer_slice(&y, l));
    }

    let other: Vec<String> = words[10..17].to_vec();
    let z = synth.synth(&other, &a1, Emotion::Sad, 3);
    for &l in &s.descriptor_layers {
        assert_eq!(layer_slice(&x, l), layer_slice(&z, l));
    }
    for &l in &s.content_layers {
        assert_ne!(layer_slice(&x, l), layer_slice(&z, l));
    }

    // The free function agrees with the cached tables.
    assert_eq!(synth_features(&tr, &a1, Emotion::Sad, &s, 1).unwrap(), x);
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn mean_pool(t: &Tensor, layers: &[usize]) -> Vec<f64> {
    let (frames, d) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(layers.len() * d);
    for &l in layers {
        let slab = layer_slice(t, l);
        for j in 0..d {
            out.push((0..frames).map(|f| slab[f * d + j]).sum::<f64>() / frames as f64);
        }
    }
    out
}

/// Binary indicator label columns: each emotion, each attribute value, and
/// each of the 20 most frequent words.
fn label_columns(labels: &[UtteranceLabels]) -> Vec<(String, Vec<f64>)> {
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&UtteranceLabels) -> bool| {
        cols.push((name, labels.iter().map(|l| f64::from(u8::from(f(l)))).collect()));
    };
    for e in Emotion::ALL {
        push(format!("emotion={e}"), &|l| l.emotion == e);
    }
    for v in Level::ALL {
        push(format!("pitch={}", v.as_str()), &|l| l.attrs.pitch == v);
        push(format!("energy={}", v.as_str()), &|l| l.attrs.energy == v);
    }
    for v in Speed::ALL {
        push(format!("speed={}", v.as_str()), &|l| l.attrs.speed == v);
    }
    for v in Age::ALL {
        push(format!("age={}", v.as_str()), &|l| l.attrs.age == v);
    }
    for v in Gender::ALL {
        push(format!("gender={}", v.as_str()), &|l| l.attrs.gender == v);
    }
    for v in Emphasis::ALL {
        push(format!("emphasis={}", v.as_str()), &|l| l.attrs.emphasis == v);
    }
    for t in TONES {
        push(format!("tone={t}"), &|l| l.attrs.tone == t);
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        for w in &l.transcript {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for (w, _) in by_freq.into_iter().take(20) {
        push(format!("word={w}"), &|l| l.transcript.iter().any(|x| x == w));
    }
    push("length".into(), &|l| l.transcript.len() > 8);
    cols
}

/// Root-mean-square over feature dimensions of the Pearson correlation
/// between one mean-pooled layer and a label column.
fn rms_correlation(corpus: &[Utterance], layer: usize, y: &[f64]) -> f64 {
    let pooled: Vec<Vec<f64>> = corpus.iter().map(|u| mean_pool(&u.features, &[layer])).collect();
    let d = pooled[0].len();
    let ss: f64 = (0..d)
        .map(|j| {
            let x: Vec<f64> = pooled.iter().map(|p| p[j]).collect();
            pearson(&x, y).powi(2)
        })
        .sum();
    (ss / d as f64).sqrt()
}

#[test]
fn distractor_layers_are_uncorrelated_with_labels() {
    let s = spec(1000, 21);
    let labels = sample_labels(&s).unwrap();
    let corpus = generate_corpus(&s).unwrap();
    let cols = label_columns(&labels);
    let distractors: Vec<usize> = (0..s.n_layers)
        .filter(|l| !s.content_layers.contains(l) && !s.descriptor_layers.contains(l))
        .collect();
    assert_eq!(distractors, vec![2, 3]);

    for &l in &distractors {
        for (name, y) in &cols {
            let r = rms_correlation(&corpus, l, y);
            assert!(r < 0.1, "layer {l} vs {name}: {r}");
        }
    }
    // The statistic does see planted structure.
    let (name, y) = cols.iter().find(|(n, _)| n == "emotion=angry").unwrap();
    let r = rms_correlation(&corpus, s.descriptor_layers[0], y);
    assert!(r > 0.2, "descriptor layer vs {name}: {r}");
}

/// Held-out scores of a linear bag-of-words probe.
#[derive(Debug)]
struct ProbeScores {
    /// Fraction of (utterance, word) presence entries predicted correctly
    /// by thresholding the ridge output at 0.5.
    accuracy: f64,
    /// Same, for the best constant predictor fitted on the training split.
    accuracy_chance: f64,
    /// Fraction of each utterance's `k` distinct words among its top-`k` scores.
    top_k: f64,
    /// Same, ranking words by training frequency.
    top_k_chance: f64,
}

/// Ridge-regression probe (closed form via Cholesky) from pooled features to
/// multi-hot bag-of-words targets.
fn bow_probe(train: &[(Vec<f64>, Vec<usize>)], test: &[(Vec<f64>, Vec<usize>)], vocab: usize) -> ProbeScores {
    let p = train[0].0.len() + 1;
    let aug = |x: &[f64]| x.iter().copied().chain([1.0]).collect::<Vec<f64>>();
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * vocab];
    let mut freq = vec![0.0; vocab];
    for (x, words) in train {
        let x = aug(x);
        for i in 0..p {
            for j in 0..p {
                gram[i * p + j] += x[i] * x[j];
            }
        }
        let uniq: BTreeSet<usize> = words.iter().copied().collect();
        for &w in &uniq {
            freq[w] += 1.0;
            for i in 0..p {
                rhs[i * vocab + w] += x[i];
            }
        }
    }
    for i in 0..p - 1 {
        gram[i * p + i] += 1e-3 * train.len() as f64;
    }
    let mut chol = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = gram[i * p + j] - (0..j).map(|k| chol[i * p + k] * chol[j * p + k]).sum::<f64>();
            chol[i * p + j] = if i == j { s.sqrt() } else { s / chol[j * p + j] };
        }
    }
    let mut w = rhs;
    for c in 0..vocab {
        let mut y: Vec<f64> = (0..p).map(|i| w[i * vocab + c]).collect();
        for i in 0..p {
            y[i] = (y[i] - (0..i).map(|k| chol[i * p + k] * y[k]).sum::<f64>()) / chol[i * p + i];
        }
        for i in (0..p).rev() {
            y[i] = (y[i] - (i + 1..p).map(|k| chol[k * p + i] * y[k]).sum::<f64>()) / chol[i * p + i];
        }
        for i in 0..p {
            w[i * vocab + c] = y[i];
        }
    }

    let top_k_hits = |scores: &[f64], truth: &BTreeSet<usize>| -> f64 {
        let mut order: Vec<usize> = (0..vocab).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order[..truth.len()].iter().filter(|i| truth.contains(i)).count() as f64 / truth.len() as f64
    };
    let majority: Vec<bool> = freq.iter().map(|&f| f > 0.5 * train.len() as f64).collect();
    let (mut correct, mut correct_chance, mut top_k, mut top_k_chance) = (0.0, 0.0, 0.0, 0.0);
    for (x, words) in test {
        let x = aug(x);
        let truth: BTreeSet<usize> = words.iter().copied().collect();
        let scores: Vec<f64> = (0..vocab)
            .map(|c| (0..p).map(|i| x[i] * w[i * vocab + c]).sum())
            .collect();
        for c in 0..vocab {
            let present = truth.contains(&c);
            correct += f64::from(u8::from((scores[c] > 0.5) == present));
            correct_chance += f64::from(u8::from(majority[c] == present));
        }
        top_k += top_k_hits(&scores, &truth);
        top_k_chance += top_k_hits(&freq, &truth);
    }
    let n = test.len() as f64;
    ProbeScores {
        accuracy: correct / (n * vocab as f64),
        accuracy_chance: correct_chance / (n * vocab as f64),
        top_k: top_k / n,
        top_k_chance: top_k_chance / n,
    }
}

fn probe_on(s: &CorpusSpec, n_train: usize) -> (ProbeScores, ProbeScores) {
    let corpus = generate_corpus(s).unwrap();
    let index: BTreeMap<String, usize> = transcript_vocabulary(s.vocab_size)
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i))
        .collect();
    let rows = |layers: &[usize]| -> Vec<(Vec<f64>, Vec<usize>)> {
        corpus
            .iter()
            .map(|u| (mean_pool(&u.features, layers), u.transcript.iter().map(|w| index[w]).collect()))
            .collect()
    };
    let c = rows(&s.content_layers);
    let q = rows(&s.descriptor_layers);
    (
        bow_probe(&c[..n_train], &c[n_train..], s.vocab_size),
        bow_probe(&q[..n_train], &q[n_train..], s.vocab_size),
    )
}

fn assert_probe_separates(s: &CorpusSpec) {
    let (c, q) = probe_on(s, s.n_utterances * 4 / 5);
    // Entry-wise accuracy is dominated by absent words, so the ranking
    // score is checked as well: it is the one that shows content recovery.
    assert!(c.accuracy > 0.9, "content {c:?}");
    assert!((q.accuracy - q.accuracy_chance).abs() <= 0.1, "descriptor {q:?}");
    assert!(c.accuracy > c.accuracy_chance, "content {c:?}");
    assert!(c.top_k > c.top_k_chance + 0.4, "content {c:?}");
    assert!((q.top_k - q.top_k_chance).abs() <= 0.1, "descriptor {q:?}");
}

#[test]
fn probe_finds_transcript_in_content_layers_only() {
    assert_probe_separates(&CorpusSpec {
        content_layers: vec![0, 1],
        descriptor_layers: vec![4, 5],
        n_layers: 6,
        ..spec(2500, 8)
    });
}

#[test]
fn probe_separation_holds_across_specs() {
    let cases = [(16, 0.1, 3), (16, 0.0, 4), (24, 0.05, 5), (48, 0.1, 6)];
    for (dim, noise_std, seed) in cases {
        let s = CorpusSpec {
            dim,
            noise_std,
            ..spec(2000, seed)
        };
        let (c, q) = probe_on(&s, 1600);
        eprintln!("D={dim} noise={noise_std}: {c:?} {q:?}");
        assert_probe_separates(&s);
    }
}

#[test]
fn folds_partition_with_largest_first_remainder() {
    let items: Vec<usize> = (0..10).collect();
    let folds = split_folds(&items, 5, 1).unwrap();
    assert!(folds.iter().all(|f| f.test.len() == 2));

    let items: Vec<usize> = (0..101).collect();
    let folds = split_folds(&items, 5, 1).unwrap();
    let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
    assert_eq!(sizes, vec![21, 20, 20, 20, 20]);
    assert_eq!(folds, split_folds(&items, 5, 1).unwrap());

    assert_eq!(split_folds(&items[..3], 4, 0), Err(FoldError::TooManyFolds { k: 4, items: 3 }));
    assert_eq!(split_folds(&items, 1, 0), Err(FoldError::TooFewFolds(1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_a_partition(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let items = vec![(); n];
        let folds = split_folds(&items, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0usize; n];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let test: BTreeSet<usize> = f.test.iter().copied().collect();
            prop_assert!(f.train.iter().all(|i| !test.contains(i)));
            prop_assert_eq!(f.train.len() + f.test.len(), n);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let max = folds.iter().map(|f| f.test.len()).max().unwrap();
        let min = folds.iter().map(|f| f.test.len()).min().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn stratified_counts_sum_and_track_prior(
        weights in proptest::collection::vec(0.0f64..10.0, 7),
        n in 1usize..500,
    ) {
        prop_assume!(weights.iter().sum::<f64>() > 0.1);
        let prior: BTreeMap<Emotion, f64> = Emotion::ALL.into_iter().zip(weights.iter().copied()).collect();
        let counts = stratified_counts(&prior, n);
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), n);
        let total: f64 = weights.iter().sum();
        for (e, c) in counts {
            let quota = n as f64 * prior[&e] / total;
            prop_assert!((c as f64 - quota).abs() < 1.0);
        }
    }
}

mod io_round_trip {
    use super::*;

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&spec(12, 4)).unwrap();
        write_dataset(&corpus, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn unknown_emotion_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&spec(3, 4)).unwrap();
        write_dataset(&corpus, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let label = format!("\"emotion\":\"{}\"", corpus[1].emotion);
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[1] = lines[1].replace(&label, "\"emotion\":\"joyful\"");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        match &err {
            DataError::Manifest { line, field, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(field, "emotion");
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(err.to_string().contains("joyful"));
    }

    #[test]
    fn truncated_feature_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&spec(2, 4)).unwrap();
        write_dataset(&corpus, dir.path()).unwrap();
        let f = dir.path().join(format!("features/{}.serf", corpus[0].id));
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 10]).unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            DataError::Truncated { expected, actual, .. } => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 10);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn manifest_dims_must_match_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&spec(1, 4)).unwrap();
        write_dataset(&corpus, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"dim\":32", "\"dim\":31");
        std::fs::write(&path, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, DataError::Manifest { field, .. } if field == "dim"), "{err}");
    }
}
