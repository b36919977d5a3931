//! Evaluation battery: WER, corpus BLEU-4, ROUGE-L, METEOR-lite, CIDEr,
//! unweighted accuracy and the paired one-tailed t-test.
//!
//! Every text metric works on normalized tokens (see [`normalize`]).

mod report;
mod ttest;

use std::collections::{BTreeSet, HashMap};

pub use report::{evaluate_corpus, fold_scores, FoldScores, MetricReport, Response, UtteranceScores, FIELDS};
pub use ttest::{paired_t_test, TTest, SIGNIFICANCE};

use crate::emotion::Emotion;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("class `{0}` has no true instances")]
    EmptyClass(Emotion),
    #[error("true label `{0}` is outside the class set")]
    UnknownClass(Emotion),
    #[error("output {index} is for `{got}`, reference is `{expected}`")]
    IdMismatch { index: usize, expected: String, got: String },
    #[error("unknown metric field `{0}`")]
    UnknownField(String),
}

/// Lowercases, strips punctuation, and drops tokens left empty.
pub fn normalize<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.as_ref().chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Whitespace split followed by [`normalize`].
pub fn tokenize(text: &str) -> Vec<String> {
    normalize(&text.split_whitespace().collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Levenshtein alignment with unit costs. When several predecessors tie,
/// the backtrace prefers substitution (or match), then deletion, then
/// insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(align(reference, hypothesis).total() as f64 / reference.len() as f64)
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// One hypothesis with its references.
pub type CaptionPair = (Vec<String>, Vec<Vec<String>>);

/// Corpus BLEU-4 without smoothing: pooled clipped n-gram precisions,
/// uniform geometric mean, brevity penalty against the closest reference
/// length (shorter wins a tie).
pub fn bleu4(corpus: &[CaptionPair]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, refs) in corpus {
        c += hyp.len();
        r += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for rf in refs {
                for (g, k) in ngrams(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &h {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    bp * log_p.exp()
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F1. Zero if either side is empty.
pub fn rouge_l<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(hypothesis, reference) as f64;
    let (p, r) = (l / hypothesis.len() as f64, l / reference.len() as f64);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_THETA: f64 = 3.0;
const METEOR_SEARCH_LIMIT: usize = 200_000;

struct ChunkSearch<'a> {
    /// Candidate reference positions for each hypothesis position.
    options: Vec<Vec<usize>>,
    /// Matches each word still has to make.
    quota: HashMap<&'a str, usize>,
    hyp: Vec<&'a str>,
    /// Occurrences of each word at or after each hypothesis position.
    remaining: Vec<HashMap<&'a str, usize>>,
    used: Vec<bool>,
    best: usize,
    visited: usize,
}

impl ChunkSearch<'_> {
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.visited += 1;
        if chunks >= self.best || self.visited > METEOR_SEARCH_LIMIT {
            return;
        }
        if i == self.hyp.len() {
            self.best = chunks;
            return;
        }
        let word = self.hyp[i];
        let need = self.quota.get(word).copied().unwrap_or(0);
        // Prefer continuing the current chunk, then positions left to right.
        let mut opts = self.options[i].clone();
        opts.sort_by_key(|&p| (Some(p) != prev.map(|q| q + 1), p));
        if need > 0 {
            for p in opts {
                if self.used[p] {
                    continue;
                }
                self.used[p] = true;
                *self.quota.get_mut(word).expect("word has a quota") -= 1;
                let extra = usize::from(prev.is_none_or(|q| q + 1 != p));
                self.run(i + 1, Some(p), chunks + extra);
                *self.quota.get_mut(word).expect("word has a quota") += 1;
                self.used[p] = false;
            }
        }
        // Skipping this occurrence is allowed while enough later ones remain.
        if need <= self.remaining[i + 1].get(word).copied().unwrap_or(0) {
            self.run(i + 1, None, chunks);
        }
    }
}

/// Fewest chunks over all maximum exact-match alignments, with the match
/// count. The search is exhaustive up to a node budget, after which the
/// best alignment found so far is used.
fn meteor_alignment<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> (usize, usize) {
    let hyp: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let rf: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for w in &rf {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let mut hyp_count: HashMap<&str, usize> = HashMap::new();
    for w in &hyp {
        *hyp_count.entry(w).or_insert(0) += 1;
    }
    let quota: HashMap<&str, usize> = hyp_count
        .iter()
        .map(|(w, &k)| (*w, k.min(ref_count.get(w).copied().unwrap_or(0))))
        .collect();
    let matches: usize = quota.values().sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut remaining = vec![HashMap::new(); hyp.len() + 1];
    for i in (0..hyp.len()).rev() {
        let mut m = remaining[i + 1].clone();
        *m.entry(hyp[i]).or_insert(0) += 1;
        remaining[i] = m;
    }
    let options = hyp
        .iter()
        .map(|w| (0..rf.len()).filter(|&p| rf[p] == *w).collect())
        .collect();
    let mut s = ChunkSearch {
        options,
        quota,
        hyp,
        remaining,
        used: vec![false; rf.len()],
        best: usize::MAX,
        visited: 0,
    };
    s.run(0, None, 0);
    (matches, s.best)
}

/// Exact-match METEOR: `F = PR / (αR + (1-α)P)`, penalty
/// `γ·(chunks/matches)^θ`, score `F·(1 - penalty)`.
pub fn meteor_lite<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = meteor_alignment(hypothesis, reference);
    if m == 0 {
        return 0.0;
    }
    let (p, r) = (m as f64 / hypothesis.len() as f64, m as f64 / reference.len() as f64);
    let f = p * r / (METEOR_ALPHA * r + (1.0 - METEOR_ALPHA) * p);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_THETA);
    f * (1.0 - penalty)
}

type Vector<'a> = HashMap<Vec<&'a str>, f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(&[&str]) -> f64) -> (Vector<'a>, f64) {
    let counts = ngrams(tokens, n);
    let total: usize = counts.values().sum();
    let mut v = HashMap::new();
    let mut norm = 0.0;
    for (g, k) in counts {
        let w = k as f64 / total as f64 * idf(&g);
        norm += w * w;
        v.insert(g, w);
    }
    (v, norm.sqrt())
}

/// Plain CIDEr per utterance. Document frequency counts an utterance once
/// if any of its references contains the n-gram; `idf = ln(N / max(df, 1))`.
pub fn cider_scores(corpus: &[CaptionPair]) -> Result<Vec<f64>, MetricError> {
    let n_docs = corpus.len();
    if n_docs < 2 {
        return Err(MetricError::TooFew { need: 2, got: n_docs });
    }
    let mut df: [HashMap<Vec<&str>, usize>; 4] = Default::default();
    for (_, refs) in corpus {
        for (n, table) in df.iter_mut().enumerate() {
            let seen: BTreeSet<Vec<&str>> = refs.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
            for g in seen {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_n = (n_docs as f64).ln();
    let mut out = Vec::with_capacity(n_docs);
    for (hyp, refs) in corpus {
        let mut total = 0.0;
        for (n, table) in df.iter().enumerate() {
            let idf = |g: &[&str]| log_n - (table.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let (hv, hn) = tfidf(hyp, n + 1, &idf);
            let mut sim = 0.0;
            for r in refs {
                let (rv, rn) = tfidf(r, n + 1, &idf);
                if hn > 0.0 && rn > 0.0 {
                    let dot: f64 = hv.iter().filter_map(|(g, w)| rv.get(g).map(|x| w * x)).sum();
                    sim += dot / (hn * rn);
                }
            }
            if !refs.is_empty() {
                total += sim / refs.len() as f64;
            }
        }
        out.push(10.0 * total / 4.0);
    }
    Ok(out)
}

/// Corpus CIDEr: the mean of [`cider_scores`].
pub fn cider(corpus: &[CaptionPair]) -> Result<f64, MetricError> {
    let s = cider_scores(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Mean per-class recall over `classes`. A missing prediction is wrong.
pub fn unweighted_accuracy(pairs: &[(Emotion, Option<Emotion>)], classes: &[Emotion]) -> Result<f64, MetricError> {
    let mut hit = vec![0usize; classes.len()];
    let mut count = vec![0usize; classes.len()];
    for &(truth, pred) in pairs {
        let k = classes
            .iter()
            .position(|&c| c == truth)
            .ok_or(MetricError::UnknownClass(truth))?;
        count[k] += 1;
        hit[k] += usize::from(pred == Some(truth));
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(MetricError::EmptyClass(classes[k]));
    }
    if classes.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    Ok(hit.iter().zip(&count).map(|(&h, &c)| h as f64 / c as f64).sum::<f64>() / classes.len() as f64)
}

/// Distinct true labels in canonical order.
pub fn present_classes(truths: impl IntoIterator<Item = Emotion>) -> Vec<Emotion> {
    truths.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}
