//! Word-learning benchmarks and windowed perplexity.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::pls::pls_fit;
use super::probe::{macro_f1, train_probe};
use super::represent::{token_nlls, word_representations, WordRepresentation};
use super::stats::{cosine, spearman};
use super::{EvalConfig, EvalError, Result};
use crate::data::{ContextPair, Relation, RelationLabel, TextDataset, Tokenizer, BOS};
use crate::model::TransformerLM;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Machine-readable result of one benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: String,
    /// One score per layer `0..=n_layers` (empty for whole-model metrics).
    pub per_layer: Vec<f64>,
    pub best_layer: Option<usize>,
    pub score: f64,
    pub meta: BTreeMap<String, Value>,
    pub schema_version: u32,
}

impl BenchmarkReport {
    fn new(benchmark: &str, per_layer: Vec<f64>, best_layer: Option<usize>, score: f64) -> Self {
        Self {
            benchmark: benchmark.into(),
            per_layer,
            best_layer,
            score,
            meta: BTreeMap::new(),
            schema_version: REPORT_SCHEMA_VERSION,
        }
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.into(), value);
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EvalError::Input(format!("benchmark report: {e}")))
    }

    /// `layer,score` rows for plotting.
    pub fn per_layer_csv(&self) -> String {
        let mut s = String::from("layer,score\n");
        for (l, v) in self.per_layer.iter().enumerate() {
            s.push_str(&format!("{l},{v}\n"));
        }
        s
    }
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] || xs[b].is_nan() { i } else { b })
}

fn reps_by_word(model: &TransformerLM, tok: &Tokenizer, words: &BTreeSet<&str>) -> Result<HashMap<String, WordRepresentation>> {
    let list: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    Ok(word_representations(model, tok, &list)?
        .into_iter()
        .flatten()
        .map(|r| (r.word.clone(), r))
        .collect())
}

/// Relatedness scores plus the per-pair cosines at the best layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessResult {
    pub report: BenchmarkReport,
    /// Indices into the input pairs that were scored.
    pub kept: Vec<usize>,
    pub best_cosines: Vec<f64>,
}

/// Spearman correlation between representation cosine and the reference
/// score at every layer; the best layer is the maximum.
pub fn relatedness_benchmark(
    model: &TransformerLM,
    tok: &Tokenizer,
    pairs: &[(String, String, f64)],
) -> Result<RelatednessResult> {
    let words: BTreeSet<&str> = pairs.iter().flat_map(|(a, b, _)| [a.as_str(), b.as_str()]).collect();
    let reps = reps_by_word(model, tok, &words)?;
    let kept: Vec<usize> = (0..pairs.len())
        .filter(|&i| reps.contains_key(&pairs[i].0) && reps.contains_key(&pairs[i].1))
        .collect();
    if kept.len() < 2 {
        return Err(EvalError::Input(format!("only {} relatedness pairs are scorable", kept.len())));
    }
    let human: Vec<f64> = kept.iter().map(|&i| pairs[i].2).collect();
    let n_layers = model.config.n_layers;
    let cos_at = |l: usize| -> Vec<f64> {
        kept.iter()
            .map(|&i| cosine(&reps[&pairs[i].0].layers[l], &reps[&pairs[i].1].layers[l]))
            .collect()
    };
    let per_layer: Vec<f64> = (0..=n_layers)
        .map(|l| spearman(&cos_at(l), &human))
        .collect::<Result<_>>()?;
    let best = argmax(&per_layer);
    let report = BenchmarkReport::new("relatedness", per_layer.clone(), Some(best), per_layer[best])
        .with_meta("pairs", json!(pairs.len()))
        .with_meta("skipped_pairs", json!(pairs.len() - kept.len()));
    Ok(RelatednessResult {
        report,
        best_cosines: cos_at(best),
        kept,
    })
}

/// Overlap between the top-`k` predicted features and the `k` true ones.
pub fn map_overlap(truth: &[bool], predicted: &[f64]) -> f64 {
    let k = truth.iter().filter(|&&t| t).count();
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[b].total_cmp(&predicted[a]).then(a.cmp(&b)));
    order[..k].iter().filter(|&&i| truth[i]).count() as f64 / k as f64
}

fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((n as f64) * 0.1).round().max(1.0) as usize;
    let test = idx[..n_eval].to_vec();
    let val = idx[n_eval..2 * n_eval].to_vec();
    let train = idx[2 * n_eval..].to_vec();
    (train, val, test)
}

/// Feature-norm prediction with PLS on each layer, over two random
/// 80/10/10 splits. The layer is selected on the mean validation score.
pub fn feature_benchmark(
    model: &TransformerLM,
    tok: &Tokenizer,
    norms: &[(String, String, f64)],
    cfg: &EvalConfig,
) -> Result<BenchmarkReport> {
    if norms.is_empty() {
        return Err(EvalError::Input("feature norms are empty".into()));
    }
    let features: Vec<&str> = norms.iter().map(|r| r.1.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let fidx: HashMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut by_word: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (w, f, v) in norms {
        by_word.entry(w.as_str()).or_insert_with(|| vec![0.0; features.len()])[fidx[f.as_str()]] = *v;
    }
    let zero_words = by_word.values().filter(|v| v.iter().all(|&x| x == 0.0)).count();
    by_word.retain(|_, v| v.iter().any(|&x| x != 0.0));
    let reps = reps_by_word(model, tok, &by_word.keys().copied().collect())?;
    let missing = by_word.keys().filter(|w| !reps.contains_key(**w)).count();
    let words: Vec<&str> = by_word.keys().copied().filter(|w| reps.contains_key(*w)).collect();
    let n = words.len();
    if n < 10 {
        return Err(EvalError::Input(format!("feature benchmark needs at least 10 words, got {n}")));
    }
    let nf = features.len();
    let y = DMatrix::from_fn(n, nf, |i, j| by_word[words[i]][j]);
    let d = model.config.d_model;
    let n_layers = model.config.n_layers;
    let mut val = vec![0.0; n_layers + 1];
    let mut test = vec![0.0; n_layers + 1];
    let mut components = 0;
    const SPLITS: u64 = 2;
    for s in 0..SPLITS {
        let (tr, va, te) = split_indices(n, cfg.split_seed.wrapping_add(s));
        let k = cfg.pls_components.min(tr.len() - 1).min(d);
        components = k;
        let rows = |idx: &[usize], m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        let score = |pred: &DMatrix<f64>, idx: &[usize]| -> f64 {
            idx.iter()
                .enumerate()
                .map(|(r, &i)| {
                    let truth: Vec<bool> = (0..nf).map(|j| y[(i, j)] != 0.0).collect();
                    let p: Vec<f64> = pred.row(r).iter().copied().collect();
                    map_overlap(&truth, &p)
                })
                .sum::<f64>()
                / idx.len() as f64
        };
        for l in 0..=n_layers {
            let x = DMatrix::from_fn(n, d, |i, j| reps[words[i]].layers[l][j]);
            let pls = pls_fit(&rows(&tr, &x), &rows(&tr, &y), k)?;
            val[l] += score(&pls.predict(&rows(&va, &x)), &va) / SPLITS as f64;
            test[l] += score(&pls.predict(&rows(&te, &x)), &te) / SPLITS as f64;
        }
    }
    let best = argmax(&val);
    Ok(BenchmarkReport::new("features", test.clone(), Some(best), test[best])
        .with_meta("val_per_layer", json!(val))
        .with_meta("pls_components", json!(components))
        .with_meta("words", json!(n))
        .with_meta("excluded_zero_feature_words", json!(zero_words))
        .with_meta("skipped_words", json!(missing))
        .with_meta("splits", json!(SPLITS)))
}

fn standardize(train: &mut [f64], others: &mut [&mut Vec<f64>], dim: usize) {
    let rows = train.len() / dim;
    for j in 0..dim {
        let mean = (0..rows).map(|r| train[r * dim + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (train[r * dim + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            train[r * dim + j] = (train[r * dim + j] - mean) / sd;
        }
        for o in others.iter_mut() {
            for r in 0..o.len() / dim {
                o[r * dim + j] = (o[r * dim + j] - mean) / sd;
            }
        }
    }
}

/// Lexical-relation classification from representation differences.
pub fn relation_benchmark(
    model: &TransformerLM,
    tok: &Tokenizer,
    train: &[Relation],
    test: &[Relation],
    cfg: &EvalConfig,
) -> Result<BenchmarkReport> {
    let words: BTreeSet<&str> = train
        .iter()
        .chain(test)
        .flat_map(|r| [r.w1.as_str(), r.w2.as_str()])
        .collect();
    let reps = reps_by_word(model, tok, &words)?;
    let usable = |rs: &[Relation]| -> Vec<Relation> {
        rs.iter()
            .filter(|r| reps.contains_key(&r.w1) && reps.contains_key(&r.w2))
            .cloned()
            .collect()
    };
    let (tr, te) = (usable(train), usable(test));
    if tr.len() < 2 || te.is_empty() {
        return Err(EvalError::Input("relation benchmark needs scorable train and test pairs".into()));
    }
    let seen: BTreeSet<RelationLabel> = tr.iter().map(|r| r.label).collect();
    if let Some(r) = te.iter().find(|r| !seen.contains(&r.label)) {
        return Err(EvalError::Input(format!("test label {} never appears in training", r.label)));
    }
    let d = model.config.d_model;
    let classes = RelationLabel::ALL.len();
    let mut val = Vec::new();
    let mut scores = Vec::new();
    for l in 0..=model.config.n_layers {
        let diff = |rs: &[Relation]| -> Vec<f64> {
            rs.iter()
                .flat_map(|r| {
                    let (a, b) = (&reps[&r.w1].layers[l], &reps[&r.w2].layers[l]);
                    a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
                })
                .collect()
        };
        let (mut xt, mut xe) = (diff(&tr), diff(&te));
        standardize(&mut xt, &mut [&mut xe], d);
        let yt: Vec<usize> = tr.iter().map(|r| r.label.index()).collect();
        let ye: Vec<usize> = te.iter().map(|r| r.label.index()).collect();
        let (mlp, v) = train_probe(&xt, &yt, d, classes, &cfg.probe, cfg.split_seed)?;
        val.push(v);
        scores.push(macro_f1(&ye, &mlp.predict(&xe)?, classes));
    }
    let best = argmax(&val);
    Ok(BenchmarkReport::new("relations", scores.clone(), Some(best), scores[best])
        .with_meta("val_per_layer", json!(val))
        .with_meta("train_pairs", json!(tr.len()))
        .with_meta("test_pairs", json!(te.len()))
        .with_meta("skipped_pairs", json!(train.len() + test.len() - tr.len() - te.len())))
}

/// Sum of next-token log-probabilities of `[BOS] + tokens(sentence)`.
pub fn sentence_logprobs(model: &TransformerLM, tok: &Tokenizer, sentences: &[&str]) -> Result<Vec<f64>> {
    let seqs: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| {
            let mut v = vec![BOS];
            v.extend(tok.encode(s));
            v
        })
        .collect();
    if let Some(s) = seqs.iter().find(|s| s.len() > model.config.max_seq_len) {
        return Err(EvalError::Input(format!(
            "sentence of {} tokens exceeds the model context {}",
            s.len(),
            model.config.max_seq_len
        )));
    }
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    Ok(token_nlls(model, &refs)?.into_iter().map(|n| -n.iter().sum::<f64>()).collect())
}

/// Fraction of pairs where the original sentence is more probable than
/// its edit (ties count half), per part of speech and averaged.
pub fn context_benchmark(model: &TransformerLM, tok: &Tokenizer, pairs: &[ContextPair]) -> Result<BenchmarkReport> {
    let original: Vec<&str> = pairs.iter().map(|p| p.original.as_str()).collect();
    let modified: Vec<&str> = pairs.iter().map(|p| p.modified.as_str()).collect();
    let a = sentence_logprobs(model, tok, &original)?;
    let b = sentence_logprobs(model, tok, &modified)?;
    Ok(context_report(pairs, &a, &b))
}

/// Scores per-pair log-probabilities into the context report.
pub fn context_report(pairs: &[ContextPair], original: &[f64], modified: &[f64]) -> BenchmarkReport {
    let mut by_pos: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let credit = if original[i] > modified[i] {
            1.0
        } else if original[i] == modified[i] {
            0.5
        } else {
            0.0
        };
        let e = by_pos.entry(p.pos.as_str()).or_insert((0.0, 0));
        e.0 += credit;
        e.1 += 1;
    }
    let per_pos: BTreeMap<&str, f64> = by_pos.iter().map(|(k, (s, n))| (*k, s / *n as f64)).collect();
    let score = if per_pos.is_empty() {
        f64::NAN
    } else {
        per_pos.values().sum::<f64>() / per_pos.len() as f64
    };
    BenchmarkReport::new("context", Vec::new(), None, score)
        .with_meta("per_pos", json!(per_pos))
        .with_meta("pairs", json!(pairs.len()))
}

/// Window length of the perplexity protocol.
pub const PPL_WINDOW: usize = 128;
/// First scored position inside a window.
pub const PPL_FIRST_SCORED: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub scored_tokens: usize,
    pub windows: usize,
}

/// Splits every sequence into non-overlapping windows of
/// [`PPL_WINDOW`] tokens.
pub fn perplexity_windows(text: &TextDataset) -> Vec<&[u32]> {
    text.chunks.iter().flat_map(|c| c.chunks(PPL_WINDOW)).collect()
}

/// Scored positions of a window.
pub fn scored_positions(window_len: usize) -> std::ops::Range<usize> {
    PPL_FIRST_SCORED.min(window_len)..window_len
}

/// `exp` of the mean NLL over positions `64..128` of every window.
pub fn perplexity(model: &TransformerLM, text: &TextDataset) -> Result<Perplexity> {
    let windows = perplexity_windows(text);
    if let Some(w) = windows.iter().find(|w| w.len() > model.config.max_seq_len) {
        return Err(EvalError::Input(format!(
            "window of {} tokens exceeds the model context {}",
            w.len(),
            model.config.max_seq_len
        )));
    }
    let eligible: Vec<&[u32]> = windows.into_iter().filter(|w| w.len() > PPL_FIRST_SCORED).collect();
    if eligible.is_empty() {
        return Err(EvalError::Input("no window is long enough to score a token".into()));
    }
    let nlls = token_nlls(model, &eligible)?;
    let mut sum = 0.0;
    let mut count = 0;
    for nll in &nlls {
        for p in scored_positions(nll.len()) {
            sum += nll[p];
            count += 1;
        }
    }
    let mean = sum / count as f64;
    Ok(Perplexity {
        perplexity: mean.exp(),
        mean_nll: mean,
        scored_tokens: count,
        windows: eligible.len(),
    })
}

pub fn perplexity_report(model: &TransformerLM, text: &TextDataset) -> Result<BenchmarkReport> {
    let p = perplexity(model, text)?;
    Ok(BenchmarkReport::new("perplexity", Vec::new(), None, p.perplexity)
        .with_meta("mean_nll", json!(p.mean_nll))
        .with_meta("scored_tokens", json!(p.scored_tokens))
        .with_meta("windows", json!(p.windows)))
}
