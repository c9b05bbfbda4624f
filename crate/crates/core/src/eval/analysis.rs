//! Concreteness analyses: human-likeness regression and per-word NLL
//! differences between two models.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::benchmarks::{perplexity_windows, scored_positions, PPL_FIRST_SCORED};
use super::represent::token_nlls;
use super::stats::{average_ranks, ols, summarize, OlsFit, Summary};
use super::{EvalError, Result};
use crate::data::{TextDataset, Tokenizer, BOS, EOS, PAD, UNK};
use crate::model::TransformerLM;

/// Regression of rank-in-human-likeness on pair concreteness.
pub fn humanlikeness_rank_analysis(model_scores: &[f64], human_scores: &[f64], concreteness: &[f64]) -> Result<OlsFit> {
    let n = model_scores.len();
    if human_scores.len() != n || concreteness.len() != n {
        return Err(EvalError::Input("humanlikeness inputs differ in length".into()));
    }
    if n < 3 {
        return Err(EvalError::Input(format!("humanlikeness needs at least 3 pairs, got {n}")));
    }
    let (rm, rh) = (average_ranks(model_scores), average_ranks(human_scores));
    // sorted by rank difference descending: the most human-like pair ranks last
    let neg_diff: Vec<f64> = rm.iter().zip(&rh).map(|(a, b)| -(a - b).abs()).collect();
    ols(concreteness, &average_ranks(&neg_diff))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDifference {
    pub word: String,
    pub concreteness: f64,
    pub occurrences: usize,
    /// Mean over occurrences of `NLL_b − NLL_a`.
    pub mean_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileGroup {
    pub group: usize,
    pub words: usize,
    pub concreteness_min: f64,
    pub concreteness_max: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileTable {
    /// Ascending concreteness.
    pub groups: Vec<QuintileGroup>,
    pub words: Vec<WordDifference>,
    pub schema_version: u32,
}

impl QuintileTable {
    /// Mean difference of the top group minus that of the bottom group.
    pub fn top_minus_bottom(&self) -> f64 {
        match (self.groups.first(), self.groups.last()) {
            (Some(lo), Some(hi)) => hi.summary.mean - lo.summary.mean,
            _ => f64::NAN,
        }
    }

    pub fn groups_csv(&self) -> String {
        let mut s = String::from("group,words,concreteness_min,concreteness_max,mean,q1,median,q3\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                g.group,
                g.words,
                g.concreteness_min,
                g.concreteness_max,
                g.summary.mean,
                g.summary.q1,
                g.summary.median,
                g.summary.q3
            ));
        }
        s
    }

    pub fn words_csv(&self) -> String {
        let mut s = String::from("word,concreteness,occurrences,mean_difference\n");
        for w in &self.words {
            s.push_str(&format!("{},{},{},{}\n", w.word, w.concreteness, w.occurrences, w.mean_difference));
        }
        s
    }
}

/// Minimum occurrences (exclusive) for a word to enter the analysis.
pub const MIN_OCCURRENCES: usize = 5;

fn is_special(id: u32) -> bool {
    matches!(id, PAD | BOS | EOS | UNK)
}

/// Word spans `(start, end)` fully inside the scored part of a window.
fn scored_words(tok: &Tokenizer, window: &[u32]) -> Vec<(usize, usize)> {
    let scored = scored_positions(window.len());
    let mut spans = Vec::new();
    let mut p = 0;
    while p < window.len() {
        if is_special(window[p]) || !tok.starts_word(window[p]) {
            p += 1;
            continue;
        }
        let mut e = p + 1;
        while e < window.len() && !is_special(window[e]) && !tok.starts_word(window[e]) {
            e += 1;
        }
        // a word cut by the window end may continue in the next window
        if p >= scored.start && e < window.len() {
            spans.push((p, e));
        }
        p = e;
    }
    spans
}

/// Per-word NLL differences grouped into concreteness quintiles. Both
/// models score the identical windows and positions.
pub fn per_word_nll_difference(
    model_a: &TransformerLM,
    model_b: &TransformerLM,
    tok: &Tokenizer,
    text: &TextDataset,
    concreteness: &[(String, f64)],
) -> Result<QuintileTable> {
    for m in [model_a, model_b] {
        if m.config.vocab_size != tok.vocab_size() {
            return Err(EvalError::VocabMismatch {
                tokenizer: tok.vocab_size(),
                model: m.config.vocab_size,
            });
        }
    }
    let windows: Vec<&[u32]> = perplexity_windows(text)
        .into_iter()
        .filter(|w| w.len() > PPL_FIRST_SCORED)
        .collect();
    let (na, nb) = (token_nlls(model_a, &windows)?, token_nlls(model_b, &windows)?);
    let conc: HashMap<&str, f64> = concreteness.iter().map(|(w, c)| (w.as_str(), *c)).collect();
    let mut diffs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (k, w) in windows.iter().enumerate() {
        for (s, e) in scored_words(tok, w) {
            let word = tok.decode(&w[s..e])?;
            if !conc.contains_key(word.as_str()) {
                continue;
            }
            let a: f64 = na[k][s..e].iter().sum();
            let b: f64 = nb[k][s..e].iter().sum();
            diffs.entry(word).or_default().push(b - a);
        }
    }
    let mut words: Vec<WordDifference> = diffs
        .into_iter()
        .filter(|(_, v)| v.len() > MIN_OCCURRENCES)
        .map(|(w, v)| WordDifference {
            concreteness: conc[w.as_str()],
            occurrences: v.len(),
            mean_difference: v.iter().sum::<f64>() / v.len() as f64,
            word: w,
        })
        .collect();
    if words.is_empty() {
        return Err(EvalError::Input(format!(
            "no word with concreteness occurs more than {MIN_OCCURRENCES} times"
        )));
    }
    words.sort_by(|a, b| a.concreteness.total_cmp(&b.concreteness).then_with(|| a.word.cmp(&b.word)));
    let n = words.len();
    let groups = (0..5)
        .filter_map(|g| {
            let slice = &words[g * n / 5..(g + 1) * n / 5];
            if slice.is_empty() {
                return None;
            }
            let vals: Vec<f64> = slice.iter().map(|w| w.mean_difference).collect();
            Some(QuintileGroup {
                group: g,
                words: slice.len(),
                concreteness_min: slice[0].concreteness,
                concreteness_max: slice[slice.len() - 1].concreteness,
                summary: summarize(&vals),
            })
        })
        .collect();
    Ok(QuintileTable {
        groups,
        words,
        schema_version: super::benchmarks::REPORT_SCHEMA_VERSION,
    })
}
