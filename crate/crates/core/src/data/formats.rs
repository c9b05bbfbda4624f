//! File formats: caption JSON Lines, the `LCGF` feature matrix, plain text
//! corpora and the tab-separated benchmark tables.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use super::DataError;

pub const FEATURES_MAGIC: &[u8; 4] = b"LCGF";
pub const FEATURES_VERSION: u32 = 1;
/// Length of every ungrounded training/evaluation sequence.
pub const TEXT_SEQ_LEN: usize = 128;

/// Row-major feature matrix `[count, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if data.len() != count * dim || dim == 0 {
            return Err(DataError::Format(format!(
                "feature matrix {count}×{dim} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { count, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(16 + m.data.len() * 4);
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.count as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for &v in &m.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| DataError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let fail = |msg: String| DataError::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != FEATURES_MAGIC {
        return Err(fail("missing LCGF magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURES_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (count, dim) = (u32_at(8) as usize, u32_at(12) as usize);
    if bytes.len() != 16 + count * dim * 4 {
        return Err(fail(format!("expected {count}×{dim} f32 values, file has {} bytes", bytes.len())));
    }
    let mut data = Vec::with_capacity(count * dim);
    for (i, c) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(format!("non-finite value at row {} column {}", i / dim, i % dim)));
        }
        data.push(v as f64);
    }
    FeatureMatrix::new(count, dim, data)
}

/// Rounds values to the precision stored on disk.
pub fn to_f32_precision(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption: String,
    pub feature_row: usize,
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(line).map_err(|e| DataError::record(path, i + 1, e.to_string()))?;
        if rec.caption.trim().is_empty() {
            return Err(DataError::record(path, i + 1, "empty caption"));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundedExample {
    /// `BOS, caption tokens…, EOS`.
    pub tokens: Vec<u32>,
    pub feature_row: usize,
}

/// Image-caption pairs with memory-resident image features.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedDataset {
    pub examples: Vec<GroundedExample>,
    pub features: FeatureMatrix,
}

impl GroundedDataset {
    pub fn from_records(
        records: &[CaptionRecord],
        features: FeatureMatrix,
        tokenizer: &Tokenizer,
    ) -> Result<Self, DataError> {
        let mut examples = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.feature_row >= features.count {
                return Err(DataError::Record {
                    file: "captions".into(),
                    line: i + 1,
                    msg: format!("feature_row {} ≥ feature count {}", r.feature_row, features.count),
                });
            }
            let body = tokenizer.encode(&r.caption);
            if body.is_empty() {
                return Err(DataError::Record {
                    file: "captions".into(),
                    line: i + 1,
                    msg: "caption encodes to no tokens".into(),
                });
            }
            let mut tokens = Vec::with_capacity(body.len() + 2);
            tokens.push(BOS);
            tokens.extend(body);
            tokens.push(EOS);
            examples.push(GroundedExample {
                tokens,
                feature_row: r.feature_row,
            });
        }
        Ok(Self { examples, features })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).sum()
    }
}

/// Parses a captions file and a feature file into a dataset.
pub fn load_grounded(captions: &Path, features: &Path, tokenizer: &Tokenizer) -> Result<GroundedDataset, DataError> {
    let records = read_captions(captions)?;
    let feats = read_features(features)?;
    GroundedDataset::from_records(&records, feats, tokenizer).map_err(|e| match e {
        DataError::Record { line, msg, .. } => DataError::record(captions, line, msg),
        other => other,
    })
}

/// Ungrounded token stream cut into fixed-length sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextDataset {
    pub chunks: Vec<Vec<u32>>,
}

impl TextDataset {
    /// Chunks a token stream; the trailing remainder is dropped.
    pub fn from_stream(stream: &[u32], seq_len: usize) -> Self {
        Self {
            chunks: stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect(),
        }
    }

    /// Encodes each non-empty line followed by `EOS` and chunks the stream.
    pub fn from_text(text: &str, tokenizer: &Tokenizer, seq_len: usize) -> Self {
        Self::from_stream(&encode_lines(text, tokenizer), seq_len)
    }

    pub fn load(path: &Path, tokenizer: &Tokenizer) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::from_text(&text, tokenizer, TEXT_SEQ_LEN))
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }
}

pub fn encode_lines(text: &str, tokenizer: &Tokenizer) -> Vec<u32> {
    let mut stream = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        stream.extend(tokenizer.encode(line));
        stream.push(EOS);
    }
    stream
}

// ---- benchmark tables ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationLabel {
    #[serde(rename = "SYN")]
    Syn,
    #[serde(rename = "ANT")]
    Ant,
    #[serde(rename = "HYPER")]
    Hyper,
    #[serde(rename = "PART_OF")]
    PartOf,
    #[serde(rename = "RANDOM")]
    Random,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 5] = [Self::Syn, Self::Ant, Self::Hyper, Self::PartOf, Self::Random];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Syn => "SYN",
            Self::Ant => "ANT",
            Self::Hyper => "HYPER",
            Self::PartOf => "PART_OF",
            Self::Random => "RANDOM",
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown relation label {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub w1: String,
    pub w2: String,
    pub label: RelationLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPair {
    pub original: String,
    pub modified: String,
    pub target: String,
    pub pos: String,
}

fn read_tsv(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cols.len() != columns {
            return Err(DataError::record(
                path,
                i + 1,
                format!("expected {columns} columns, found {}", cols.len()),
            ));
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64, DataError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| DataError::record(path, line, format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(DataError::record(path, line, "non-finite value"));
    }
    Ok(v)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), DataError> {
    let mut out = Vec::new();
    for l in lines {
        writeln!(out, "{l}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// `word1 \t word2 \t score`
pub fn read_relatedness(path: &Path) -> Result<Vec<(String, String, f64)>, DataError> {
    read_tsv(path, 3)?
        .into_iter()
        .map(|(line, c)| Ok((c[0].clone(), c[1].clone(), parse_f64(path, line, &c[2])?)))
        .collect()
}

pub fn write_relatedness(path: &Path, rows: &[(String, String, f64)]) -> Result<(), DataError> {
    write_lines(path, rows.iter().map(|(a, b, s)| format!("{a}\t{b}\t{s}")))
}

/// `word \t feature \t strength`
pub fn read_norms(path: &Path) -> Result<Vec<(String, String, f64)>, DataError> {
    read_relatedness(path)
}

pub fn write_norms(path: &Path, rows: &[(String, String, f64)]) -> Result<(), DataError> {
    write_relatedness(path, rows)
}

/// `word1 \t word2 \t label`
pub fn read_relations(path: &Path) -> Result<Vec<Relation>, DataError> {
    read_tsv(path, 3)?
        .into_iter()
        .map(|(line, c)| {
            Ok(Relation {
                w1: c[0].clone(),
                w2: c[1].clone(),
                label: c[2].trim().parse().map_err(|e: String| DataError::record(path, line, e))?,
            })
        })
        .collect()
}

pub fn write_relations(path: &Path, rows: &[Relation]) -> Result<(), DataError> {
    write_lines(path, rows.iter().map(|r| format!("{}\t{}\t{}", r.w1, r.w2, r.label)))
}

/// `original \t modified \t target_word \t pos`
pub fn read_context(path: &Path) -> Result<Vec<ContextPair>, DataError> {
    read_tsv(path, 4)?
        .into_iter()
        .map(|(line, c)| {
            let pos = c[3].trim().to_string();
            if !["noun", "verb", "adj"].contains(&pos.as_str()) {
                return Err(DataError::record(path, line, format!("unknown pos {pos:?}")));
            }
            Ok(ContextPair {
                original: c[0].clone(),
                modified: c[1].clone(),
                target: c[2].clone(),
                pos,
            })
        })
        .collect()
}

pub fn write_context(path: &Path, rows: &[ContextPair]) -> Result<(), DataError> {
    write_lines(
        path,
        rows.iter()
            .map(|r| format!("{}\t{}\t{}\t{}", r.original, r.modified, r.target, r.pos)),
    )
}

/// `word \t score`
pub fn read_concreteness(path: &Path) -> Result<Vec<(String, f64)>, DataError> {
    read_tsv(path, 2)?
        .into_iter()
        .map(|(line, c)| Ok((c[0].clone(), parse_f64(path, line, &c[1])?)))
        .collect()
}

pub fn write_concreteness(path: &Path, rows: &[(String, f64)]) -> Result<(), DataError> {
    write_lines(path, rows.iter().map(|(w, s)| format!("{w}\t{s}")))
}
