//! From ranked candidates to model-ready training pairs.
//!
//! The input is the question followed by the k candidates ranked 2..k+1,
//! joined by `[SEP]`; the target is the top-ranked candidate. On top of
//! that baseline, score conditioning inserts confidence-bucket tokens: one
//! before each input candidate (SCI) and one before the target (SCO). The
//! bucket of a score is the fifth of [0, 1] it falls into, with the top
//! bucket closed at 1.
//!
//! This module also owns the whitespace tokenizer and the vocabulary with
//! its reserved special tokens, since every other stage speaks token ids.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QAExample;
use crate::scorer::{rank, RankedCandidates, Scorer, ScorerError};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
/// Ids of the five named bucket tokens, most confident first.
pub const BUCKET5_IDS: [u32; 5] = [5, 6, 7, 8, 9];
pub const N_RESERVED: u32 = 10;

/// Reserved token strings, in id order 0..10.
pub const SPECIAL_TOKEN_STRINGS: [&str; 10] = [
    "[PAD]",
    "[BOS]",
    "[EOS]",
    "[SEP]",
    "[UNK]",
    "[_YES_]",
    "[_PROBABLY_]",
    "[_MAYBE_]",
    "[_DOUBT_]",
    "[_NO_]",
];

/// Named bucket tokens indexed by bucket index 1..=5 (ascending confidence).
const BUCKET5_BY_INDEX: [&str; 5] = ["[_NO_]", "[_DOUBT_]", "[_MAYBE_]", "[_PROBABLY_]", "[_YES_]"];

#[derive(Debug, Error)]
pub enum ShapingError {
    #[error("score {score} outside [0, 1]")]
    ScoreOutOfRange { score: f64 },
    #[error("invalid shaping config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("example {id:?} has {have} candidates but shaping needs k+1 = {need}")]
    TooFewCandidates { id: String, have: usize, need: usize },
    #[error("example {id:?} has an empty question")]
    EmptyQuestion { id: String },
    #[error("scorer failed on example {id:?}: {source}")]
    Scorer { id: String, source: ScorerError },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("vocabulary is inconsistent: {0}")]
    VocabMismatch(String),
}

/// A confidence bucket: index `i` (ascending confidence, 1..=l), its token,
/// and the score interval it covers (top bucket closed at 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketLabel {
    pub index: usize,
    pub token: String,
    pub lo: f64,
    pub hi: f64,
}

fn bucket_token(index: usize, l: usize) -> String {
    if l == 5 {
        BUCKET5_BY_INDEX[index - 1].to_string()
    } else {
        format!("[_B{index}_]")
    }
}

/// The bucket label of index `index` (1..=l) without going through a score.
pub fn bucket_label_for_index(index: usize, l: usize) -> BucketLabel {
    assert!(index >= 1 && index <= l, "bucket index {index} outside 1..={l}");
    BucketLabel {
        index,
        token: bucket_token(index, l),
        lo: (index - 1) as f64 / l as f64,
        hi: index as f64 / l as f64,
    }
}

/// Assigns a score to its confidence bucket: bucket `i` covers
/// [(i-1)/l, i/l), the top bucket is closed at 1. Boundary behavior is
/// defined by f64 comparison against the computed interval edges.
pub fn bucket(score: f64, l: usize) -> Result<BucketLabel, ShapingError> {
    if l == 0 {
        return Err(ShapingError::InvalidConfig {
            field: "l",
            message: "bucket count must be positive".into(),
        });
    }
    if !score.is_finite() || !(0.0..=1.0).contains(&score) {
        return Err(ShapingError::ScoreOutOfRange { score });
    }
    for i in 1..=l {
        let lo = (i - 1) as f64 / l as f64;
        let hi = i as f64 / l as f64;
        let hit = if i == l {
            score >= lo
        } else {
            score >= lo && score < hi
        };
        if hit {
            return Ok(BucketLabel {
                index: i,
                token: bucket_token(i, l),
                lo,
                hi,
            });
        }
    }
    unreachable!("buckets cover [0, 1]")
}

/// Closed-world vocabulary with fixed reserved tokens.
///
/// Ids 0..10 are the reserved specials in [`SPECIAL_TOKEN_STRINGS`] order.
/// When the bucket count differs from 5, generated bucket tokens
/// `[_B1_]..[_Bl_]` follow immediately after; all remaining tokens are
/// sorted corpus words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    bucket_count: usize,
    /// ids of the bucket tokens, ascending bucket index (confidence).
    bucket_ids: Vec<u32>,
}

impl Vocabulary {
    /// Builds a vocabulary over the reserved tokens, the bucket tokens for
    /// `bucket_count`, and every whitespace token of `texts` (sorted).
    pub fn build<'a, I>(texts: I, bucket_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKEN_STRINGS
            .iter()
            .map(|s| s.to_string())
            .collect();
        if bucket_count != 5 {
            for i in 1..=bucket_count {
                id_to_token.push(bucket_token(i, bucket_count));
            }
        }
        let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if !id_to_token.iter().any(|t| t == tok) {
                    words.insert(tok.to_string());
                }
            }
        }
        id_to_token.extend(words);
        Self::from_parts(id_to_token, bucket_count)
    }

    /// Convenience builder over a corpus: questions plus candidate texts.
    pub fn build_from_corpus(examples: &[QAExample], bucket_count: usize) -> Vocabulary {
        let texts = examples.iter().flat_map(|e| {
            std::iter::once(e.question.as_str())
                .chain(e.candidates.iter().map(|c| c.text.as_str()))
        });
        Self::build(texts, bucket_count)
    }

    /// Rebuilds a vocabulary from a persisted token list.
    pub fn from_tokens(tokens: Vec<String>, bucket_count: usize) -> Result<Vocabulary, ShapingError> {
        if tokens.len() < SPECIAL_TOKEN_STRINGS.len() {
            return Err(ShapingError::VocabMismatch(format!(
                "token list too short: {}",
                tokens.len()
            )));
        }
        for (i, expected) in SPECIAL_TOKEN_STRINGS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(ShapingError::VocabMismatch(format!(
                    "reserved token {i} is {:?}, expected {expected:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Self::from_parts(tokens, bucket_count))
    }

    fn from_parts(id_to_token: Vec<String>, bucket_count: usize) -> Vocabulary {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        let bucket_ids = (1..=bucket_count)
            .map(|i| {
                let tok = bucket_token(i, bucket_count);
                *token_to_id
                    .get(&tok)
                    .expect("bucket tokens are inserted at build time")
            })
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            bucket_count,
            bucket_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_count
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Ids of the bucket tokens in ascending bucket-index order.
    pub fn bucket_ids(&self) -> &[u32] {
        &self.bucket_ids
    }

    /// Bucket index (1..=l, ascending confidence) of a token id, if it is a
    /// bucket token.
    pub fn bucket_index_of_id(&self, id: u32) -> Option<usize> {
        self.bucket_ids.iter().position(|&b| b == id).map(|p| p + 1)
    }

    /// True for reserved tokens and bucket tokens; these never appear in
    /// generated answer text.
    pub fn is_special_id(&self, id: u32) -> bool {
        id < N_RESERVED || self.bucket_index_of_id(id).is_some()
    }

    /// Whitespace tokenization into ids; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|tok| self.id(tok).unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize) on in-vocabulary ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Shaping configuration. `k` context candidates, bucket count `l`, and the
/// two score-conditioning switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub k: usize,
    pub sci: bool,
    pub sco: bool,
    pub l: usize,
    pub max_input_tokens: usize,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            k: 5,
            sci: false,
            sco: false,
            l: 5,
            max_input_tokens: 256,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), ShapingError> {
        if self.k == 0 {
            return Err(ShapingError::InvalidConfig {
                field: "k",
                message: "context size must be positive".into(),
            });
        }
        if self.l == 0 {
            return Err(ShapingError::InvalidConfig {
                field: "l",
                message: "bucket count must be positive".into(),
            });
        }
        if self.max_input_tokens == 0 {
            return Err(ShapingError::InvalidConfig {
                field: "max_input_tokens",
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One tokenized training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapedExample {
    #[serde(rename = "id")]
    pub example_id: String,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Raw top-1 score of the target candidate, pre-normalization.
    pub weight: f64,
    pub target_bucket: String,
    pub k_used: usize,
}

/// Builds the model input/target pair for one ranked example.
///
/// Input: question, then for each of the candidates ranked 2..k+1 a `[SEP]`,
/// an optional bucket token (SCI) and the candidate tokens. Target: an
/// optional bucket token (SCO), the top-ranked candidate, `[EOS]`.
/// Truncation to `max_input_tokens` drops whole trailing candidates first
/// and then cuts the last kept candidate.
pub fn shape(
    example: &QAExample,
    ranked: &RankedCandidates,
    cfg: &ShapingConfig,
    vocab: &Vocabulary,
) -> Result<ShapedExample, ShapingError> {
    cfg.validate()?;
    if example.question.trim().is_empty() {
        return Err(ShapingError::EmptyQuestion {
            id: example.id.clone(),
        });
    }
    if ranked.ordered.len() < cfg.k + 1 {
        return Err(ShapingError::TooFewCandidates {
            id: example.id.clone(),
            have: ranked.ordered.len(),
            need: cfg.k + 1,
        });
    }

    let bucket_id = |score: f64| -> Result<u32, ShapingError> {
        let label = bucket(score, cfg.l)?;
        Ok(vocab
            .id(&label.token)
            .expect("bucket tokens are always in the vocabulary"))
    };

    let max = cfg.max_input_tokens;
    let mut input_ids = vocab.tokenize(&example.question);
    input_ids.truncate(max);
    let mut k_used = 0;
    for j in 1..=cfg.k {
        let (cand_idx, score) = ranked.ordered[j];
        let mut segment = vec![SEP_ID];
        if cfg.sci {
            segment.push(bucket_id(score)?);
        }
        let overhead = segment.len();
        let content = vocab.tokenize(&example.candidates[cand_idx].text);
        // a kept candidate must contribute at least one content token
        if input_ids.len() + overhead + 1 > max {
            break;
        }
        segment.extend_from_slice(&content);
        if input_ids.len() + segment.len() <= max {
            input_ids.extend_from_slice(&segment);
            k_used += 1;
        } else {
            segment.truncate(max - input_ids.len());
            input_ids.extend_from_slice(&segment);
            k_used += 1;
            break;
        }
    }

    let (top_idx, top_score) = ranked.ordered[0];
    let mut target_ids = Vec::new();
    if cfg.sco {
        target_ids.push(bucket_id(top_score)?);
    }
    target_ids.extend(vocab.tokenize(&example.candidates[top_idx].text));
    target_ids.push(EOS_ID);

    Ok(ShapedExample {
        example_id: example.id.clone(),
        input_ids,
        target_ids,
        weight: top_score,
        target_bucket: bucket(top_score, cfg.l)?.token,
        k_used,
    })
}

/// Aggregate statistics of a shaped dataset, persisted next to it.
///
/// `z` is the arithmetic mean of emitted weights (1.0 sentinel when the
/// dataset is empty); `max_weight` supports the max normalization mode. The
/// shaping and scorer fields record how the dataset was built so later
/// stages can shape dev/eval corpora the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "Z")]
    pub z: f64,
    pub bucket_histogram: BTreeMap<String, u64>,
    pub skipped: u64,
    pub n: u64,
    pub max_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaping: Option<ShapingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<crate::scorer::ScorerSpec>,
}

/// Ranks and shapes a whole corpus in order. Examples with fewer than k+1
/// candidates are skipped and counted; a scorer failure aborts with the
/// example id.
pub fn build_dataset(
    examples: &[QAExample],
    scorer: &dyn Scorer,
    cfg: &ShapingConfig,
    vocab: &Vocabulary,
) -> Result<(Vec<ShapedExample>, DatasetStats), ShapingError> {
    cfg.validate()?;
    let mut shaped = Vec::with_capacity(examples.len());
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
    let mut skipped = 0u64;
    let mut sum_weight = 0.0;
    let mut max_weight = f64::NEG_INFINITY;
    for example in examples {
        if example.candidates.len() < cfg.k + 1 {
            skipped += 1;
            continue;
        }
        let ranked = rank(example, scorer).map_err(|source| ShapingError::Scorer {
            id: example.id.clone(),
            source,
        })?;
        let row = shape(example, &ranked, cfg, vocab)?;
        sum_weight += row.weight;
        max_weight = max_weight.max(row.weight);
        *histogram.entry(row.target_bucket.clone()).or_insert(0) += 1;
        shaped.push(row);
    }
    let n = shaped.len() as u64;
    let stats = DatasetStats {
        z: if n == 0 { 1.0 } else { sum_weight / n as f64 },
        bucket_histogram: histogram,
        skipped,
        n,
        max_weight: if n == 0 { 1.0 } else { max_weight },
        shaping: Some(cfg.clone()),
        scorer: None,
    };
    Ok((shaped, stats))
}

pub fn write_dataset(rows: &[ShapedExample], path: &Path) -> Result<(), ShapingError> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| ShapingError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ShapedExample>, ShapingError> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| ShapingError::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_stats(stats: &DatasetStats, path: &Path) -> Result<(), ShapingError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, stats).map_err(|e| ShapingError::MalformedLine {
        line: 0,
        message: e.to_string(),
    })?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<DatasetStats, ShapingError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ShapingError::MalformedLine {
        line: 0,
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    bucket_count: usize,
    tokens: Vec<String>,
}

pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), ShapingError> {
    let file = VocabFile {
        bucket_count: vocab.bucket_count(),
        tokens: vocab.tokens().to_vec(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file).map_err(|e| ShapingError::MalformedLine {
        line: 0,
        message: e.to_string(),
    })?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, ShapingError> {
    let text = std::fs::read_to_string(path)?;
    let file: VocabFile = serde_json::from_str(&text).map_err(|e| ShapingError::MalformedLine {
        line: 0,
        message: e.to_string(),
    })?;
    Vocabulary::from_tokens(file.tokens, file.bucket_count)
}
