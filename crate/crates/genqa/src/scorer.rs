//! Answer-ranking scorers: the weak-supervision teachers.
//!
//! A scorer maps a (question, answer) pair to a confidence in [0, 1]; the
//! ranking it induces over a candidate pool selects the generation target
//! (rank 1) and the model context (ranks 2..k+1). The oracle scorer is the
//! desk-scale stand-in for a trained cross-encoder: it knows the gold value
//! and emits calibrated, optionally noisy scores, with all randomness
//! hash-derived from (seed, question, answer) so that ranking never depends
//! on call order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{contains_token_subsequence, tokens, QAExample};
use crate::stablehash::{stable_hash64, unit_from_hash};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("example {id:?} carries no gold_value")]
    MissingGoldValue { id: String },
    #[error("question {question:?} is not covered by this oracle scorer")]
    UnknownQuestion { question: String },
    #[error("question {question:?} appears with two different gold values")]
    InconsistentGold { question: String },
    #[error("example {id:?} has no candidates to rank")]
    EmptyCandidates { id: String },
    #[error("scorer produced {score} outside [0, 1]")]
    ScoreOutOfRange { score: f64 },
    #[error("example {id:?} lacks gold labels")]
    MissingLabels { id: String },
    #[error("ranked entry references unknown example {id:?}")]
    UnknownExample { id: String },
    #[error("invalid scorer config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("scores for example {id:?} cover {got} candidates, expected {expected}")]
    ScoresLengthMismatch { id: String, got: usize, expected: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scores line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

/// A (question, answer) confidence scorer. Implementations must be pure in
/// their inputs (derive any randomness from the inputs plus a fixed seed)
/// and are callable from many threads at once.
pub trait Scorer: Send + Sync {
    fn score(&self, question: &str, answer: &str) -> Result<f64, ScorerError>;
}

/// Candidates of one example ordered by descending score; ties keep the
/// original candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub example_id: String,
    /// (candidate index, score), scores non-increasing.
    pub ordered: Vec<(usize, f64)>,
}

impl RankedCandidates {
    /// Index and score of the top-ranked candidate.
    pub fn top(&self) -> (usize, f64) {
        self.ordered[0]
    }
}

/// Calibration knobs of the oracle teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScorerConfig {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    /// Half-width of the uniform noise around the chosen mean.
    pub spread: f64,
    /// Probability of judging a pair as the opposite of its true label.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for OracleScorerConfig {
    fn default() -> Self {
        OracleScorerConfig {
            mean_correct: 0.9,
            mean_incorrect: 0.1,
            spread: 0.0,
            flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl OracleScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(0.0..=1.0).contains(&self.mean_correct)
            || !(0.0..=1.0).contains(&self.mean_incorrect)
            || self.mean_incorrect >= self.mean_correct
        {
            return Err(ScorerError::InvalidConfig {
                field: "mean_correct/mean_incorrect",
                message: format!(
                    "need 0 <= mean_incorrect < mean_correct <= 1, got {} and {}",
                    self.mean_incorrect, self.mean_correct
                ),
            });
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(ScorerError::InvalidConfig {
                field: "flip_prob",
                message: format!("must lie in [0, 0.5), got {}", self.flip_prob),
            });
        }
        if self.spread < 0.0 {
            return Err(ScorerError::InvalidConfig {
                field: "spread",
                message: format!("must be nonnegative, got {}", self.spread),
            });
        }
        Ok(())
    }
}

fn score_from_gold(question: &str, answer: &str, gold: &str, cfg: &OracleScorerConfig) -> f64 {
    let answer_tokens = tokens(answer);
    let gold_tokens = tokens(gold);
    let correct = contains_token_subsequence(&answer_tokens, &gold_tokens);

    let flip_hash = stable_hash64(&[
        b"oracle-flip",
        &cfg.seed.to_le_bytes(),
        question.as_bytes(),
        answer.as_bytes(),
    ]);
    let flipped = unit_from_hash(flip_hash) < cfg.flip_prob;
    let label = correct != flipped;

    let center = if label {
        cfg.mean_correct
    } else {
        cfg.mean_incorrect
    };
    let noise_hash = stable_hash64(&[
        b"oracle-score",
        &cfg.seed.to_le_bytes(),
        question.as_bytes(),
        answer.as_bytes(),
    ]);
    let u = unit_from_hash(noise_hash);
    (center + cfg.spread * (2.0 * u - 1.0)).clamp(0.0, 1.0)
}

/// Scores one pair against the gold value of `example`. Deterministic in
/// (seed, question, answer).
pub fn oracle_score(
    question: &str,
    answer: &str,
    example: &QAExample,
    cfg: &OracleScorerConfig,
) -> Result<f64, ScorerError> {
    cfg.validate()?;
    let gold = example
        .gold_value
        .as_deref()
        .ok_or_else(|| ScorerError::MissingGoldValue {
            id: example.id.clone(),
        })?;
    Ok(score_from_gold(question, answer, gold, cfg))
}

/// Corpus-bound oracle teacher: resolves the gold value by question text.
pub struct OracleScorer {
    cfg: OracleScorerConfig,
    gold_by_question: HashMap<String, String>,
}

impl OracleScorer {
    pub fn new(cfg: OracleScorerConfig, examples: &[QAExample]) -> Result<OracleScorer, ScorerError> {
        cfg.validate()?;
        let mut gold_by_question = HashMap::new();
        for example in examples {
            let gold = example
                .gold_value
                .as_deref()
                .ok_or_else(|| ScorerError::MissingGoldValue {
                    id: example.id.clone(),
                })?;
            if let Some(prev) = gold_by_question.insert(example.question.clone(), gold.to_string())
            {
                if prev != gold {
                    return Err(ScorerError::InconsistentGold {
                        question: example.question.clone(),
                    });
                }
            }
        }
        Ok(OracleScorer {
            cfg,
            gold_by_question,
        })
    }

    /// Extends the question coverage, e.g. with a dev or eval corpus.
    pub fn cover(&mut self, examples: &[QAExample]) -> Result<(), ScorerError> {
        for example in examples {
            let gold = example
                .gold_value
                .as_deref()
                .ok_or_else(|| ScorerError::MissingGoldValue {
                    id: example.id.clone(),
                })?;
            if let Some(prev) = self
                .gold_by_question
                .insert(example.question.clone(), gold.to_string())
            {
                if prev != gold {
                    return Err(ScorerError::InconsistentGold {
                        question: example.question.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl Scorer for OracleScorer {
    fn score(&self, question: &str, answer: &str) -> Result<f64, ScorerError> {
        let gold = self
            .gold_by_question
            .get(question)
            .ok_or_else(|| ScorerError::UnknownQuestion {
                question: question.to_string(),
            })?;
        Ok(score_from_gold(question, answer, gold, &self.cfg))
    }
}

/// Label-free baseline: token-multiset F1 between question and answer.
pub fn overlap_score(question: &str, answer: &str) -> f64 {
    let mut q_counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens(question) {
        *q_counts.entry(t).or_insert(0) += 1;
    }
    let q_total: usize = q_counts.values().sum();
    let a_tokens = tokens(answer);
    if q_total == 0 || a_tokens.is_empty() {
        return 0.0;
    }
    let mut a_counts: HashMap<&str, usize> = HashMap::new();
    for t in &a_tokens {
        *a_counts.entry(t).or_insert(0) += 1;
    }
    let overlap: usize = a_counts
        .iter()
        .map(|(t, &c)| c.min(q_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / a_tokens.len() as f64;
    let recall = overlap as f64 / q_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// [`overlap_score`] as a plug-in scorer.
pub struct OverlapScorer;

impl Scorer for OverlapScorer {
    fn score(&self, question: &str, answer: &str) -> Result<f64, ScorerError> {
        Ok(overlap_score(question, answer))
    }
}

/// Scores every pair the same; handy as a degenerate teacher in tests.
pub struct ConstScorer(pub f64);

impl Scorer for ConstScorer {
    fn score(&self, _question: &str, _answer: &str) -> Result<f64, ScorerError> {
        Ok(self.0)
    }
}

/// Serializable description of a scorer, recorded in dataset stats so later
/// pipeline stages can rebuild the same teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    Oracle(OracleScorerConfig),
    Overlap,
}

impl ScorerSpec {
    /// Instantiates the scorer; oracle scorers are bound to `examples`.
    pub fn build(&self, examples: &[QAExample]) -> Result<Box<dyn Scorer>, ScorerError> {
        match self {
            ScorerSpec::Oracle(cfg) => Ok(Box::new(OracleScorer::new(*cfg, examples)?)),
            ScorerSpec::Overlap => Ok(Box::new(OverlapScorer)),
        }
    }
}

fn sort_ranked(mut indexed: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    // stable sort: ties keep ascending original candidate index
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
    indexed
}

/// Ranks the candidates of one example with `scorer`.
pub fn rank(example: &QAExample, scorer: &dyn Scorer) -> Result<RankedCandidates, ScorerError> {
    if example.candidates.is_empty() {
        return Err(ScorerError::EmptyCandidates {
            id: example.id.clone(),
        });
    }
    let mut indexed = Vec::with_capacity(example.candidates.len());
    for (i, candidate) in example.candidates.iter().enumerate() {
        let score = scorer.score(&example.question, &candidate.text)?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(ScorerError::ScoreOutOfRange { score });
        }
        indexed.push((i, score));
    }
    Ok(RankedCandidates {
        example_id: example.id.clone(),
        ordered: sort_ranked(indexed),
    })
}

/// Ranks from a precomputed score vector aligned with candidate order, e.g.
/// loaded from a scores cache file.
pub fn rank_from_scores(
    example: &QAExample,
    scores: &[f64],
) -> Result<RankedCandidates, ScorerError> {
    if example.candidates.is_empty() {
        return Err(ScorerError::EmptyCandidates {
            id: example.id.clone(),
        });
    }
    if scores.len() != example.candidates.len() {
        return Err(ScorerError::ScoresLengthMismatch {
            id: example.id.clone(),
            got: scores.len(),
            expected: example.candidates.len(),
        });
    }
    for &s in scores {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(ScorerError::ScoreOutOfRange { score: s });
        }
    }
    Ok(RankedCandidates {
        example_id: example.id.clone(),
        ordered: sort_ranked(scores.iter().copied().enumerate().collect()),
    })
}

/// Fraction of examples whose top-ranked candidate is labeled correct.
pub fn precision_at_1(
    ranked: &[RankedCandidates],
    examples: &[QAExample],
) -> Result<f64, ScorerError> {
    if ranked.is_empty() {
        return Err(ScorerError::EmptyCandidates {
            id: "<no examples>".into(),
        });
    }
    let by_id: HashMap<&str, &QAExample> =
        examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut hits = 0usize;
    for r in ranked {
        let example = by_id
            .get(r.example_id.as_str())
            .ok_or_else(|| ScorerError::UnknownExample {
                id: r.example_id.clone(),
            })?;
        let top_idx = r.top().0;
        let label = example.candidates[top_idx]
            .gold_label
            .ok_or_else(|| ScorerError::MissingLabels {
                id: r.example_id.clone(),
            })?;
        if label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// One line of the optional scores cache file, aligned with the candidate
/// order of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresRecord {
    pub id: String,
    pub scores: Vec<f64>,
}

pub fn write_scores(records: &[ScoresRecord], path: &Path) -> Result<(), ScorerError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| ScorerError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoresRecord>, ScorerError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| ScorerError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(records)
}
