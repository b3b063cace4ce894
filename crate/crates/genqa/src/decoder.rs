//! Constrained generation: greedy and beam search with a token-count
//! window, plus forced decoding over the confidence-bucket tokens.
//!
//! Constraints: `[EOS]` is suppressed until the generation holds at least
//! `min_len` content tokens and the search force-terminates at `max_len`;
//! `[PAD]`, `[BOS]`, `[SEP]` and `[UNK]` never appear; bucket tokens may
//! appear only as the very first token (by default they count toward the
//! length window only when `length_counts_bucket` is set). Scores are raw
//! accumulated token log-probabilities with no length normalization; the
//! length window already counters the short-sequence bias.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{decode_step, encode, DecoderState, ModelError, Parameters};
use crate::scalar::Scalar;
use crate::shaping::{bucket_label_for_index, BucketLabel, Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("{token:?} is not a bucket token of this vocabulary")]
    NotABucketToken { token: String },
    #[error("no viable token to emit (vocabulary has no content tokens)")]
    NoViableToken,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed generations line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Forces the first emitted token to this bucket token.
    pub force_first_token: Option<String>,
    /// Whether a leading bucket token counts toward the length window.
    pub length_counts_bucket: bool,
    /// Whether an (unforced) bucket token may start the generation. On by
    /// default; the toy-model search oracles turn it off to keep the
    /// hypothesis space content-only.
    pub allow_bucket_start: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 5,
            min_len: 6,
            max_len: 100,
            force_first_token: None,
            length_counts_bucket: false,
            allow_bucket_start: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::InvalidConfig {
                field: "beam_width",
                message: "must be at least 1".into(),
            });
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DecodeError::InvalidConfig {
                field: "min_len/max_len",
                message: format!(
                    "need 1 <= min_len <= max_len, got {} and {}",
                    self.min_len, self.max_len
                ),
            });
        }
        Ok(())
    }
}

/// One decoded answer.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Raw emitted tokens: optional leading bucket, content, `[EOS]` when
    /// the search ended naturally.
    pub token_ids: Vec<u32>,
    /// Detokenized content (no special tokens).
    pub text: String,
    /// Set iff the first emitted token was a bucket token.
    pub bucket: Option<BucketLabel>,
    /// Sum of the emitted tokens' log-probabilities.
    pub log_prob: f64,
    /// True when generation ended with `[EOS]`, false when it hit max_len.
    pub finished: bool,
}

/// Splits a leading bucket token off a raw token sequence and drops a
/// trailing `[EOS]`. Only the first token is ever stripped.
pub fn strip_bucket(tokens: &[u32], vocab: &Vocabulary) -> (Option<BucketLabel>, Vec<u32>) {
    let mut rest = tokens;
    let mut label = None;
    if let Some(&first) = rest.first() {
        if let Some(index) = vocab.bucket_index_of_id(first) {
            label = Some(bucket_label_for_index(index, vocab.bucket_count()));
            rest = &rest[1..];
        }
    }
    let mut content: Vec<u32> = rest.to_vec();
    if content.last() == Some(&EOS_ID) {
        content.pop();
    }
    (label, content)
}

fn log_softmax<S: Scalar>(logits: &Array1<S>) -> Array1<S> {
    let mut max = S::neg_infinity();
    for &x in logits.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in logits.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    logits.mapv(|x| x - lse)
}

struct Constraints<'a> {
    vocab: &'a Vocabulary,
    cfg: &'a DecodeConfig,
    forced_id: Option<u32>,
}

impl<'a> Constraints<'a> {
    fn new(vocab: &'a Vocabulary, cfg: &'a DecodeConfig) -> Result<Constraints<'a>, DecodeError> {
        cfg.validate()?;
        let forced_id = match &cfg.force_first_token {
            None => None,
            Some(token) => {
                let id = vocab
                    .id(token)
                    .filter(|&id| vocab.bucket_index_of_id(id).is_some())
                    .ok_or_else(|| DecodeError::NotABucketToken {
                        token: token.clone(),
                    })?;
                Some(id)
            }
        };
        Ok(Constraints {
            vocab,
            cfg,
            forced_id,
        })
    }

    /// Tokens that may be emitted at `position` given `content_len`.
    fn options(&self, position: usize, content_len: usize) -> Vec<u32> {
        if position == 0 {
            if let Some(forced) = self.forced_id {
                return vec![forced];
            }
        }
        let mut out = Vec::new();
        if content_len >= self.cfg.min_len {
            out.push(EOS_ID);
        }
        for id in 0..self.vocab.len() as u32 {
            if !self.vocab.is_special_id(id) {
                out.push(id);
            } else if position == 0
                && self.cfg.allow_bucket_start
                && self.vocab.bucket_index_of_id(id).is_some()
            {
                out.push(id);
            }
        }
        out
    }

    /// Content-token count after emitting `token` at `position`.
    fn next_content_len(&self, position: usize, content_len: usize, token: u32) -> usize {
        if token == EOS_ID {
            return content_len;
        }
        if position == 0 && self.vocab.bucket_index_of_id(token).is_some() {
            return if self.cfg.length_counts_bucket {
                content_len + 1
            } else {
                content_len
            };
        }
        content_len + 1
    }
}

fn finish<S: Scalar>(
    tokens: Vec<u32>,
    log_prob: S,
    finished: bool,
    vocab: &Vocabulary,
) -> Generation {
    let (bucket, content) = strip_bucket(&tokens, vocab);
    Generation {
        text: vocab.detokenize(&content),
        token_ids: tokens,
        bucket,
        log_prob: log_prob.as_f64(),
        finished,
    }
}

/// Greedy decoding: at every step the highest-probability admissible token.
pub fn greedy<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let constraints = Constraints::new(vocab, cfg)?;
    let (encoded, mut state) = encode(params, input_ids)?;
    let mut tokens: Vec<u32> = Vec::new();
    let mut log_prob = S::zero();
    let mut content_len = 0usize;
    let mut prev = BOS_ID;
    loop {
        let position = tokens.len();
        let (logits, next_state) = decode_step(params, &encoded, &state, prev)?;
        let logp = log_softmax(&logits);
        let options = constraints.options(position, content_len);
        let best = options
            .iter()
            .copied()
            .max_by(|&a, &b| {
                logp[a as usize]
                    .partial_cmp(&logp[b as usize])
                    .expect("log probs are finite")
                    // ties: prefer the lower token id
                    .then(b.cmp(&a))
            })
            .ok_or(DecodeError::NoViableToken)?;
        log_prob += logp[best as usize];
        content_len = constraints.next_content_len(position, content_len, best);
        tokens.push(best);
        if best == EOS_ID {
            return Ok(finish(tokens, log_prob, true, vocab));
        }
        if content_len >= cfg.max_len {
            return Ok(finish(tokens, log_prob, false, vocab));
        }
        state = next_state;
        prev = best;
    }
}

#[derive(Clone)]
struct Hypothesis<S: Scalar> {
    tokens: Vec<u32>,
    log_prob: S,
    content_len: usize,
    state: DecoderState<S>,
    prev: u32,
}

#[derive(Clone)]
struct FinishedHypothesis<S: Scalar> {
    tokens: Vec<u32>,
    log_prob: S,
    finish_step: usize,
    eos: bool,
}

fn better_finished<S: Scalar>(
    a: &FinishedHypothesis<S>,
    b: &FinishedHypothesis<S>,
) -> std::cmp::Ordering {
    // higher log_prob first, then earlier finish, then lexicographic ids
    b.log_prob
        .partial_cmp(&a.log_prob)
        .expect("scores are finite")
        .then(a.finish_step.cmp(&b.finish_step))
        .then(a.tokens.cmp(&b.tokens))
}

/// Length-constrained beam search. Returns the best hypothesis and the
/// n-best list (at most `beam_width` entries, best first).
///
/// At every step the global top `beam_width` single-token extensions are
/// kept; extensions that emit `[EOS]` or hit the length cap move to the
/// finished pool, the rest stay alive. With `beam_width` 1 this reduces to
/// greedy decoding, token for token.
pub fn beam<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<(Generation, Vec<Generation>), DecodeError> {
    let constraints = Constraints::new(vocab, cfg)?;
    let (encoded, state0) = encode(params, input_ids)?;
    let mut alive = vec![Hypothesis::<S> {
        tokens: Vec::new(),
        log_prob: S::zero(),
        content_len: 0,
        state: state0,
        prev: BOS_ID,
    }];
    let mut finished: Vec<FinishedHypothesis<S>> = Vec::new();

    struct Extension<S: Scalar> {
        tokens: Vec<u32>,
        log_prob: S,
        content_len: usize,
        token: u32,
        hyp_index: usize,
    }

    // the window cap plus bucket and [EOS] bounds every hypothesis length
    let max_steps = cfg.max_len + 2;
    for step in 0..=max_steps {
        let mut candidates: Vec<Extension<S>> = Vec::new();
        let mut next_states: Vec<DecoderState<S>> = Vec::with_capacity(alive.len());
        for (hyp_index, hyp) in alive.iter().enumerate() {
            let (logits, next_state) = decode_step(params, &encoded, &hyp.state, hyp.prev)?;
            next_states.push(next_state);
            let logp = log_softmax(&logits);
            let options = constraints.options(step, hyp.content_len);
            if options.is_empty() {
                return Err(DecodeError::NoViableToken);
            }
            for token in options {
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                candidates.push(Extension {
                    tokens,
                    log_prob: hyp.log_prob + logp[token as usize],
                    content_len: constraints.next_content_len(step, hyp.content_len, token),
                    token,
                    hyp_index,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("scores are finite")
                .then(a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(cfg.beam_width);

        let mut survivors: Vec<Hypothesis<S>> = Vec::new();
        for ext in candidates {
            if ext.token == EOS_ID {
                finished.push(FinishedHypothesis {
                    tokens: ext.tokens,
                    log_prob: ext.log_prob,
                    finish_step: step,
                    eos: true,
                });
            } else if ext.content_len >= cfg.max_len {
                finished.push(FinishedHypothesis {
                    tokens: ext.tokens,
                    log_prob: ext.log_prob,
                    finish_step: step,
                    eos: false,
                });
            } else {
                survivors.push(Hypothesis {
                    tokens: ext.tokens,
                    log_prob: ext.log_prob,
                    content_len: ext.content_len,
                    state: next_states[ext.hyp_index].clone(),
                    prev: ext.token,
                });
            }
        }
        alive = survivors;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam_width {
            finished.sort_by(better_finished);
            // token log-probs are nonpositive, so extending an alive
            // hypothesis can only lower its score
            let bar = finished[cfg.beam_width - 1].log_prob;
            let best_alive = alive[0].log_prob;
            if best_alive <= bar {
                break;
            }
        }
    }

    assert!(
        !finished.is_empty(),
        "forced termination guarantees a finished hypothesis"
    );
    finished.sort_by(better_finished);
    finished.truncate(cfg.beam_width);
    let n_best: Vec<Generation> = finished
        .iter()
        .map(|f| finish(f.tokens.clone(), f.log_prob, f.eos, vocab))
        .collect();
    let best = n_best[0].clone();
    Ok((best, n_best))
}

/// Decodes with the first token pinned to a bucket token.
/// `cfg.force_first_token` must name a bucket token of `vocab`.
pub fn forced_decode<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    if cfg.force_first_token.is_none() {
        return Err(DecodeError::InvalidConfig {
            field: "force_first_token",
            message: "forced decoding needs a bucket token".into(),
        });
    }
    if cfg.beam_width == 1 {
        greedy(params, input_ids, cfg, vocab)
    } else {
        Ok(beam(params, input_ids, cfg, vocab)?.0)
    }
}

/// One forced generation per bucket token, most confident bucket first.
pub fn forced_sweep<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Vec<Generation>, DecodeError> {
    let mut out = Vec::with_capacity(vocab.bucket_count());
    for index in (1..=vocab.bucket_count()).rev() {
        let label = bucket_label_for_index(index, vocab.bucket_count());
        let mut forced_cfg = cfg.clone();
        forced_cfg.force_first_token = Some(label.token);
        out.push(forced_decode(params, input_ids, &forced_cfg, vocab)?);
    }
    Ok(out)
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<String>,
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced: Option<String>,
}

impl GenerationRecord {
    pub fn from_generation(id: &str, generation: &Generation, forced: Option<&str>) -> Self {
        GenerationRecord {
            id: id.to_string(),
            text: generation.text.clone(),
            bucket: generation.bucket.as_ref().map(|b| b.token.clone()),
            log_prob: generation.log_prob,
            forced: forced.map(|s| s.to_string()),
        }
    }
}

pub fn write_generations(records: &[GenerationRecord], path: &Path) -> Result<(), DecodeError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| DecodeError::MalformedLine {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>, DecodeError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| DecodeError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(records)
}
