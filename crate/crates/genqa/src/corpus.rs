//! Synthetic QA world generation and corpus I/O.
//!
//! The generator produces questions about a closed world of facts
//! (entity, attribute) -> value, together with a pool of candidate answers
//! per question: correct candidates phrase the gold value through varied
//! sentence templates, distractors reuse the same templates with a wrong
//! value or a wrong entity. Because the world is closed and every value is
//! a token sequence from a closed vocabulary, answer correctness is exactly
//! decidable by token-level containment ([`oracle_correct`]), which stands
//! in for human annotation everywhere downstream.
//!
//! Corpus files are UTF-8 JSON lines, one example per line, append-only.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shaping::SPECIAL_TOKEN_STRINGS;
use crate::stablehash::{draw_index, draw_unit, stable_hash64};

/// One ground-truth entry of the synthetic world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    /// 1-3 tokens from the closed value vocabulary, space-joined.
    pub value: String,
}

/// A candidate answer sentence. `gold_label` is hidden supervision: it is
/// present only in oracle-enabled corpora and never shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<bool>,
}

/// A question with its unlabeled candidate answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub candidates: Vec<Candidate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_value: Option<String>,
}

/// Configuration of the synthetic world generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_questions: usize,
    pub n_candidates_per_q: usize,
    /// Probability that a candidate slot phrases the gold value.
    pub p_correct: f64,
    /// Question templates; each must contain both `{entity}` and
    /// `{attribute}` and must not contain `{value}`.
    pub templates: Vec<String>,
    pub seed: u64,
    /// World size knobs: how much of the built-in entity/attribute pools
    /// the corpus draws from. Smaller worlds repeat facts more often.
    #[serde(default = "default_n_entities")]
    pub n_entities: usize,
    #[serde(default = "default_n_attributes")]
    pub n_attributes: usize,
}

fn default_n_entities() -> usize {
    ENTITIES.len()
}

fn default_n_attributes() -> usize {
    ATTRIBUTES.len()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_questions: 1000,
            n_candidates_per_q: 8,
            p_correct: 0.3,
            templates: default_question_templates(),
            seed: 0,
            n_entities: ENTITIES.len(),
            n_attributes: ATTRIBUTES.len(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("template {template:?} has no usable placeholder")]
    TemplateNoPlaceholder { template: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed corpus line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate example id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("example {id:?} violates corpus invariants: {message}")]
    InvalidExample { id: String, message: String },
    #[error("example {id:?} carries no gold_value; the oracle cannot judge it")]
    MissingGoldValue { id: String },
}

// Closed word pools. Values are disjoint from every other pool so that
// token-level containment of a value sequence can never be triggered by
// template words, entities or attributes.
pub(crate) const ENTITIES: &[&str] = &[
    "arlo", "brin", "cato", "dara", "elio", "fern", "gavi", "hollis", "iris", "jules", "kiana",
    "lior", "mira", "nels", "orin", "pia", "quill", "rafa", "sena", "tova", "ulric", "vida",
    "wren", "xeno", "yara", "zev", "ansel", "beck", "cora", "dove", "edda", "finch", "gael",
    "hazel", "ivo", "juno", "kael", "lena", "moss", "nadia",
];

pub(crate) const ATTRIBUTES: &[&str] = &[
    "color", "size", "shape", "origin", "material", "rank", "price", "mass", "flavor", "sound",
    "texture", "age",
];

pub(crate) const VALUES: &[&str] = &[
    "red", "blue", "green", "amber", "violet", "crimson", "teal", "ivory", "golden", "silver",
    "copper", "iron", "oak", "pine", "silk", "wool", "stone", "glass", "seven", "nine", "twelve",
    "forty", "round", "square", "oval", "narrow", "broad", "tiny", "vast", "northern", "southern",
    "eastern", "western", "sweet", "bitter", "salty", "smooth", "rough", "soft", "loud", "quiet",
    "ancient", "modern", "light", "heavy", "pale", "dark", "bright",
];

const ANSWER_TEMPLATES: &[&str] = &[
    "the {attribute} of {entity} is {value}",
    "{entity} has {attribute} {value}",
    "as listed the {attribute} of {entity} is {value}",
    "{value} is the {attribute} of {entity}",
    "the records give {value} for the {attribute} of {entity}",
];

pub fn default_question_templates() -> Vec<String> {
    [
        "what is the {attribute} of {entity}",
        "tell me the {attribute} of {entity}",
        "which {attribute} does {entity} have",
        "do you know the {attribute} of {entity}",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_questions == 0 {
            return Err(CorpusError::InvalidConfig {
                field: "n_questions",
                message: "must be positive".into(),
            });
        }
        if self.n_candidates_per_q < 2 {
            return Err(CorpusError::InvalidConfig {
                field: "n_candidates_per_q",
                message: format!("must be at least 2, got {}", self.n_candidates_per_q),
            });
        }
        if !(self.p_correct > 0.0 && self.p_correct < 1.0) {
            return Err(CorpusError::InvalidConfig {
                field: "p_correct",
                message: format!("must lie strictly inside (0, 1), got {}", self.p_correct),
            });
        }
        if self.templates.is_empty() {
            return Err(CorpusError::InvalidConfig {
                field: "templates",
                message: "at least one question template required".into(),
            });
        }
        for t in &self.templates {
            if !t.contains("{entity}") || !t.contains("{attribute}") {
                return Err(CorpusError::TemplateNoPlaceholder {
                    template: t.clone(),
                });
            }
            if t.contains("{value}") {
                return Err(CorpusError::InvalidConfig {
                    field: "templates",
                    message: format!("question template {t:?} must not leak {{value}}"),
                });
            }
        }
        if self.n_entities == 0 || self.n_entities > ENTITIES.len() {
            return Err(CorpusError::InvalidConfig {
                field: "n_entities",
                message: format!("must be in 1..={}, got {}", ENTITIES.len(), self.n_entities),
            });
        }
        if self.n_attributes == 0 || self.n_attributes > ATTRIBUTES.len() {
            return Err(CorpusError::InvalidConfig {
                field: "n_attributes",
                message: format!(
                    "must be in 1..={}, got {}",
                    ATTRIBUTES.len(),
                    self.n_attributes
                ),
            });
        }
        Ok(())
    }
}

/// Whitespace word tokenization. The whole artifact shares this definition.
pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// True iff `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_token_subsequence(haystack: &[&str], needle: &[&str]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// The deterministic correctness oracle: does the answer phrase the gold
/// value of the example? Token-level containment, so "parisian" does not
/// match a gold value "paris".
pub fn oracle_correct(answer_text: &str, example: &QAExample) -> Result<bool, CorpusError> {
    let gold = example
        .gold_value
        .as_deref()
        .ok_or_else(|| CorpusError::MissingGoldValue {
            id: example.id.clone(),
        })?;
    let answer_tokens = tokens(answer_text);
    let gold_tokens = tokens(gold);
    Ok(contains_token_subsequence(&answer_tokens, &gold_tokens))
}

/// Gold value of the world fact (entity, attribute) under `seed`, as
/// 1-3 value-pool tokens. Pure in its arguments, so every question about
/// the same fact in one corpus agrees on the answer.
fn value_tokens_for(seed: u64, entity: &str, attribute: &str) -> Vec<&'static str> {
    let h = stable_hash64(&[
        b"world-value",
        &seed.to_le_bytes(),
        entity.as_bytes(),
        attribute.as_bytes(),
    ]);
    let len = 1 + (h % 3) as usize;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let hi = stable_hash64(&[
            b"world-value-token",
            &seed.to_le_bytes(),
            entity.as_bytes(),
            attribute.as_bytes(),
            &(i as u64).to_le_bytes(),
        ]);
        let mut idx = (hi % VALUES.len() as u64) as usize;
        // avoid immediate repeats like "dark dark"
        if i > 0 && VALUES[idx] == out[i - 1] {
            idx = (idx + 1) % VALUES.len();
        }
        out.push(VALUES[idx]);
    }
    out
}

fn render(template: &str, entity: &str, attribute: &str, value: Option<&str>) -> String {
    let mut s = template.replace("{entity}", entity);
    s = s.replace("{attribute}", attribute);
    if let Some(v) = value {
        s = s.replace("{value}", v);
    }
    s
}

/// Streaming generator over the synthetic world. Deterministic for a fixed
/// config including its seed; single-threaded by construction.
pub struct CorpusGenerator {
    cfg: CorpusConfig,
    rng: ChaCha8Rng,
    next_index: usize,
}

/// Validates the config and returns the example stream.
pub fn generate_corpus(cfg: CorpusConfig) -> Result<CorpusGenerator, CorpusError> {
    cfg.validate()?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(CorpusGenerator {
        cfg,
        rng,
        next_index: 0,
    })
}

impl CorpusGenerator {
    fn distractor(&mut self, entity: &str, attribute: &str, gold: &[&str]) -> String {
        for _attempt in 0..64 {
            let text = if draw_index(&mut self.rng, 2) == 0 {
                // wrong value for the asked fact
                let len = 1 + draw_index(&mut self.rng, 3);
                let mut val = Vec::with_capacity(len);
                for i in 0..len {
                    let mut idx = draw_index(&mut self.rng, VALUES.len());
                    if i > 0 && VALUES[idx] == val[i - 1] {
                        idx = (idx + 1) % VALUES.len();
                    }
                    val.push(VALUES[idx]);
                }
                let template = ANSWER_TEMPLATES[draw_index(&mut self.rng, ANSWER_TEMPLATES.len())];
                render(template, entity, attribute, Some(&val.join(" ")))
            } else {
                // true statement about a different entity
                let mut idx = draw_index(&mut self.rng, self.cfg.n_entities.max(2) - 1);
                let own = ENTITIES.iter().position(|e| *e == entity).unwrap_or(0);
                if idx >= own {
                    idx += 1;
                }
                let other = ENTITIES[idx.min(ENTITIES.len() - 1)];
                let val = value_tokens_for(self.cfg.seed, other, attribute).join(" ");
                let template = ANSWER_TEMPLATES[draw_index(&mut self.rng, ANSWER_TEMPLATES.len())];
                render(template, other, attribute, Some(&val))
            };
            let text_tokens = tokens(&text);
            if !contains_token_subsequence(&text_tokens, gold) {
                return text;
            }
        }
        // Guaranteed-safe fallback: a single value token absent from gold.
        let safe = VALUES
            .iter()
            .find(|v| !gold.contains(v))
            .expect("value pool larger than any gold sequence");
        render(ANSWER_TEMPLATES[0], entity, attribute, Some(safe))
    }

    fn generate_one(&mut self) -> QAExample {
        let id = format!("q{:06}", self.next_index);
        let entity = ENTITIES[draw_index(&mut self.rng, self.cfg.n_entities)];
        let attribute = ATTRIBUTES[draw_index(&mut self.rng, self.cfg.n_attributes)];
        let gold_tokens = value_tokens_for(self.cfg.seed, entity, attribute);
        let gold_value = gold_tokens.join(" ");

        let template_idx = draw_index(&mut self.rng, self.cfg.templates.len());
        let question = render(&self.cfg.templates[template_idx], entity, attribute, None);

        let n = self.cfg.n_candidates_per_q;
        let mut is_correct: Vec<bool> = (0..n)
            .map(|_| draw_unit(&mut self.rng) < self.cfg.p_correct)
            .collect();
        if !is_correct.iter().any(|&c| c) {
            let forced = draw_index(&mut self.rng, n);
            is_correct[forced] = true;
        }

        let candidates = is_correct
            .iter()
            .map(|&correct| {
                let text = if correct {
                    let template =
                        ANSWER_TEMPLATES[draw_index(&mut self.rng, ANSWER_TEMPLATES.len())];
                    render(template, entity, attribute, Some(&gold_value))
                } else {
                    self.distractor(entity, attribute, &gold_tokens)
                };
                Candidate {
                    text,
                    gold_label: Some(correct),
                }
            })
            .collect();

        QAExample {
            id,
            question,
            candidates,
            gold_value: Some(gold_value),
        }
    }
}

impl Iterator for CorpusGenerator {
    type Item = QAExample;

    fn next(&mut self) -> Option<QAExample> {
        if self.next_index >= self.cfg.n_questions {
            return None;
        }
        let example = self.generate_one();
        self.next_index += 1;
        Some(example)
    }
}

/// Structural validation applied by the reader to every record.
pub fn validate_example(example: &QAExample) -> Result<(), CorpusError> {
    let fail = |message: String| CorpusError::InvalidExample {
        id: example.id.clone(),
        message,
    };
    if example.id.is_empty() {
        return Err(fail("empty id".into()));
    }
    if example.question.trim().is_empty() {
        return Err(fail("empty question".into()));
    }
    if example.candidates.is_empty() {
        return Err(fail("no candidates".into()));
    }
    for (i, c) in example.candidates.iter().enumerate() {
        if c.text.trim().is_empty() {
            return Err(fail(format!("candidate {i} has empty text")));
        }
        for tok in tokens(&c.text) {
            if SPECIAL_TOKEN_STRINGS.contains(&tok) {
                return Err(fail(format!(
                    "candidate {i} contains reserved token {tok:?}"
                )));
            }
        }
    }
    if let Some(gold) = &example.gold_value {
        let gold_tokens = tokens(gold);
        if gold_tokens.is_empty() {
            return Err(fail("gold_value is empty".into()));
        }
        let mut any_true = false;
        for (i, c) in example.candidates.iter().enumerate() {
            if c.gold_label == Some(true) {
                any_true = true;
                let text_tokens = tokens(&c.text);
                if !contains_token_subsequence(&text_tokens, &gold_tokens) {
                    return Err(fail(format!(
                        "candidate {i} is labeled correct but does not contain the gold value"
                    )));
                }
            }
        }
        if !any_true {
            return Err(fail(
                "gold_value present but no candidate is labeled correct".into(),
            ));
        }
    }
    Ok(())
}

/// Writes examples as JSON lines.
pub fn write_corpus<I>(examples: I, path: &Path) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = QAExample>,
{
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let mut n = 0;
    for example in examples {
        serde_json::to_writer(&mut out, &example)
            .map_err(|e| CorpusError::MalformedLine {
                line: n + 1,
                message: e.to_string(),
            })?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Streaming reader over a corpus file; validates every record and rejects
/// duplicate ids. Yields one `Result` per line.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    seen_ids: HashSet<String>,
}

pub fn read_corpus(path: &Path) -> Result<CorpusReader, CorpusError> {
    let file = File::open(path)?;
    Ok(CorpusReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
        seen_ids: HashSet::new(),
    })
}

/// Reads and validates the whole file at once.
pub fn read_corpus_vec(path: &Path) -> Result<Vec<QAExample>, CorpusError> {
    read_corpus(path)?.collect()
}

impl Iterator for CorpusReader {
    type Item = Result<QAExample, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(CorpusError::Io(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let example: QAExample = match serde_json::from_str(&line) {
                Ok(example) => example,
                Err(e) => {
                    return Some(Err(CorpusError::MalformedLine {
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if !self.seen_ids.insert(example.id.clone()) {
                return Some(Err(CorpusError::DuplicateId {
                    line: self.line_no,
                    id: example.id,
                }));
            }
            if let Err(e) = validate_example(&example) {
                return Some(Err(e));
            }
            return Some(Ok(example));
        }
    }
}
