//! Self-contained desk-scale experiments with bundled seeds and configs.
//!
//! These back the `repro` subcommand and the directional acceptance checks:
//! end-to-end learning from a clean teacher, the benefit of loss weighting
//! under a corruption-aware teacher, the confidence monotonicity of
//! score-conditioned outputs, and the divergence between loss-based and
//! score-based checkpoint selection. Every run is deterministic given its
//! config.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_corpus, oracle_correct, CorpusConfig, CorpusError, QAExample};
use crate::decoder::{greedy, DecodeConfig, DecodeError, GenerationRecord};
use crate::evaluator::{
    accuracy, bucket_cluster_accuracy, oracle_judgments, spearman, ClusterStat, EvalError,
};
use crate::model::{ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::scorer::{
    precision_at_1, rank, OracleScorer, OracleScorerConfig, Scorer, ScorerError,
};
use crate::shaping::{build_dataset, shape, ShapingConfig, ShapingError};
use crate::stablehash::{stable_hash64, unit_from_hash};
use crate::trainer::{
    avg_as2_score, select_checkpoint, train, SelectionCriterion, TrainConfig, TrainError,
    TrainInputs,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("experiment stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

fn world_corpus(
    n_total: usize,
    seed: u64,
    p_correct: f64,
) -> Result<Vec<QAExample>, ExperimentError> {
    let cfg = CorpusConfig {
        n_questions: n_total,
        n_candidates_per_q: 8,
        p_correct,
        seed,
        ..CorpusConfig::default()
    };
    Ok(generate_corpus(cfg)?.collect())
}

fn split3<T: Clone>(all: &[T], a: usize, b: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    (
        all[..a].to_vec(),
        all[a..a + b].to_vec(),
        all[a + b..].to_vec(),
    )
}

/// Greedy-decodes every eval question and returns the oracle accuracy of
/// the generated answers plus the raw generations.
fn eval_generations<S: Scalar>(
    params: &crate::model::Parameters<S>,
    vocab: &crate::shaping::Vocabulary,
    shaping_cfg: &ShapingConfig,
    eval_corpus: &[QAExample],
    scorer: &dyn Scorer,
    decode_cfg: &DecodeConfig,
) -> Result<(f64, Vec<GenerationRecord>), ExperimentError> {
    let mut generations = Vec::new();
    let mut kept_examples = Vec::new();
    for example in eval_corpus {
        if example.candidates.len() < shaping_cfg.k + 1 {
            continue;
        }
        let ranked = rank(example, scorer)?;
        let row = shape(example, &ranked, shaping_cfg, vocab)?;
        let generation = greedy(params, &row.input_ids, decode_cfg, vocab)?;
        generations.push(GenerationRecord::from_generation(
            &example.id,
            &generation,
            None,
        ));
        kept_examples.push(example.clone());
    }
    if generations.is_empty() {
        return Err(ExperimentError::Stage {
            stage: "eval",
            message: "no eval questions survived shaping".into(),
        });
    }
    let judgments = oracle_judgments(&generations, &kept_examples)?;
    Ok((accuracy(&judgments)?, generations))
}

fn eval_decode_cfg() -> DecodeConfig {
    DecodeConfig {
        beam_width: 1,
        min_len: 1,
        max_len: 24,
        ..DecodeConfig::default()
    }
}

// ---------------------------------------------------------------------
// end-to-end learning from a clean teacher
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WsLearningConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub model_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub checkpoint_every: usize,
}

impl Default for WsLearningConfig {
    fn default() -> Self {
        WsLearningConfig {
            n_train: 2000,
            n_dev: 200,
            n_eval: 500,
            corpus_seed: 101,
            model_seed: 7,
            epochs: 16,
            lr: 3e-3,
            batch_size: 32,
            k: 5,
            embed_dim: 48,
            hidden_dim: 96,
            checkpoint_every: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsLearningReport {
    pub teacher_p_at_1: f64,
    pub accuracy: f64,
    pub selected_step: u64,
    pub steps: u64,
    pub eval_questions: usize,
    pub wall_s: f64,
    pub pass: bool,
}

impl WsLearningReport {
    pub fn render(&self) -> String {
        format!(
            "ws-learning: teacher p@1 {:.3}, generator oracle accuracy {:.3} \
             (checkpoint step {} of {}, {} eval questions, {:.1}s)\nverdict: {}\n",
            self.teacher_p_at_1,
            self.accuracy,
            self.selected_step,
            self.steps,
            self.eval_questions,
            self.wall_s,
            if self.pass { "PASS (>= 0.90)" } else { "FAIL (< 0.90)" }
        )
    }
}

/// Trains a plain weakly supervised model against a zero-noise teacher and
/// measures oracle accuracy of its generations on held-out questions.
pub fn run_ws_learning(
    cfg: &WsLearningConfig,
    work_dir: &Path,
) -> Result<WsLearningReport, ExperimentError> {
    let started = Instant::now();
    let all = world_corpus(cfg.n_train + cfg.n_dev + cfg.n_eval, cfg.corpus_seed, 0.5)?;
    let (train_set, dev, eval) = split3(&all, cfg.n_train, cfg.n_dev);
    let scorer = OracleScorer::new(OracleScorerConfig::default(), &all)?;

    let shaping_cfg = ShapingConfig {
        k: cfg.k,
        ..ShapingConfig::default()
    };
    let vocab = crate::shaping::Vocabulary::build_from_corpus(&all, shaping_cfg.l);
    let (rows, stats) = build_dataset(&train_set, &scorer, &shaping_cfg, &vocab)?;

    let ranked: Vec<_> = eval
        .iter()
        .map(|e| rank(e, &scorer))
        .collect::<Result<_, _>>()?;
    let teacher_p_at_1 = precision_at_1(&ranked, &eval)?;

    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        n_layers: 1,
        max_positions: 256,
        seed: cfg.model_seed,
        float_width: 32,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.model_seed,
        checkpoint_every: cfg.checkpoint_every,
        ..TrainConfig::default()
    };
    let inputs = TrainInputs {
        dataset: &rows,
        stats: &stats,
        dev_corpus: &dev,
        scorer: &scorer,
        vocab: &vocab,
        shaping: &shaping_cfg,
    };
    let outcome = train::<f32>(&inputs, &model_cfg, &train_cfg, work_dir)?;
    let selected = select_checkpoint(&outcome.records, SelectionCriterion::As2)?;
    let ckpt = crate::model::checkpoint::Checkpoint::<f32>::load(Path::new(&selected.path))?;

    let (acc, _) = eval_generations(
        &ckpt.params,
        &vocab,
        &shaping_cfg,
        &eval,
        &scorer,
        &eval_decode_cfg(),
    )?;
    Ok(WsLearningReport {
        teacher_p_at_1,
        accuracy: acc,
        selected_step: selected.step,
        steps: outcome.steps,
        eval_questions: eval.len(),
        wall_s: started.elapsed().as_secs_f64(),
        pass: acc >= 0.90,
    })
}

// ---------------------------------------------------------------------
// loss weighting vs plain weak supervision under a corrupting teacher
// ---------------------------------------------------------------------

/// A corruption-aware teacher: on a fixed fraction of questions it ranks an
/// incorrect candidate on top, but it "knows" those are doubtful and gives
/// them low absolute scores, while clean questions get confident scores.
pub struct CorruptingScorer {
    seed: u64,
    corruption_rate: f64,
    gold_by_question: HashMap<String, String>,
}

impl CorruptingScorer {
    pub fn new(
        seed: u64,
        corruption_rate: f64,
        examples: &[QAExample],
    ) -> Result<CorruptingScorer, ScorerError> {
        let mut gold_by_question = HashMap::new();
        for e in examples {
            let gold = e
                .gold_value
                .as_deref()
                .ok_or_else(|| ScorerError::MissingGoldValue { id: e.id.clone() })?;
            gold_by_question.insert(e.question.clone(), gold.to_string());
        }
        Ok(CorruptingScorer {
            seed,
            corruption_rate,
            gold_by_question,
        })
    }

    pub fn is_corrupted(&self, question: &str) -> bool {
        let h = stable_hash64(&[
            b"corrupt-question",
            &self.seed.to_le_bytes(),
            question.as_bytes(),
        ]);
        unit_from_hash(h) < self.corruption_rate
    }
}

impl Scorer for CorruptingScorer {
    fn score(&self, question: &str, answer: &str) -> Result<f64, ScorerError> {
        let gold = self.gold_by_question.get(question).ok_or_else(|| {
            ScorerError::UnknownQuestion {
                question: question.to_string(),
            }
        })?;
        let answer_tokens = crate::corpus::tokens(answer);
        let gold_tokens = crate::corpus::tokens(gold);
        let correct =
            crate::corpus::contains_token_subsequence(&answer_tokens, &gold_tokens);
        let u = unit_from_hash(stable_hash64(&[
            b"corrupt-score",
            &self.seed.to_le_bytes(),
            question.as_bytes(),
            answer.as_bytes(),
        ]));
        let score = if self.is_corrupted(question) {
            // inverted and unconfident: wrong answers on top, low scores
            if correct {
                0.12 * u
            } else {
                0.15 + 0.25 * u
            }
        } else if correct {
            0.75 + 0.25 * u
        } else {
            0.25 * u
        };
        Ok(score.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WsVsLwConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub teacher_seed: u64,
    pub corruption_rate: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for WsVsLwConfig {
    fn default() -> Self {
        WsVsLwConfig {
            n_train: 2000,
            n_dev: 150,
            n_eval: 500,
            corpus_seed: 202,
            teacher_seed: 11,
            corruption_rate: 0.3,
            seeds: vec![1, 2, 3],
            epochs: 14,
            lr: 3e-3,
            batch_size: 32,
            k: 5,
            embed_dim: 48,
            hidden_dim: 96,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsVsLwSeedOutcome {
    pub seed: u64,
    pub ws_accuracy: f64,
    pub lw_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsVsLwReport {
    pub observed_corruption: f64,
    pub per_seed: Vec<WsVsLwSeedOutcome>,
    pub mean_ws: f64,
    pub mean_lw: f64,
    pub gap: f64,
    pub wall_s: f64,
    pub pass: bool,
}

impl WsVsLwReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ws-vs-lw: corrupted targets {:.1}%",
            100.0 * self.observed_corruption
        );
        for row in &self.per_seed {
            let _ = writeln!(
                out,
                "  seed {}: ws {:.3}  lw {:.3}",
                row.seed, row.ws_accuracy, row.lw_accuracy
            );
        }
        let _ = writeln!(
            out,
            "mean ws {:.3}  mean lw {:.3}  gap {:+.3} ({:.1}s)",
            self.mean_ws, self.mean_lw, self.gap, self.wall_s
        );
        let _ = writeln!(
            out,
            "verdict: {}",
            if self.pass {
                "PASS (lw beats ws by >= 0.02)"
            } else {
                "FAIL (gap below 0.02)"
            }
        );
        out
    }
}

/// Trains the plain and the weighted objective on the same corrupted
/// dataset for each seed and compares oracle accuracies on held-out
/// questions shaped by a clean teacher.
pub fn run_ws_vs_lw(
    cfg: &WsVsLwConfig,
    work_dir: &Path,
) -> Result<WsVsLwReport, ExperimentError> {
    let started = Instant::now();
    let all = world_corpus(cfg.n_train + cfg.n_dev + cfg.n_eval, cfg.corpus_seed, 0.5)?;
    let (train_set, dev, eval) = split3(&all, cfg.n_train, cfg.n_dev);
    let teacher = CorruptingScorer::new(cfg.teacher_seed, cfg.corruption_rate, &all)?;
    let clean = OracleScorer::new(OracleScorerConfig::default(), &all)?;

    let shaping_cfg = ShapingConfig {
        k: cfg.k,
        ..ShapingConfig::default()
    };
    let vocab = crate::shaping::Vocabulary::build_from_corpus(&all, shaping_cfg.l);
    let (rows, stats) = build_dataset(&train_set, &teacher, &shaping_cfg, &vocab)?;

    // how many emitted targets actually are corrupted
    let by_id: HashMap<&str, &QAExample> =
        train_set.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut corrupted = 0usize;
    for row in &rows {
        let example = by_id[row.example_id.as_str()];
        let ranked = rank(example, &teacher)?;
        let top = &example.candidates[ranked.top().0];
        if !oracle_correct(&top.text, example)? {
            corrupted += 1;
        }
    }
    let observed_corruption = corrupted as f64 / rows.len() as f64;

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            n_layers: 1,
            max_positions: 256,
            seed,
            float_width: 32,
            ..ModelConfig::default()
        };
        let mut accs = [0.0f64; 2];
        for (slot, lw) in [(0usize, false), (1usize, true)] {
            let train_cfg = TrainConfig {
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                epochs: cfg.epochs,
                seed,
                lw_enabled: lw,
                eval_as2: false,
                ..TrainConfig::default()
            };
            let inputs = TrainInputs {
                dataset: &rows,
                stats: &stats,
                dev_corpus: &dev,
                scorer: &teacher,
                vocab: &vocab,
                shaping: &shaping_cfg,
            };
            let dir = work_dir.join(format!("seed{seed}_{}", if lw { "lw" } else { "ws" }));
            let outcome = train::<f32>(&inputs, &model_cfg, &train_cfg, &dir)?;
            // evaluate on clean-teacher-shaped inputs for both arms
            let (acc, _) = eval_generations(
                &outcome.params,
                &vocab,
                &shaping_cfg,
                &eval,
                &clean,
                &eval_decode_cfg(),
            )?;
            accs[slot] = acc;
        }
        per_seed.push(WsVsLwSeedOutcome {
            seed,
            ws_accuracy: accs[0],
            lw_accuracy: accs[1],
        });
    }
    let mean_ws = per_seed.iter().map(|r| r.ws_accuracy).sum::<f64>() / per_seed.len() as f64;
    let mean_lw = per_seed.iter().map(|r| r.lw_accuracy).sum::<f64>() / per_seed.len() as f64;
    let gap = mean_lw - mean_ws;
    Ok(WsVsLwReport {
        observed_corruption,
        per_seed,
        mean_ws,
        mean_lw,
        gap,
        wall_s: started.elapsed().as_secs_f64(),
        pass: gap >= 0.02,
    })
}

// ---------------------------------------------------------------------
// confidence monotonicity of score-conditioned outputs
// ---------------------------------------------------------------------

/// A calibrated teacher with question-level reliability r in [0.05, 1]:
/// with probability r it scores the correct candidates on top at level ~r,
/// otherwise it inverts the ranking, still at level ~r. Its top-1 score
/// therefore predicts its own correctness, which is exactly what the
/// bucket tokens are meant to expose.
pub struct ReliabilityScorer {
    seed: u64,
    gold_by_question: HashMap<String, String>,
}

impl ReliabilityScorer {
    pub fn new(seed: u64, examples: &[QAExample]) -> Result<ReliabilityScorer, ScorerError> {
        let mut gold_by_question = HashMap::new();
        for e in examples {
            let gold = e
                .gold_value
                .as_deref()
                .ok_or_else(|| ScorerError::MissingGoldValue { id: e.id.clone() })?;
            gold_by_question.insert(e.question.clone(), gold.to_string());
        }
        Ok(ReliabilityScorer {
            seed,
            gold_by_question,
        })
    }

    pub fn reliability(&self, question: &str) -> f64 {
        let h = stable_hash64(&[
            b"reliability",
            &self.seed.to_le_bytes(),
            question.as_bytes(),
        ]);
        0.05 + 0.95 * unit_from_hash(h)
    }

    fn inverts(&self, question: &str) -> bool {
        let h = stable_hash64(&[
            b"reliability-fail",
            &self.seed.to_le_bytes(),
            question.as_bytes(),
        ]);
        unit_from_hash(h) >= self.reliability(question)
    }
}

impl Scorer for ReliabilityScorer {
    fn score(&self, question: &str, answer: &str) -> Result<f64, ScorerError> {
        let gold = self.gold_by_question.get(question).ok_or_else(|| {
            ScorerError::UnknownQuestion {
                question: question.to_string(),
            }
        })?;
        let answer_tokens = crate::corpus::tokens(answer);
        let gold_tokens = crate::corpus::tokens(gold);
        let correct =
            crate::corpus::contains_token_subsequence(&answer_tokens, &gold_tokens);
        let favored = correct != self.inverts(question);
        let r = self.reliability(question);
        let u = unit_from_hash(stable_hash64(&[
            b"reliability-score",
            &self.seed.to_le_bytes(),
            question.as_bytes(),
            answer.as_bytes(),
        ]));
        let score = if favored {
            // spread +-0.04 around the reliability level, clipped
            (r + 0.08 * (u - 0.5)).clamp(0.01, 1.0)
        } else {
            0.04 * u
        };
        Ok(score)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoMonotonicConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub teacher_seed: u64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// clusters smaller than this do not enter the correlation
    pub min_cluster: u64,
}

impl Default for ScoMonotonicConfig {
    fn default() -> Self {
        ScoMonotonicConfig {
            n_train: 2000,
            n_dev: 150,
            n_eval: 600,
            corpus_seed: 303,
            teacher_seed: 17,
            seeds: vec![1, 2, 3],
            epochs: 14,
            lr: 3e-3,
            batch_size: 32,
            k: 5,
            embed_dim: 48,
            hidden_dim: 96,
            min_cluster: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoSeedOutcome {
    pub seed: u64,
    pub spearman: f64,
    pub bucket_table: std::collections::BTreeMap<String, ClusterStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoMonotonicReport {
    pub per_seed: Vec<ScoSeedOutcome>,
    pub mean_spearman: f64,
    pub wall_s: f64,
    pub pass: bool,
}

impl ScoMonotonicReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in &self.per_seed {
            let _ = writeln!(out, "seed {}: spearman {:+.3}", row.seed, row.spearman);
            for (bucket, stat) in &row.bucket_table {
                let _ = writeln!(
                    out,
                    "    {bucket:<14} count {:>4}  accuracy {:.3}",
                    stat.count, stat.accuracy
                );
            }
        }
        let _ = writeln!(
            out,
            "mean spearman {:+.3} ({:.1}s)\nverdict: {}",
            self.mean_spearman,
            self.wall_s,
            if self.pass {
                "PASS (positive rank correlation)"
            } else {
                "FAIL (no positive rank correlation)"
            }
        );
        out
    }
}

fn bucket_rank(token: &str) -> Option<f64> {
    match token {
        "[_NO_]" => Some(1.0),
        "[_DOUBT_]" => Some(2.0),
        "[_MAYBE_]" => Some(3.0),
        "[_PROBABLY_]" => Some(4.0),
        "[_YES_]" => Some(5.0),
        _ => None,
    }
}

/// Trains score-conditioned models (SCI + SCO + LW) against the calibrated
/// reliability teacher and checks that accuracy, clustered by the emitted
/// bucket token, increases with bucket confidence.
pub fn run_sco_monotonic(
    cfg: &ScoMonotonicConfig,
    work_dir: &Path,
) -> Result<ScoMonotonicReport, ExperimentError> {
    let started = Instant::now();
    let all = world_corpus(cfg.n_train + cfg.n_dev + cfg.n_eval, cfg.corpus_seed, 0.5)?;
    let (train_set, dev, eval) = split3(&all, cfg.n_train, cfg.n_dev);
    let teacher = ReliabilityScorer::new(cfg.teacher_seed, &all)?;

    let shaping_cfg = ShapingConfig {
        k: cfg.k,
        sci: true,
        sco: true,
        ..ShapingConfig::default()
    };
    let vocab = crate::shaping::Vocabulary::build_from_corpus(&all, shaping_cfg.l);
    let (rows, stats) = build_dataset(&train_set, &teacher, &shaping_cfg, &vocab)?;

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            n_layers: 1,
            max_positions: 256,
            seed,
            float_width: 32,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            seed,
            lw_enabled: true,
            eval_as2: false,
            ..TrainConfig::default()
        };
        let inputs = TrainInputs {
            dataset: &rows,
            stats: &stats,
            dev_corpus: &dev,
            scorer: &teacher,
            vocab: &vocab,
            shaping: &shaping_cfg,
        };
        let dir = work_dir.join(format!("sco_seed{seed}"));
        let outcome = train::<f32>(&inputs, &model_cfg, &train_cfg, &dir)?;

        let (_, generations) = eval_generations(
            &outcome.params,
            &vocab,
            &shaping_cfg,
            &eval,
            &teacher,
            &eval_decode_cfg(),
        )?;
        let judgments = oracle_judgments(&generations, &eval)?;
        let table = bucket_cluster_accuracy(&generations, &judgments);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (bucket, stat) in &table {
            if stat.count < cfg.min_cluster {
                continue;
            }
            if let Some(rank) = bucket_rank(bucket) {
                xs.push(rank);
                ys.push(stat.accuracy);
            }
        }
        if xs.len() < 2 {
            return Err(ExperimentError::Stage {
                stage: "sco-clustering",
                message: format!(
                    "only {} populated buckets; the model did not spread its confidence",
                    xs.len()
                ),
            });
        }
        let rho = spearman(&xs, &ys)?;
        per_seed.push(ScoSeedOutcome {
            seed,
            spearman: rho,
            bucket_table: table,
        });
    }
    let mean_spearman =
        per_seed.iter().map(|r| r.spearman).sum::<f64>() / per_seed.len() as f64;
    Ok(ScoMonotonicReport {
        per_seed,
        mean_spearman,
        wall_s: started.elapsed().as_secs_f64(),
        pass: mean_spearman > 0.0,
    })
}

// ---------------------------------------------------------------------
// checkpoint selection: dev loss vs teacher score
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CkptSelectionConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub teacher_seed: u64,
    pub corruption_rate: f64,
    pub model_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub checkpoint_every: usize,
    pub as2_sample: usize,
}

impl Default for CkptSelectionConfig {
    fn default() -> Self {
        CkptSelectionConfig {
            n_train: 1500,
            n_dev: 150,
            n_eval: 400,
            corpus_seed: 404,
            teacher_seed: 23,
            corruption_rate: 0.3,
            model_seed: 5,
            epochs: 16,
            lr: 3e-3,
            batch_size: 32,
            k: 5,
            embed_dim: 48,
            hidden_dim: 96,
            checkpoint_every: 100,
            as2_sample: 150,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptRow {
    pub step: u64,
    pub dev_loss: f64,
    pub avg_as2_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptSelectionReport {
    pub rows: Vec<CkptRow>,
    pub loss_choice_step: u64,
    pub as2_choice_step: u64,
    pub diverged: bool,
    pub loss_choice_accuracy: f64,
    pub as2_choice_accuracy: f64,
    pub wall_s: f64,
}

impl CkptSelectionReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "step     dev_loss   avg_as2");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}   {:>8.4}   {:>7.4}",
                row.step, row.dev_loss, row.avg_as2_score
            );
        }
        let _ = writeln!(
            out,
            "argmin dev_loss -> step {} (oracle accuracy {:.3})",
            self.loss_choice_step, self.loss_choice_accuracy
        );
        let _ = writeln!(
            out,
            "argmax avg_as2  -> step {} (oracle accuracy {:.3})",
            self.as2_choice_step, self.as2_choice_accuracy
        );
        let _ = writeln!(
            out,
            "criteria {}",
            if self.diverged {
                "disagree: the loss-minimal checkpoint is not the score-maximal one"
            } else {
                "agree on this run"
            }
        );
        out
    }
}

/// Trains against the corrupting teacher while checkpointing frequently;
/// dev loss is measured on the teacher's own (partly corrupted) targets,
/// while the checkpoint score uses a clean teacher on generations. The two
/// selection criteria then pick different checkpoints once the model
/// starts fitting the corrupted targets.
pub fn run_ckpt_selection(
    cfg: &CkptSelectionConfig,
    work_dir: &Path,
) -> Result<CkptSelectionReport, ExperimentError> {
    let started = Instant::now();
    let all = world_corpus(cfg.n_train + cfg.n_dev + cfg.n_eval, cfg.corpus_seed, 0.5)?;
    let (train_set, dev, eval) = split3(&all, cfg.n_train, cfg.n_dev);
    let teacher = CorruptingScorer::new(cfg.teacher_seed, cfg.corruption_rate, &all)?;
    let clean = OracleScorer::new(OracleScorerConfig::default(), &all)?;

    let shaping_cfg = ShapingConfig {
        k: cfg.k,
        ..ShapingConfig::default()
    };
    let vocab = crate::shaping::Vocabulary::build_from_corpus(&all, shaping_cfg.l);
    let (rows, stats) = build_dataset(&train_set, &teacher, &shaping_cfg, &vocab)?;

    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        n_layers: 1,
        max_positions: 256,
        seed: cfg.model_seed,
        float_width: 32,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.model_seed,
        checkpoint_every: cfg.checkpoint_every,
        eval_as2: false, // scored below with the clean teacher instead
        ..TrainConfig::default()
    };
    let inputs = TrainInputs {
        dataset: &rows,
        stats: &stats,
        dev_corpus: &dev,
        scorer: &teacher,
        vocab: &vocab,
        shaping: &shaping_cfg,
    };
    let outcome = train::<f32>(&inputs, &model_cfg, &train_cfg, work_dir)?;

    // rescore every checkpoint with the clean teacher
    let decode = TrainConfig::default().ckpt_decode;
    let mut records = outcome.records.clone();
    let mut rows_out = Vec::new();
    for record in &mut records {
        let ckpt =
            crate::model::checkpoint::Checkpoint::<f32>::load(Path::new(&record.path))?;
        let (score, _) = avg_as2_score(
            &ckpt.params,
            &vocab,
            &shaping_cfg,
            &dev,
            &clean,
            &decode,
            Some(cfg.as2_sample),
        )?;
        record.avg_as2_score = Some(score);
        rows_out.push(CkptRow {
            step: record.step,
            dev_loss: record.dev_loss,
            avg_as2_score: score,
        });
    }
    let by_loss = select_checkpoint(&records, SelectionCriterion::Loss)?.clone();
    let by_as2 = select_checkpoint(&records, SelectionCriterion::As2)?.clone();

    let acc_of = |path: &str| -> Result<f64, ExperimentError> {
        let ckpt = crate::model::checkpoint::Checkpoint::<f32>::load(Path::new(path))?;
        let (acc, _) = eval_generations(
            &ckpt.params,
            &vocab,
            &shaping_cfg,
            &eval,
            &clean,
            &eval_decode_cfg(),
        )?;
        Ok(acc)
    };
    let loss_choice_accuracy = acc_of(&by_loss.path)?;
    let as2_choice_accuracy = acc_of(&by_as2.path)?;

    Ok(CkptSelectionReport {
        rows: rows_out,
        loss_choice_step: by_loss.step,
        as2_choice_step: by_as2.step,
        diverged: by_loss.step != by_as2.step,
        loss_choice_accuracy,
        as2_choice_accuracy,
        wall_s: started.elapsed().as_secs_f64(),
    })
}
