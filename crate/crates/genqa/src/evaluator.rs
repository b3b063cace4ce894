//! Measurement machinery: answer accuracy, BLEU, confidence-bucket cluster
//! tables, copy-similarity against the input candidates, correlation
//! between metrics, and report / annotation-CSV emission.
//!
//! Accuracy is the micro-average: the mean over questions of the mean
//! annotator verdict (the deterministic oracle emits a single verdict).
//! BLEU is pinned exactly: 4-gram modified precision with multi-reference
//! clipping, add-one smoothing for n >= 2 only, uniform geometric mean,
//! and a brevity penalty using the closest reference length (ties to the
//! shorter reference). A zero unigram precision forces a zero score.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{oracle_correct, tokens, CorpusError, QAExample};
use crate::decoder::GenerationRecord;
use crate::shaping::{ShapedExample, Vocabulary, SEP_ID};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {what}")]
    Empty { what: &'static str },
    #[error("BLEU candidate must be nonempty")]
    EmptyCandidate,
    #[error("BLEU needs at least one reference")]
    NoReferences,
    #[error("length mismatch: {xs} vs {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("correlation is undefined for inputs with zero variance")]
    DegenerateVariance,
    #[error("id {id:?} has no matching record")]
    IdMismatch { id: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed document: {0}")]
    Malformed(String),
}

/// Annotator verdicts (0/1) for one generated answer. The oracle emits a
/// single verdict; human annotation rounds carry one per annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub example_id: String,
    pub answer_text: String,
    pub verdicts: Vec<u8>,
}

impl Judgment {
    pub fn mean_verdict(&self) -> f64 {
        self.verdicts.iter().map(|&v| v as f64).sum::<f64>() / self.verdicts.len() as f64
    }
}

/// Judges every generation against the corpus oracle (one verdict each).
pub fn oracle_judgments(
    generations: &[GenerationRecord],
    examples: &[QAExample],
) -> Result<Vec<Judgment>, EvalError> {
    let by_id: HashMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    generations
        .iter()
        .map(|g| {
            let example = by_id
                .get(g.id.as_str())
                .ok_or_else(|| EvalError::IdMismatch { id: g.id.clone() })?;
            let verdict = oracle_correct(&g.text, example)?;
            Ok(Judgment {
                example_id: g.id.clone(),
                answer_text: g.text.clone(),
                verdicts: vec![verdict as u8],
            })
        })
        .collect()
}

/// Micro-average accuracy: mean over examples of the per-example mean
/// verdict.
pub fn accuracy(judgments: &[Judgment]) -> Result<f64, EvalError> {
    if judgments.is_empty() {
        return Err(EvalError::Empty { what: "judgments" });
    }
    for j in judgments {
        if j.verdicts.is_empty() {
            return Err(EvalError::Empty { what: "verdicts" });
        }
    }
    Ok(judgments.iter().map(Judgment::mean_verdict).sum::<f64>() / judgments.len() as f64)
}

fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for window in toks.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 in [0, 100] against one or more references.
pub fn bleu(candidate: &str, references: &[&str]) -> Result<f64, EvalError> {
    let cand_tokens = tokens(candidate);
    if cand_tokens.is_empty() {
        return Err(EvalError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let ref_tokens: Vec<Vec<&str>> = references.iter().map(|r| tokens(r)).collect();

    let mut log_p_sum = 0.0;
    for n in 1..=4usize {
        let cand_grams = ngram_counts(&cand_tokens, n);
        let total: usize = cand_grams.values().sum();
        let mut matches = 0usize;
        for (gram, &count) in &cand_grams {
            let clip = ref_tokens
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matches += count.min(clip);
        }
        let p = if n == 1 {
            if matches == 0 {
                return Ok(0.0);
            }
            matches as f64 / total as f64
        } else {
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_p_sum += 0.25 * p.ln();
    }

    let c = cand_tokens.len() as f64;
    let r = ref_tokens
        .iter()
        .map(|t| t.len())
        .min_by_key(|&len| {
            let diff = (len as i64 - cand_tokens.len() as i64).abs();
            (diff, len)
        })
        .unwrap_or(0) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p_sum.exp())
}

/// Count and micro-average accuracy of one bucket cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub count: u64,
    pub accuracy: f64,
}

/// Groups generations by their emitted bucket token ("none" when absent)
/// and reports per-cluster counts and accuracies. Generations without a
/// matching judgment do not contribute.
pub fn bucket_cluster_accuracy(
    generations: &[GenerationRecord],
    judgments: &[Judgment],
) -> BTreeMap<String, ClusterStat> {
    let by_id: HashMap<&str, &Judgment> = judgments
        .iter()
        .map(|j| (j.example_id.as_str(), j))
        .collect();
    let mut sums: BTreeMap<String, (u64, f64)> = BTreeMap::new();
    for g in generations {
        let Some(judgment) = by_id.get(g.id.as_str()) else {
            continue;
        };
        let key = g.bucket.clone().unwrap_or_else(|| "none".to_string());
        let entry = sums.entry(key).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += judgment.mean_verdict();
    }
    sums.into_iter()
        .map(|(k, (count, sum))| {
            (
                k,
                ClusterStat {
                    count,
                    accuracy: sum / count as f64,
                },
            )
        })
        .collect()
}

/// Recovers the context candidate texts from a shaped input: segments
/// after each `[SEP]`, minus a leading bucket token.
pub fn context_candidates(row: &ShapedExample, vocab: &Vocabulary) -> Vec<String> {
    let mut segments: Vec<Vec<u32>> = Vec::new();
    let mut current: Option<Vec<u32>> = None;
    for &id in &row.input_ids {
        if id == SEP_ID {
            if let Some(seg) = current.take() {
                segments.push(seg);
            }
            current = Some(Vec::new());
        } else if let Some(seg) = current.as_mut() {
            seg.push(id);
        }
    }
    if let Some(seg) = current.take() {
        segments.push(seg);
    }
    segments
        .into_iter()
        .map(|mut seg| {
            if let Some(&first) = seg.first() {
                if vocab.bucket_index_of_id(first).is_some() {
                    seg.remove(0);
                }
            }
            vocab.detokenize(&seg)
        })
        .collect()
}

/// Mean BLEU of each bucket cluster's generations against the input
/// candidates at context positions 1..=4 (the candidates ranked 2..5).
pub fn copy_similarity(
    generations: &[GenerationRecord],
    shaped: &[ShapedExample],
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, Vec<f64>>, EvalError> {
    let by_id: HashMap<&str, &ShapedExample> = shaped
        .iter()
        .map(|r| (r.example_id.as_str(), r))
        .collect();
    let columns = 4usize;
    let mut sums: BTreeMap<String, Vec<(f64, u64)>> = BTreeMap::new();
    for g in generations {
        let row = by_id
            .get(g.id.as_str())
            .ok_or_else(|| EvalError::IdMismatch { id: g.id.clone() })?;
        if g.text.trim().is_empty() {
            continue;
        }
        let candidates = context_candidates(row, vocab);
        let key = g.bucket.clone().unwrap_or_else(|| "none".to_string());
        let entry = sums.entry(key).or_insert_with(|| vec![(0.0, 0); columns]);
        for (j, candidate) in candidates.iter().take(columns).enumerate() {
            let score = bleu(&g.text, &[candidate.as_str()])?;
            entry[j].0 += score;
            entry[j].1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, cols)| {
            let means = cols
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|(sum, n)| sum / n as f64)
                .collect();
            (k, means)
        })
        .collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EvalError::Empty {
            what: "need at least two points",
        });
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // average rank for ties, 1-based
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// The structured evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_at_1: Option<f64>,
    /// BLEU of the generations against named reference sets, e.g.
    /// "vs_gold" and "vs_as2_top".
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bleu: BTreeMap<String, f64>,
    pub bucket_table: BTreeMap<String, ClusterStat>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub copy_table: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub correlations: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config_echo: BTreeMap<String, serde_json::Value>,
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report)
        .map_err(|e| EvalError::Malformed(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Malformed(e.to_string()))
}

/// Human-readable rendering for terminal output.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("accuracy          {:.4}\n", report.accuracy));
    if let Some(p) = report.p_at_1 {
        out.push_str(&format!("p@1 (teacher)     {p:.4}\n"));
    }
    for (name, value) in &report.bleu {
        out.push_str(&format!("bleu {name:<12} {value:.2}\n"));
    }
    if !report.bucket_table.is_empty() {
        out.push_str("bucket            count  accuracy\n");
        for (bucket, stat) in &report.bucket_table {
            out.push_str(&format!(
                "  {bucket:<15} {:>5}  {:.4}\n",
                stat.count, stat.accuracy
            ));
        }
    }
    if !report.copy_table.is_empty() {
        out.push_str("copy similarity (BLEU vs context candidates 1..4)\n");
        for (bucket, cols) in &report.copy_table {
            let cells: Vec<String> = cols.iter().map(|v| format!("{v:6.2}")).collect();
            out.push_str(&format!("  {bucket:<15} {}\n", cells.join(" ")));
        }
    }
    for (name, value) in &report.correlations {
        out.push_str(&format!("corr {name:<12} {value:+.3}\n"));
    }
    out
}

/// Writes the annotation CSV: question, answer, reference, example_id.
/// The reference column holds the first correct-labeled candidate when the
/// corpus carries labels, otherwise it is empty.
pub fn emit_annotation_csv(
    generations: &[GenerationRecord],
    examples: &[QAExample],
    path: &Path,
) -> Result<(), EvalError> {
    let by_id: HashMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["question", "answer", "reference", "example_id"])?;
    for g in generations {
        let example = by_id
            .get(g.id.as_str())
            .ok_or_else(|| EvalError::IdMismatch { id: g.id.clone() })?;
        let reference = example
            .candidates
            .iter()
            .find(|c| c.gold_label == Some(true))
            .map(|c| c.text.as_str())
            .unwrap_or("");
        writer.write_record([example.question.as_str(), g.text.as_str(), reference, &g.id])?;
    }
    writer.flush()?;
    Ok(())
}

/// One line of an external metric scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub id: String,
    pub score: f64,
}

pub fn read_metric_scores(path: &Path) -> Result<Vec<MetricScore>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| EvalError::Malformed(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Candidate;

    fn judgment(id: &str, verdicts: &[u8]) -> Judgment {
        Judgment {
            example_id: id.into(),
            answer_text: String::new(),
            verdicts: verdicts.to_vec(),
        }
    }

    fn generation(id: &str, text: &str, bucket: Option<&str>) -> GenerationRecord {
        GenerationRecord {
            id: id.into(),
            text: text.into(),
            bucket: bucket.map(|b| b.to_string()),
            log_prob: -1.0,
            forced: None,
        }
    }

    #[test]
    fn accuracy_micro_average() {
        assert_eq!(
            accuracy(&[judgment("a", &[1, 1, 1]), judgment("b", &[1])]).unwrap(),
            1.0
        );
        let half = accuracy(&[judgment("a", &[1, 1]), judgment("b", &[1, 0])]).unwrap();
        assert!((half - 0.75).abs() < 1e-12);
        assert!(matches!(accuracy(&[]), Err(EvalError::Empty { .. })));
    }

    #[test]
    fn oracle_accuracy_matches_direct_count() {
        let corpus: Vec<QAExample> =
            crate::corpus::generate_corpus(crate::corpus::CorpusConfig {
                n_questions: 500,
                seed: 8,
                ..crate::corpus::CorpusConfig::default()
            })
            .unwrap()
            .collect();
        // fabricate generations: first candidate text of each example
        let generations: Vec<GenerationRecord> = corpus
            .iter()
            .map(|e| generation(&e.id, &e.candidates[0].text, None))
            .collect();
        let judgments = oracle_judgments(&generations, &corpus).unwrap();
        let acc = accuracy(&judgments).unwrap();
        let brute = corpus
            .iter()
            .filter(|e| oracle_correct(&e.candidates[0].text, e).unwrap())
            .count() as f64
            / corpus.len() as f64;
        assert!((acc - brute).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(bleu("the answer is here", &["the answer is here"]).unwrap(), 100.0);
        assert_eq!(bleu("a b c", &["x y z"]).unwrap(), 0.0);
        assert!(matches!(bleu("", &["x"]), Err(EvalError::EmptyCandidate)));
        assert!(matches!(bleu("x", &[]), Err(EvalError::NoReferences)));
    }

    #[test]
    fn bleu_hand_computed_brevity_case() {
        // p1..p4 all 1 under add-one smoothing; BP = exp(1 - 6/4)
        let score = bleu("a b c d", &["a b c d e f"]).unwrap();
        let expected = 100.0 * (1.0f64 - 6.0 / 4.0).exp();
        assert!((score - expected).abs() < 1e-9, "{score} vs {expected}");
        assert!((score - 60.653).abs() < 1e-3);
    }

    #[test]
    fn bleu_brevity_tie_prefers_shorter_reference() {
        // closest reference lengths 3 and 5 tie for a 4-token candidate;
        // the shorter wins, so no brevity penalty applies
        let score = bleu("a b c d", &["a b c", "a b c d e"]).unwrap();
        assert_eq!(score, 100.0);
    }

    #[test]
    fn bleu_clips_against_references() {
        let clipped = bleu("a a", &["a"]).unwrap();
        let full = bleu("a a", &["a a"]).unwrap();
        assert!(clipped < full);
        assert_eq!(full, 100.0);
    }

    #[test]
    fn bleu_reference_order_is_irrelevant() {
        let refs_a = ["the cat sat", "a dog ran far"];
        let refs_b = ["a dog ran far", "the cat sat"];
        let a = bleu("the dog sat", &refs_a).unwrap();
        let b = bleu("the dog sat", &refs_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cluster_table_and_decomposition() {
        let generations = vec![
            generation("a", "x", Some("[_YES_]")),
            generation("b", "x", Some("[_YES_]")),
            generation("c", "x", Some("[_NO_]")),
            generation("d", "x", None),
        ];
        let judgments = vec![
            judgment("a", &[1]),
            judgment("b", &[0]),
            judgment("c", &[1]),
            judgment("d", &[0]),
        ];
        let table = bucket_cluster_accuracy(&generations, &judgments);
        assert_eq!(table["[_YES_]"].count, 2);
        assert!((table["[_YES_]"].accuracy - 0.5).abs() < 1e-12);
        assert_eq!(table["[_NO_]"].count, 1);
        assert_eq!(table["none"].count, 1);

        // overall accuracy equals the count-weighted mean of the clusters
        let overall = accuracy(&judgments).unwrap();
        let weighted: f64 = table.values().map(|s| s.count as f64 * s.accuracy).sum::<f64>()
            / table.values().map(|s| s.count as f64).sum::<f64>();
        assert!((overall - weighted).abs() < 1e-12);
    }

    #[test]
    fn cluster_table_matches_brute_force() {
        let buckets = ["[_YES_]", "[_PROBABLY_]", "[_MAYBE_]", "[_DOUBT_]", "[_NO_]"];
        let mut generations = Vec::new();
        let mut judgments = Vec::new();
        for i in 0..200 {
            let id = format!("q{i}");
            let bucket = buckets[i % buckets.len()];
            let verdict = (i % 3 == 0) as u8;
            generations.push(generation(&id, "t", Some(bucket)));
            judgments.push(judgment(&id, &[verdict]));
        }
        let table = bucket_cluster_accuracy(&generations, &judgments);
        for bucket in buckets {
            let members: Vec<usize> = (0..200)
                .filter(|i| buckets[i % buckets.len()] == bucket)
                .collect();
            let brute =
                members.iter().filter(|&&i| i % 3 == 0).count() as f64 / members.len() as f64;
            assert!((table[bucket].accuracy - brute).abs() < 1e-12);
            assert_eq!(table[bucket].count as usize, members.len());
        }
    }

    fn shaped(id: &str, vocab: &Vocabulary, question: &str, candidates: &[&str]) -> ShapedExample {
        let mut input_ids = vocab.tokenize(question);
        for c in candidates {
            input_ids.push(SEP_ID);
            input_ids.extend(vocab.tokenize(c));
        }
        ShapedExample {
            example_id: id.into(),
            input_ids,
            target_ids: vec![2],
            weight: 0.9,
            target_bucket: "[_YES_]".into(),
            k_used: candidates.len(),
        }
    }

    #[test]
    fn copy_similarity_identity_and_disjoint() {
        let vocab = Vocabulary::build(
            ["q one two three four alpha beta gamma delta"].into_iter(),
            5,
        );
        let rows = vec![
            shaped("a", &vocab, "q", &["one two", "three four", "alpha", "beta"]),
            shaped("b", &vocab, "q", &["gamma", "delta", "alpha", "beta"]),
        ];
        let generations = vec![
            generation("a", "one two", Some("[_YES_]")),
            generation("b", "x y", Some("[_NO_]")),
        ];
        let table = copy_similarity(&generations, &rows, &vocab).unwrap();
        assert_eq!(table["[_YES_]"][0], 100.0);
        assert!(table["[_NO_]"].iter().all(|&v| v == 0.0));

        // brute-force recomputation of one cell
        let cell = bleu("one two", &["three four"]).unwrap();
        assert_eq!(table["[_YES_]"][1], cell);

        let missing = vec![generation("zz", "x", None)];
        assert!(matches!(
            copy_similarity(&missing, &rows, &vocab),
            Err(EvalError::IdMismatch { .. })
        ));
    }

    #[test]
    fn context_candidates_skip_bucket_tokens() {
        let vocab = Vocabulary::build(["q w1 w2"].into_iter(), 5);
        let mut row = shaped("a", &vocab, "q", &["w1 w2"]);
        // inject a bucket token after [SEP], as SCI shaping would
        let sep_pos = row.input_ids.iter().position(|&t| t == SEP_ID).unwrap();
        row.input_ids.insert(sep_pos + 1, 5);
        assert_eq!(context_candidates(&row, &vocab), vec!["w1 w2".to_string()]);
    }

    #[test]
    fn pearson_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);

        // fixed five-point set against a hand computation
        let xs = [0.1, 0.4, 0.2, 0.9, 0.7];
        let ys = [1.0, 0.0, 1.0, 1.0, 0.0];
        let n = 5.0;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let expected = cov / (vx.sqrt() * vy.sqrt());
        assert!((pearson(&xs, &ys).unwrap() - expected).abs() < 1e-12);

        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 1.0]),
            Err(EvalError::DegenerateVariance)
        ));
        assert!(matches!(
            pearson(&[1.0], &[0.0]),
            Err(EvalError::Empty { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[0.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn spearman_handles_monotone_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [10.0, 100.0, 1000.0, 10000.0, 100000.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        // ties get average ranks
        assert_eq!(ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport {
            accuracy: 0.9,
            p_at_1: Some(1.0),
            bleu: BTreeMap::from([("vs_gold".to_string(), 42.5)]),
            bucket_table: BTreeMap::from([(
                "[_YES_]".to_string(),
                ClusterStat {
                    count: 10,
                    accuracy: 0.8,
                },
            )]),
            copy_table: BTreeMap::from([("[_YES_]".to_string(), vec![40.0, 20.0, 10.0, 5.0])]),
            correlations: BTreeMap::from([("overlap".to_string(), 0.55)]),
            config_echo: BTreeMap::from([("seed".to_string(), serde_json::json!(7))]),
        };
        emit_report(&report, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), report);
        let rendered = render_report(&report);
        assert!(rendered.contains("accuracy"));
        assert!(rendered.contains("[_YES_]"));
    }

    #[test]
    fn annotation_csv_quoting_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.csv");
        let examples = vec![QAExample {
            id: "q1".into(),
            question: "what is, the \"thing\"".into(),
            candidates: vec![Candidate {
                text: "it is, \"quoted\" indeed".into(),
                gold_label: Some(true),
            }],
            gold_value: Some("quoted".into()),
        }];
        let generations = vec![generation("q1", "an answer, with commas", None)];
        emit_annotation_csv(&generations, &examples, &path).unwrap();

        let mut reader = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), generations.len());
        assert_eq!(&rows[0][0], "what is, the \"thing\"");
        assert_eq!(&rows[0][1], "an answer, with commas");
        assert_eq!(&rows[0][2], "it is, \"quoted\" indeed");
        assert_eq!(&rows[0][3], "q1");
    }

    #[test]
    fn metric_scores_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"score\":0.5}\n{\"id\":\"b\",\"score\":0.7}\n")
            .unwrap();
        let scores = read_metric_scores(&path).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[1].score, 0.7);
    }
}
