//! Evaluation: accuracy, performance gap recovered, and the two diagnostic
//! breakdowns relating uncertainty and reliability scores to gold labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{CanonicalValue, ScoredQuestion};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and gold sequences differ in length: {predictions} vs {gold}")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("question {0} has no gold answer")]
    MissingGold(String),
    #[error("accuracy {0} outside [0, 1]")]
    InvalidAccuracy(f64),
    #[error("bucket count must be at least 1")]
    InvalidBucketCount,
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::LengthMismatch { .. } => "LengthMismatch",
            Self::EmptyInput => "EmptyInput",
            Self::MissingGold(_) => "MissingGold",
            Self::InvalidAccuracy(_) => "InvalidAccuracy",
            Self::InvalidBucketCount => "InvalidBucketCount",
        }
    }
}

/// Mean exact-equality indicator over aligned prediction/gold sequences.
pub fn accuracy(predictions: &[CanonicalValue], gold: &[CanonicalValue]) -> Result<f64, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Performance gap recovered. Undefined when the weak supervisor already
/// matches or beats the strong ceiling; reports render that as "-".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pgr {
    Defined(f64),
    Undefined,
}

impl Pgr {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(*v),
            Self::Undefined => None,
        }
    }
}

impl Serialize for Pgr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Defined(v) => serializer.serialize_f64(*v),
            Self::Undefined => serializer.serialize_str("-"),
        }
    }
}

impl<'de> Deserialize<'de> for Pgr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Dash(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => Ok(Pgr::Defined(v)),
            Raw::Dash(s) if s == "-" => Ok(Pgr::Undefined),
            Raw::Dash(s) => Err(serde::de::Error::custom(format!("invalid PGR value {s:?}"))),
        }
    }
}

/// `(w2s - weak) / (ceiling - weak)`; undefined when `ceiling <= weak`.
pub fn pgr(weak: f64, w2s: f64, ceiling: f64) -> Result<Pgr, EvalError> {
    for v in [weak, w2s, ceiling] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::InvalidAccuracy(v));
        }
    }
    if ceiling <= weak {
        return Ok(Pgr::Undefined);
    }
    Ok(Pgr::Defined((w2s - weak) / (ceiling - weak)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub accuracy: f64,
    pub pgr: Pgr,
}

/// Per-method results plus the diagnostic breakdowns, as serialized into
/// report.json.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub weak: Option<MethodResult>,
    pub naive: Option<MethodResult>,
    pub filtered: Option<MethodResult>,
    pub filtered_sampled: Option<MethodResult>,
    pub reweighted: Option<MethodResult>,
    pub reweighted_sampled: Option<MethodResult>,
    pub ceiling: Option<MethodResult>,
    pub entropy_buckets: Option<EntropyBucketReport>,
    pub reliability_matrix: Option<ReliabilityMatrixReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub lo: f64,
    pub hi: f64,
    pub correct: usize,
    pub incorrect: usize,
    pub accuracy: Option<f64>,
}

/// Per-question weak-label correctness grouped into equal-width entropy
/// buckets over [0, ln N].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBucketReport {
    pub edges: Vec<f64>,
    pub buckets: Vec<BucketStat>,
}

impl EntropyBucketReport {
    /// Accuracies of occupied buckets, left to right.
    pub fn occupied_accuracies(&self) -> Vec<f64> {
        self.buckets.iter().filter_map(|b| b.accuracy).collect()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.occupied_accuracies().windows(2).all(|w| w[0] >= w[1])
    }

    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.correct + b.incorrect).sum()
    }
}

/// The deterministic modal answer of a distribution: the answer with the
/// highest count, ties resolved to the lowest canonical value.
pub fn modal_answer(sq: &ScoredQuestion<Scalar>) -> (CanonicalValue, Vec<CanonicalValue>) {
    let max = sq
        .dist
        .probs
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut modes: Vec<CanonicalValue> = sq
        .dist
        .support
        .iter()
        .zip(&sq.dist.probs)
        .filter(|(_, &p)| p == max)
        .map(|(v, _)| v.clone())
        .collect();
    modes.sort();
    (modes[0].clone(), modes)
}

/// A question counts as correct when its gold answer is among the modal
/// answers of the prediction distribution (a tie not containing the gold is
/// incorrect; the lowest canonical value stands in as the reported label).
pub fn entropy_bucket_report(
    scored: &[ScoredQuestion<Scalar>],
    gold: &BTreeMap<String, CanonicalValue>,
    bucket_count: usize,
) -> Result<EntropyBucketReport, EvalError> {
    if bucket_count == 0 {
        return Err(EvalError::InvalidBucketCount);
    }
    if scored.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = scored.iter().map(|s| s.dist.n).max().unwrap();
    let hi = (n.max(2) as f64).ln();
    let width = hi / bucket_count as f64;
    let edges: Vec<f64> = (0..=bucket_count).map(|i| i as f64 * width).collect();
    let mut correct = vec![0usize; bucket_count];
    let mut incorrect = vec![0usize; bucket_count];
    for sq in scored {
        let gold_value = gold
            .get(&sq.question_id)
            .ok_or_else(|| EvalError::MissingGold(sq.question_id.clone()))?;
        // Half-open buckets [lo, hi); the top bucket is closed.
        let bucket = ((sq.entropy / width) as usize).min(bucket_count - 1);
        let (_, modes) = modal_answer(sq);
        if modes.contains(gold_value) {
            correct[bucket] += 1;
        } else {
            incorrect[bucket] += 1;
        }
    }
    let buckets = (0..bucket_count)
        .map(|b| {
            let total = correct[b] + incorrect[b];
            BucketStat {
                lo: edges[b],
                hi: edges[b + 1],
                correct: correct[b],
                incorrect: incorrect[b],
                accuracy: (total > 0).then(|| correct[b] as f64 / total as f64),
            }
        })
        .collect();
    Ok(EntropyBucketReport { edges, buckets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub weak: String,
    pub gold: String,
    pub mean_weight: f64,
    pub count: usize,
}

/// Mean reliability weight of (variant, answer) pairs grouped by
/// (weak answer, gold answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMatrixReport {
    pub cells: Vec<MatrixCell>,
    pub total_pairs: usize,
}

impl ReliabilityMatrixReport {
    pub fn mean_diagonal(&self) -> Option<f64> {
        Self::mean_over(self.cells.iter().filter(|c| c.weak == c.gold))
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        Self::mean_over(self.cells.iter().filter(|c| c.weak != c.gold))
    }

    fn mean_over<'a>(cells: impl Iterator<Item = &'a MatrixCell>) -> Option<f64> {
        let (sum, count) = cells.fold((0.0, 0usize), |(s, n), c| {
            (s + c.mean_weight * c.count as f64, n + c.count)
        });
        (count > 0).then(|| sum / count as f64)
    }

    pub fn cell(&self, weak: &str, gold: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.weak == weak && c.gold == gold)
    }
}

pub fn reliability_matrix_report(
    scored: &[ScoredQuestion<Scalar>],
    answers: &BTreeMap<String, Vec<CanonicalValue>>,
    gold: &BTreeMap<String, CanonicalValue>,
) -> Result<ReliabilityMatrixReport, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut cells: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    let mut total_pairs = 0usize;
    for sq in scored {
        let gold_value = gold
            .get(&sq.question_id)
            .ok_or_else(|| EvalError::MissingGold(sq.question_id.clone()))?;
        let q_answers = answers
            .get(&sq.question_id)
            .ok_or_else(|| EvalError::MissingGold(sq.question_id.clone()))?;
        if q_answers.len() != sq.per_variant_weight.len() {
            return Err(EvalError::LengthMismatch {
                predictions: q_answers.len(),
                gold: sq.per_variant_weight.len(),
            });
        }
        for (answer, &weight) in q_answers.iter().zip(&sq.per_variant_weight) {
            let entry = cells
                .entry((answer.key(), gold_value.key()))
                .or_insert((0.0, 0));
            entry.0 += weight;
            entry.1 += 1;
            total_pairs += 1;
        }
    }
    Ok(ReliabilityMatrixReport {
        cells: cells
            .into_iter()
            .map(|((weak, gold), (sum, count))| MatrixCell {
                weak,
                gold,
                mean_weight: crate::corpus::sig9(sum / count as f64),
                count,
            })
            .collect(),
        total_pairs,
    })
}

fn fmt_pgr(pgr: &Pgr) -> String {
    match pgr {
        Pgr::Defined(v) => format!("{v:.3}"),
        Pgr::Undefined => "-".to_string(),
    }
}

/// Human-readable report with the same row layout as the comparison tables:
/// weak, naive, filtered (sampled/full), re-weighted (sampled/full), ceiling.
pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::from("# Weak-to-strong evaluation\n\n");
    out.push_str("| method | accuracy | PGR |\n|---|---|---|\n");
    let rows: [(&str, &Option<MethodResult>); 7] = [
        ("weak", &report.weak),
        ("w2s naive", &report.naive),
        ("w2s+filter.(s.)", &report.filtered_sampled),
        ("w2s+filter.", &report.filtered),
        ("w2s+rew.(s.)", &report.reweighted_sampled),
        ("w2s+rew.", &report.reweighted),
        ("strong ceiling", &report.ceiling),
    ];
    for (name, result) in rows {
        match result {
            Some(r) => out.push_str(&format!(
                "| {name} | {:.3} | {} |\n",
                r.accuracy,
                fmt_pgr(&r.pgr)
            )),
            None => out.push_str(&format!("| {name} | - | - |\n")),
        }
    }
    if let Some(buckets) = &report.entropy_buckets {
        out.push_str("\n## Weak-label accuracy by entropy bucket\n\n");
        out.push_str("| bucket | correct | incorrect | accuracy |\n|---|---|---|---|\n");
        for b in &buckets.buckets {
            let acc = b
                .accuracy
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| [{:.3}, {:.3}) | {} | {} | {acc} |\n",
                b.lo, b.hi, b.correct, b.incorrect
            ));
        }
    }
    if let Some(matrix) = &report.reliability_matrix {
        out.push_str("\n## Mean reliability by (weak, gold) answer pair\n\n");
        out.push_str("| weak \\ gold | mean weight | count |\n|---|---|---|\n");
        for c in &matrix.cells {
            out.push_str(&format!(
                "| {} / {} | {:.3} | {} |\n",
                c.weak, c.gold, c.mean_weight, c.count
            ));
        }
    }
    out
}
