//! Answer canonicalization and reliability scoring.
//!
//! The answer multiset of a question is deduplicated into an empirical
//! prediction distribution. Its Shannon entropy is the uncertainty score used
//! for percentile filtering; a temperature softmax over the empirical
//! probabilities gives each (variant, answer) pair a reliability weight used
//! for loss re-weighting.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::supervisor::RawAnswer;
use crate::variation::{PromptVariant, Question, QuestionKind};
use crate::{Real, Scalar};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("answer multiset is empty")]
    EmptyAnswerSet,
    #[error("entropy sequence is empty")]
    EmptyInput,
    #[error("answer {answer} not present in the prediction set of {question_id}")]
    UnknownAnswer { question_id: String, answer: String },
    #[error("question {0} referenced by variants but not provided")]
    UnknownQuestion(String),
    #[error("invalid threshold policy: {0}")]
    InvalidPolicy(String),
}

impl ScoringError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptyAnswerSet => "EmptyAnswerSet",
            Self::EmptyInput => "EmptyInput",
            Self::UnknownAnswer { .. } => "UnknownAnswer",
            Self::UnknownQuestion(_) => "UnknownQuestion",
            Self::InvalidPolicy(_) => "InvalidPolicy",
        }
    }
}

/// Permutation- and normalization-invariant representation of an answer.
/// Supervisor outputs with no extractable answer map to `Unparseable`, which
/// still occupies probability mass in the prediction distribution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum CanonicalValue {
    Choice(usize),
    Text(String),
    Unparseable,
}

impl CanonicalValue {
    /// Compact string form used as report keys and display labels.
    pub fn key(&self) -> String {
        match self {
            Self::Choice(i) => format!("choice:{i}"),
            Self::Text(t) => format!("text:{t}"),
            Self::Unparseable => "unparseable".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub value: CanonicalValue,
    pub raw_text: String,
}

/// The deduplicated prediction set with empirical probabilities. Support is
/// ordered by first appearance in the answer sequence; every probability is a
/// multiple of `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution<F: Real = Scalar> {
    pub question_id: String,
    pub support: Vec<CanonicalValue>,
    pub probs: Vec<F>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuestion<F: Real = Scalar> {
    pub question_id: String,
    pub dist: PredictionDistribution<F>,
    /// Shannon entropy of the prediction distribution, in nats.
    pub entropy: F,
    /// Reliability weight per variant, aligned with variant_index.
    pub per_variant_weight: Vec<F>,
    pub retained: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Entropy percentile at or below which a question is retained.
    pub percentile: f64,
    /// Softmax temperature for reliability weights.
    pub temperature: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            percentile: 50.0,
            temperature: 0.2,
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.percentile.is_nan() || self.percentile <= 0.0 || self.percentile > 100.0 {
            return Err(ScoringError::InvalidPolicy(format!(
                "percentile must be in (0, 100], got {}",
                self.percentile
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(ScoringError::InvalidPolicy(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

static LETTER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Z]\b").unwrap());
static NUMERAL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?\d[\d,]*(?:\.\d+)?").unwrap());

/// Maps a raw supervisor output to canonical form.
///
/// Multiple-choice: the first standalone capital letter is decoded through the
/// variant's decode map to the original choice index. Generation: the first
/// line is trimmed, lowercased and whitespace-collapsed, then the first
/// numeral token is taken with thousands separators removed (a trailing
/// percent or currency sign is not part of the token). Anything without an
/// extractable answer becomes the distinguished unparseable value.
pub fn canonicalize(raw: &RawAnswer, question: &Question, variant: &PromptVariant) -> CanonicalAnswer {
    debug_assert_eq!(raw.question_id, variant.question_id);
    debug_assert_eq!(raw.variant_index, variant.variant_index);
    let value = match question.kind {
        QuestionKind::MultipleChoice => LETTER_RE
            .find(&raw.text)
            .and_then(|m| variant.decode_map.get(m.as_str()))
            .map(|&idx| CanonicalValue::Choice(idx))
            .unwrap_or(CanonicalValue::Unparseable),
        QuestionKind::Generation => normalize_generation_answer(&raw.text)
            .map(CanonicalValue::Text)
            .unwrap_or(CanonicalValue::Unparseable),
    };
    CanonicalAnswer {
        value,
        raw_text: raw.text.clone(),
    }
}

/// Normalizes the gold answer of a question to canonical form for comparison
/// against canonicalized supervisor answers.
pub fn gold_canonical(question: &Question) -> Option<CanonicalValue> {
    match &question.gold {
        Some(crate::variation::Gold::Index(i)) => Some(CanonicalValue::Choice(*i)),
        Some(crate::variation::Gold::Text(t)) => Some(
            normalize_generation_answer(t)
                .map(CanonicalValue::Text)
                .unwrap_or(CanonicalValue::Unparseable),
        ),
        None => None,
    }
}

fn normalize_generation_answer(text: &str) -> Option<String> {
    let first_line = text.trim().lines().next().unwrap_or("");
    let collapsed = first_line
        .trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    NUMERAL_RE
        .find(&collapsed)
        .map(|m| m.as_str().replace(',', ""))
}

/// Builds the empirical distribution over the deduplicated prediction set:
/// `p(y_k) = count(y_k) / n`, support ordered by first appearance.
pub fn empirical_distribution<F: Real>(
    question_id: &str,
    answers: &[CanonicalValue],
) -> Result<PredictionDistribution<F>, ScoringError> {
    if answers.is_empty() {
        return Err(ScoringError::EmptyAnswerSet);
    }
    let mut support: Vec<CanonicalValue> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for answer in answers {
        match support.iter().position(|s| s == answer) {
            Some(k) => counts[k] += 1,
            None => {
                support.push(answer.clone());
                counts.push(1);
            }
        }
    }
    let n = answers.len();
    let n_f = F::from_usize(n).unwrap();
    let probs = counts
        .iter()
        .map(|&c| F::from_usize(c).unwrap() / n_f)
        .collect();
    Ok(PredictionDistribution {
        question_id: question_id.to_string(),
        support,
        probs,
        n,
    })
}

/// Shannon entropy of the prediction distribution in nats, with `0 ln 0 = 0`.
pub fn entropy_score<F: Real>(dist: &PredictionDistribution<F>) -> F {
    dist.probs.iter().fold(F::zero(), |acc, &p| {
        if p > F::zero() {
            acc - p * p.ln()
        } else {
            acc
        }
    })
}

/// Nearest-rank percentile: sort ascending and take the value at 1-based index
/// `ceil(percentile/100 * n)`.
pub fn select_threshold<F: Real>(
    entropies: &[F],
    policy: &ThresholdPolicy,
) -> Result<F, ScoringError> {
    policy.validate()?;
    if entropies.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("entropies must be finite"));
    let n = sorted.len();
    let rank = ((policy.percentile / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Marks each question retained iff its entropy is at or below `tau`. Ties at
/// the threshold are retained.
pub fn filter_by_uncertainty<F: Real>(
    mut scored: Vec<ScoredQuestion<F>>,
    tau: F,
) -> Vec<ScoredQuestion<F>> {
    for sq in &mut scored {
        sq.retained = sq.entropy <= tau;
    }
    scored
}

/// Reliability weight per variant: the temperature softmax over the support's
/// empirical probabilities, evaluated at each variant's answer. Computed with
/// max-subtraction; variants sharing a canonical answer share a weight.
pub fn reliability_weights<F: Real>(
    dist: &PredictionDistribution<F>,
    answers: &[CanonicalValue],
    temperature: F,
) -> Result<Vec<F>, ScoringError> {
    if temperature.is_nan() || temperature <= F::zero() {
        return Err(ScoringError::InvalidPolicy(format!(
            "temperature must be positive, got {temperature:?}"
        )));
    }
    let max = dist
        .probs
        .iter()
        .fold(F::neg_infinity(), |m, &p| if p > m { p } else { m });
    let exps: Vec<F> = dist
        .probs
        .iter()
        .map(|&p| ((p - max) / temperature).exp())
        .collect();
    let denom = exps.iter().fold(F::zero(), |a, &e| a + e);
    answers
        .iter()
        .map(|answer| {
            dist.support
                .iter()
                .position(|s| s == answer)
                .map(|k| exps[k] / denom)
                .ok_or_else(|| ScoringError::UnknownAnswer {
                    question_id: dist.question_id.clone(),
                    answer: answer.key(),
                })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScoreRunOutput<F: Real = Scalar> {
    pub scored: Vec<ScoredQuestion<F>>,
    pub tau: F,
    /// Canonical answers per question, aligned with variant_index.
    pub answers: BTreeMap<String, Vec<CanonicalValue>>,
    /// Questions dropped because their answer multiset was incomplete.
    pub skipped: Vec<String>,
}

/// Scores a completed run: canonicalizes every answer, builds the per-question
/// distributions, selects the global entropy threshold and applies it.
///
/// A question whose answer set is incomplete (a variant failed) is dropped
/// before threshold selection: a partial multiset would bias the empirical
/// probabilities.
pub fn score_run<F: Real>(
    questions: &[Question],
    variants: &[PromptVariant],
    raw_answers: &[RawAnswer],
    policy: &ThresholdPolicy,
) -> Result<ScoreRunOutput<F>, ScoringError> {
    policy.validate()?;
    let question_index: BTreeMap<&str, &Question> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut variants_by_q: BTreeMap<&str, Vec<&PromptVariant>> = BTreeMap::new();
    for v in variants {
        variants_by_q.entry(v.question_id.as_str()).or_default().push(v);
    }
    let mut answer_index: BTreeMap<(&str, usize), &RawAnswer> = BTreeMap::new();
    for a in raw_answers {
        answer_index.insert((a.question_id.as_str(), a.variant_index), a);
    }

    let mut scored = Vec::new();
    let mut answers_out = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, mut q_variants) in variants_by_q {
        let question = question_index
            .get(qid)
            .ok_or_else(|| ScoringError::UnknownQuestion(qid.to_string()))?;
        q_variants.sort_by_key(|v| v.variant_index);
        let raws: Vec<&RawAnswer> = q_variants
            .iter()
            .filter_map(|v| answer_index.get(&(qid, v.variant_index)).copied())
            .collect();
        if raws.len() != q_variants.len() {
            tracing::warn!(question_id = qid, "incomplete answer multiset, dropping question");
            skipped.push(qid.to_string());
            continue;
        }
        let canon: Vec<CanonicalValue> = raws
            .iter()
            .zip(&q_variants)
            .map(|(raw, variant)| canonicalize(raw, question, variant).value)
            .collect();
        let dist = empirical_distribution::<F>(qid, &canon)?;
        let entropy = entropy_score(&dist);
        let per_variant_weight =
            reliability_weights(&dist, &canon, F::from_f64(policy.temperature).unwrap())?;
        answers_out.insert(qid.to_string(), canon);
        scored.push(ScoredQuestion {
            question_id: qid.to_string(),
            dist,
            entropy,
            per_variant_weight,
            retained: false,
        });
    }
    if scored.is_empty() {
        return Err(ScoringError::EmptyAnswerSet);
    }
    let entropies: Vec<F> = scored.iter().map(|s| s.entropy).collect();
    let tau = select_threshold(&entropies, policy)?;
    let scored = filter_by_uncertainty(scored, tau);
    Ok(ScoreRunOutput {
        scored,
        tau,
        answers: answers_out,
        skipped,
    })
}
