//! Corpus ingestion and stage persistence. Every pipeline stage reads and
//! writes line-delimited JSON records; floats in stage files carry nine
//! significant digits so reruns are byte-identical.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{CanonicalValue, ScoredQuestion};
use crate::supervisor::RawAnswer;
use crate::variation::{Gold, PromptVariant, Question, QuestionKind};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file is empty")]
    EmptyCorpus,
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate question id {0}")]
    DuplicateId(String),
    #[error("invalid question {id}: {message}")]
    InvalidQuestion { id: String, message: String },
    #[error("no training examples to emit")]
    EmptyTrainingSet,
    #[error("sample budget must be at least 1")]
    InvalidBudget,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptyCorpus => "EmptyCorpus",
            Self::ParseError { .. } => "ParseError",
            Self::DuplicateId(_) => "DuplicateId",
            Self::InvalidQuestion { .. } => "InvalidQuestion",
            Self::EmptyTrainingSet => "EmptyTrainingSet",
            Self::InvalidBudget => "InvalidBudget",
            Self::Io { .. } => "Io",
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Rounds to nine significant digits; stage files serialize the rounded value.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// On-disk form of a question: the domain fields plus its split assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub kind: QuestionKind,
    pub stem: String,
    #[serde(default)]
    pub choices: Vec<String>,
    #[serde(default)]
    pub gold: Option<Gold>,
    #[serde(default)]
    pub subject: Option<String>,
    pub split: Split,
}

impl QuestionRecord {
    pub fn new(question: Question, split: Split) -> Self {
        Self {
            id: question.id,
            kind: question.kind,
            stem: question.stem,
            choices: question.choices,
            gold: question.gold,
            subject: question.subject,
            split,
        }
    }

    pub fn into_question(self) -> (Question, Split) {
        (
            Question {
                id: self.id,
                kind: self.kind,
                stem: self.stem,
                choices: self.choices,
                gold: self.gold,
                subject: self.subject,
            },
            self.split,
        )
    }
}

/// The three splits: `val` questions are the ones sent to the weak
/// supervisor; `test` questions keep gold answers for evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Question>,
    pub val: Vec<Question>,
    pub test: Vec<Question>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &Question> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

/// Loads and validates a questions.jsonl corpus.
pub fn load_questions(path: &Path) -> Result<DatasetBundle, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut bundle = DatasetBundle::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::ParseError {
                line: line_no,
                message: e.to_string(),
            })?;
        let (question, split) = record.into_question();
        if !seen.insert(question.id.clone()) {
            return Err(CorpusError::DuplicateId(question.id));
        }
        question.validate().map_err(|message| CorpusError::InvalidQuestion {
            id: question.id.clone(),
            message,
        })?;
        match split {
            Split::Train => bundle.train.push(question),
            Split::Val => bundle.val.push(question),
            Split::Test => bundle.test.push(question),
        }
    }
    if bundle.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(bundle)
}

/// Writes a corpus in canonical order (train, then val, then test).
pub fn save_questions(path: &Path, bundle: &DatasetBundle) -> Result<(), CorpusError> {
    let records = bundle
        .train
        .iter()
        .map(|q| QuestionRecord::new(q.clone(), Split::Train))
        .chain(bundle.val.iter().map(|q| QuestionRecord::new(q.clone(), Split::Val)))
        .chain(bundle.test.iter().map(|q| QuestionRecord::new(q.clone(), Split::Test)))
        .collect::<Vec<_>>();
    write_jsonl(path, &records)
}

/// Generic JSONL reader; reports the first malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes records as JSONL via a temporary file promoted atomically, so an
/// interrupted run never leaves a partial stage file behind.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut writer = BufWriter::new(file);
        for record in records {
            serde_json::to_writer(&mut writer, record)
                .map_err(|e| io_err(path, std::io::Error::other(e)))?;
            writer.write_all(b"\n").map_err(|e| io_err(path, e))?;
        }
        writer.flush().map_err(|e| io_err(path, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// answers.jsonl record. Stage files must be byte-identical across reruns, so
/// the wall-clock latency is zeroed on write; measured latencies are reported
/// through the log instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub variant_index: usize,
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

pub fn write_answers(path: &Path, answers: &[RawAnswer]) -> Result<(), CorpusError> {
    let records: Vec<AnswerRecord> = answers
        .iter()
        .map(|a| AnswerRecord {
            question_id: a.question_id.clone(),
            variant_index: a.variant_index,
            text: a.text.clone(),
            latency_ms: 0,
            attempt_count: a.attempt_count,
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_answers(path: &Path) -> Result<Vec<RawAnswer>, CorpusError> {
    Ok(read_jsonl::<AnswerRecord>(path)?
        .into_iter()
        .map(|r| RawAnswer {
            question_id: r.question_id,
            variant_index: r.variant_index,
            text: r.text,
            latency_ms: r.latency_ms,
            attempt_count: r.attempt_count,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportEntry {
    pub answer: CanonicalValue,
    pub prob: f64,
}

/// scored.jsonl record: the per-question distribution, entropy, the global
/// threshold, the filter verdict and the per-variant reliability weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub question_id: String,
    pub n: usize,
    pub support: Vec<SupportEntry>,
    pub entropy: f64,
    pub tau: f64,
    pub retained: bool,
    pub per_variant_weight: Vec<f64>,
}

impl ScoredRecord {
    pub fn new(sq: &ScoredQuestion<Scalar>, tau: Scalar) -> Self {
        Self {
            question_id: sq.question_id.clone(),
            n: sq.dist.n,
            support: sq
                .dist
                .support
                .iter()
                .zip(&sq.dist.probs)
                .map(|(answer, &prob)| SupportEntry {
                    answer: answer.clone(),
                    prob: sig9(prob),
                })
                .collect(),
            entropy: sig9(sq.entropy),
            tau: sig9(tau),
            retained: sq.retained,
            per_variant_weight: sq.per_variant_weight.iter().map(|&w| sig9(w)).collect(),
        }
    }
}

pub fn write_scored(path: &Path, scored: &[ScoredQuestion<Scalar>], tau: Scalar) -> Result<(), CorpusError> {
    let records: Vec<ScoredRecord> = scored.iter().map(|sq| ScoredRecord::new(sq, tau)).collect();
    write_jsonl(path, &records)
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredRecord>, CorpusError> {
    read_jsonl(path)
}

/// One (prompt, completion, weight) unit of the weighted SFT dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub question_id: String,
    pub variant_index: usize,
    pub prompt: String,
    pub completion: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitMode {
    /// One pair per question: variant 0 with its answer, weight 1.
    Naive,
    /// All pairs of retained questions, weight 1.
    Filtered,
    /// All pairs of all questions, weighted by reliability.
    Reweighted,
}

/// Renders a canonical answer as the training target string. Choice answers
/// use the letter of the original choice order so that the same underlying
/// answer trains the same target under every permutation.
pub fn render_training_target(value: &CanonicalValue) -> String {
    match value {
        CanonicalValue::Choice(i) => crate::variation::display_letter(*i),
        CanonicalValue::Text(t) => t.clone(),
        CanonicalValue::Unparseable => "<unparseable>".to_string(),
    }
}

/// Builds the weighted SFT dataset for one emission mode. `variants` and
/// `answers` are keyed by question id and aligned by variant index.
pub fn emit_weighted_sft(
    scored: &[ScoredQuestion<Scalar>],
    variants: &BTreeMap<String, Vec<PromptVariant>>,
    answers: &BTreeMap<String, Vec<CanonicalValue>>,
    mode: EmitMode,
) -> Result<Vec<WeightedExample>, CorpusError> {
    let mut out = Vec::new();
    for sq in scored {
        let Some(q_variants) = variants.get(&sq.question_id) else { continue };
        let Some(q_answers) = answers.get(&sq.question_id) else { continue };
        let take = |i: usize, weight: f64, out: &mut Vec<WeightedExample>| {
            out.push(WeightedExample {
                question_id: sq.question_id.clone(),
                variant_index: q_variants[i].variant_index,
                prompt: q_variants[i].rendered_prompt.clone(),
                completion: render_training_target(&q_answers[i]),
                weight: sig9(weight),
            });
        };
        match mode {
            EmitMode::Naive => take(0, 1.0, &mut out),
            EmitMode::Filtered => {
                if sq.retained {
                    for i in 0..q_variants.len() {
                        take(i, 1.0, &mut out);
                    }
                }
            }
            EmitMode::Reweighted => {
                for i in 0..q_variants.len() {
                    take(i, sq.per_variant_weight[i], &mut out);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyTrainingSet);
    }
    Ok(out)
}

/// Uniform sample without replacement, seeded; keeps the original relative
/// order of the selected examples. A budget of at least the input size is the
/// identity.
pub fn sample_to_budget(
    examples: Vec<WeightedExample>,
    budget: usize,
    seed: u64,
) -> Result<Vec<WeightedExample>, CorpusError> {
    if budget == 0 {
        return Err(CorpusError::InvalidBudget);
    }
    if budget >= examples.len() {
        return Ok(examples);
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    // Partial Fisher-Yates: the first `budget` slots are a uniform sample.
    for i in 0..budget {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen = indices[..budget].to_vec();
    chosen.sort_unstable();
    let keep: std::collections::HashSet<usize> = chosen.into_iter().collect();
    Ok(examples
        .into_iter()
        .enumerate()
        .filter_map(|(i, ex)| keep.contains(&i).then_some(ex))
        .collect())
}

pub fn write_weighted(path: &Path, examples: &[WeightedExample]) -> Result<(), CorpusError> {
    write_jsonl(path, examples)
}

pub fn read_weighted(path: &Path) -> Result<Vec<WeightedExample>, CorpusError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::PredictionDistribution;

    fn mc(id: &str, gold: usize) -> Question {
        Question {
            id: id.into(),
            kind: QuestionKind::MultipleChoice,
            stem: format!("what about {id}?"),
            choices: (0..4).map(|i| format!("opt-{i}")).collect(),
            gold: Some(Gold::Index(gold)),
            subject: Some("testing".into()),
        }
    }

    fn gen(id: &str, gold: &str) -> Question {
        Question {
            id: id.into(),
            kind: QuestionKind::Generation,
            stem: format!("compute {id}"),
            choices: vec![],
            gold: Some(Gold::Text(gold.into())),
            subject: None,
        }
    }

    fn fixture_bundle() -> DatasetBundle {
        DatasetBundle {
            train: vec![mc("t1", 0), gen("t2", "5"), mc("t3", 2), gen("t4", "7")],
            val: vec![mc("v1", 1), mc("v2", 3), gen("v3", "12"), mc("v4", 0)],
            test: vec![mc("s1", 2), gen("s2", "9"), mc("s3", 1), gen("s4", "4")],
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("questions.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_questions(&path), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn single_record_lands_in_its_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("questions.jsonl");
        let bundle = DatasetBundle { val: vec![mc("q1", 0)], ..Default::default() };
        save_questions(&path, &bundle).unwrap();
        let loaded = load_questions(&path).unwrap();
        assert_eq!(loaded.val.len(), 1);
        assert!(loaded.train.is_empty() && loaded.test.is_empty());
    }

    #[test]
    fn fixture_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_questions(&a, &fixture_bundle()).unwrap();
        let loaded = load_questions(&a).unwrap();
        save_questions(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn duplicate_ids_and_bad_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("questions.jsonl");
        let mut bundle = fixture_bundle();
        bundle.test.push(mc("t1", 0));
        save_questions(&path, &bundle).unwrap();
        assert!(matches!(load_questions(&path), Err(CorpusError::DuplicateId(id)) if id == "t1"));

        std::fs::write(&path, "{\"id\": \"q1\"\n").unwrap();
        match load_questions(&path) {
            Err(CorpusError::ParseError { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn scored(id: &str, retained: bool, weights: &[f64]) -> ScoredQuestion<Scalar> {
        ScoredQuestion {
            question_id: id.into(),
            dist: PredictionDistribution {
                question_id: id.into(),
                support: vec![CanonicalValue::Choice(0)],
                probs: vec![1.0],
                n: weights.len(),
            },
            entropy: 0.0,
            per_variant_weight: weights.to_vec(),
            retained,
        }
    }

    fn variant(id: &str, i: usize) -> PromptVariant {
        PromptVariant {
            question_id: id.into(),
            variant_index: i,
            rendered_prompt: format!("prompt {id}/{i}"),
            decode_map: BTreeMap::new(),
        }
    }

    type EmitInputs = (
        Vec<ScoredQuestion<Scalar>>,
        BTreeMap<String, Vec<PromptVariant>>,
        BTreeMap<String, Vec<CanonicalValue>>,
    );

    fn emit_inputs(
        n_questions: usize,
        n_variants: usize,
        retained: impl Fn(usize) -> bool,
    ) -> EmitInputs {
        let mut scored_v = Vec::new();
        let mut variants = BTreeMap::new();
        let mut answers = BTreeMap::new();
        for q in 0..n_questions {
            let id = format!("q{q:02}");
            scored_v.push(scored(&id, retained(q), &vec![0.5; n_variants]));
            variants.insert(id.clone(), (0..n_variants).map(|i| variant(&id, i)).collect());
            answers.insert(id.clone(), vec![CanonicalValue::Choice(0); n_variants]);
        }
        (scored_v, variants, answers)
    }

    #[test]
    fn naive_mode_emits_variant_zero_with_unit_weight() {
        let (scored_v, variants, answers) = emit_inputs(10, 5, |_| false);
        let out = emit_weighted_sft(&scored_v, &variants, &answers, EmitMode::Naive).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|e| e.variant_index == 0 && e.weight == 1.0));
    }

    #[test]
    fn filtered_mode_keeps_all_pairs_of_retained_questions() {
        let (scored_v, variants, answers) = emit_inputs(5, 5, |q| q < 3);
        let out = emit_weighted_sft(&scored_v, &variants, &answers, EmitMode::Filtered).unwrap();
        assert_eq!(out.len(), 15);
        assert!(out.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn reweighted_mode_carries_reliability_weights() {
        let (mut scored_v, variants, answers) = emit_inputs(2, 3, |_| false);
        scored_v[0].per_variant_weight = vec![1.0, 1.0, 1.0]; // unanimous question
        let out = emit_weighted_sft(&scored_v, &variants, &answers, EmitMode::Reweighted).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out[..3].iter().all(|e| e.weight == 1.0));
        assert!(out[3..].iter().all(|e| e.weight == 0.5));
    }

    #[test]
    fn empty_emission_is_an_error() {
        let (scored_v, variants, answers) = emit_inputs(4, 5, |_| false);
        let err = emit_weighted_sft(&scored_v, &variants, &answers, EmitMode::Filtered).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyTrainingSet));
    }

    fn dummy_examples(n: usize) -> Vec<WeightedExample> {
        (0..n)
            .map(|i| WeightedExample {
                question_id: format!("q{i}"),
                variant_index: 0,
                prompt: "p".into(),
                completion: "c".into(),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn sampling_respects_budget_and_seed() {
        let examples = dummy_examples(100);
        assert_eq!(sample_to_budget(examples.clone(), 200, 0).unwrap().len(), 100);
        assert!(matches!(
            sample_to_budget(examples.clone(), 0, 0),
            Err(CorpusError::InvalidBudget)
        ));
        let a = sample_to_budget(examples.clone(), 40, 1).unwrap();
        let b = sample_to_budget(examples.clone(), 40, 2).unwrap();
        let a_again = sample_to_budget(examples, 40, 1).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(b.len(), 40);
        assert_eq!(a, a_again);
        assert_ne!(a, b);
        // No duplicates in a sample.
        let ids: std::collections::HashSet<_> = a.iter().map(|e| e.question_id.clone()).collect();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn sig9_keeps_nine_significant_digits() {
        assert_eq!(sig9(0.0), 0.0);
        assert_eq!(sig9(0.5), 0.5);
        assert_eq!(sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(sig9(123456789.123), 123456789.0);
        assert_eq!(sig9(0.4223187982515182), 0.422318798);
    }

    #[test]
    fn training_target_rendering() {
        assert_eq!(render_training_target(&CanonicalValue::Choice(2)), "C");
        assert_eq!(render_training_target(&CanonicalValue::Text("42".into())), "42");
        assert_eq!(render_training_target(&CanonicalValue::Unparseable), "<unparseable>");
    }
}
