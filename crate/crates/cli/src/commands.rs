//! The composable pipeline stages. Each command reads its input stage files
//! (verifying digests against the manifest), writes its outputs atomically,
//! and records the stage in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use w2s_core::corpus::{
    emit_weighted_sft, load_questions, read_answers, read_jsonl, read_scored, read_weighted,
    sample_to_budget, save_questions, write_answers, write_jsonl, write_scored, write_weighted,
    EmitMode, Split,
};
use w2s_core::evalsuite::{
    entropy_bucket_report, pgr, reliability_matrix_report, render_markdown, EvalReport,
    MethodResult, Pgr,
};
use w2s_core::scoring::{
    canonicalize, score_run, CanonicalValue, PredictionDistribution, ScoredQuestion,
    ThresholdPolicy,
};
use w2s_core::supervisor::{
    query_supervisor, EndpointConfig, HttpParaphraser, RawAnswer,
};
use w2s_core::trainer::{load_model, save_model, train_on_examples, TrainConfig};
use w2s_core::variation::{
    generate_variants, ParaphraseSource, Paraphraser, PromptVariant, Question,
    RuleBasedParaphraser, VariationPlan,
};

use crate::manifest::RunManifest;

pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const VARIANTS_FILE: &str = "variants.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const FAILURES_FILE: &str = "query_failures.jsonl";
pub const SCORED_FILE: &str = "scored.jsonl";
pub const WEIGHTED_FILE: &str = "weighted_sft.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";

fn open_manifest(run_dir: &Path, seed: u64) -> anyhow::Result<RunManifest> {
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run dir {}", run_dir.display()))?;
    Ok(RunManifest::load_or_new(run_dir, &format!("run-seed{seed}"))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariateOpts {
    pub questions: std::path::PathBuf,
    pub n_variants: usize,
    pub split: Split,
    pub paraphrase_source: ParaphraseSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EndpointConfig>,
    pub seed: u64,
}

/// Copies the validated corpus into the run directory and generates prompt
/// variants for the selected split.
pub fn run_variate(run_dir: &Path, opts: &VariateOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let bundle = load_questions(&opts.questions)
        .with_context(|| format!("loading {}", opts.questions.display()))?;
    save_questions(&run_dir.join(QUESTIONS_FILE), &bundle)?;

    let selected: &[Question] = match opts.split {
        Split::Train => &bundle.train,
        Split::Val => &bundle.val,
        Split::Test => &bundle.test,
    };
    let plan = VariationPlan {
        n_variants: opts.n_variants,
        seed: opts.seed,
        paraphrase_source: opts.paraphrase_source,
    };
    let provider: Box<dyn Paraphraser> = match opts.paraphrase_source {
        ParaphraseSource::RuleBased => Box::new(RuleBasedParaphraser),
        ParaphraseSource::ExternalProvider => Box::new(HttpParaphraser {
            cfg: opts.endpoint.clone().context(
                "paraphrase source external-provider requires endpoint settings (--base-url)",
            )?,
        }),
    };
    let mut variants = Vec::with_capacity(selected.len() * opts.n_variants);
    for question in selected {
        variants.extend(generate_variants(question, &plan, provider.as_ref())?);
    }
    write_jsonl(&run_dir.join(VARIANTS_FILE), &variants)?;

    let questions_digest = manifest.verify_input(run_dir, QUESTIONS_FILE)?;
    manifest.record_stage(
        run_dir,
        "variate",
        serde_json::to_value(opts)?,
        [(QUESTIONS_FILE.to_string(), questions_digest)].into_iter().collect(),
        &[VARIANTS_FILE],
    )?;
    manifest.save(run_dir)?;
    tracing::info!(variants = variants.len(), "variate stage complete");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOpts {
    pub endpoint: EndpointConfig,
    pub seed: u64,
}

/// Queries the weak supervisor for every variant. Failures become explicit
/// records in their own stage file and their questions are later dropped from
/// scoring.
pub fn run_query(run_dir: &Path, opts: &QueryOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let variants_digest = manifest.verify_input(run_dir, VARIANTS_FILE)?;
    let variants: Vec<PromptVariant> = read_jsonl(&run_dir.join(VARIANTS_FILE))?;
    let output = query_supervisor(&variants, &opts.endpoint)?;
    for failure in &output.failures {
        tracing::warn!(
            question_id = %failure.question_id,
            variant_index = failure.variant_index,
            kind = ?failure.kind,
            attempts = failure.attempt_count,
            "variant query failed"
        );
    }
    if let Some(mean_latency) = mean_latency_ms(&output.answers) {
        tracing::info!(answers = output.answers.len(), mean_latency_ms = mean_latency, "query stage complete");
    }
    write_answers(&run_dir.join(ANSWERS_FILE), &output.answers)?;
    write_jsonl(&run_dir.join(FAILURES_FILE), &output.failures)?;

    manifest.record_stage(
        run_dir,
        "query",
        serde_json::to_value(opts)?,
        [(VARIANTS_FILE.to_string(), variants_digest)].into_iter().collect(),
        &[ANSWERS_FILE, FAILURES_FILE],
    )?;
    manifest.save(run_dir)?;
    Ok(())
}

fn mean_latency_ms(answers: &[RawAnswer]) -> Option<u64> {
    if answers.is_empty() {
        return None;
    }
    Some(answers.iter().map(|a| a.latency_ms).sum::<u64>() / answers.len() as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreOpts {
    pub percentile: f64,
    pub temperature: f64,
    pub seed: u64,
}

pub fn run_score(run_dir: &Path, opts: &ScoreOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let mut inputs = BTreeMap::new();
    for file in [QUESTIONS_FILE, VARIANTS_FILE, ANSWERS_FILE] {
        inputs.insert(file.to_string(), manifest.verify_input(run_dir, file)?);
    }
    let bundle = load_questions(&run_dir.join(QUESTIONS_FILE))?;
    let questions: Vec<Question> = bundle.all().cloned().collect();
    let variants: Vec<PromptVariant> = read_jsonl(&run_dir.join(VARIANTS_FILE))?;
    let answers = read_answers(&run_dir.join(ANSWERS_FILE))?;
    let policy = ThresholdPolicy {
        percentile: opts.percentile,
        temperature: opts.temperature,
    };
    let scoring = score_run::<f64>(&questions, &variants, &answers, &policy)?;
    if !scoring.skipped.is_empty() {
        tracing::warn!(dropped = scoring.skipped.len(), "questions dropped for incomplete answers");
    }
    write_scored(&run_dir.join(SCORED_FILE), &scoring.scored, scoring.tau)?;

    manifest.record_stage(run_dir, "score", serde_json::to_value(opts)?, inputs, &[SCORED_FILE])?;
    manifest.save(run_dir)?;
    tracing::info!(
        scored = scoring.scored.len(),
        retained = scoring.scored.iter().filter(|s| s.retained).count(),
        tau = scoring.tau,
        "score stage complete"
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EmitOpts {
    pub mode: EmitMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub seed: u64,
}

/// Rebuilds the scored questions and canonical answers from the stage files
/// and emits the weighted SFT dataset. Weights come from scored.jsonl bit for
/// bit.
pub fn run_emit(run_dir: &Path, opts: &EmitOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let mut inputs = BTreeMap::new();
    for file in [QUESTIONS_FILE, VARIANTS_FILE, ANSWERS_FILE, SCORED_FILE] {
        inputs.insert(file.to_string(), manifest.verify_input(run_dir, file)?);
    }
    let (scored, variants_map, answers_map) = load_scoring_stage(run_dir)?;
    let mut examples = emit_weighted_sft(&scored, &variants_map, &answers_map, opts.mode)?;
    if let Some(budget) = opts.budget {
        examples = sample_to_budget(examples, budget, opts.seed)?;
    }
    write_weighted(&run_dir.join(WEIGHTED_FILE), &examples)?;

    manifest.record_stage(run_dir, "emit", serde_json::to_value(opts)?, inputs, &[WEIGHTED_FILE])?;
    manifest.save(run_dir)?;
    tracing::info!(examples = examples.len(), mode = ?opts.mode, "emit stage complete");
    Ok(())
}

type ScoringStage = (
    Vec<ScoredQuestion<f64>>,
    BTreeMap<String, Vec<PromptVariant>>,
    BTreeMap<String, Vec<CanonicalValue>>,
);

/// Reconstructs scored questions, grouped variants and canonical answers from
/// the stage files.
fn load_scoring_stage(run_dir: &Path) -> anyhow::Result<ScoringStage> {
    let bundle = load_questions(&run_dir.join(QUESTIONS_FILE))?;
    let question_index: BTreeMap<String, Question> =
        bundle.all().map(|q| (q.id.clone(), q.clone())).collect();
    let variants: Vec<PromptVariant> = read_jsonl(&run_dir.join(VARIANTS_FILE))?;
    let mut variants_map: BTreeMap<String, Vec<PromptVariant>> = BTreeMap::new();
    for v in variants {
        variants_map.entry(v.question_id.clone()).or_default().push(v);
    }
    for list in variants_map.values_mut() {
        list.sort_by_key(|v| v.variant_index);
    }

    let answers = read_answers(&run_dir.join(ANSWERS_FILE))?;
    let answer_index: BTreeMap<(String, usize), RawAnswer> = answers
        .into_iter()
        .map(|a| ((a.question_id.clone(), a.variant_index), a))
        .collect();
    let mut answers_map: BTreeMap<String, Vec<CanonicalValue>> = BTreeMap::new();
    for (qid, q_variants) in &variants_map {
        let Some(question) = question_index.get(qid) else { continue };
        let canon: Option<Vec<CanonicalValue>> = q_variants
            .iter()
            .map(|v| {
                answer_index
                    .get(&(qid.clone(), v.variant_index))
                    .map(|raw| canonicalize(raw, question, v).value)
            })
            .collect();
        if let Some(canon) = canon {
            answers_map.insert(qid.clone(), canon);
        }
    }

    let scored: Vec<ScoredQuestion<f64>> = read_scored(&run_dir.join(SCORED_FILE))?
        .into_iter()
        .map(|r| ScoredQuestion {
            question_id: r.question_id.clone(),
            dist: PredictionDistribution {
                question_id: r.question_id,
                support: r.support.iter().map(|s| s.answer.clone()).collect(),
                probs: r.support.iter().map(|s| s.prob).collect(),
                n: r.n,
            },
            entropy: r.entropy,
            per_variant_weight: r.per_variant_weight,
            retained: r.retained,
        })
        .collect();
    Ok((scored, variants_map, answers_map))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOpts {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

pub fn run_train(run_dir: &Path, opts: &TrainOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let weighted_digest = manifest.verify_input(run_dir, WEIGHTED_FILE)?;
    let examples = read_weighted(&run_dir.join(WEIGHTED_FILE))?;
    let cfg = TrainConfig {
        learning_rate: opts.learning_rate,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        seed: opts.seed,
    };
    let (trained, log) = train_on_examples(&examples, &cfg)?;
    save_model(&run_dir.join(MODEL_FILE), &trained)?;
    write_jsonl(&run_dir.join(TRAIN_LOG_FILE), &log)?;

    manifest.record_stage(
        run_dir,
        "train",
        serde_json::to_value(opts)?,
        [(WEIGHTED_FILE.to_string(), weighted_digest)].into_iter().collect(),
        &[MODEL_FILE, TRAIN_LOG_FILE],
    )?;
    manifest.save(run_dir)?;
    let final_loss = log.last().map(|s| s.loss).unwrap_or(f64::NAN);
    tracing::info!(steps = log.len(), final_loss, "train stage complete");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOpts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ceiling_acc: Option<f64>,
    pub buckets: usize,
    pub seed: u64,
}

/// Evaluates the trained model on the test split and assembles the report.
/// PGR is reported when weak and ceiling accuracies are supplied; the
/// diagnostic breakdowns cover the scored (weak-labeled) split when its gold
/// answers are available.
pub fn run_eval(run_dir: &Path, opts: &EvalOpts) -> anyhow::Result<()> {
    let mut manifest = open_manifest(run_dir, opts.seed)?;
    let mut inputs = BTreeMap::new();
    for file in [QUESTIONS_FILE, MODEL_FILE, SCORED_FILE, VARIANTS_FILE, ANSWERS_FILE] {
        inputs.insert(file.to_string(), manifest.verify_input(run_dir, file)?);
    }
    let bundle = load_questions(&run_dir.join(QUESTIONS_FILE))?;
    let trained = load_model(&run_dir.join(MODEL_FILE))?;

    // Test accuracy through unperturbed prompts.
    let plan = VariationPlan { n_variants: 1, seed: opts.seed, ..Default::default() };
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    for question in &bundle.test {
        let Some(gold) = w2s_core::scoring::gold_canonical(question) else { continue };
        let variants = generate_variants(question, &plan, &RuleBasedParaphraser)?;
        let expected = w2s_core::corpus::render_training_target(&gold);
        evaluated += 1;
        if trained.predict_answer(&variants[0].rendered_prompt).as_deref() == Some(expected.as_str()) {
            correct += 1;
        }
    }
    if evaluated == 0 {
        anyhow::bail!("test split has no questions with gold answers");
    }
    let w2s_acc = correct as f64 / evaluated as f64;

    let pgr_for = |acc: f64| -> anyhow::Result<Pgr> {
        match (opts.weak_acc, opts.ceiling_acc) {
            (Some(weak), Some(ceiling)) => Ok(pgr(weak, acc, ceiling)?),
            _ => Ok(Pgr::Undefined),
        }
    };

    let mut report = EvalReport::default();
    if let Some(weak) = opts.weak_acc {
        report.weak = Some(MethodResult { accuracy: weak, pgr: pgr_for(weak)? });
    }
    if let Some(ceiling) = opts.ceiling_acc {
        report.ceiling = Some(MethodResult { accuracy: ceiling, pgr: pgr_for(ceiling)? });
    }
    let result = MethodResult { accuracy: w2s_acc, pgr: pgr_for(w2s_acc)? };
    match emit_mode_of(&manifest) {
        (EmitMode::Naive, _) => report.naive = Some(result),
        (EmitMode::Filtered, false) => report.filtered = Some(result),
        (EmitMode::Filtered, true) => report.filtered_sampled = Some(result),
        (EmitMode::Reweighted, false) => report.reweighted = Some(result),
        (EmitMode::Reweighted, true) => report.reweighted_sampled = Some(result),
    }

    // Diagnostics over the weak-labeled split, when gold is available for it.
    let (scored, _, answers_map) = load_scoring_stage(run_dir)?;
    let gold: BTreeMap<String, CanonicalValue> = bundle
        .all()
        .filter_map(|q| w2s_core::scoring::gold_canonical(q).map(|g| (q.id.clone(), g)))
        .collect();
    if scored.iter().all(|s| gold.contains_key(&s.question_id)) {
        report.entropy_buckets = Some(entropy_bucket_report(&scored, &gold, opts.buckets)?);
        report.reliability_matrix = Some(reliability_matrix_report(&scored, &answers_map, &gold)?);
    } else {
        tracing::warn!("gold answers missing for some scored questions; skipping diagnostics");
    }

    let report_json = serde_json::to_string_pretty(&report)?;
    crate::manifest::write_atomic(&run_dir.join(REPORT_JSON_FILE), report_json.as_bytes())?;
    crate::manifest::write_atomic(
        &run_dir.join(REPORT_MD_FILE),
        render_markdown(&report).as_bytes(),
    )?;

    manifest.record_stage(
        run_dir,
        "eval",
        serde_json::to_value(opts)?,
        inputs,
        &[REPORT_JSON_FILE, REPORT_MD_FILE],
    )?;
    manifest.save(run_dir)?;
    tracing::info!(accuracy = w2s_acc, evaluated, "eval stage complete");
    Ok(())
}

/// Which slot the trained model belongs to, from the recorded emit stage.
fn emit_mode_of(manifest: &RunManifest) -> (EmitMode, bool) {
    let Some(entry) = manifest.stages.get("emit") else {
        return (EmitMode::Naive, false);
    };
    let mode = entry
        .config
        .get("mode")
        .and_then(|m| serde_json::from_value(m.clone()).ok())
        .unwrap_or(EmitMode::Naive);
    let sampled = entry.config.get("budget").is_some();
    (mode, sampled)
}
