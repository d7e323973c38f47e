//! End-to-end simulation: a synthetic multiple-choice corpus is weak-labeled
//! by the seeded simulator, scored, emitted under every mode, used to train
//! the toy model per mode, and evaluated against a gold-trained ceiling.
//!
//! Questions are instances of a fixed pool of stem templates shared across
//! splits, so the bigram model can carry what it learned on the weak-labeled
//! split over to the held-out test split.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use rand::Rng;
use serde::Serialize;

use w2s_core::corpus::{
    emit_weighted_sft, sample_to_budget, save_questions, write_answers, write_scored,
    write_weighted, DatasetBundle, EmitMode, WeightedExample,
};
use w2s_core::evalsuite::{
    entropy_bucket_report, pgr, reliability_matrix_report, render_markdown, EvalReport,
    MethodResult,
};
use w2s_core::scoring::{gold_canonical, score_run, CanonicalValue, ThresholdPolicy};
use w2s_core::supervisor::{simulate_supervisor, SimulatedSupervisorConfig};
use w2s_core::trainer::{train_on_examples, TrainConfig, TrainedModel};
use w2s_core::variation::{
    generate_choice_permutations, Gold, PromptVariant, Question, QuestionKind, VariationPlan,
};

use crate::manifest::{derive_seed, write_atomic, RunManifest};

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOpts {
    pub n_questions: usize,
    pub n_choices: usize,
    /// Number of distinct stem templates shared across splits.
    pub n_templates: usize,
    pub n_variants: usize,
    pub percentile: f64,
    pub temperature: f64,
    pub competence_alpha: f64,
    pub competence_beta: f64,
    pub variant_sensitivity: f64,
    pub fixed_competence: Option<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for SimulateOpts {
    fn default() -> Self {
        Self {
            n_questions: 2000,
            n_choices: 4,
            n_templates: default_templates(2000),
            n_variants: 5,
            percentile: 50.0,
            temperature: 0.2,
            competence_alpha: 4.0,
            competence_beta: 2.0,
            variant_sensitivity: 0.1,
            fixed_competence: None,
            epochs: 3,
            learning_rate: 0.1,
            buckets: 5,
            seed: 0,
        }
    }
}

pub fn default_templates(n_questions: usize) -> usize {
    (n_questions / 13).max(1)
}

/// Synthesizes a corpus of template-instantiated multiple-choice questions:
/// 20% train, 40% val, 40% test, with every template represented in each
/// split (provided the split is at least as large as the template pool).
pub fn synth_corpus(
    n_questions: usize,
    n_choices: usize,
    n_templates: usize,
    seed: u64,
) -> DatasetBundle {
    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let golds: Vec<usize> = (0..n_templates)
        .map(|_| rng.random_range(0..n_choices))
        .collect();

    let n_train = n_questions / 5;
    let n_val = (n_questions - n_train) / 2;
    let n_test = n_questions - n_train - n_val;

    let mut next_id = 0usize;
    let mut build_split = |count: usize| -> Vec<Question> {
        (0..count)
            .map(|i| {
                let template = i % n_templates;
                let id = format!("q{next_id:05}");
                next_id += 1;
                Question {
                    id,
                    kind: QuestionKind::MultipleChoice,
                    stem: format!(
                        "In case {template:03}, which reading matches the recorded outcome?"
                    ),
                    choices: (0..n_choices)
                        .map(|j| format!("reading {template:03}-{j}"))
                        .collect(),
                    gold: Some(Gold::Index(golds[template])),
                    subject: Some(format!("case-{template:03}")),
                }
            })
            .collect()
    };

    DatasetBundle {
        train: build_split(n_train),
        val: build_split(n_val),
        test: build_split(n_test),
    }
}

fn variants_for(
    questions: &[Question],
    n_variants: usize,
    seed: u64,
) -> anyhow::Result<Vec<PromptVariant>> {
    let plan = VariationPlan {
        n_variants,
        seed,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(questions.len() * n_variants);
    for q in questions {
        out.extend(generate_choice_permutations(q, &plan).context("variant generation")?);
    }
    Ok(out)
}

fn group_variants(variants: Vec<PromptVariant>) -> BTreeMap<String, Vec<PromptVariant>> {
    let mut map: BTreeMap<String, Vec<PromptVariant>> = BTreeMap::new();
    for v in variants {
        map.entry(v.question_id.clone()).or_default().push(v);
    }
    for list in map.values_mut() {
        list.sort_by_key(|v| v.variant_index);
    }
    map
}

fn gold_map(questions: &[Question]) -> BTreeMap<String, CanonicalValue> {
    questions
        .iter()
        .filter_map(|q| gold_canonical(q).map(|g| (q.id.clone(), g)))
        .collect()
}

/// Accuracy of a trained model on held-out questions, each asked through its
/// unperturbed prompt.
pub fn model_accuracy(
    trained: &TrainedModel,
    questions: &[Question],
    prompts: &BTreeMap<String, String>,
) -> f64 {
    let mut correct = 0usize;
    for q in questions {
        let Some(gold) = gold_canonical(q) else { continue };
        let expected = w2s_core::corpus::render_training_target(&gold);
        let Some(prompt) = prompts.get(&q.id) else { continue };
        if trained.predict_answer(prompt).as_deref() == Some(expected.as_str()) {
            correct += 1;
        }
    }
    correct as f64 / questions.len() as f64
}

pub struct SimulationArtifacts {
    pub report: EvalReport,
    pub bundle: DatasetBundle,
}

/// Runs the full simulation and writes stage files plus the report into
/// `run_dir`.
pub fn run_simulate(run_dir: &Path, opts: &SimulateOpts) -> anyhow::Result<EvalReport> {
    Ok(simulate_with_artifacts(run_dir, opts)?.report)
}

pub fn simulate_with_artifacts(
    run_dir: &Path,
    opts: &SimulateOpts,
) -> anyhow::Result<SimulationArtifacts> {
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run dir {}", run_dir.display()))?;
    let bundle = synth_corpus(
        opts.n_questions,
        opts.n_choices,
        opts.n_templates,
        derive_seed(opts.seed, "corpus"),
    );
    save_questions(&run_dir.join("questions.jsonl"), &bundle)?;

    // Weak-label the validation split under prompt permutations.
    let val_variants = variants_for(&bundle.val, opts.n_variants, derive_seed(opts.seed, "variate"))?;
    let sim_cfg = SimulatedSupervisorConfig {
        seed: derive_seed(opts.seed, "supervisor"),
        competence_alpha: opts.competence_alpha,
        competence_beta: opts.competence_beta,
        variant_sensitivity: opts.variant_sensitivity,
        fixed_competence: opts.fixed_competence,
    };
    let answers = simulate_supervisor(&val_variants, &bundle.val, &sim_cfg)?;
    w2s_core::corpus::write_jsonl(
        &run_dir.join("variants.jsonl"),
        &val_variants,
    )?;
    write_answers(&run_dir.join("answers.jsonl"), &answers)?;

    let policy = ThresholdPolicy {
        percentile: opts.percentile,
        temperature: opts.temperature,
    };
    let scoring = score_run::<f64>(&bundle.val, &val_variants, &answers, &policy)?;
    write_scored(&run_dir.join("scored.jsonl"), &scoring.scored, scoring.tau)?;

    let variants_map = group_variants(val_variants);
    let naive = emit_weighted_sft(&scoring.scored, &variants_map, &scoring.answers, EmitMode::Naive)?;
    let filtered =
        emit_weighted_sft(&scoring.scored, &variants_map, &scoring.answers, EmitMode::Filtered)?;
    let reweighted = emit_weighted_sft(
        &scoring.scored,
        &variants_map,
        &scoring.answers,
        EmitMode::Reweighted,
    )?;
    let budget = naive.len();
    let filtered_sampled =
        sample_to_budget(filtered.clone(), budget, derive_seed(opts.seed, "sample-filtered"))?;
    let reweighted_sampled =
        sample_to_budget(reweighted.clone(), budget, derive_seed(opts.seed, "sample-reweighted"))?;

    // Strong ceiling: the same single-prompt budget, labeled with gold.
    let ceiling_data: Vec<WeightedExample> = bundle
        .val
        .iter()
        .filter_map(|q| {
            let gold = gold_canonical(q)?;
            let prompt = variants_map.get(&q.id)?.first()?.rendered_prompt.clone();
            Some(WeightedExample {
                question_id: q.id.clone(),
                variant_index: 0,
                prompt,
                completion: w2s_core::corpus::render_training_target(&gold),
                weight: 1.0,
            })
        })
        .collect();

    let datasets: [(&str, &Vec<WeightedExample>); 6] = [
        ("weighted_naive.jsonl", &naive),
        ("weighted_filtered.jsonl", &filtered),
        ("weighted_filtered_sampled.jsonl", &filtered_sampled),
        ("weighted_reweighted.jsonl", &reweighted),
        ("weighted_reweighted_sampled.jsonl", &reweighted_sampled),
        ("weighted_ceiling.jsonl", &ceiling_data),
    ];
    for (name, data) in &datasets {
        write_weighted(&run_dir.join(name), data)?;
    }

    // Weak baseline: the simulator answers the test split's unperturbed
    // prompts directly.
    let test_variants = variants_for(&bundle.test, 1, derive_seed(opts.seed, "variate"))?;
    let test_answers = simulate_supervisor(&test_variants, &bundle.test, &sim_cfg)?;
    let test_gold = gold_map(&bundle.test);
    let test_variant_map = group_variants(test_variants);
    let mut weak_correct = 0usize;
    for q in &bundle.test {
        let variant = &test_variant_map[&q.id][0];
        let answer = test_answers
            .iter()
            .find(|a| a.question_id == q.id && a.variant_index == 0)
            .expect("simulator answers every variant");
        let canon = w2s_core::scoring::canonicalize(answer, q, variant);
        if Some(&canon.value) == test_gold.get(&q.id) {
            weak_correct += 1;
        }
    }
    let weak_acc = weak_correct as f64 / bundle.test.len() as f64;

    // Train one model per mode and evaluate on the test split.
    let train_cfg = TrainConfig {
        learning_rate: opts.learning_rate,
        epochs: opts.epochs,
        batch_size: None,
        seed: derive_seed(opts.seed, "train"),
    };
    let test_prompts: BTreeMap<String, String> = test_variant_map
        .iter()
        .map(|(id, vs)| (id.clone(), vs[0].rendered_prompt.clone()))
        .collect();
    let mut accuracies: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, data) in &datasets {
        let (trained, _) = train_on_examples(data, &train_cfg)?;
        accuracies.insert(name, model_accuracy(&trained, &bundle.test, &test_prompts));
    }
    let ceiling_acc = accuracies["weighted_ceiling.jsonl"];

    let method = |acc: f64| -> anyhow::Result<Option<MethodResult>> {
        Ok(Some(MethodResult {
            accuracy: acc,
            pgr: pgr(weak_acc, acc, ceiling_acc)?,
        }))
    };
    let val_gold = gold_map(&bundle.val);
    let report = EvalReport {
        weak: method(weak_acc)?,
        naive: method(accuracies["weighted_naive.jsonl"])?,
        filtered: method(accuracies["weighted_filtered.jsonl"])?,
        filtered_sampled: method(accuracies["weighted_filtered_sampled.jsonl"])?,
        reweighted: method(accuracies["weighted_reweighted.jsonl"])?,
        reweighted_sampled: method(accuracies["weighted_reweighted_sampled.jsonl"])?,
        ceiling: method(ceiling_acc)?,
        entropy_buckets: Some(entropy_bucket_report(&scoring.scored, &val_gold, opts.buckets)?),
        reliability_matrix: Some(reliability_matrix_report(
            &scoring.scored,
            &scoring.answers,
            &val_gold,
        )?),
    };

    let report_json = serde_json::to_string_pretty(&report)?;
    write_atomic(&run_dir.join("report.json"), report_json.as_bytes())?;
    write_atomic(&run_dir.join("report.md"), render_markdown(&report).as_bytes())?;

    let mut manifest = RunManifest::load_or_new(run_dir, &format!("run-seed{}", opts.seed))?;
    let outputs: Vec<&str> = std::iter::once("questions.jsonl")
        .chain(["variants.jsonl", "answers.jsonl", "scored.jsonl"])
        .chain(datasets.iter().map(|(name, _)| *name))
        .chain(["report.json", "report.md"])
        .collect();
    manifest.record_stage(
        run_dir,
        "simulate",
        serde_json::to_value(opts)?,
        BTreeMap::new(),
        &outputs,
    )?;
    manifest.save(run_dir)?;

    Ok(SimulationArtifacts { report, bundle })
}
