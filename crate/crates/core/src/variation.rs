//! Prompt variation: choice permutations for multiple-choice questions and
//! paraphrases for generation questions, plus the decode maps that let answers
//! given under a perturbed prompt be compared in canonical form.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VariationError {
    #[error("question {question_id} has no choices")]
    EmptyChoices { question_id: String },
    #[error("requested {requested} variants but only {available} permutations exist")]
    TooManyVariants { requested: usize, available: u128 },
    #[error("plan requests zero variants")]
    ZeroVariants,
    #[error("operation requires a {expected:?} question, got {actual:?}")]
    WrongKind {
        expected: QuestionKind,
        actual: QuestionKind,
    },
    #[error("paraphrase provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider returned {got} distinct paraphrases, {requested} requested")]
    InsufficientParaphrases { requested: usize, got: usize },
}

impl VariationError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptyChoices { .. } => "EmptyChoices",
            Self::TooManyVariants { .. } => "TooManyVariants",
            Self::ZeroVariants => "ZeroVariants",
            Self::WrongKind { .. } => "WrongKind",
            Self::ProviderUnavailable(_) => "ProviderUnavailable",
            Self::InsufficientParaphrases { .. } => "InsufficientParaphrases",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    #[serde(rename = "mc")]
    MultipleChoice,
    #[serde(rename = "gen")]
    Generation,
}

/// The reference answer, when known: a choice index for multiple-choice
/// questions, a normalized answer string for generation questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Index(usize),
    Text(String),
}

/// One task instance. Generation questions carry no choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub stem: String,
    #[serde(default)]
    pub choices: Vec<String>,
    #[serde(default)]
    pub gold: Option<Gold>,
    #[serde(default)]
    pub subject: Option<String>,
}

impl Question {
    /// Checks the structural invariants; returns a description of the first
    /// violation, if any.
    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            QuestionKind::MultipleChoice => {
                if self.choices.len() < 2 {
                    return Err(format!(
                        "multiple-choice question needs at least 2 choices, got {}",
                        self.choices.len()
                    ));
                }
                if self.choices.len() > 26 {
                    return Err(format!(
                        "multiple-choice question supports at most 26 choices, got {}",
                        self.choices.len()
                    ));
                }
                match &self.gold {
                    Some(Gold::Index(i)) if *i >= self.choices.len() => {
                        Err(format!("gold index {i} out of range for {} choices", self.choices.len()))
                    }
                    Some(Gold::Text(_)) => {
                        Err("multiple-choice gold must be a choice index".to_string())
                    }
                    _ => Ok(()),
                }
            }
            QuestionKind::Generation => {
                if !self.choices.is_empty() {
                    return Err("generation question must have zero choices".to_string());
                }
                match &self.gold {
                    Some(Gold::Index(_)) => Err("generation gold must be a string".to_string()),
                    Some(Gold::Text(t)) if t.trim().is_empty() => {
                        Err("generation gold must be non-empty".to_string())
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

/// One perturbed prompt for a question. `decode_map` sends a displayed option
/// letter back to the original choice index; it is empty for generation
/// prompts (identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub question_id: String,
    pub variant_index: usize,
    pub rendered_prompt: String,
    pub decode_map: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParaphraseSource {
    ExternalProvider,
    RuleBased,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationPlan {
    pub n_variants: usize,
    pub seed: u64,
    pub paraphrase_source: ParaphraseSource,
}

impl Default for VariationPlan {
    fn default() -> Self {
        Self {
            n_variants: 5,
            seed: 0,
            paraphrase_source: ParaphraseSource::RuleBased,
        }
    }
}

/// Deterministic per-question RNG stream: identical (seed, question) inputs
/// reproduce identical variants regardless of processing order.
pub(crate) fn question_rng(seed: u64, question_id: &str, stream: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.update(question_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    rand::SeedableRng::from_seed(key)
}

pub fn display_letter(position: usize) -> String {
    debug_assert!(position < 26);
    ((b'A' + position as u8) as char).to_string()
}

fn factorial_u128(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Lehmer decode: maps an index in `[0, len!)` to the permutation at that
/// rank, with rank 0 being the identity.
fn unrank_permutation(mut rank: u128, len: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..len).collect();
    let mut out = Vec::with_capacity(len);
    for i in (0..len).rev() {
        let divisor = factorial_u128(i);
        let pick = (rank / divisor) as usize;
        rank %= divisor;
        out.push(remaining.remove(pick));
    }
    out
}

/// Renders a multiple-choice prompt under `perm`, where `perm[p]` is the
/// original index of the choice shown at display position `p`.
///
/// The stem is kept on the final line so that every variant of a question
/// (and every restatement of the same stem) ends with the same line of text.
fn render_mc_prompt(question: &Question, perm: &[usize]) -> (String, BTreeMap<String, usize>) {
    let mut decode_map = BTreeMap::new();
    let mut lines = Vec::with_capacity(perm.len() + 2);
    match &question.subject {
        Some(s) => lines.push(format!(
            "Reply with the single letter of the option that best answers this {s} question."
        )),
        None => lines.push(
            "Reply with the single letter of the option that best answers the question."
                .to_string(),
        ),
    }
    for (pos, &orig) in perm.iter().enumerate() {
        let letter = display_letter(pos);
        lines.push(format!("{letter}. {}", question.choices[orig]));
        decode_map.insert(letter, orig);
    }
    lines.push(format!("Question: {}", question.stem));
    (lines.join("\n"), decode_map)
}

fn render_generation_prompt(stem: &str) -> String {
    format!(
        "Give the final numeric answer on the first line of your reply, then a short justification.\nQuestion: {stem}"
    )
}

/// Generates `plan.n_variants` choice-permutation variants. Variant 0 keeps
/// the original order; the rest are drawn without replacement from the
/// non-identity permutations using the seeded per-question generator. Options
/// are always re-lettered A, B, C, ... in display order.
pub fn generate_choice_permutations(
    question: &Question,
    plan: &VariationPlan,
) -> Result<Vec<PromptVariant>, VariationError> {
    if question.kind != QuestionKind::MultipleChoice {
        return Err(VariationError::WrongKind {
            expected: QuestionKind::MultipleChoice,
            actual: question.kind,
        });
    }
    let n_choices = question.choices.len();
    if n_choices == 0 {
        return Err(VariationError::EmptyChoices {
            question_id: question.id.clone(),
        });
    }
    if plan.n_variants == 0 {
        return Err(VariationError::ZeroVariants);
    }
    let available = factorial_u128(n_choices);
    if plan.n_variants as u128 > available {
        return Err(VariationError::TooManyVariants {
            requested: plan.n_variants,
            available,
        });
    }

    let mut rng = question_rng(plan.seed, &question.id, "perm");
    let mut ranks = std::collections::HashSet::with_capacity(plan.n_variants);
    ranks.insert(0u128);
    let mut perms = vec![(0..n_choices).collect::<Vec<_>>()];
    while perms.len() < plan.n_variants {
        let rank = rng.random_range(1..available);
        if ranks.insert(rank) {
            perms.push(unrank_permutation(rank, n_choices));
        }
    }

    Ok(perms
        .into_iter()
        .enumerate()
        .map(|(variant_index, perm)| {
            let (rendered_prompt, decode_map) = render_mc_prompt(question, &perm);
            PromptVariant {
                question_id: question.id.clone(),
                variant_index,
                rendered_prompt,
                decode_map,
            }
        })
        .collect())
}

/// Produces rewrites of a question stem. Implementations must not drop
/// content words of the stem.
pub trait Paraphraser {
    fn paraphrase(
        &self,
        stem: &str,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<String>, VariationError>;
}

const POLITENESS_PREFIXES: [&str; 5] = [
    "",
    "Please consider the following.",
    "Take a moment to think this through.",
    "Here is a problem for you.",
    "We would like your answer to this.",
];

const INSTRUCTION_REWORDS: [&str; 5] = [
    "",
    "Give your best answer.",
    "Answer as precisely as you can.",
    "State the answer clearly.",
    "Work it out step by step and answer.",
];

/// Offline paraphraser: wraps the stem in politeness prefixes and reworded
/// instructions. Output is a pure function of (stem, rng stream) and never
/// removes stem content words.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleBasedParaphraser;

impl RuleBasedParaphraser {
    fn render(stem: &str, prefix: &str, reword: &str) -> String {
        let mut s = String::new();
        if !prefix.is_empty() {
            s.push_str(prefix);
            s.push(' ');
        }
        s.push_str(stem);
        if !reword.is_empty() {
            s.push(' ');
            s.push_str(reword);
        }
        s
    }
}

impl Paraphraser for RuleBasedParaphraser {
    fn paraphrase(
        &self,
        stem: &str,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<String>, VariationError> {
        // All non-identity (prefix, reword) combinations, shuffled by the
        // caller's seeded stream.
        let mut combos: Vec<(usize, usize)> = (0..POLITENESS_PREFIXES.len())
            .flat_map(|p| (0..INSTRUCTION_REWORDS.len()).map(move |r| (p, r)))
            .filter(|&(p, r)| p != 0 || r != 0)
            .collect();
        for i in (1..combos.len()).rev() {
            let j = rng.random_range(0..=i as u64) as usize;
            combos.swap(i, j);
        }
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (p, r) = combos[k % combos.len()];
            let mut text = Self::render(stem, POLITENESS_PREFIXES[p], INSTRUCTION_REWORDS[r]);
            if k >= combos.len() {
                // Template space exhausted: pad by cycling, tagged to stay distinct.
                text.push_str(&format!(" Consider it again (pass {}).", k / combos.len() + 1));
                tracing::warn!(requested = n, templates = combos.len(), "padding paraphrases by cycling templates");
            }
            out.push(text);
        }
        Ok(out)
    }
}

/// Generates `plan.n_variants` paraphrase variants for a generation question.
/// Variant 0 is the unmodified prompt; all decode maps are identity (empty).
/// If the provider yields fewer distinct rewrites than requested, the deficit
/// is padded with rule-based templates and a warning is logged.
pub fn generate_paraphrases(
    question: &Question,
    plan: &VariationPlan,
    provider: &dyn Paraphraser,
) -> Result<Vec<PromptVariant>, VariationError> {
    if question.kind != QuestionKind::Generation {
        return Err(VariationError::WrongKind {
            expected: QuestionKind::Generation,
            actual: question.kind,
        });
    }
    if plan.n_variants == 0 {
        return Err(VariationError::ZeroVariants);
    }

    let mut stems = vec![question.stem.clone()];
    if plan.n_variants > 1 {
        let mut rng = question_rng(plan.seed, &question.id, "para");
        let rewrites = provider.paraphrase(&question.stem, plan.n_variants - 1, &mut rng)?;
        for rewrite in rewrites {
            if !stems.contains(&rewrite) {
                stems.push(rewrite);
            }
        }
        if stems.len() < plan.n_variants {
            tracing::warn!(
                question_id = %question.id,
                requested = plan.n_variants - 1,
                distinct = stems.len() - 1,
                "provider returned too few distinct paraphrases; padding with rule-based templates"
            );
            let mut pad_rng = question_rng(plan.seed, &question.id, "para-pad");
            let pads =
                RuleBasedParaphraser.paraphrase(&question.stem, plan.n_variants * 2, &mut pad_rng)?;
            for pad in pads {
                if stems.len() == plan.n_variants {
                    break;
                }
                if !stems.contains(&pad) {
                    stems.push(pad);
                }
            }
        }
        stems.truncate(plan.n_variants);
    }

    Ok(stems
        .into_iter()
        .enumerate()
        .map(|(variant_index, stem)| PromptVariant {
            question_id: question.id.clone(),
            variant_index,
            rendered_prompt: render_generation_prompt(&stem),
            decode_map: BTreeMap::new(),
        })
        .collect())
}

/// Dispatches on the question kind.
pub fn generate_variants(
    question: &Question,
    plan: &VariationPlan,
    provider: &dyn Paraphraser,
) -> Result<Vec<PromptVariant>, VariationError> {
    match question.kind {
        QuestionKind::MultipleChoice => generate_choice_permutations(question, plan),
        QuestionKind::Generation => generate_paraphrases(question, plan, provider),
    }
}
