//! Reliability-aware weak supervision at desk scale.
//!
//! A weak supervisor is asked the same question several times under prompt
//! perturbations (choice permutations or paraphrases). The answer multiset is
//! canonicalized into an empirical prediction distribution, scored with an
//! entropy uncertainty metric and per-answer reliability weights, and the
//! result drives either percentile filtering or loss re-weighting when
//! fine-tuning a small causal bigram model. An evaluation suite reports
//! accuracy, performance-gap-recovered, and the two diagnostic breakdowns
//! (entropy-bucket accuracy, reliability-vs-gold matrix).

pub mod corpus;
pub mod evalsuite;
pub mod scoring;
pub mod supervisor;
pub mod trainer;
pub mod variation;

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + 'static
{
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + std::fmt::Debug
        + 'static
{
}

/// Default scalar used by the pipeline stages and all file formats.
pub type Scalar = f64;

pub use scoring::{CanonicalAnswer, CanonicalValue, PredictionDistribution, ScoredQuestion};
pub use variation::{PromptVariant, Question, QuestionKind, VariationPlan};
