//! Desk-scale causal trainer: a bigram logits table with the plain
//! causal-language-modeling loss and its reliability re-weighted variant,
//! trained by gradient descent. Small enough that every gradient is
//! hand-derivable and checkable against finite differences.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sig9, WeightedExample};
use crate::{Real, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("weight {0} outside (0, 1]")]
    InvalidWeight(f64),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("model file error: {0}")]
    ModelFile(String),
}

impl TrainError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptyCompletion => "EmptyCompletion",
            Self::EmptyBatch => "EmptyBatch",
            Self::TokenOutOfRange { .. } => "TokenOutOfRange",
            Self::InvalidWeight(_) => "InvalidWeight",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::NonFiniteLoss(_) => "NonFiniteLoss",
            Self::ModelFile(_) => "ModelFile",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch; `Some(b)` shuffles into mini-batches of `b`.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 3,
            batch_size: None,
            seed: 0,
        }
    }
}

/// One training pair: prompt tokens condition the model, completion tokens
/// contribute loss terms, each pair carries a reliability weight in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair<F: Real = Scalar> {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub weight: F,
}

/// Bigram next-token model: a logits table with one row per context state.
/// Context states are the previous token (rows `0..V`) plus a dedicated start
/// state (row `V`) used when there is no previous token.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel<F: Real = Scalar> {
    vocab_size: usize,
    table: Vec<F>,
}

impl<F: Real> BigramModel<F> {
    pub fn zeroed(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            table: vec![F::zero(); (vocab_size + 1) * vocab_size],
        }
    }

    pub fn from_table(vocab_size: usize, table: Vec<F>) -> Result<Self, TrainError> {
        if table.len() != (vocab_size + 1) * vocab_size {
            return Err(TrainError::ModelFile(format!(
                "table has {} entries, expected {}",
                table.len(),
                (vocab_size + 1) * vocab_size
            )));
        }
        Ok(Self { vocab_size, table })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_count(&self) -> usize {
        self.vocab_size + 1
    }

    /// Row index of the start state.
    pub fn start_state(&self) -> usize {
        self.vocab_size
    }

    pub fn table(&self) -> &[F] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [F] {
        &mut self.table
    }

    pub fn row(&self, context: usize) -> &[F] {
        &self.table[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    fn context_of(&self, previous: Option<usize>) -> usize {
        previous.unwrap_or(self.start_state())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), TrainError> {
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(TrainError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn log_softmax_row(&self, context: usize) -> Vec<F> {
        let row = self.row(context);
        let max = row.iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m });
        let log_sum = row
            .iter()
            .fold(F::zero(), |acc, &x| acc + (x - max).exp())
            .ln()
            + max;
        row.iter().map(|&x| x - log_sum).collect()
    }

    /// Iterates the (context, target) transitions of one pair: the first
    /// completion token is conditioned on the last prompt token (or the start
    /// state), later tokens on their predecessor.
    fn transitions<'a>(
        &self,
        prompt: &'a [usize],
        completion: &'a [usize],
    ) -> impl Iterator<Item = (usize, usize)> + 'a {
        let first_context = self.context_of(prompt.last().copied());
        completion.iter().enumerate().map(move |(i, &target)| {
            let context = if i == 0 { first_context } else { completion[i - 1] };
            (context, target)
        })
    }
}

/// Mean negative log-likelihood of the completion tokens given the prompt.
pub fn clm_loss<F: Real>(
    model: &BigramModel<F>,
    prompt: &[usize],
    completion: &[usize],
) -> Result<F, TrainError> {
    if completion.is_empty() {
        return Err(TrainError::EmptyCompletion);
    }
    model.check_tokens(prompt)?;
    model.check_tokens(completion)?;
    let mut total = F::zero();
    for (context, target) in model.transitions(prompt, completion) {
        total = total - model.log_softmax_row(context)[target];
    }
    Ok(total / F::from_usize(completion.len()).unwrap())
}

/// Loss together with its analytic gradient with respect to every table
/// entry: `softmax(row) - onehot(target)`, scaled by `1/|completion|`.
pub fn clm_loss_grad<F: Real>(
    model: &BigramModel<F>,
    prompt: &[usize],
    completion: &[usize],
) -> Result<(F, Vec<F>), TrainError> {
    let mut grad = vec![F::zero(); model.table.len()];
    let loss = accumulate_pair_grad(model, prompt, completion, F::one(), &mut grad)?;
    Ok((loss, grad))
}

fn accumulate_pair_grad<F: Real>(
    model: &BigramModel<F>,
    prompt: &[usize],
    completion: &[usize],
    scale: F,
    grad: &mut [F],
) -> Result<F, TrainError> {
    if completion.is_empty() {
        return Err(TrainError::EmptyCompletion);
    }
    model.check_tokens(prompt)?;
    model.check_tokens(completion)?;
    let v = model.vocab_size;
    let inv_len = F::one() / F::from_usize(completion.len()).unwrap();
    let mut total = F::zero();
    for (context, target) in model.transitions(prompt, completion) {
        let log_probs = model.log_softmax_row(context);
        total = total - log_probs[target];
        let base = context * v;
        for (j, &lp) in log_probs.iter().enumerate() {
            let mut g = lp.exp();
            if j == target {
                g = g - F::one();
            }
            grad[base + j] = grad[base + j] + scale * inv_len * g;
        }
    }
    Ok(total * inv_len)
}

/// Reliability re-weighted loss: the mean over pairs of `weight * clm_loss`.
pub fn reweighted_loss<F: Real>(
    model: &BigramModel<F>,
    pairs: &[TrainPair<F>],
) -> Result<F, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = F::zero();
    for pair in pairs {
        check_weight(pair.weight)?;
        total = total + pair.weight * clm_loss(model, &pair.prompt, &pair.completion)?;
    }
    Ok(total / F::from_usize(pairs.len()).unwrap())
}

/// Re-weighted loss with its gradient: the weight-scaled sum of per-pair
/// gradients divided by the pair count.
pub fn reweighted_loss_grad<F: Real>(
    model: &BigramModel<F>,
    pairs: &[TrainPair<F>],
) -> Result<(F, Vec<F>), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let inv_n = F::one() / F::from_usize(pairs.len()).unwrap();
    let mut grad = vec![F::zero(); model.table.len()];
    let mut total = F::zero();
    for pair in pairs {
        check_weight(pair.weight)?;
        let loss = accumulate_pair_grad(
            model,
            &pair.prompt,
            &pair.completion,
            pair.weight * inv_n,
            &mut grad,
        )?;
        total = total + pair.weight * loss;
    }
    Ok((total * inv_n, grad))
}

fn check_weight<F: Real>(weight: F) -> Result<(), TrainError> {
    if weight <= F::zero() || weight > F::one() {
        return Err(TrainError::InvalidWeight(weight.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
}

/// Gradient descent on the re-weighted loss (the plain loss is the weight-1
/// special case). Deterministic given the config seed; mini-batch order is
/// reshuffled each epoch from the seeded stream.
pub fn train<F: Real>(
    mut model: BigramModel<F>,
    pairs: &[TrainPair<F>],
    cfg: &TrainConfig,
) -> Result<(BigramModel<F>, Vec<TrainStep>), TrainError> {
    if cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
    }
    if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let lr = F::from_f64(cfg.learning_rate).unwrap();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(cfg.seed);
    for _epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = match cfg.batch_size {
            None => vec![order.clone()],
            Some(b) => {
                if b == 0 {
                    return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
                }
                use rand::Rng;
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                order.chunks(b).map(|c| c.to_vec()).collect()
            }
        };
        for batch in batches {
            let batch_pairs: Vec<TrainPair<F>> =
                batch.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grad) = reweighted_loss_grad(&model, &batch_pairs)?;
            let loss_f64 = loss.to_f64().unwrap_or(f64::NAN);
            if !loss_f64.is_finite() {
                return Err(TrainError::NonFiniteLoss(step));
            }
            for (w, g) in model.table.iter_mut().zip(&grad) {
                *w = *w - lr * *g;
            }
            log.push(TrainStep { step, loss: loss_f64 });
            step += 1;
        }
    }
    Ok((model, log))
}

/// Greedy decoding: repeatedly takes the argmax next token (ties broken by
/// the lowest token id), stopping after the end marker or at `max_len`.
pub fn predict<F: Real>(
    model: &BigramModel<F>,
    prompt: &[usize],
    max_len: usize,
    end_token: Option<usize>,
) -> Vec<usize> {
    let mut out = Vec::new();
    let mut context = model.context_of(prompt.last().copied());
    for _ in 0..max_len {
        let row = model.row(context);
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        out.push(best);
        if Some(best) == end_token {
            break;
        }
        context = best;
    }
    out
}

/// Symbol-level tokenizer for the toy model: each prompt line and each
/// completion string is one vocabulary symbol. Unknown symbols at inference
/// map to a reserved id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolVocab {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const UNK_SYMBOL: &str = "<unk>";
pub const END_SYMBOL: &str = "<end>";

impl Default for SymbolVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolVocab {
    pub fn new() -> Self {
        let mut vocab = Self {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        vocab.intern(UNK_SYMBOL);
        vocab.intern(END_SYMBOL);
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn from_symbols(symbols: Vec<String>) -> Self {
        let mut vocab = Self {
            symbols,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn intern(&mut self, symbol: &str) -> usize {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        id
    }

    pub fn lookup(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(self.unk_id())
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn end_id(&self) -> usize {
        1
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    fn prompt_lines(prompt: &str) -> impl Iterator<Item = &str> {
        prompt.lines().map(str::trim).filter(|l| !l.is_empty())
    }

    pub fn tokenize_prompt_mut(&mut self, prompt: &str) -> Vec<usize> {
        Self::prompt_lines(prompt).map(|l| self.intern(l)).collect()
    }

    pub fn tokenize_prompt(&self, prompt: &str) -> Vec<usize> {
        Self::prompt_lines(prompt).map(|l| self.lookup(l)).collect()
    }

    pub fn tokenize_completion_mut(&mut self, completion: &str) -> Vec<usize> {
        vec![self.intern(completion.trim()), self.end_id()]
    }

    pub fn tokenize_completion(&self, completion: &str) -> Vec<usize> {
        vec![self.lookup(completion.trim()), self.end_id()]
    }
}

/// A trained model bundled with the vocabulary it was tokenized under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: BigramModel<Scalar>,
    pub vocab: SymbolVocab,
}

impl TrainedModel {
    /// Greedy answer for a prompt: the first generated symbol, unless the
    /// model immediately emits the end marker or an unknown symbol.
    pub fn predict_answer(&self, prompt: &str) -> Option<String> {
        let tokens = self.vocab.tokenize_prompt(prompt);
        let generated = predict(&self.model, &tokens, 4, Some(self.vocab.end_id()));
        let first = *generated.first()?;
        if first == self.vocab.end_id() || first == self.vocab.unk_id() {
            return None;
        }
        self.vocab.symbol(first).map(str::to_string)
    }
}

/// Tokenizes a weighted SFT dataset and trains a fresh model on it.
pub fn train_on_examples(
    examples: &[WeightedExample],
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<TrainStep>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut vocab = SymbolVocab::new();
    let pairs: Vec<TrainPair<Scalar>> = examples
        .iter()
        .map(|ex| TrainPair {
            prompt: vocab.tokenize_prompt_mut(&ex.prompt),
            completion: vocab.tokenize_completion_mut(&ex.completion),
            weight: ex.weight,
        })
        .collect();
    let model = BigramModel::zeroed(vocab.len());
    let (model, log) = train(model, &pairs, cfg)?;
    Ok((TrainedModel { model, vocab }, log))
}

/// model.json layout: vocabulary plus the logits table, rounded to nine
/// significant digits.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    vocab_size: usize,
    unk_token: usize,
    end_token: usize,
    vocab: Vec<String>,
    logits: Vec<Vec<f64>>,
}

pub fn save_model(path: &Path, trained: &TrainedModel) -> Result<(), TrainError> {
    let v = trained.model.vocab_size();
    let file = ModelFile {
        vocab_size: v,
        unk_token: trained.vocab.unk_id(),
        end_token: trained.vocab.end_id(),
        vocab: (0..trained.vocab.len())
            .map(|i| trained.vocab.symbol(i).unwrap().to_string())
            .collect(),
        logits: (0..trained.model.context_count())
            .map(|c| trained.model.row(c).iter().map(|&x| sig9(x)).collect())
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    let json = serde_json::to_string(&file).map_err(|e| TrainError::ModelFile(e.to_string()))?;
    std::fs::write(&tmp, json.as_bytes()).map_err(|e| TrainError::ModelFile(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::ModelFile(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<TrainedModel, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::ModelFile(e.to_string()))?;
    let file: ModelFile =
        serde_json::from_slice(&bytes).map_err(|e| TrainError::ModelFile(e.to_string()))?;
    if file.vocab.len() != file.vocab_size {
        return Err(TrainError::ModelFile("vocabulary length mismatch".into()));
    }
    let table: Vec<f64> = file.logits.into_iter().flatten().collect();
    Ok(TrainedModel {
        model: BigramModel::from_table(file.vocab_size, table)?,
        vocab: SymbolVocab::from_symbols(file.vocab),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_model(v: usize, rng: &mut rand_chacha::ChaCha8Rng) -> BigramModel<f64> {
        let table = (0..(v + 1) * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        BigramModel::from_table(v, table).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v_loss() {
        for v in [2usize, 5, 10] {
            let model = BigramModel::<f64>::zeroed(v);
            let loss = clm_loss(&model, &[0], &[1, 0, 1]).unwrap();
            assert!((loss - (v as f64).ln()).abs() < 1e-12, "v={v}");
        }
    }

    #[test]
    fn confident_model_loss_approaches_zero() {
        // Deterministic chain 0 -> 1 -> 2 with a large logit gap.
        let v = 3;
        let mut model = BigramModel::<f64>::zeroed(v);
        let gap = 40.0;
        let start = model.start_state();
        model.table_mut()[start * v] = gap; // start -> 0
        model.table_mut()[1] = gap; // 0 -> 1
        model.table_mut()[v + 2] = gap; // 1 -> 2
        let loss = clm_loss(&model, &[], &[0, 1, 2]).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn empty_completion_rejected() {
        let model = BigramModel::<f64>::zeroed(3);
        assert!(matches!(clm_loss(&model, &[0], &[]), Err(TrainError::EmptyCompletion)));
    }

    fn finite_difference_grad(
        model: &BigramModel<f64>,
        entry: usize,
        mut eval: impl FnMut(&BigramModel<f64>) -> f64,
    ) -> f64 {
        let h = 1e-5;
        let mut plus = model.clone();
        plus.table_mut()[entry] += h;
        let mut minus = model.clone();
        minus.table_mut()[entry] -= h;
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    }

    #[test]
    fn clm_gradient_matches_finite_differences() {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(42);
        let v = 6;
        let model = random_model(v, &mut rng);
        let prompt = vec![2, 4];
        let completion = vec![1, 5, 0];
        let (_, grad) = clm_loss_grad(&model, &prompt, &completion).unwrap();
        for (entry, &g) in grad.iter().enumerate() {
            let fd = finite_difference_grad(&model, entry, |m| {
                clm_loss(m, &prompt, &completion).unwrap()
            });
            let denom = g.abs().max(fd.abs()).max(1e-6);
            assert!((g - fd).abs() / denom < 1e-4, "entry {entry}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn reweighted_reduces_to_mean_of_clm_losses() {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(7);
        let model = random_model(5, &mut rng);
        let pairs: Vec<TrainPair<f64>> = (0..4)
            .map(|i| TrainPair {
                prompt: vec![i % 5],
                completion: vec![(i + 1) % 5, (i + 2) % 5],
                weight: 1.0,
            })
            .collect();
        let mean: f64 = pairs
            .iter()
            .map(|p| clm_loss(&model, &p.prompt, &p.completion).unwrap())
            .sum::<f64>()
            / pairs.len() as f64;
        let rew = reweighted_loss(&model, &pairs).unwrap();
        assert!((rew - mean).abs() < 1e-12);

        // All weights c scale the mean by c.
        let scaled: Vec<TrainPair<f64>> = pairs
            .iter()
            .map(|p| TrainPair { weight: 0.31, ..p.clone() })
            .collect();
        let rew_scaled = reweighted_loss(&model, &scaled).unwrap();
        assert!((rew_scaled - 0.31 * mean).abs() < 1e-12);
    }

    #[test]
    fn doubling_a_weight_doubles_its_gradient_term() {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(11);
        let model = random_model(4, &mut rng);
        let pair = |w: f64| TrainPair::<f64> {
            prompt: vec![0],
            completion: vec![1, 2],
            weight: w,
        };
        let (_, g_half) = reweighted_loss_grad(&model, &[pair(0.4)]).unwrap();
        let (_, g_full) = reweighted_loss_grad(&model, &[pair(0.8)]).unwrap();
        for (a, b) in g_half.iter().zip(&g_full) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let model = BigramModel::<f64>::zeroed(3);
        for w in [0.0, -0.5, 1.5] {
            let pairs = [TrainPair { prompt: vec![0], completion: vec![1], weight: w }];
            assert!(matches!(
                reweighted_loss(&model, &pairs),
                Err(TrainError::InvalidWeight(_))
            ));
        }
        assert!(matches!(
            reweighted_loss::<f64>(&model, &[]),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn training_converges_on_a_single_repeated_pair() {
        // Plain gradient descent on a softmax cross-entropy plateaus slowly:
        // at learning rate 0.1 the loss needs on the order of 500+ steps to
        // cross 0.01, so the fast-convergence assertion runs at rate 0.5 and
        // the default rate is asserted over a longer horizon.
        let pair = TrainPair::<f64> { prompt: vec![0], completion: vec![1], weight: 1.0 };
        let fast = TrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: None,
            seed: 0,
        };
        let (model, log) = train(BigramModel::zeroed(2), std::slice::from_ref(&pair), &fast).unwrap();
        let final_loss = clm_loss(&model, &pair.prompt, &pair.completion).unwrap();
        assert!(final_loss < 0.01, "loss {final_loss} after {} steps", log.len());
        for w in log.windows(2) {
            assert!(w[1].loss <= w[0].loss, "loss increased: {w:?}");
        }

        let slow = TrainConfig { learning_rate: 0.1, epochs: 1200, ..fast };
        let (model, _) = train(BigramModel::zeroed(2), std::slice::from_ref(&pair), &slow).unwrap();
        assert!(clm_loss(&model, &pair.prompt, &pair.completion).unwrap() < 0.01);
    }

    #[test]
    fn zero_epochs_rejected() {
        let pair = TrainPair::<f64> { prompt: vec![0], completion: vec![1], weight: 1.0 };
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(
            train(BigramModel::zeroed(2), &[pair], &cfg),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(3);
        let pairs: Vec<TrainPair<f64>> = (0..20)
            .map(|_| TrainPair {
                prompt: vec![rng.random_range(0..6)],
                completion: vec![rng.random_range(0..6), rng.random_range(0..6)],
                weight: rng.random_range(0.1..1.0),
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: Some(4),
            seed: 9,
            ..Default::default()
        };
        let (a, log_a) = train(BigramModel::zeroed(6), &pairs, &cfg).unwrap();
        let (b, log_b) = train(BigramModel::zeroed(6), &pairs, &cfg).unwrap();
        assert_eq!(a.table(), b.table());
        assert_eq!(
            log_a.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(),
            log_b.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_finite_loss_guard_trips() {
        let mut model = BigramModel::<f64>::zeroed(2);
        let start_row = model.start_state() * model.vocab_size();
        model.table_mut()[start_row] = f64::INFINITY;
        let pair = TrainPair::<f64> { prompt: vec![], completion: vec![0], weight: 1.0 };
        assert!(matches!(
            train(model, &[pair], &TrainConfig::default()),
            Err(TrainError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn predict_follows_deterministic_chain() {
        let v = 4;
        let mut model = BigramModel::<f64>::zeroed(v);
        let start = model.start_state();
        model.table_mut()[start * v + 2] = 5.0; // start -> 2
        model.table_mut()[2 * v + 1] = 5.0; // 2 -> 1
        model.table_mut()[v + 3] = 5.0; // 1 -> 3
        assert_eq!(predict(&model, &[], 3, None), vec![2, 1, 3]);
        // Stops at the end marker (included in the output).
        assert_eq!(predict(&model, &[], 10, Some(1)), vec![2, 1]);
    }

    #[test]
    fn predict_ties_break_to_lowest_token_id() {
        let model = BigramModel::<f64>::zeroed(3);
        assert_eq!(predict(&model, &[1], 4, None), vec![0, 0, 0, 0]);
    }

    #[test]
    fn predict_reproduces_trained_completion() {
        let pair = TrainPair::<f64> { prompt: vec![0], completion: vec![1, 2], weight: 1.0 };
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 300,
            batch_size: None,
            seed: 0,
        };
        let (model, _) = train(BigramModel::zeroed(3), std::slice::from_ref(&pair), &cfg).unwrap();
        assert_eq!(predict(&model, &pair.prompt, 2, Some(2)), pair.completion);
    }

    #[test]
    fn vocab_round_trip_and_unknown_symbols() {
        let mut vocab = SymbolVocab::new();
        let prompt = "line one\nline two\n\nline one";
        let tokens = vocab.tokenize_prompt_mut(prompt);
        assert_eq!(tokens.len(), 3);
        assert_eq!(tokens[0], tokens[2]);
        assert_eq!(vocab.tokenize_prompt(prompt), tokens);
        assert_eq!(vocab.tokenize_prompt("unseen line"), vec![vocab.unk_id()]);
        let completion = vocab.tokenize_completion_mut("B");
        assert_eq!(completion[1], vocab.end_id());
    }

    fn example(q: &str, prompt: &str, completion: &str, weight: f64) -> WeightedExample {
        WeightedExample {
            question_id: q.into(),
            variant_index: 0,
            prompt: prompt.into(),
            completion: completion.into(),
            weight,
        }
    }

    #[test]
    fn end_to_end_examples_training_learns_majority_answer() {
        let mut examples = Vec::new();
        for i in 0..8 {
            let answer = if i < 6 { "B" } else { "C" };
            examples.push(example(&format!("q{i}"), "intro\nQuestion: what is x?", answer, 1.0));
        }
        let cfg = TrainConfig::default();
        let (trained, log) = train_on_examples(&examples, &cfg).unwrap();
        assert!(!log.is_empty());
        assert_eq!(
            trained.predict_answer("intro\nQuestion: what is x?"),
            Some("B".to_string())
        );
    }

    #[test]
    fn model_file_round_trip() {
        let examples = vec![example("q0", "p\nQuestion: q?", "A", 1.0)];
        let (trained, _) = train_on_examples(&examples, &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &trained).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.vocab.len(), trained.vocab.len());
        assert_eq!(
            loaded.predict_answer("p\nQuestion: q?"),
            trained.predict_answer("p\nQuestion: q?")
        );
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.json");
        save_model(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn f32_model_small_smoke() {
        let model = BigramModel::<f32>::zeroed(4);
        let loss = clm_loss(&model, &[0], &[1]).unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
    }
}
