//! Joint training of the salience prior and the decoder by maximizing the
//! marginal likelihood of every sentence, with the cluster alignment summed
//! out.

mod adam;
pub mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ProjectedMask;
use crate::corpus::tokenize;
use crate::decoder::{
    backward_into, trace_sentence, DecoderConfig, DecoderParams, EncodedPair, TokenId, Vocabulary, DEFAULT_MAX_LEN,
};
use crate::decoder::params::{DEFAULT_ATTENTION_DIM, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM};
use crate::error::{invalid, Error, Result};
use crate::inference::decode_multi;
use crate::metrics::cider;
use crate::pipeline::{PreparedPair, VisionConfig};
use crate::prior::{Salience, SaliencePrior};
use crate::scalar::{log_sum_exp, Scalar};

/// Which alignment distribution the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Learned salience prior over clusters.
    Ddla,
    /// Prior frozen at uniform.
    DdlaUniform,
    /// No clusters: attention over the whole grid.
    Capt,
    /// Attention restricted to the union of all clusters.
    CaptMasked,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ddla, Mode::DdlaUniform, Mode::Capt, Mode::CaptMasked];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ddla => "ddla",
            Mode::DdlaUniform => "ddla-uniform",
            Mode::Capt => "capt",
            Mode::CaptMasked => "capt-masked",
        }
    }

    pub fn learns_prior(self) -> bool {
        self == Mode::Ddla
    }

    /// Whether sentences are aligned to individual clusters.
    pub fn has_alignment(self) -> bool {
        matches!(self, Mode::Ddla | Mode::DdlaUniform)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown mode {s:?} (expected ddla, ddla-uniform, capt or capt-masked)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 {
            return invalid("batch size and max length must be positive");
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate >= 0.0;
        let eps_ok = self.adam_eps.is_finite() && self.adam_eps > 0.0;
        if !lr_ok || !eps_ok || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("optimizer settings out of range");
        }
        Ok(())
    }
}

/// Every setting a checkpoint records.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub mode: Mode,
    pub prior: SaliencePrior<S>,
    pub decoder: DecoderParams<S>,
    pub vocab: Vocabulary,
    pub config: ModelConfig,
}

impl<S: Scalar> Model<S> {
    /// Fresh model: zero prior weights, seeded decoder initialization.
    pub fn new(mode: Mode, vocab: Vocabulary, feature_dim: usize, config: ModelConfig) -> Result<Self> {
        config.train.validate()?;
        let t = &config.train;
        let dc = DecoderConfig {
            vocab_size: vocab.len(),
            embed_dim: t.embed_dim,
            hidden_dim: t.hidden_dim,
            feature_dim,
            attention_dim: t.attention_dim,
        };
        let decoder = DecoderParams::init(dc, t.seed)?;
        Ok(Self { mode, prior: SaliencePrior::default(), decoder, vocab, config })
    }

    pub fn decode_words(&self, tokens: &[TokenId]) -> Vec<String> {
        self.vocab.decode(tokens)
    }
}

/// A prepared pair with its annotated sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<S> {
    pub pair: PreparedPair<S>,
    pub sentences: Vec<Vec<TokenId>>,
    /// Tokenized reference text, kept for metric computation.
    pub references: Vec<Vec<String>>,
}

impl<S: Scalar> TrainingExample<S> {
    pub fn new(pair: PreparedPair<S>, references: Vec<Vec<String>>, vocab: &Vocabulary) -> Result<Self> {
        if references.is_empty() {
            return invalid(format!("example {} has no sentences", pair.id));
        }
        let sentences = references.iter().map(|r| vocab.encode(r)).collect();
        Ok(Self { pair, sentences, references })
    }

    /// Tokenizes raw sentences, dropping empty ones.
    pub fn from_text<T: AsRef<str>>(pair: PreparedPair<S>, sentences: &[T], vocab: &Vocabulary) -> Result<Self> {
        let refs = sentences.iter().map(|s| tokenize(s.as_ref())).filter(|t| !t.is_empty()).collect();
        Self::new(pair, refs, vocab)
    }

    /// Scored tokens: each sentence plus its EOS.
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len() + 1).sum()
    }
}

/// Log prior weight and mask of every alignment choice the mode sums over.
pub fn alignment_components<'a, S: Scalar>(model: &Model<S>, pair: &'a PreparedPair<S>) -> Result<Vec<(S, &'a ProjectedMask<S>)>> {
    let k = pair.k();
    if k == 0 {
        return Err(Error::NoClusters);
    }
    Ok(match model.mode {
        Mode::Ddla => model.prior.log_distribution(&pair.salience)?.into_iter().zip(&pair.masks).collect(),
        Mode::DdlaUniform => {
            let lp = -S::of(k as f64).ln();
            pair.masks.iter().map(|m| (lp, m)).collect()
        }
        Mode::Capt => vec![(S::zero(), &pair.full_mask)],
        Mode::CaptMasked => vec![(S::zero(), &pair.union_mask)],
    })
}

/// Joint log scores `log p(k) + log P(tokens | k)` for every component.
pub fn joint_scores<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, tokens: &[TokenId]) -> Result<Vec<S>> {
    let enc = EncodedPair::new(&model.decoder, &pair.feats)?;
    alignment_components(model, pair)?
        .into_iter()
        .map(|(lp, mask)| Ok(lp + trace_sentence(&model.decoder, &enc, mask, tokens)?.log_prob))
        .collect()
}

/// `−log Σ_k p(k) P(tokens | k)` for one sentence.
pub fn marginal_nll<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, tokens: &[TokenId]) -> Result<S> {
    Ok(-log_sum_exp(&joint_scores(model, pair, tokens)?))
}

/// Marginal NLL of sentence `i` of `example`.
pub fn marginal_sentence_nll<S: Scalar>(model: &Model<S>, example: &TrainingExample<S>, i: usize) -> Result<S> {
    let tokens = example
        .sentences
        .get(i)
        .ok_or_else(|| Error::InvalidInput(format!("sentence {i} out of range")))?;
    marginal_nll(model, &example.pair, tokens)
}

/// Gradient with respect to every trainable quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<S> {
    pub prior: Salience<S>,
    pub decoder: DecoderParams<S>,
}

impl<S: Scalar> Gradient<S> {
    pub fn zeros(config: DecoderConfig) -> Self {
        Self { prior: [S::zero(); 4], decoder: DecoderParams::zeros(config) }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, &b) in self.prior.iter_mut().zip(&other.prior) {
            *a += b;
        }
        self.decoder.add_scaled(&other.decoder, S::one());
    }
}

/// Adds `scale · ∇ marginal_nll` to `grad` and returns the unscaled NLL.
///
/// The gradient of `−log Σ_k exp(j_k)` is `−Σ_k r_k ∇j_k` with posterior
/// `r_k = softmax(j)_k`, so each cluster's decoder gradient is weighted by its
/// posterior and the prior receives `−(Σ r_k g_k − Σ p_k g_k)`.
pub fn accumulate_sentence<S: Scalar>(
    model: &Model<S>,
    pair: &PreparedPair<S>,
    enc: &EncodedPair<'_, S>,
    tokens: &[TokenId],
    scale: S,
    grad: &mut Gradient<S>,
) -> Result<S> {
    let comps = alignment_components(model, pair)?;
    let traces = comps
        .iter()
        .map(|(_, mask)| trace_sentence(&model.decoder, enc, mask, tokens))
        .collect::<Result<Vec<_>>>()?;
    let joint: Vec<S> = comps.iter().zip(&traces).map(|((lp, _), t)| *lp + t.log_prob).collect();
    let lse = log_sum_exp(&joint);
    let posterior: Vec<S> = joint.iter().map(|&j| (j - lse).exp()).collect();
    for (trace, &r) in traces.iter().zip(&posterior) {
        if r != S::zero() {
            backward_into(&model.decoder, enc, trace, scale * r, &mut grad.decoder);
        }
    }
    if model.mode.learns_prior() {
        for (&(lp, _), (g, &r)) in comps.iter().zip(pair.salience.iter().zip(&posterior)) {
            let p = lp.exp();
            for (out, &gi) in grad.prior.iter_mut().zip(g) {
                *out -= scale * (r - p) * gi;
            }
        }
    }
    Ok(-lse)
}

/// Sum of marginal NLLs over an example's sentences with `scale` times its
/// gradient.
pub fn example_gradient<S: Scalar>(model: &Model<S>, example: &TrainingExample<S>, scale: S) -> Result<(S, Gradient<S>)> {
    let enc = EncodedPair::new(&model.decoder, &example.pair.feats)?;
    let mut grad = Gradient::zeros(model.decoder.config);
    let mut nll = S::zero();
    for tokens in &example.sentences {
        nll += accumulate_sentence(model, &example.pair, &enc, tokens, scale, &mut grad)?;
    }
    Ok((nll, grad))
}

/// Summed marginal NLL over all sentences of all examples and its gradient.
/// Examples run in parallel; the reduction order is fixed.
pub fn objective_gradient<S: Scalar>(model: &Model<S>, examples: &[&TrainingExample<S>], scale: S) -> Result<(S, Gradient<S>)> {
    let parts = examples
        .par_iter()
        .map(|ex| example_gradient(model, ex, scale))
        .collect::<Vec<_>>();
    let mut total = S::zero();
    let mut grad = Gradient::zeros(model.decoder.config);
    for part in parts {
        let (nll, g) = part?;
        total += nll;
        grad.add(&g);
    }
    Ok((total, grad))
}

/// Per-token perplexity over every sentence of examples with clusters;
/// each sentence's EOS counts as a token.
pub fn perplexity<S: Scalar>(model: &Model<S>, examples: &[TrainingExample<S>]) -> Result<f64> {
    let usable: Vec<&TrainingExample<S>> = examples.iter().filter(|e| e.pair.k() > 0).collect();
    if usable.is_empty() {
        return invalid("no examples with difference clusters");
    }
    let nlls = usable
        .par_iter()
        .map(|ex| {
            ex.sentences
                .iter()
                .map(|s| marginal_nll(model, &ex.pair, s).map(|v| v.as_f64()))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    let tokens: usize = usable.iter().map(|e| e.num_tokens()).sum();
    Ok((nlls.iter().sum::<f64>() / tokens as f64).exp())
}

/// Validation CIDEr with one hypothesis per example: the concatenation of
/// the multi-sentence output against the concatenated ground truth.
pub fn validation_cider<S: Scalar>(model: &Model<S>, examples: &[TrainingExample<S>]) -> Result<f64> {
    let usable: Vec<&TrainingExample<S>> = examples.iter().filter(|e| e.pair.k() > 0).collect();
    let hyps = usable
        .par_iter()
        .map(|ex| {
            let sents = decode_multi(model, &ex.pair, ex.references.len())?;
            Ok(sents.iter().flat_map(|s| model.decode_words(s)).collect::<Vec<String>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<Vec<String>>> = usable.iter().map(|e| vec![e.references.concat()]).collect();
    cider(&hyps, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean marginal NLL per sentence seen during the epoch.
    pub train_nll: f64,
    pub val_cider: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
    /// Training examples left out because they have no clusters.
    pub skipped: usize,
}

/// One pass over the training examples in a seeded order, one Adam step per
/// batch. Returns the mean NLL per sentence.
pub fn train_epoch<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut Adam<S>,
    examples: &[&TrainingExample<S>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let (mut nll, mut count) = (0.0, 0usize);
    for chunk in order.chunks(model.config.train.batch_size) {
        let batch: Vec<&TrainingExample<S>> = chunk.iter().map(|&i| examples[i]).collect();
        let sentences: usize = batch.iter().map(|e| e.sentences.len()).sum();
        let (loss, grad) = objective_gradient(model, &batch, S::one() / S::of(sentences as f64))?;
        adam.step(model, &grad);
        nll += loss.as_f64();
        count += sentences;
    }
    if !model.decoder.is_finite() || model.prior.w.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("training diverged: non-finite parameters".into()));
    }
    Ok(nll / count as f64)
}

/// Trains until `max_epochs` or until validation CIDEr has not improved for
/// `patience` epochs, and returns the best model seen. Equal CIDEr counts as
/// an improvement when the training loss went down.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    train_set: &[TrainingExample<S>],
    val_set: &[TrainingExample<S>],
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome<S>> {
    let config = model.config.train;
    config.validate()?;
    let usable: Vec<&TrainingExample<S>> = train_set.iter().filter(|e| e.pair.k() > 0).collect();
    let skipped = train_set.len() - usable.len();
    if usable.is_empty() {
        return invalid("training split has no examples with difference clusters");
    }
    if val_set.iter().filter(|e| e.pair.k() > 0).count() < 2 {
        return invalid("validation split needs at least 2 examples with difference clusters");
    }
    let mut adam = Adam::new(AdamConfig::from(&config), &model.decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = (model.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let train_nll = train_epoch(&mut model, &mut adam, &usable, &mut rng)?;
        let val_cider = validation_cider(&model, val_set)?;
        let improved = val_cider > best.1 || (val_cider == best.1 && train_nll < best.2);
        if improved {
            best = (model.clone(), val_cider, train_nll, epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let report = EpochReport { epoch, train_nll, val_cider, improved };
        on_epoch(&report);
        history.push(report);
        if stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome { model: best.0, history, best_epoch: best.3, skipped })
}
