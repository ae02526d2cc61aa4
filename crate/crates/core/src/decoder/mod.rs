//! LSTM sentence decoder with additive attention over both images' feature
//! grids, restricted by a projected cluster mask.
//!
//! At every step the decoder attends with the previous hidden state, feeds
//! `[embedding(token); context]` through the LSTM cell and projects the new
//! hidden state onto the vocabulary. Gradients are computed by hand with
//! backpropagation through time.

pub mod params;
pub mod vocab;

pub use params::{DecoderConfig, DecoderParams, Matrix};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, UNK};

use crate::clustering::ProjectedMask;
use crate::encoder::FeatureGridPair;
use crate::error::{invalid, Result};
use crate::scalar::{argmax, log_sum_exp, softmax_into, Scalar};

/// Masked probability mass below which attention falls back to the plain
/// softmax.
pub const MASK_FALLBACK_MASS: f64 = 1e-8;
pub const DEFAULT_MAX_LEN: usize = 40;

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Feature grids with the state-independent attention projections cached.
pub struct EncodedPair<'a, S> {
    pub feats: &'a FeatureGridPair<S>,
    keys: Vec<S>,
    pooled: Vec<S>,
}

impl<'a, S: Scalar> EncodedPair<'a, S> {
    pub fn new(params: &DecoderParams<S>, feats: &'a FeatureGridPair<S>) -> Result<Self> {
        if feats.dim != params.config.feature_dim {
            return invalid(format!(
                "feature depth {} does not match decoder feature dim {}",
                feats.dim, params.config.feature_dim
            ));
        }
        let a = params.config.attention_dim;
        let locations = feats.locations();
        let mut keys = vec![S::zero(); locations * a];
        for l in 0..locations {
            params.att_feature.add_tmul_vec(feats.location(l), &mut keys[l * a..(l + 1) * a]);
        }
        Ok(Self { feats, keys, pooled: feats.pooled() })
    }

    fn check_mask(&self, pmask: &ProjectedMask<S>) -> Result<()> {
        if pmask.grid_h != self.feats.grid_h || pmask.grid_w != self.feats.grid_w {
            return invalid(format!(
                "mask grid {}x{} does not match feature grid {}x{}",
                pmask.grid_h, pmask.grid_w, self.feats.grid_h, self.feats.grid_w
            ));
        }
        Ok(())
    }
}

/// Result of one attention read.
#[derive(Debug, Clone)]
pub struct Attention<S> {
    pub context: Vec<S>,
    /// One weight per location, first image's cells first.
    pub weights: Vec<S>,
    /// True when the mask covered (almost) no probability mass.
    pub fallback: bool,
    /// `tanh(q + k_l)` per location, kept for backprop.
    activations: Vec<S>,
}

fn attend<S: Scalar>(params: &DecoderParams<S>, enc: &EncodedPair<'_, S>, h: &[S], pmask: &[S]) -> Attention<S> {
    let a = params.config.attention_dim;
    let locations = enc.feats.locations();
    let cells = enc.feats.cells();
    let mut q = vec![S::zero(); a];
    params.att_hidden.add_tmul_vec(h, &mut q);
    let v = params.att_score.row(0);

    let mut activations = vec![S::zero(); locations * a];
    let mut scores = vec![S::zero(); locations];
    for l in 0..locations {
        let act = &mut activations[l * a..(l + 1) * a];
        for ((o, &qi), &ki) in act.iter_mut().zip(&q).zip(&enc.keys[l * a..(l + 1) * a]) {
            *o = (qi + ki).tanh();
        }
        scores[l] = dot(v, act);
    }
    let mut weights = vec![S::zero(); locations];
    softmax_into(&scores, &mut weights);

    let masked: Vec<S> = weights.iter().enumerate().map(|(l, &w)| w * pmask[l % cells]).collect();
    let mass: S = masked.iter().copied().sum();
    let fallback = mass < S::of(MASK_FALLBACK_MASS);
    if !fallback {
        for (w, m) in weights.iter_mut().zip(masked) {
            *w = m / mass;
        }
    }

    let d = enc.feats.dim;
    let mut context = vec![S::zero(); d];
    for (l, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        for (c, &f) in context.iter_mut().zip(enc.feats.location(l)) {
            *c += w * f;
        }
    }
    Attention { context, weights, fallback, activations }
}

/// Attention weights and context for hidden state `h`.
///
/// Scores cover every cell of both grids; the same mask multiplies both
/// images' cells before renormalization.
pub fn masked_attention<S: Scalar>(
    params: &DecoderParams<S>,
    h: &[S],
    feats: &FeatureGridPair<S>,
    pmask: &ProjectedMask<S>,
) -> Result<Attention<S>> {
    if h.len() != params.config.hidden_dim {
        return invalid("hidden state has the wrong length");
    }
    let enc = EncodedPair::new(params, feats)?;
    enc.check_mask(pmask)?;
    Ok(attend(params, &enc, h, &pmask.values))
}

fn init_from_pooled<S: Scalar>(params: &DecoderParams<S>, pooled: &[S]) -> (Vec<S>, Vec<S>) {
    let hd = params.config.hidden_dim;
    let mut h = vec![S::zero(); hd];
    let mut c = vec![S::zero(); hd];
    params.init_h_weight.mul_vec(pooled, &mut h);
    params.init_c_weight.mul_vec(pooled, &mut c);
    for (x, &b) in h.iter_mut().zip(params.init_h_bias.row(0)) {
        *x = (*x + b).tanh();
    }
    for (x, &b) in c.iter_mut().zip(params.init_c_bias.row(0)) {
        *x = (*x + b).tanh();
    }
    (h, c)
}

/// Initial hidden and cell states from the mean-pooled features of both
/// images; independent of the cluster choice.
pub fn init_state<S: Scalar>(params: &DecoderParams<S>, feats: &FeatureGridPair<S>) -> Result<(Vec<S>, Vec<S>)> {
    if feats.dim != params.config.feature_dim {
        return invalid("feature depth does not match the decoder");
    }
    Ok(init_from_pooled(params, &feats.pooled()))
}

struct Step<S> {
    token: TokenId,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    attn: Attention<S>,
    input: Vec<S>,
    /// Activated gates `[i; f; g; o]`.
    gates: Vec<S>,
    tanh_c: Vec<S>,
    h: Vec<S>,
    c: Vec<S>,
    probs: Vec<S>,
    log_norm: S,
    logits: Vec<S>,
}

fn step<S: Scalar>(
    params: &DecoderParams<S>,
    enc: &EncodedPair<'_, S>,
    pmask: &[S],
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    token: TokenId,
) -> Step<S> {
    let cfg = &params.config;
    let hd = cfg.hidden_dim;
    let attn = attend(params, enc, &h_prev, pmask);
    let mut input = Vec::with_capacity(cfg.embed_dim + cfg.feature_dim);
    input.extend_from_slice(params.embedding.row(token as usize));
    input.extend_from_slice(&attn.context);

    let mut gates = params.gate_bias.row(0).to_vec();
    let mut tmp = vec![S::zero(); 4 * hd];
    params.gate_input.mul_vec(&input, &mut tmp);
    for (g, t) in gates.iter_mut().zip(&tmp) {
        *g += *t;
    }
    params.gate_hidden.mul_vec(&h_prev, &mut tmp);
    for (g, t) in gates.iter_mut().zip(&tmp) {
        *g += *t;
    }
    for (j, g) in gates.iter_mut().enumerate() {
        *g = if (2 * hd..3 * hd).contains(&j) { g.tanh() } else { sigmoid(*g) };
    }
    let mut c = vec![S::zero(); hd];
    let mut tanh_c = vec![S::zero(); hd];
    let mut h = vec![S::zero(); hd];
    for j in 0..hd {
        c[j] = gates[hd + j] * c_prev[j] + gates[j] * gates[2 * hd + j];
        tanh_c[j] = c[j].tanh();
        h[j] = gates[3 * hd + j] * tanh_c[j];
    }

    let mut logits = params.out_bias.row(0).to_vec();
    params.out_weight.add_tmul_vec(&h, &mut logits);
    let log_norm = log_sum_exp(&logits);
    let probs = logits.iter().map(|&l| (l - log_norm).exp()).collect();
    Step { token, h_prev, c_prev, attn, input, gates, tanh_c, h, c, probs, log_norm, logits }
}

/// Teacher-forced forward pass, kept for backprop.
pub struct SentenceTrace<S> {
    pub log_prob: S,
    targets: Vec<TokenId>,
    steps: Vec<Step<S>>,
    h0: Vec<S>,
    c0: Vec<S>,
}

impl<S> SentenceTrace<S> {
    /// Scored tokens: the sentence plus the closing EOS.
    pub fn num_tokens(&self) -> usize {
        self.targets.len()
    }
}

fn check_tokens<S: Scalar>(params: &DecoderParams<S>, tokens: &[TokenId]) -> Result<()> {
    let v = params.config.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
        return invalid(format!("token id {bad} outside vocabulary of size {v}"));
    }
    Ok(())
}

/// Runs the decoder over `BOS tokens…` scoring `tokens… EOS`.
pub fn trace_sentence<S: Scalar>(
    params: &DecoderParams<S>,
    enc: &EncodedPair<'_, S>,
    pmask: &ProjectedMask<S>,
    tokens: &[TokenId],
) -> Result<SentenceTrace<S>> {
    check_tokens(params, tokens)?;
    enc.check_mask(pmask)?;
    let (h0, c0) = init_from_pooled(params, &enc.pooled);
    let (mut h, mut c) = (h0.clone(), c0.clone());
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    let mut steps = Vec::with_capacity(targets.len());
    let mut log_prob = S::zero();
    for (t, &target) in targets.iter().enumerate() {
        let input = if t == 0 { BOS } else { tokens[t - 1] };
        let s = step(params, enc, &pmask.values, h, c, input);
        log_prob += s.logits[target as usize] - s.log_norm;
        h = s.h.clone();
        c = s.c.clone();
        steps.push(s);
    }
    Ok(SentenceTrace { log_prob, targets, steps, h0, c0 })
}

/// Accumulates `scale · ∇(−log P(tokens))` into `grad`.
pub fn backward_into<S: Scalar>(
    params: &DecoderParams<S>,
    enc: &EncodedPair<'_, S>,
    trace: &SentenceTrace<S>,
    scale: S,
    grad: &mut DecoderParams<S>,
) {
    let cfg = params.config;
    let (hd, e, a) = (cfg.hidden_dim, cfg.embed_dim, cfg.attention_dim);
    let locations = enc.feats.locations();
    let mut dh_next = vec![S::zero(); hd];
    let mut dc_next = vec![S::zero(); hd];
    let mut dkeys = vec![S::zero(); locations * a];
    let v = params.att_score.row(0);

    for (s, &target) in trace.steps.iter().zip(&trace.targets).rev() {
        let mut dlogits: Vec<S> = s.probs.iter().map(|&p| p * scale).collect();
        dlogits[target as usize] -= scale;
        grad.out_weight.add_outer(&s.h, &dlogits, S::one());
        for (b, &d) in grad.out_bias.data.iter_mut().zip(&dlogits) {
            *b += d;
        }
        let mut dh = vec![S::zero(); hd];
        params.out_weight.mul_vec(&dlogits, &mut dh);
        for (x, &y) in dh.iter_mut().zip(&dh_next) {
            *x += y;
        }

        let g = &s.gates;
        let mut da = vec![S::zero(); 4 * hd];
        let mut dc_prev = vec![S::zero(); hd];
        for j in 0..hd {
            let (i_g, f_g, c_g, o_g) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let dc = dc_next[j] + dh[j] * o_g * (S::one() - s.tanh_c[j] * s.tanh_c[j]);
            let d_o = dh[j] * s.tanh_c[j];
            da[j] = dc * c_g * i_g * (S::one() - i_g);
            da[hd + j] = dc * s.c_prev[j] * f_g * (S::one() - f_g);
            da[2 * hd + j] = dc * i_g * (S::one() - c_g * c_g);
            da[3 * hd + j] = d_o * o_g * (S::one() - o_g);
            dc_prev[j] = dc * f_g;
        }
        grad.gate_input.add_outer(&da, &s.input, S::one());
        grad.gate_hidden.add_outer(&da, &s.h_prev, S::one());
        for (b, &d) in grad.gate_bias.data.iter_mut().zip(&da) {
            *b += d;
        }
        let mut dinput = vec![S::zero(); s.input.len()];
        params.gate_input.add_tmul_vec(&da, &mut dinput);
        let mut dh_prev = vec![S::zero(); hd];
        params.gate_hidden.add_tmul_vec(&da, &mut dh_prev);
        for (x, &d) in grad.embedding.row_mut(s.token as usize).iter_mut().zip(&dinput[..e]) {
            *x += d;
        }

        // attention, read with h_prev
        let dctx = &dinput[e..];
        let w = &s.attn.weights;
        let dw: Vec<S> = (0..locations).map(|l| dot(dctx, enc.feats.location(l))).collect();
        let mean: S = w.iter().zip(&dw).map(|(&wl, &d)| wl * d).sum();
        let mut dq = vec![S::zero(); a];
        for l in 0..locations {
            let ds = w[l] * (dw[l] - mean);
            if ds == S::zero() {
                continue;
            }
            let act = &s.attn.activations[l * a..(l + 1) * a];
            for (dv, &x) in grad.att_score.data.iter_mut().zip(act) {
                *dv += ds * x;
            }
            for k in 0..a {
                let de = ds * v[k] * (S::one() - act[k] * act[k]);
                dq[k] += de;
                dkeys[l * a + k] += de;
            }
        }
        grad.att_hidden.add_outer(&s.h_prev, &dq, S::one());
        let mut tmp = vec![S::zero(); hd];
        params.att_hidden.mul_vec(&dq, &mut tmp);
        for (x, &y) in dh_prev.iter_mut().zip(&tmp) {
            *x += y;
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    for l in 0..locations {
        grad.att_feature.add_outer(enc.feats.location(l), &dkeys[l * a..(l + 1) * a], S::one());
    }

    for (state, dstate, weight, bias) in [
        (&trace.h0, &dh_next, &mut grad.init_h_weight, &mut grad.init_h_bias),
        (&trace.c0, &dc_next, &mut grad.init_c_weight, &mut grad.init_c_bias),
    ] {
        let dz: Vec<S> = state.iter().zip(dstate).map(|(&x, &d)| d * (S::one() - x * x)).collect();
        weight.add_outer(&dz, &enc.pooled, S::one());
        for (b, &d) in bias.data.iter_mut().zip(&dz) {
            *b += d;
        }
    }
}

/// Teacher-forced `log P(tokens, EOS | features, mask)`.
pub fn sentence_log_prob<S: Scalar>(
    params: &DecoderParams<S>,
    feats: &FeatureGridPair<S>,
    pmask: &ProjectedMask<S>,
    tokens: &[TokenId],
) -> Result<S> {
    let enc = EncodedPair::new(params, feats)?;
    Ok(trace_sentence(params, &enc, pmask, tokens)?.log_prob)
}

/// Negative log-likelihood of the sentence and its exact gradient with
/// respect to every decoder parameter.
pub fn decoder_grad<S: Scalar>(
    params: &DecoderParams<S>,
    feats: &FeatureGridPair<S>,
    pmask: &ProjectedMask<S>,
    tokens: &[TokenId],
) -> Result<(S, DecoderParams<S>)> {
    let enc = EncodedPair::new(params, feats)?;
    let trace = trace_sentence(params, &enc, pmask, tokens)?;
    let mut grad = params.zeros_like();
    backward_into(params, &enc, &trace, S::one(), &mut grad);
    Ok((-trace.log_prob, grad))
}

/// Greedy decoding from BOS. Never emits PAD or BOS; ties go to the lowest
/// id. Stops at EOS (not included) or after `max_len` tokens.
pub fn greedy_decode<S: Scalar>(
    params: &DecoderParams<S>,
    feats: &FeatureGridPair<S>,
    pmask: &ProjectedMask<S>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let enc = EncodedPair::new(params, feats)?;
    greedy_decode_encoded(params, &enc, pmask, max_len)
}

pub fn greedy_decode_encoded<S: Scalar>(
    params: &DecoderParams<S>,
    enc: &EncodedPair<'_, S>,
    pmask: &ProjectedMask<S>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    enc.check_mask(pmask)?;
    let (mut h, mut c) = init_from_pooled(params, &enc.pooled);
    let mut token = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let s = step(params, enc, &pmask.values, h, c, token);
        let mut logits = s.logits;
        logits[PAD as usize] = S::neg_infinity();
        logits[BOS as usize] = S::neg_infinity();
        let next = argmax(&logits).expect("vocabulary is nonempty") as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        token = next;
        h = s.h;
        c = s.c;
    }
    Ok(out)
}
