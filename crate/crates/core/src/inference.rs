//! Sentence generation, alignment prediction and the nearest-neighbor
//! baseline.

use rand::Rng;

use crate::clustering::ProjectedMask;
use crate::decoder::{greedy_decode_encoded, EncodedPair, TokenId};
use crate::encoder::FeatureGridPair;
use crate::error::{invalid, Error, Result};
use crate::pipeline::PreparedPair;
use crate::scalar::{argmax, Scalar};
use crate::training::{joint_scores, Mode, Model};

fn mode_mask<'a, S: Scalar>(model: &Model<S>, pair: &'a PreparedPair<S>) -> Option<&'a ProjectedMask<S>> {
    match model.mode {
        Mode::Capt => Some(&pair.full_mask),
        Mode::CaptMasked => Some(&pair.union_mask),
        Mode::Ddla | Mode::DdlaUniform => None,
    }
}

/// Cluster order for multi-sentence output: prior probability descending in
/// the learned-prior mode, bounding-box area descending with a uniform prior.
/// Ties go to the lower cluster id.
pub fn rank_clusters<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>) -> Result<Vec<usize>> {
    if pair.k() == 0 {
        return Err(Error::NoClusters);
    }
    let mut order: Vec<usize> = (0..pair.k()).collect();
    match model.mode {
        Mode::DdlaUniform => order.sort_by(|&a, &b| pair.bbox_areas[b].cmp(&pair.bbox_areas[a])),
        _ => {
            let p = model.prior.distribution(&pair.salience)?;
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).expect("finite prior"));
        }
    }
    Ok(order)
}

/// Cluster used for single-sentence output: the prior mode, or a uniform
/// draw from `rng` when the prior is frozen.
pub fn choose_cluster<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, rng: &mut impl Rng) -> Result<usize> {
    if pair.k() == 0 {
        return Err(Error::NoClusters);
    }
    match model.mode {
        Mode::DdlaUniform => Ok(rng.random_range(0..pair.k())),
        _ => Ok(argmax(&model.prior.distribution(&pair.salience)?).expect("nonempty")),
    }
}

/// One description of the pair.
pub fn decode_single<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, rng: &mut impl Rng) -> Result<Vec<TokenId>> {
    if pair.k() == 0 {
        return Err(Error::NoClusters);
    }
    let enc = EncodedPair::new(&model.decoder, &pair.feats)?;
    let mask = match mode_mask(model, pair) {
        Some(m) => m,
        None => &pair.masks[choose_cluster(model, pair, rng)?],
    };
    greedy_decode_encoded(&model.decoder, &enc, mask, model.config.train.max_len)
}

/// Up to `t` sentences, one per distinct cluster in ranked order. The
/// captioning modes have no clusters to enumerate and give one sentence.
pub fn decode_multi<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, t: usize) -> Result<Vec<Vec<TokenId>>> {
    if t == 0 {
        return invalid("sentence count must be at least 1");
    }
    if pair.k() == 0 {
        return Err(Error::NoClusters);
    }
    let enc = EncodedPair::new(&model.decoder, &pair.feats)?;
    let max_len = model.config.train.max_len;
    if let Some(mask) = mode_mask(model, pair) {
        return Ok(vec![greedy_decode_encoded(&model.decoder, &enc, mask, max_len)?]);
    }
    rank_clusters(model, pair)?
        .into_iter()
        .take(t)
        .map(|k| greedy_decode_encoded(&model.decoder, &enc, &pair.masks[k], max_len))
        .collect()
}

/// Posterior-mode cluster for a sentence: `argmax_k log p(k) + log P(S | k)`.
pub fn predict_alignment<S: Scalar>(model: &Model<S>, pair: &PreparedPair<S>, tokens: &[TokenId]) -> Result<usize> {
    if !model.mode.has_alignment() {
        return invalid(format!("mode {} has no alignment variable", model.mode));
    }
    let scores = joint_scores(model, pair, tokens)?;
    Ok(argmax(&scores).expect("nonempty"))
}

/// Fraction of predictions equal to the gold cluster.
pub fn alignment_precision(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return invalid("prediction and gold counts differ");
    }
    if predicted.is_empty() {
        return invalid("no alignments to score");
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Nearest-neighbor baseline over mean-pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct NnIndex {
    vectors: Vec<Vec<f64>>,
    annotations: Vec<Vec<String>>,
}

impl NnIndex {
    pub fn new<S: Scalar>(entries: impl IntoIterator<Item = (FeatureGridPair<S>, Vec<String>)>) -> Result<Self> {
        let (vectors, annotations): (Vec<Vec<f64>>, Vec<Vec<String>>) = entries
            .into_iter()
            .map(|(f, a)| (f.pooled().into_iter().map(Scalar::as_f64).collect(), a))
            .unzip();
        if vectors.is_empty() {
            return invalid("nearest-neighbor index needs at least one training example");
        }
        if annotations.iter().any(Vec::is_empty) {
            return invalid("every indexed annotation needs a sentence");
        }
        if vectors.iter().any(|v| v.len() != vectors[0].len()) {
            return invalid("indexed features differ in depth");
        }
        Ok(Self { vectors, annotations })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Index of the closest training example; ties go to the lower index.
    pub fn nearest<S: Scalar>(&self, query: &FeatureGridPair<S>) -> Result<usize> {
        let q: Vec<f64> = query.pooled().into_iter().map(Scalar::as_f64).collect();
        if q.len() != self.vectors[0].len() {
            return invalid("query feature depth does not match the index");
        }
        let dist = |v: &[f64]| v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = (0, dist(&self.vectors[0]));
        for (i, v) in self.vectors.iter().enumerate().skip(1) {
            let d = dist(v);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    pub fn annotation(&self, i: usize) -> &[String] {
        &self.annotations[i]
    }

    /// The nearest example's full annotation.
    pub fn retrieve<S: Scalar>(&self, query: &FeatureGridPair<S>) -> Result<&[String]> {
        Ok(self.annotation(self.nearest(query)?))
    }

    /// One sentence of the nearest example, picked with `rng`.
    pub fn retrieve_one<S: Scalar>(&self, query: &FeatureGridPair<S>, rng: &mut impl Rng) -> Result<&str> {
        let ann = self.retrieve(query)?;
        Ok(&ann[rng.random_range(0..ann.len())])
    }
}

#[cfg(test)]
mod tests;
