//! Single-file JSON checkpoints. Floats are written in shortest round-trip
//! form, so save → load → save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderParams, Matrix, Vocabulary};
use crate::error::{Error, Result};
use crate::prior::{Salience, SaliencePrior};
use crate::scalar::Scalar;

use super::{Mode, Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "spotdiff-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct CheckpointFile<S> {
    format: String,
    version: u32,
    mode: Mode,
    config: ModelConfig,
    decoder: DecoderConfig,
    vocab: Vocabulary,
    prior_w: Salience<S>,
    params: BTreeMap<String, Vec<Vec<S>>>,
}

pub fn to_json<S: Scalar>(model: &Model<S>) -> Result<String> {
    if !model.decoder.is_finite() || model.prior.w.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("refusing to save non-finite parameters".into()));
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        mode: model.mode,
        config: model.config,
        decoder: model.decoder.config,
        vocab: model.vocab.clone(),
        prior_w: model.prior.w,
        params: model.decoder.groups().into_iter().map(|(n, m)| (n.to_string(), m.to_nested())).collect(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn from_json<S: Scalar>(text: &str) -> Result<Model<S>> {
    let mut file: CheckpointFile<S> = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a model checkpoint (format {:?})", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", file.version)));
    }
    file.decoder.validate()?;
    if file.decoder.vocab_size != file.vocab.len() {
        return Err(Error::Format("vocabulary size does not match decoder".into()));
    }
    let mut decoder = DecoderParams::zeros(file.decoder);
    for (name, m) in decoder.groups_mut() {
        let rows = file
            .params
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
        *m = Matrix::from_nested(&rows, m.rows, m.cols)?;
    }
    if let Some(extra) = file.params.keys().next() {
        return Err(Error::Format(format!("unknown parameter {extra} in checkpoint")));
    }
    Ok(Model { mode: file.mode, prior: SaliencePrior::new(file.prior_w), decoder, vocab: file.vocab, config: file.config })
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    from_json(&std::fs::read_to_string(path)?)
}
