//! Saving and restoring trained models together with their vocabulary.

use std::path::Path;

use insectfm_core::alignment::{FoundationModel, TrainConfig};
use insectfm_core::assistant::{Assistant, AssistantConfig, AssistantTrainConfig};
use insectfm_core::encoders::EncoderConfig;
use insectfm_core::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};

pub const FOUNDATION_KIND: &str = "foundation";
pub const ASSISTANT_KIND: &str = "assistant";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoundationMeta {
    pub encoder: EncoderConfig,
    pub share_embedding: bool,
    pub vocab: Vec<String>,
    pub train: Option<TrainConfig>,
}

pub fn save_foundation(path: &Path, model: &FoundationModel, vocab: &Vocab, train: Option<&TrainConfig>) -> Result<()> {
    let meta = FoundationMeta {
        encoder: model.cfg.clone(),
        share_embedding: model.shares_embedding(),
        vocab: vocab.words().to_vec(),
        train: train.cloned(),
    };
    checkpoint::save(path, FOUNDATION_KIND, &meta, &model.store)
}

pub fn load_foundation(path: &Path) -> Result<(FoundationModel, Vocab, FoundationMeta)> {
    let ck = checkpoint::read(path)?;
    expect_kind(path, &ck.header.kind, FOUNDATION_KIND)?;
    let meta: FoundationMeta = ck.config()?;
    let mut model = FoundationModel::new(meta.encoder.clone(), 0, meta.share_embedding)?;
    ck.load_into(&mut model.store)?;
    Ok((model, Vocab::from_words(meta.vocab.clone()), meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMeta {
    pub vision: EncoderConfig,
    pub assistant: AssistantConfig,
    pub vocab: Vec<String>,
    pub train: Option<AssistantTrainConfig>,
}

pub fn save_assistant(path: &Path, model: &Assistant, vocab: &Vocab, train: Option<&AssistantTrainConfig>) -> Result<()> {
    let meta = AssistantMeta {
        vision: model.vision_cfg.clone(),
        assistant: model.cfg.clone(),
        vocab: vocab.words().to_vec(),
        train: train.cloned(),
    };
    checkpoint::save(path, ASSISTANT_KIND, &meta, &model.store)
}

pub fn load_assistant(path: &Path) -> Result<(Assistant, Vocab)> {
    let ck = checkpoint::read(path)?;
    expect_kind(path, &ck.header.kind, ASSISTANT_KIND)?;
    let meta: AssistantMeta = ck.config()?;
    let mut model = Assistant::new(meta.vision.clone(), meta.assistant.clone(), 0)?;
    ck.load_into(&mut model.store)?;
    Ok((model, Vocab::from_words(meta.vocab)))
}

fn expect_kind(path: &Path, got: &str, want: &str) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!(
            "{} holds a {got} checkpoint, expected {want}",
            path.display()
        )));
    }
    Ok(())
}
