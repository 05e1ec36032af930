//! Flat key = value configuration with command-line overrides.
//!
//! Every key is optional; unset keys fall back to the library defaults.
//! Values are layered: defaults, then the config file, then `--set key=value`
//! and dedicated flags.

use std::collections::BTreeMap;
use std::path::Path;

use insectfm_core::alignment::{LossWeights, TrainConfig};
use insectfm_core::assistant::{AssistantConfig, AssistantTrainConfig, Stage};
use insectfm_core::encoders::{EncoderConfig, IsolatedPosition};
use insectfm_core::eval::ProbeConfig;
use insectfm_core::synthetic::SyntheticConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::jsonl::read_text;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "INSECTFM_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    // synthetic data
    pub n_classes: Option<usize>,
    pub n_per_class: Option<usize>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub glyph_size: Option<usize>,
    pub background_clutter: Option<f64>,
    pub rng_seed: Option<u64>,
    pub channels: Option<usize>,
    // encoders
    pub d: Option<usize>,
    pub vision_blocks: Option<usize>,
    pub text_blocks: Option<usize>,
    pub decoder_blocks: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub max_text_len: Option<usize>,
    pub pre_norm: Option<bool>,
    pub isolated_position: Option<IsolatedPosition>,
    pub share_embedding: Option<bool>,
    // pretraining
    pub lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub sampling_ratio: Option<f64>,
    pub lambda_prs: Option<f64>,
    pub lambda_con: Option<f64>,
    pub lambda_desc: Option<f64>,
    pub seed: Option<u64>,
    pub k_pos: Option<usize>,
    pub k_neg: Option<usize>,
    pub temperature: Option<f64>,
    pub crop_margin: Option<usize>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub max_steps: Option<usize>,
    // linear probe
    pub probe_epochs: Option<usize>,
    pub probe_lr: Option<f64>,
    pub probe_weight_decay: Option<f64>,
    pub train_fraction: Option<f64>,
    // assistant
    pub lm_dim: Option<usize>,
    pub lm_blocks: Option<usize>,
    pub lm_heads: Option<usize>,
    pub connector_layers: Option<usize>,
    pub max_seq: Option<usize>,
    pub assistant_lr: Option<f64>,
    pub assistant_warmup_steps: Option<usize>,
    pub assistant_epochs: Option<usize>,
    pub assistant_batch_size: Option<usize>,
    pub assistant_weight_decay: Option<f64>,
    // benchmarks
    pub vqa_choices: Option<usize>,
    pub vqa_items: Option<usize>,
}

impl Settings {
    /// Layer `overrides` (`key=value` strings) over the file at `path`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = read_text(p)?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            table.insert(key.clone(), parse_value(raw));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// Every key that is set, rendered as text, for report config echoes.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let Ok(Value::Table(t)) = Value::try_from(self) else {
            return BTreeMap::new();
        };
        t.into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            n_classes: self.n_classes.unwrap_or(d.n_classes),
            n_per_class: self.n_per_class.unwrap_or(d.n_per_class),
            image_size: self.image_size.unwrap_or(d.image_size),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            glyph_size: self.glyph_size.unwrap_or(d.glyph_size),
            background_clutter: self.background_clutter.unwrap_or(d.background_clutter),
            rng_seed: self.rng_seed.unwrap_or(d.rng_seed),
            channels: self.channels.unwrap_or(d.channels),
        }
    }

    /// Encoder shape; image geometry comes from the data, vocabulary size
    /// from the corpus.
    pub fn encoder(&self, image_size: usize, channels: usize, vocab_size: usize) -> EncoderConfig {
        let d = EncoderConfig::default();
        EncoderConfig {
            d: self.d.unwrap_or(d.d),
            vision_blocks: self.vision_blocks.unwrap_or(d.vision_blocks),
            text_blocks: self.text_blocks.unwrap_or(d.text_blocks),
            decoder_blocks: self.decoder_blocks.unwrap_or(d.decoder_blocks),
            heads: self.heads.unwrap_or(d.heads),
            mlp_ratio: self.mlp_ratio.unwrap_or(d.mlp_ratio),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            image_size,
            channels,
            max_text_len: self.max_text_len.unwrap_or(d.max_text_len),
            vocab_size,
            pre_norm: self.pre_norm.unwrap_or(d.pre_norm),
            isolated_position: self.isolated_position.unwrap_or(d.isolated_position),
        }
    }

    pub fn share_embedding(&self) -> bool {
        self.share_embedding.unwrap_or(true)
    }

    pub fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            sampling_ratio: self.sampling_ratio.unwrap_or(d.sampling_ratio),
            loss_weights: LossWeights {
                prs: self.lambda_prs.unwrap_or(d.loss_weights.prs),
                con: self.lambda_con.unwrap_or(d.loss_weights.con),
                desc: self.lambda_desc.unwrap_or(d.loss_weights.desc),
            },
            seed: self.seed.unwrap_or(d.seed),
            k_pos: self.k_pos.unwrap_or(d.k_pos),
            k_neg: self.k_neg.unwrap_or(d.k_neg),
            temperature: self.temperature.or(d.temperature),
            crop_margin: self.crop_margin.unwrap_or(d.crop_margin),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            // A non-positive clip norm disables clipping.
            clip_norm: match self.clip_norm {
                Some(c) if c <= 0.0 => None,
                Some(c) => Some(c),
                None => d.clip_norm,
            },
            max_steps: self.max_steps.or(d.max_steps),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        let d = ProbeConfig::default();
        ProbeConfig {
            epochs: self.probe_epochs.unwrap_or(d.epochs),
            lr: self.probe_lr.unwrap_or(d.lr),
            weight_decay: self.probe_weight_decay.unwrap_or(d.weight_decay),
            train_fraction: self.train_fraction.unwrap_or(d.train_fraction),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    pub fn assistant(&self, stage: Stage, vocab_size: usize) -> AssistantConfig {
        let d = AssistantConfig::default();
        AssistantConfig {
            lm_dim: self.lm_dim.unwrap_or(d.lm_dim),
            lm_blocks: self.lm_blocks.unwrap_or(d.lm_blocks),
            lm_heads: self.lm_heads.unwrap_or(d.lm_heads),
            connector_layers: self.connector_layers.unwrap_or(d.connector_layers),
            stage,
            max_seq: self.max_seq.unwrap_or(d.max_seq),
            vocab_size,
            mlp_ratio: self.mlp_ratio.unwrap_or(d.mlp_ratio),
            pre_norm: self.pre_norm.unwrap_or(d.pre_norm),
        }
    }

    pub fn assistant_train(&self) -> AssistantTrainConfig {
        let d = AssistantTrainConfig::default();
        AssistantTrainConfig {
            lr: self.assistant_lr.unwrap_or(d.lr),
            warmup_steps: self.assistant_warmup_steps.unwrap_or(d.warmup_steps),
            epochs: self.assistant_epochs.unwrap_or(d.epochs),
            batch_size: self.assistant_batch_size.unwrap_or(d.batch_size),
            weight_decay: self.assistant_weight_decay.unwrap_or(d.weight_decay),
            clip_norm: match self.clip_norm {
                Some(c) if c <= 0.0 => None,
                Some(c) => Some(c),
                None => d.clip_norm,
            },
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

/// Parse an override value as a TOML scalar, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override {s:?} is not key=value"))),
    }
}
