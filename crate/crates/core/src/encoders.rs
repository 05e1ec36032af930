//! The patch-based vision encoder and the text encoder.
//!
//! Both are small pre-norm transformers (normalisation can be switched off
//! for the literal residual form). The vision side projects flattened
//! patches and adds a learned position embedding per patch index; the text
//! side embeds tokens, adds positions and prepends a learned contextual
//! token whose output row summarises the sequence.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Var};
use crate::nn::{build_stack, run_stack, zero_output_projections, Block, BlockSpec, Linear};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::patching::PatchGrid;
use crate::tensor::Mat;
use crate::tokenizer::{TokenSeq, PAD};
use crate::{bail, Result};

/// Which position embedding an isolated pool patch receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedPosition {
    /// The patch's recorded index in its source image.
    #[default]
    TrueIndex,
    /// Always index 0.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub vision_blocks: usize,
    pub text_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    #[serde(default = "yes")]
    pub pre_norm: bool,
    #[serde(default)]
    pub isolated_position: IsolatedPosition,
}

fn yes() -> bool {
    true
}

impl Default for EncoderConfig {
    /// Desk-scale defaults (the reference recipe uses d = 768, 224 px
    /// images with 16 px patches and a 12-block ViT).
    fn default() -> Self {
        Self {
            d: 64,
            vision_blocks: 4,
            text_blocks: 2,
            decoder_blocks: 2,
            heads: 4,
            mlp_ratio: 2.0,
            patch_size: 8,
            image_size: 64,
            channels: 1,
            max_text_len: 96,
            vocab_size: 256,
            pre_norm: true,
            isolated_position: IsolatedPosition::TrueIndex,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            bail!(Config, "d = {} must be a positive multiple of heads = {}", self.d, self.heads);
        }
        if self.vision_blocks == 0 || self.text_blocks == 0 || self.decoder_blocks == 0 {
            bail!(Config, "block counts must be at least 1");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(
                Config,
                "image_size {} is not divisible by patch_size {}",
                self.image_size,
                self.patch_size
            );
        }
        if self.channels == 0 || self.max_text_len == 0 || self.vocab_size == 0 {
            bail!(Config, "channels, max_text_len and vocab_size must be at least 1");
        }
        if !(self.mlp_ratio > 0.0) {
            bail!(Config, "mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d as f64 * self.mlp_ratio) as usize).max(1)
    }

    pub fn block_spec(&self, cross_attention: bool) -> BlockSpec {
        BlockSpec {
            d: self.d,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden(),
            pre_norm: self.pre_norm,
            cross_attention,
        }
    }
}

/// Map raw pixel blocks to an `n x patch_dim` matrix scaled to [-0.5, 0.5].
pub fn pixel_matrix<B: AsRef<[u8]>>(blocks: &[B], patch_dim: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(blocks.len() * patch_dim);
    for b in blocks {
        let b = b.as_ref();
        if b.len() != patch_dim {
            bail!(Shape, "patch of {} values, expected {patch_dim}", b.len());
        }
        data.extend(b.iter().map(|&v| v as f64 / 255.0 - 0.5));
    }
    Mat::from_vec(blocks.len(), patch_dim, data)
}

fn check_finite(g: &Graph<'_>, v: Var, what: &str) -> Result<()> {
    if !g.value(v).is_finite() {
        bail!(NonFinite, "non-finite activations in {what}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub isolated_position: IsolatedPosition,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let proj = Linear::new(store, "vision.proj", Group::VisionEmbed, cfg.patch_dim(), cfg.d, rng);
        let pos = store.add("vision.pos", Group::VisionEmbed, cfg.n_patches(), cfg.d, Init::Normal(0.02), rng);
        let blocks = build_stack(
            store,
            "vision.block",
            Group::VisionBlocks,
            cfg.block_spec(false),
            cfg.vision_blocks,
            rng,
        );
        Self {
            proj,
            pos,
            blocks,
            n_patches: cfg.n_patches(),
            patch_dim: cfg.patch_dim(),
            isolated_position: cfg.isolated_position,
        }
    }

    /// `X_s`: row `i` is `proj(pixels_i) + pos[index_i]`.
    pub fn embed_patches(&self, g: &mut Graph<'_>, pixels: &Mat, indices: &[usize]) -> Result<Var> {
        if pixels.cols != self.patch_dim || pixels.rows != indices.len() {
            bail!(
                Shape,
                "{:?} pixel matrix for {} indices, patch_dim {}",
                pixels.shape(),
                indices.len(),
                self.patch_dim
            );
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_patches) {
            bail!(Shape, "patch index {bad} out of {}", self.n_patches);
        }
        let x = g.input(pixels.clone());
        let h = self.proj.forward(g, x)?;
        let table = g.param(self.pos);
        let e = g.gather(table, indices)?;
        g.add(h, e)
    }

    /// Transformer stack over an embedded patch set.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        check_finite(g, x, "patch embeddings")?;
        let z = run_stack(&self.blocks, g, x, &Mask::None, None)?;
        check_finite(g, z, "vision encoder")?;
        Ok(z)
    }

    /// `Z_s` for the listed patches of one image.
    pub fn encode_patches(&self, g: &mut Graph<'_>, grid: &PatchGrid, indices: &[usize]) -> Result<Var> {
        let blocks: Vec<&[u8]> = indices
            .iter()
            .map(|&i| grid.patches.get(i).map(|p| p.as_slice()))
            .collect::<Option<_>>()
            .ok_or_else(|| crate::Error::Shape(format!("index outside grid of {}", grid.len())))?;
        let px = pixel_matrix(&blocks, self.patch_dim)?;
        let x = self.embed_patches(g, &px, indices)?;
        self.encode(g, x)
    }

    /// Encode every row as its own length-1 sequence, in one pass.
    pub fn encode_isolated(&self, g: &mut Graph<'_>, pixels: &Mat, indices: &[usize]) -> Result<Var> {
        let idx: Vec<usize> = match self.isolated_position {
            IsolatedPosition::TrueIndex => indices.to_vec(),
            IsolatedPosition::Zero => alloc::vec![0; indices.len()],
        };
        let x = self.embed_patches(g, pixels, &idx)?;
        check_finite(g, x, "patch embeddings")?;
        let z = run_stack(&self.blocks, g, x, &Mask::Diagonal, None)?;
        check_finite(g, z, "vision encoder")?;
        Ok(z)
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        zero_output_projections(store, &self.blocks);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub pos: ParamId,
    pub ct: ParamId,
    pub blocks: Vec<Block>,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let tok = store.add("text.tok", Group::TextEmbed, cfg.vocab_size, cfg.d, Init::Normal(0.1), rng);
        let pos = store.add("text.pos", Group::TextEmbed, cfg.max_text_len, cfg.d, Init::Normal(0.02), rng);
        let ct = store.add("text.ct", Group::TextEmbed, 1, cfg.d, Init::Normal(0.1), rng);
        let blocks = build_stack(
            store,
            "text.block",
            Group::TextBlocks,
            cfg.block_spec(false),
            cfg.text_blocks,
            rng,
        );
        Self {
            tok,
            pos,
            ct,
            blocks,
            max_len: cfg.max_text_len,
            vocab_size: cfg.vocab_size,
        }
    }

    /// `[w_ct; tok(t_i) + pos(i)]`, `(N_T + 1) x d`.
    pub fn embed(&self, g: &mut Graph<'_>, seq: &TokenSeq) -> Result<Var> {
        if seq.len() > self.max_len {
            bail!(Shape, "text of {} tokens exceeds max_text_len {}", seq.len(), self.max_len);
        }
        if let Some(&bad) = seq.ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            bail!(Shape, "token id {bad} outside vocabulary of {}", self.vocab_size);
        }
        let ct = g.param(self.ct);
        if seq.is_empty() {
            return Ok(ct);
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let t = g.gather(tok, &ids)?;
        let p = g.gather(pos, &positions)?;
        let w = g.add(t, p)?;
        g.concat_rows(&[ct, w])
    }

    /// `W'`: row 0 is the text contextual token. PAD keys are masked.
    pub fn encode(&self, g: &mut Graph<'_>, seq: &TokenSeq) -> Result<Var> {
        let w = self.embed(g, seq)?;
        let valid: Vec<bool> = core::iter::once(true)
            .chain(seq.ids.iter().map(|&t| t != PAD))
            .collect();
        let out = run_stack(&self.blocks, g, w, &Mask::KeyValid(valid), None)?;
        check_finite(g, out, "text encoder")?;
        Ok(out)
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        zero_output_projections(store, &self.blocks);
    }
}
