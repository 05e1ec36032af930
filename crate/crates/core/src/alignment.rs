//! Image–text alignment: the symmetric contrastive loss, the description
//! decoder, total-loss composition and the pretraining loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph, Mask, Var};
use crate::encoders::{pixel_matrix, EncoderConfig, TextEncoder, VisionEncoder};
use crate::image::Image;
use crate::math::log_sum_exp;
use crate::nn::{build_stack, run_stack, zero_output_projections, Block, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::patching::{sample_split, split_patches, PatchGrid, PatchPool, PatchSplit};
use crate::prs::{assemble_prs_batch, prs_loss_graph, AttentionPool, PrsPair};
use crate::rng::{derive, seeded};
use crate::tensor::Mat;
use crate::dataset::Manifest;
use crate::tokenizer::{TokenSeq, Vocab, BOS, PAD};
use crate::{bail, Error, Result};

/// Reference evaluation of the symmetric contrastive loss on plain matrices.
pub fn contrastive_loss(z: &Mat, w: &Mat, temperature: Option<f64>) -> Result<f64> {
    if z.shape() != w.shape() || z.rows == 0 {
        bail!(Shape, "contrastive loss over {:?} and {:?}", z.shape(), w.shape());
    }
    let n = z.rows;
    let t = temperature.unwrap_or(1.0);
    let s = |i: usize, j: usize| crate::tensor::dot(z.row(i), w.row(j)) / t;
    let mut total = 0.0;
    for i in 0..n {
        let img_to_text: Vec<f64> = (0..n).map(|j| s(i, j)).collect();
        let text_to_img: Vec<f64> = (0..n).map(|j| s(j, i)).collect();
        total += log_sum_exp(&img_to_text) - s(i, i);
        total += log_sum_exp(&text_to_img) - s(i, i);
    }
    Ok(total / n as f64)
}

/// Graph form of [`contrastive_loss`].
pub fn contrastive_loss_graph(g: &mut Graph<'_>, z: Var, w: Var, temperature: Option<f64>) -> Result<Var> {
    let (zs, ws) = (g.value(z).shape(), g.value(w).shape());
    if zs != ws || zs.0 == 0 {
        bail!(Shape, "contrastive loss over {zs:?} and {ws:?}");
    }
    let n = zs.0;
    let mut logits = g.matmul_nt(z, w)?;
    if let Some(t) = temperature {
        logits = g.scale(logits, 1.0 / t);
    }
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let a = g.cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits);
    let b = g.cross_entropy(lt, &diag)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// Causal transformer decoder with cross-attention to patch latents.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionDecoder {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
    pub head: Linear,
    pub max_len: usize,
}

impl DescriptionDecoder {
    /// `tok` reuses an existing `vocab x d` table when given.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        tok: Option<ParamId>,
        rng: &mut R,
    ) -> Self {
        let group = Group::MultimodalDecoder;
        let tok = tok.unwrap_or_else(|| store.add("decoder.tok", group, cfg.vocab_size, cfg.d, Init::Normal(0.1), rng));
        let max_len = cfg.max_text_len + 1;
        let pos = store.add("decoder.pos", group, max_len, cfg.d, Init::Normal(0.02), rng);
        let blocks = build_stack(store, "decoder.block", group, cfg.block_spec(true), cfg.decoder_blocks, rng);
        let norm = cfg
            .pre_norm
            .then(|| LayerNorm::new(store, "decoder.norm", group, cfg.d, rng));
        let head = Linear::new(store, "decoder.head", group, cfg.d, cfg.vocab_size, rng);
        Self {
            tok,
            pos,
            blocks,
            norm,
            head,
            max_len,
        }
    }

    /// Next-token logits for every input position, `len x vocab`.
    pub fn logits(&self, g: &mut Graph<'_>, input: &[u32], memory: Var) -> Result<Var> {
        if input.is_empty() || input.len() > self.max_len {
            bail!(Shape, "decoder input of {} tokens (max {})", input.len(), self.max_len);
        }
        let vocab = g.store().value(self.tok).rows;
        if let Some(&bad) = input.iter().find(|&&t| t as usize >= vocab) {
            bail!(Shape, "token id {bad} outside vocabulary of {vocab}");
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..input.len()).collect();
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let t = g.gather(tok, &ids)?;
        let p = g.gather(pos, &positions)?;
        let mut x = g.add(t, p)?;
        x = run_stack(&self.blocks, g, x, &Mask::Causal, Some(memory))?;
        if let Some(n) = &self.norm {
            x = n.forward(g, x)?;
        }
        self.head.forward(g, x)
    }

    /// Teacher-forced negative log-likelihood summed over non-PAD targets.
    pub fn loss(&self, g: &mut Graph<'_>, target: &TokenSeq, memory: Var) -> Result<Var> {
        let (input, targets) = decoder_io(target)?;
        let logits = self.logits(g, &input, memory)?;
        g.cross_entropy(logits, &targets)
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        zero_output_projections(store, &self.blocks);
    }
}

/// Shifted decoder input (`BOS` then the target without its last token)
/// and per-position targets with PAD excluded.
pub fn decoder_io(target: &TokenSeq) -> Result<(Vec<u32>, Vec<Option<usize>>)> {
    if target.ids.iter().all(|&t| t == PAD) {
        bail!(Invalid, "decoder target has no tokens");
    }
    let n = target.len();
    let mut input = Vec::with_capacity(n);
    input.push(BOS);
    input.extend_from_slice(&target.ids[..n - 1]);
    let targets = target
        .ids
        .iter()
        .map(|&t| (t != PAD).then_some(t as usize))
        .collect();
    Ok((input, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub prs: f64,
    pub con: f64,
    pub desc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prs: 1.0,
            con: 1.0,
            desc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("prs", self.prs), ("con", self.con), ("desc", self.desc)] {
            if !(w >= 0.0 && w.is_finite()) {
                bail!(Config, "loss weight {name} = {w} must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Per-term values; terms with zero weight are not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prs: Option<f64>,
    pub con: Option<f64>,
    pub desc: Option<f64>,
    pub total: f64,
}

/// Every learnable part of the pretraining model.
#[derive(Debug, Clone, PartialEq)]
pub struct FoundationModel {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub pool: AttentionPool,
    pub decoder: DescriptionDecoder,
}

impl FoundationModel {
    /// Random initialisation. When `share_embedding` is set the decoder
    /// reads tokens through the text encoder's table, so the description
    /// loss also trains the text side.
    pub fn new(cfg: EncoderConfig, seed: u64, share_embedding: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &cfg, &mut rng);
        let pool = AttentionPool::new(&mut store, cfg.d, &mut rng);
        let text = TextEncoder::new(&mut store, &cfg, &mut rng);
        let tok = share_embedding.then_some(text.tok);
        let decoder = DescriptionDecoder::new(&mut store, &cfg, tok, &mut rng);
        Ok(Self {
            cfg,
            store,
            vision,
            text,
            pool,
            decoder,
        })
    }

    pub fn shares_embedding(&self) -> bool {
        self.decoder.tok == self.text.tok
    }

    /// `(Z_s, z_ct)` for the listed patches of one image.
    pub fn image_context(&self, g: &mut Graph<'_>, grid: &PatchGrid, indices: &[usize]) -> Result<(Var, Var)> {
        let z = self.vision.encode_patches(g, grid, indices)?;
        let ct = self.pool.forward(g, z)?;
        Ok((z, ct))
    }

    /// Text contextual token, `1 x d`.
    pub fn text_context(&self, g: &mut Graph<'_>, seq: &TokenSeq) -> Result<Var> {
        let w = self.text.encode(g, seq)?;
        g.select_rows(w, &[0])
    }

    /// Pooled embedding of a whole image (every patch visible).
    pub fn image_embedding(&self, image: &Image) -> Result<Vec<f64>> {
        let grid = split_patches("", image, self.cfg.patch_size)?;
        let all: Vec<usize> = (0..grid.len()).collect();
        let mut g = Graph::new(&self.store, GradMode::None);
        let (_, ct) = self.image_context(&mut g, &grid, &all)?;
        Ok(g.value(ct).data.clone())
    }

    /// Pooled embedding from a subset of patches.
    pub fn partial_image_embedding(&self, grid: &PatchGrid, indices: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let (_, ct) = self.image_context(&mut g, grid, indices)?;
        Ok(g.value(ct).data.clone())
    }

    pub fn text_embedding(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let w = self.text_context(&mut g, seq)?;
        Ok(g.value(w).data.clone())
    }

    /// Single-patch encodings `z_p`, one row per block.
    pub fn patch_embeddings<B: AsRef<[u8]>>(&self, blocks: &[B], indices: &[usize]) -> Result<Mat> {
        let px = pixel_matrix(blocks, self.cfg.patch_dim())?;
        let mut g = Graph::new(&self.store, GradMode::None);
        let z = self.vision.encode_isolated(&mut g, &px, indices)?;
        Ok(g.value(z).clone())
    }
}

/// One training example: an image and its tokenised description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image_id: String,
    pub image: Image,
    pub description: TokenSeq,
}

/// Pair every manifest record with its image and tokenised description.
pub fn build_samples(manifest: &Manifest, images: &[Image], vocab: &Vocab, max_len: usize) -> Result<Vec<TrainSample>> {
    if images.len() != manifest.len() {
        bail!(Shape, "{} images for {} records", images.len(), manifest.len());
    }
    manifest
        .records()
        .iter()
        .zip(images)
        .map(|(rec, img)| {
            let description = vocab.tokenize(&rec.description_text());
            if description.len() > max_len {
                bail!(Invalid, "description of {} has {} tokens, limit {max_len}", rec.image_id, description.len());
            }
            Ok(TrainSample {
                image_id: rec.image_id.clone(),
                image: img.clone(),
                description,
            })
        })
        .collect()
}

/// Inputs for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub grids: &'a [&'a PatchGrid],
    pub kept: &'a [&'a [usize]],
    pub descriptions: &'a [&'a TokenSeq],
    pub pool: &'a PatchPool,
    pub pairs: &'a [PrsPair],
}

/// `λ_prs L_prs + λ_con L_con + λ_desc L_desc` with its breakdown.
pub fn total_loss(
    g: &mut Graph<'_>,
    model: &FoundationModel,
    inputs: LossInputs<'_>,
    weights: LossWeights,
    temperature: Option<f64>,
) -> Result<(Var, LossBreakdown)> {
    let n = inputs.grids.len();
    if n == 0 || inputs.kept.len() != n || inputs.descriptions.len() != n {
        bail!(Shape, "batch of {n} images, {} splits, {} descriptions", inputs.kept.len(), inputs.descriptions.len());
    }
    let mut latents = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    for (grid, kept) in inputs.grids.iter().zip(inputs.kept) {
        let (z, ct) = model.image_context(g, grid, kept)?;
        latents.push(z);
        tokens.push(ct);
    }
    let zct = g.concat_rows(&tokens)?;
    let mut terms: Vec<Var> = Vec::new();
    let mut out = LossBreakdown::default();

    if weights.prs > 0.0 {
        let entries: Vec<&[u8]> = inputs
            .pairs
            .iter()
            .map(|p| inputs.pool.entry(p.entry).pixels.as_slice())
            .collect();
        let idx: Vec<usize> = inputs.pairs.iter().map(|p| inputs.pool.entry(p.entry).patch_index).collect();
        let px = pixel_matrix(&entries, model.cfg.patch_dim())?;
        let zp = model.vision.encode_isolated(g, &px, &idx)?;
        let l = prs_loss_graph(g, zct, zp, inputs.pairs)?;
        out.prs = Some(g.scalar(l));
        terms.push(g.scale(l, weights.prs));
    }
    if weights.con > 0.0 {
        // one text pass per distinct description
        let mut slots: BTreeMap<&[u32], usize> = BTreeMap::new();
        let mut unique = Vec::new();
        let mut rows = Vec::with_capacity(n);
        for d in inputs.descriptions {
            let next = slots.len();
            let slot = *slots.entry(d.ids.as_slice()).or_insert_with(|| {
                unique.push(*d);
                next
            });
            rows.push(slot);
        }
        let mut w_rows = Vec::with_capacity(unique.len());
        for d in unique {
            w_rows.push(model.text_context(g, d)?);
        }
        let w_unique = g.concat_rows(&w_rows)?;
        let w = g.select_rows(w_unique, &rows)?;
        let l = contrastive_loss_graph(g, zct, w, temperature)?;
        out.con = Some(g.scalar(l));
        terms.push(g.scale(l, weights.con));
    }
    if weights.desc > 0.0 {
        let mut parts = Vec::with_capacity(n);
        for (d, z) in inputs.descriptions.iter().zip(&latents) {
            let target = (*d).clone().with_eos();
            parts.push(model.decoder.loss(g, &target, *z)?);
        }
        let mut sum = parts[0];
        for p in &parts[1..] {
            sum = g.add(sum, *p)?;
        }
        let l = g.scale(sum, 1.0 / n as f64);
        out.desc = Some(g.scalar(l));
        terms.push(g.scale(l, weights.desc));
    }
    let total = match terms.split_first() {
        None => g.input(Mat::scalar(0.0)),
        Some((first, rest)) => {
            let mut t = *first;
            for r in rest {
                t = g.add(t, *r)?;
            }
            t
        }
    };
    out.total = g.scalar(total);
    Ok((total, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampling_ratio: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub k_pos: usize,
    pub k_neg: usize,
    pub temperature: Option<f64>,
    /// Resize by this many pixels, then crop back at a random offset.
    pub crop_margin: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults (the reference recipe: lr 1.5e-4, 200 epochs).
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 20,
            epochs: 30,
            batch_size: 32,
            sampling_ratio: 0.5,
            loss_weights: LossWeights::default(),
            seed: 0,
            k_pos: 8,
            k_neg: 8,
            temperature: None,
            crop_margin: 4,
            weight_decay: 0.05,
            clip_norm: Some(1.0),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio < 1.0) {
            bail!(Config, "sampling_ratio {} outside (0, 1)", self.sampling_ratio);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) {
            bail!(Config, "lr must be non-negative");
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                bail!(Config, "temperature must be positive");
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_prs")]
    pub l_prs: Option<f64>,
    #[serde(rename = "L_con")]
    pub l_con: Option<f64>,
    #[serde(rename = "L_desc")]
    pub l_desc: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// The augmented, split view of the training set for one epoch, with the
/// pool of every held-out patch.
#[derive(Debug, Clone)]
pub struct EpochData {
    pub grids: Vec<PatchGrid>,
    pub splits: Vec<PatchSplit>,
    pub pool: PatchPool,
}

pub fn prepare_epoch(samples: &[TrainSample], cfg: &TrainConfig, patch_size: usize, epoch: usize) -> Result<EpochData> {
    let mut rng = derive(cfg.seed, 0x1000 + epoch as u64);
    let mut grids = Vec::with_capacity(samples.len());
    let mut splits = Vec::with_capacity(samples.len());
    let mut pool = PatchPool::new();
    for s in samples {
        let img = s.image.resize_and_random_crop(cfg.crop_margin, &mut rng);
        let grid = split_patches(&s.image_id, &img, patch_size)?;
        let split = sample_split(grid.len(), cfg.sampling_ratio, &mut rng)?;
        pool.insert(&grid, &split)?;
        grids.push(grid);
        splits.push(split);
    }
    Ok(EpochData { grids, splits, pool })
}

/// Loss inputs for one batch of an epoch. Positives per anchor are capped
/// at the number of held-out patches an image has.
pub fn batch_pairs<R: Rng + ?Sized>(
    epoch: &EpochData,
    members: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<PrsPair>> {
    if cfg.loss_weights.prs == 0.0 {
        return Ok(Vec::new());
    }
    let anchors: Vec<&str> = members.iter().map(|&i| epoch.grids[i].image_id.as_str()).collect();
    let own = members
        .iter()
        .map(|&i| epoch.splits[i].held_out.len())
        .min()
        .unwrap_or(0);
    assemble_prs_batch(&anchors, &epoch.pool, cfg.k_pos.min(own), cfg.k_neg, rng)
}

/// Evaluate the loss of one batch; used by training and for fixed-batch
/// before/after comparisons.
pub fn batch_loss(
    model: &FoundationModel,
    epoch: &EpochData,
    samples: &[TrainSample],
    members: &[usize],
    pairs: &[PrsPair],
    cfg: &TrainConfig,
    mode: GradMode,
) -> Result<(LossBreakdown, Option<Vec<Option<Mat>>>)> {
    let grids: Vec<&PatchGrid> = members.iter().map(|&i| &epoch.grids[i]).collect();
    let kept: Vec<&[usize]> = members.iter().map(|&i| epoch.splits[i].kept.as_slice()).collect();
    let descriptions: Vec<&TokenSeq> = members.iter().map(|&i| &samples[i].description).collect();
    let mut g = Graph::new(&model.store, mode);
    let (loss, breakdown) = total_loss(
        &mut g,
        model,
        LossInputs {
            grids: &grids,
            kept: &kept,
            descriptions: &descriptions,
            pool: &epoch.pool,
            pairs,
        },
        cfg.loss_weights,
        cfg.temperature,
    )?;
    let grads = (mode != GradMode::None).then(|| g.backward(loss).into_param_grads());
    Ok((breakdown, grads))
}

/// Mean total loss over a fixed, seeded evaluation pass (no updates).
pub fn evaluate_loss(model: &FoundationModel, samples: &[TrainSample], cfg: &TrainConfig, seed: u64) -> Result<LossBreakdown> {
    let eval_cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let epoch = prepare_epoch(samples, &eval_cfg, model.cfg.patch_size, 0)?;
    let mut rng = derive(seed, 0x2000);
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut acc = LossBreakdown::default();
    let mut batches = 0.0;
    let add = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(x + y),
        (None, y) => y,
        (x, None) => x,
    };
    for members in order.chunks(cfg.batch_size) {
        let pairs = batch_pairs(&epoch, members, &eval_cfg, &mut rng)?;
        let (b, _) = batch_loss(model, &epoch, samples, members, &pairs, &eval_cfg, GradMode::None)?;
        acc.prs = add(acc.prs, b.prs);
        acc.con = add(acc.con, b.con);
        acc.desc = add(acc.desc, b.desc);
        acc.total += b.total;
        batches += 1.0;
    }
    let div = |x: Option<f64>| x.map(|v| v / batches);
    Ok(LossBreakdown {
        prs: div(acc.prs),
        con: div(acc.con),
        desc: div(acc.desc),
        total: acc.total / batches,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub steps: usize,
}

/// Pretrain every trainable group. `on_epoch` runs after each epoch (for
/// checkpoints and logging); returning an error aborts training.
pub fn pretrain<F>(model: &mut FoundationModel, samples: &[TrainSample], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(usize, &FoundationModel, &[StepMetrics]) -> Result<()>,
{
    cfg.validate()?;
    if samples.is_empty() {
        bail!(Invalid, "no training samples");
    }
    let total_steps = cfg.total_steps(samples.len());
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.store.len(),
    );
    let mut metrics = Vec::with_capacity(total_steps);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        let data = prepare_epoch(samples, cfg, model.cfg.patch_size, epoch)?;
        let mut rng = derive(cfg.seed, 0x3000 + epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let epoch_start = metrics.len();
        for members in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                on_epoch(epoch, model, &metrics[epoch_start..])?;
                break 'epochs;
            }
            let pairs = batch_pairs(&data, members, cfg, &mut rng)?;
            let (b, grads) = batch_loss(model, &data, samples, members, &pairs, cfg, GradMode::Trainable)?;
            if !b.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("total loss {}", b.total),
                });
            }
            let mut grads = grads.unwrap_or_default();
            if let Some(c) = cfg.clip_norm {
                let norm = clip_grad_norm(&mut grads, c);
                if !norm.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        what: format!("gradient norm {norm}"),
                    });
                }
            }
            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps);
            opt.step(&mut model.store, &grads, lr);
            metrics.push(StepMetrics {
                step,
                epoch,
                l_prs: b.prs,
                l_con: b.con,
                l_desc: b.desc,
                total: b.total,
                lr,
            });
            step += 1;
        }
        on_epoch(epoch, model, &metrics[epoch_start..])?;
    }
    Ok(TrainReport { metrics, steps: step })
}
