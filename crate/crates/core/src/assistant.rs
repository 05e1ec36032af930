//! Toy visual assistant: a perceptron connector from vision latents into a
//! small causal language model, trained on packed conversations with the
//! loss restricted to answer tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph, Mask, Var};
use crate::encoders::{EncoderConfig, VisionEncoder};
use crate::image::Image;
use crate::instruct::{pack_tokens, ConversationTurn, ImagePosition, InstructionSample, PackedToken, Role};
use crate::nn::{build_stack, run_stack, zero_output_projections, Block, BlockSpec, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::patching::split_patches;
use crate::rng::{derive, seeded};
use crate::tensor::Mat;
use crate::tokenizer::{TokenSeq, Vocab, BOS, EOS, IMG, STOP};
use crate::{bail, Error, Result};

/// Training stage: which groups learn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Connector only.
    #[default]
    Pretrain,
    /// Connector and language model.
    Finetune,
}

impl Stage {
    pub fn trainable_groups(self) -> &'static [Group] {
        match self {
            Stage::Pretrain => &[Group::Connector],
            Stage::Finetune => &[Group::Connector, Group::ToyLm],
        }
    }
}

/// Make exactly the stage's groups trainable; the vision encoder stays
/// frozen in both stages.
pub fn set_stage(store: &mut ParamStore, stage: Stage) {
    store.set_only_trainable(stage.trainable_groups());
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantConfig {
    pub lm_dim: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub connector_layers: usize,
    pub stage: Stage,
    /// Positions after splicing image latents into the sequence.
    pub max_seq: usize,
    pub vocab_size: usize,
    pub mlp_ratio: f64,
    #[serde(default = "yes")]
    pub pre_norm: bool,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        Self {
            lm_dim: 64,
            lm_blocks: 2,
            lm_heads: 4,
            connector_layers: 2,
            stage: Stage::Pretrain,
            max_seq: 256,
            vocab_size: 256,
            mlp_ratio: 2.0,
            pre_norm: true,
        }
    }
}

impl AssistantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lm_dim == 0 || self.lm_heads == 0 || self.lm_dim % self.lm_heads != 0 {
            bail!(Config, "lm_dim {} must be a positive multiple of lm_heads {}", self.lm_dim, self.lm_heads);
        }
        if self.connector_layers == 0 {
            bail!(Config, "connector needs at least one layer");
        }
        if self.vocab_size <= STOP as usize || self.max_seq < 2 {
            bail!(Config, "vocab_size must cover the special tokens and max_seq must be at least 2");
        }
        if !(self.mlp_ratio > 0.0) {
            bail!(Config, "mlp_ratio must be positive");
        }
        Ok(())
    }

    fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            d: self.lm_dim,
            heads: self.lm_heads,
            mlp_hidden: ((self.lm_dim as f64 * self.mlp_ratio) as usize).max(1),
            pre_norm: self.pre_norm,
            cross_attention: false,
        }
    }
}

/// Linear layers from vision width to language width with GELU between
/// consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Connector {
    pub layers: Vec<Linear>,
    pub in_dim: usize,
}

impl Connector {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, in_dim: usize, out_dim: usize, layers: usize, rng: &mut R) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let fan_in = if i == 0 { in_dim } else { out_dim };
                Linear::new(store, &format!("connector.{i}"), Group::Connector, fan_in, out_dim, rng)
            })
            .collect();
        Self { layers, in_dim }
    }

    pub fn connect(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let cols = g.value(z).cols;
        if cols != self.in_dim {
            bail!(Shape, "connector expects width {}, got {cols}", self.in_dim);
        }
        let mut h = z;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = l.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Small causal transformer language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
    pub head: Linear,
}

impl ToyLm {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, cfg: &AssistantConfig, rng: &mut R) -> Self {
        let group = Group::ToyLm;
        let tok = store.add("lm.tok", group, cfg.vocab_size, cfg.lm_dim, Init::Normal(0.1), rng);
        let pos = store.add("lm.pos", group, cfg.max_seq, cfg.lm_dim, Init::Normal(0.02), rng);
        let blocks = build_stack(store, "lm.block", group, cfg.block_spec(), cfg.lm_blocks, rng);
        let norm = cfg.pre_norm.then(|| LayerNorm::new(store, "lm.norm", group, cfg.lm_dim, rng));
        let head = Linear::new(store, "lm.head", group, cfg.lm_dim, cfg.vocab_size, rng);
        Self {
            tok,
            pos,
            blocks,
            norm,
            head,
        }
    }

    /// Logits for every row of an already embedded sequence.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.value(x).rows;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.param(self.pos);
        let p = g.gather(pos, &positions)?;
        let mut h = g.add(x, p)?;
        h = run_stack(&self.blocks, g, h, &Mask::Causal, None)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(g, h)?;
        }
        self.head.forward(g, h)
    }

    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        zero_output_projections(store, &self.blocks);
    }
}

/// A packed conversation: BOS, then role-labelled tokens. An IMG token
/// marks where the connected image latents are spliced in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePack {
    pub tokens: Vec<PackedToken>,
}

/// One position of the spliced sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Token(u32),
    Image(usize),
}

impl SequencePack {
    /// At most one IMG token, in turn 1 and labelled as instruction.
    pub fn new(tokens: Vec<PackedToken>) -> Result<Self> {
        let imgs: Vec<&PackedToken> = tokens.iter().filter(|t| t.id == IMG).collect();
        if imgs.len() > 1 {
            bail!(Invalid, "{} image slots in one sequence", imgs.len());
        }
        if let Some(t) = imgs.first() {
            if t.turn != 1 || t.role != Role::Instruction {
                bail!(Invalid, "image slot must be an instruction token of turn 1");
            }
        }
        Ok(Self { tokens })
    }

    pub fn from_sample(sample: &InstructionSample, vocab: &Vocab) -> Result<Self> {
        Self::new(pack_tokens(sample, vocab)?)
    }

    pub fn image_slots(&self) -> usize {
        self.tokens.iter().filter(|t| t.id == IMG).count()
    }

    pub fn answer_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| t.role == Role::Answer).count()
    }

    /// Spliced positions and, per position, the answer token it predicts.
    fn layout(&self, n_image: usize) -> (Vec<Slot>, Vec<Option<usize>>) {
        let mut slots = alloc::vec![Slot::Token(BOS)];
        let mut answer = alloc::vec![false];
        for t in &self.tokens {
            if t.id == IMG {
                for r in 0..n_image {
                    slots.push(Slot::Image(r));
                    answer.push(false);
                }
            } else {
                slots.push(Slot::Token(t.id));
                answer.push(t.role == Role::Answer);
            }
        }
        let targets = (0..slots.len())
            .map(|p| match slots.get(p + 1) {
                Some(Slot::Token(id)) if answer[p + 1] => Some(*id as usize),
                _ => None,
            })
            .collect();
        (slots, targets)
    }
}

/// Summed answer-token negative log-likelihood and the number of terms.
#[derive(Debug, Clone, Copy)]
pub struct Nll {
    pub sum: Var,
    pub count: usize,
}

impl Nll {
    pub fn mean(&self, g: &Graph<'_>) -> f64 {
        g.scalar(self.sum) / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assistant {
    pub cfg: AssistantConfig,
    pub vision_cfg: EncoderConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub connector: Connector,
    pub lm: ToyLm,
}

impl Assistant {
    /// Fresh model with the stage's trainable groups set.
    pub fn new(vision_cfg: EncoderConfig, cfg: AssistantConfig, seed: u64) -> Result<Self> {
        vision_cfg.validate()?;
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &vision_cfg, &mut rng);
        let connector = Connector::new(&mut store, vision_cfg.d, cfg.lm_dim, cfg.connector_layers, &mut rng);
        let lm = ToyLm::new(&mut store, &cfg, &mut rng);
        set_stage(&mut store, cfg.stage);
        Ok(Self {
            cfg,
            vision_cfg,
            store,
            vision,
            connector,
            lm,
        })
    }

    /// Copy vision-encoder weights from another store by name.
    pub fn load_vision(&mut self, src: &ParamStore) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.group.is_vision())
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let Some(id) = src.find(&name) else {
                bail!(Invalid, "source has no parameter {name}");
            };
            self.store.load_value(&name, src.value(id).clone())?;
        }
        Ok(())
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.cfg.stage = stage;
        set_stage(&mut self.store, stage);
    }

    /// Vision-encoder output for every patch of `image`, `n_patches x d`.
    pub fn encode_image(&self, g: &mut Graph<'_>, image: &Image) -> Result<Var> {
        let grid = split_patches("", image, self.vision_cfg.patch_size)?;
        let all: Vec<usize> = (0..grid.len()).collect();
        self.vision.encode_patches(g, &grid, &all)
    }

    /// Frozen-encoder latents computed once, outside any training graph.
    pub fn vision_latents(&self, image: &Image) -> Result<Mat> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let z = self.encode_image(&mut g, image)?;
        Ok(g.value(z).clone())
    }

    fn embed(&self, g: &mut Graph<'_>, slots: &[Slot], image: Option<Var>) -> Result<Var> {
        if slots.len() > self.cfg.max_seq {
            bail!(Shape, "sequence of {} positions exceeds max_seq {}", slots.len(), self.cfg.max_seq);
        }
        if let Some(&bad) = slots.iter().find_map(|s| match s {
            Slot::Token(id) if *id as usize >= self.cfg.vocab_size => Some(id),
            _ => None,
        }) {
            bail!(Shape, "token id {bad} outside vocabulary of {}", self.cfg.vocab_size);
        }
        let tok = g.param(self.lm.tok);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < slots.len() {
            match slots[i] {
                Slot::Token(id) => {
                    run.push(id as usize);
                    i += 1;
                }
                Slot::Image(_) => {
                    if !run.is_empty() {
                        parts.push(g.gather(tok, &run)?);
                        run.clear();
                    }
                    let Some(img) = image else {
                        bail!(Invalid, "sequence has an image slot but no image was given");
                    };
                    parts.push(img);
                    while i < slots.len() && matches!(slots[i], Slot::Image(_)) {
                        i += 1;
                    }
                }
            }
        }
        if !run.is_empty() {
            parts.push(g.gather(tok, &run)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    fn connected(&self, g: &mut Graph<'_>, latents: Option<Var>) -> Result<Option<Var>> {
        latents.map(|z| self.connector.connect(g, z)).transpose()
    }

    /// Logits over the spliced sequence given raw vision latents, with the
    /// per-position answer targets.
    pub fn logits_from_latents(&self, g: &mut Graph<'_>, pack: &SequencePack, latents: Option<Var>) -> Result<(Var, Vec<Option<usize>>)> {
        let n_image = match (pack.image_slots(), latents) {
            (0, _) => 0,
            (_, Some(z)) => g.value(z).rows,
            (_, None) => bail!(Invalid, "sequence has an image slot but no image was given"),
        };
        let (slots, targets) = pack.layout(n_image);
        let img = if n_image > 0 { self.connected(g, latents)? } else { None };
        let x = self.embed(g, &slots, img)?;
        Ok((self.lm.forward(g, x)?, targets))
    }

    /// Answer-token negative log-likelihood from pixels.
    pub fn nll(&self, g: &mut Graph<'_>, pack: &SequencePack, image: Option<&Image>) -> Result<Nll> {
        let latents = match (pack.image_slots(), image) {
            (0, _) => None,
            (_, Some(img)) => Some(self.encode_image(g, img)?),
            (_, None) => bail!(Invalid, "sequence has an image slot but no image was given"),
        };
        self.nll_from_latents(g, pack, latents)
    }

    pub fn nll_from_latents(&self, g: &mut Graph<'_>, pack: &SequencePack, latents: Option<Var>) -> Result<Nll> {
        let (logits, targets) = self.logits_from_latents(g, pack, latents)?;
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            bail!(Invalid, "sequence has no answer tokens");
        }
        Ok(Nll {
            sum: g.cross_entropy(logits, &targets)?,
            count,
        })
    }
}

/// `-sum log p(answer token | everything before it)` with the image
/// latents spliced in; the mean per answer token is `sum / count`.
pub fn assistant_nll(g: &mut Graph<'_>, model: &Assistant, pack: &SequencePack, image: Option<&Image>) -> Result<Nll> {
    model.nll(g, pack, image)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Greedy decoding of an answer to `instruction` about `image`, stopping
/// at STOP or EOS, after `max_new` tokens, or at `max_seq`.
pub fn greedy_generate(model: &Assistant, image: &Image, instruction: &str, vocab: &Vocab, max_new: usize) -> Result<String> {
    if max_new == 0 {
        return Ok(String::new());
    }
    let prompt = InstructionSample {
        image_id: String::new(),
        image_position: ImagePosition::After,
        turns: alloc::vec![ConversationTurn {
            q: instruction.into(),
            a: String::new(),
        }],
        category: None,
    };
    let mut tokens = pack_tokens(&prompt, vocab)?;
    // drop the empty answer's STOP
    tokens.pop();
    let latents = model.vision_latents(image)?;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let pack = SequencePack::new(tokens.clone())?;
        if pack.tokens.len() + latents.rows >= model.cfg.max_seq {
            break;
        }
        let mut g = Graph::new(&model.store, GradMode::None);
        let z = g.input(latents.clone());
        let (logits, _) = model.logits_from_latents(&mut g, &pack, Some(z))?;
        let l = g.value(logits);
        let next = argmax(l.row(l.rows - 1)) as u32;
        if next == STOP || next == EOS {
            break;
        }
        out.push(next);
        tokens.push(PackedToken {
            id: next,
            role: Role::Answer,
            turn: 1,
        });
    }
    Ok(vocab.detokenize(&TokenSeq::new(out)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantTrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for AssistantTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup_steps: 10,
            epochs: 10,
            batch_size: 16,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// One conversation with its image.
#[derive(Debug, Clone, PartialEq)]
pub struct AssistantExample {
    pub image: Image,
    pub pack: SequencePack,
}

/// Train the current stage's groups. The batch objective is the summed
/// answer NLL divided by the batch's answer-token count. Returns the mean
/// per-token loss of every epoch.
pub fn train_assistant<F>(model: &mut Assistant, data: &[AssistantExample], cfg: &AssistantTrainConfig, mut on_epoch: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64) -> Result<()>,
{
    if data.is_empty() || cfg.batch_size == 0 {
        bail!(Invalid, "assistant training needs data and a positive batch size");
    }
    let vision_frozen = !model.store.is_group_trainable(Group::VisionEmbed) && !model.store.is_group_trainable(Group::VisionBlocks);
    // the encoder is frozen in both stages, so its output can be computed once
    let cached: Option<Vec<Mat>> = if vision_frozen {
        Some(data.iter().map(|e| model.vision_latents(&e.image)).collect::<Result<_>>()?)
    } else {
        None
    };
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.store.len(),
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derive(cfg.seed, 0x7000 + epoch as u64));
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for members in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&model.store, GradMode::Trainable);
            let mut terms = Vec::with_capacity(members.len());
            let mut count = 0;
            for &i in members {
                let ex = &data[i];
                let nll = match &cached {
                    Some(c) if ex.pack.image_slots() > 0 => {
                        let z = g.input(c[i].clone());
                        model.nll_from_latents(&mut g, &ex.pack, Some(z))?
                    }
                    _ => model.nll(&mut g, &ex.pack, Some(&ex.image))?,
                };
                terms.push(nll.sum);
                count += nll.count;
            }
            let mut total_nll = terms[0];
            for &t in &terms[1..] {
                total_nll = g.add(total_nll, t)?;
            }
            let loss = g.scale(total_nll, 1.0 / count as f64);
            let value = g.scalar(total_nll);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("assistant loss {value}"),
                });
            }
            let mut grads = g.backward(loss).into_param_grads();
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cosine_lr(cfg.lr, step, total, cfg.warmup_steps);
            opt.step(&mut model.store, &grads, lr);
            loss_sum += value;
            tokens += count;
            step += 1;
        }
        let mean = loss_sum / tokens as f64;
        on_epoch(epoch, mean)?;
        history.push(mean);
    }
    Ok(history)
}
