//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. `ACCEPTANCE_ONLY=1,2,3` restricts the run to listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use insectfm::imagestore::encode_pnm;
use insectfm::manifest::manifest_to_string;
use insectfm_core::alignment::{
    batch_pairs, build_samples, contrastive_loss, pretrain, prepare_epoch, total_loss, FoundationModel, LossInputs, LossWeights,
    TrainConfig, TrainSample,
};
use insectfm_core::assistant::{assistant_nll, train_assistant, Assistant, AssistantConfig, AssistantExample, AssistantTrainConfig, SequencePack, Stage};
use insectfm_core::autograd::{attention_probs, GradMode, Graph, Mask};
use insectfm_core::encoders::EncoderConfig;
use insectfm_core::eval::{build_vqa, image_features, linear_probe, prs_auc, score_vqa, zero_shot_classify, BenchmarkItem, Choice, Distractors, ProbeConfig, VQA_QUESTION};
use insectfm_core::gradcheck::check_params;
use insectfm_core::image::Image;
use insectfm_core::instruct::{
    assemble_instruct_tokens, check_sample, filter_responses, generate_conversations, pack_tokens, ConversationTurn, FilterPhrases,
    ImagePosition, InstructionSample, RejectReason, Role, StubBackend, PackedToken,
};
use insectfm_core::nn::{build_stack, run_stack, zero_output_projections, BlockSpec};
use insectfm_core::params::{Group, ParamStore};
use insectfm_core::patching::PatchGrid;
use insectfm_core::prs::{prs_loss, prs_term, relevance_from_cosine};
use insectfm_core::rng::seeded;
use insectfm_core::synthetic::{generate_synthetic, SyntheticConfig};
use insectfm_core::tensor::Mat;
use insectfm_core::tokenizer::{TokenSeq, Vocab, IMG, STOP};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = seeded(seed);
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
    }
}

fn random_image(side: usize, seed: u64) -> Image {
    let mut r = seeded(seed);
    Image::from_pixels(side, side, 1, (0..side * side).map(|_| r.gen()).collect()).unwrap()
}

fn tiny_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        d: 8,
        vision_blocks: 2,
        text_blocks: 1,
        decoder_blocks: 1,
        heads: 2,
        mlp_ratio: 1.0,
        patch_size: 4,
        image_size: 8,
        channels: 1,
        max_text_len: 8,
        vocab_size: vocab,
        ..EncoderConfig::default()
    }
}

fn tiny_assistant(vocab: usize) -> AssistantConfig {
    AssistantConfig {
        lm_dim: 8,
        lm_blocks: 1,
        lm_heads: 2,
        max_seq: 32,
        vocab_size: vocab,
        mlp_ratio: 1.0,
        ..AssistantConfig::default()
    }
}

fn tiny_samples(n: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| TrainSample {
            image_id: format!("img{i}"),
            image: random_image(8, 100 + i as u64),
            description: TokenSeq::new(vec![6 + (i % 3) as u32, 7, 8]),
        })
        .collect()
}

fn tok(id: u32, role: Role, turn: usize) -> PackedToken {
    PackedToken { id, role, turn }
}

/// question, IMG | answer | question | answer
fn two_turn_pack() -> SequencePack {
    use Role::*;
    SequencePack::new(vec![
        tok(7, Instruction, 1),
        tok(8, Instruction, 1),
        tok(IMG, Instruction, 1),
        tok(STOP, Instruction, 1),
        tok(9, Answer, 1),
        tok(10, Answer, 1),
        tok(STOP, Answer, 1),
        tok(11, Instruction, 2),
        tok(STOP, Instruction, 2),
        tok(12, Answer, 2),
        tok(STOP, Answer, 2),
    ])
    .unwrap()
}

fn zero(store: &mut ParamStore, ids: &[insectfm_core::params::ParamId]) {
    for &id in ids {
        store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
}

// ---------------------------------------------------------------- 1

fn closed_forms() -> Check {
    let ln2 = 2f64.ln();
    let mut worst: f64 = 0.0;
    let mut close = |got: f64, want: f64, what: &str| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 1e-9, format!("{what}: {got} vs {want}"))
    };
    close(relevance_from_cosine(0.0), 0.5, "H at zero cosine")?;
    close(prs_term(0.5, true), ln2, "PRS term H=0.5 y=1")?;
    close(prs_loss(&[(0.5, true)]).map_err(e)?, ln2, "PRS loss H=0.5 y=1")?;

    let z = Mat::from_rows(&[&[0.3, -1.2, 2.0]]).unwrap();
    let w = Mat::from_rows(&[&[1.0, 0.5, -0.7]]).unwrap();
    close(contrastive_loss(&z, &w, None).map_err(e)?, 0.0, "contrastive N=1")?;
    // every dot product equals 3
    let z2 = Mat::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
    let w2 = Mat::from_rows(&[&[3.0, 1.0], &[3.0, -1.0]]).unwrap();
    close(contrastive_loss(&z2, &w2, None).map_err(e)?, 2.0 * ln2, "contrastive N=2 uniform")?;

    // description loss with a zeroed output head: every step is uniform
    let v = 13;
    let mut fm = FoundationModel::new(tiny_encoder(v), 1, true).map_err(e)?;
    let head = fm.decoder.head;
    zero(&mut fm.store, &[head.w, head.b]);
    let mut g = Graph::new(&fm.store, GradMode::None);
    let mem = g.input(random_mat(4, 8, 2));
    let target = TokenSeq::new(vec![6, 7, 8, 9, 10]).with_eos();
    let l = fm.decoder.loss(&mut g, &target, mem).map_err(e)?;
    close(g.scalar(l), target.len() as f64 * (v as f64).ln(), "description loss")?;

    // assistant NLL with a zeroed LM head
    let mut a = Assistant::new(tiny_encoder(16), tiny_assistant(20), 3).map_err(e)?;
    let h = a.lm.head;
    zero(&mut a.store, &[h.w, h.b]);
    let pack = two_turn_pack();
    let mut g = Graph::new(&a.store, GradMode::None);
    let nll = assistant_nll(&mut g, &a, &pack, Some(&random_image(8, 5))).map_err(e)?;
    ensure(nll.count == 5, format!("answer count {}", nll.count))?;
    close(g.scalar(nll.sum), 5.0 * 20f64.ln(), "assistant NLL")?;
    Ok(format!("max abs deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Check {
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    let samples = tiny_samples(3);
    let base = TrainConfig {
        batch_size: 3,
        k_pos: 1,
        k_neg: 2,
        crop_margin: 1,
        ..TrainConfig::default()
    };
    let cases = [
        ("L_prs", LossWeights { prs: 1.0, con: 0.0, desc: 0.0 }),
        ("L_con", LossWeights { prs: 0.0, con: 1.0, desc: 0.0 }),
        ("L_desc", LossWeights { prs: 0.0, con: 0.0, desc: 1.0 }),
        ("total", LossWeights { prs: 1.0, con: 0.7, desc: 0.3 }),
    ];
    for (name, weights) in cases {
        let cfg = TrainConfig { loss_weights: weights, ..base.clone() };
        let mut model = FoundationModel::new(tiny_encoder(12), 2, true).map_err(e)?;
        let epoch = prepare_epoch(&samples, &cfg, 4, 0).map_err(e)?;
        let pairs = batch_pairs(&epoch, &[0, 1, 2], &cfg, &mut seeded(3)).map_err(e)?;
        let grids: Vec<&PatchGrid> = epoch.grids.iter().collect();
        let kept: Vec<&[usize]> = epoch.splits.iter().map(|s| s.kept.as_slice()).collect();
        let descriptions: Vec<&TokenSeq> = samples.iter().map(|s| &s.description).collect();
        let snapshot = model.clone();
        let report = check_params(&mut model.store, 1e-5, 1, |g| {
            let inputs = LossInputs {
                grids: &grids,
                kept: &kept,
                descriptions: &descriptions,
                pool: &epoch.pool,
                pairs: &pairs,
            };
            Ok(total_loss(g, &snapshot, inputs, weights, None)?.0)
        })
        .map_err(e)?;
        worst = worst.max(report.max_rel_err);
        lines.push(format!("{name} {:.1e} ({} entries)", report.max_rel_err, report.checked));
        ensure(report.max_rel_err <= 1e-4, format!("{name}: {:?}", report))?;
    }
    let mut a = Assistant::new(tiny_encoder(16), tiny_assistant(16), 7).map_err(e)?;
    let img = random_image(8, 4);
    let pack = two_turn_pack();
    let snapshot = a.clone();
    let report = check_params(&mut a.store, 1e-5, 1, |g| {
        let nll = assistant_nll(g, &snapshot, &pack, Some(&img))?;
        Ok(g.scale(nll.sum, 1.0 / nll.count as f64))
    })
    .map_err(e)?;
    worst = worst.max(report.max_rel_err);
    lines.push(format!("assistant_nll {:.1e} ({} entries)", report.max_rel_err, report.checked));
    ensure(report.max_rel_err <= 1e-4, format!("assistant_nll: {report:?}"))?;
    Ok(format!("max rel err {worst:.1e}; {}", lines.join(", ")))
}

// ---------------------------------------------------------------- 3

fn snapshots(store: &ParamStore, groups: &[Group]) -> Vec<Vec<Mat>> {
    groups.iter().map(|&g| store.snapshot(g)).collect()
}

fn same(a: &[Vec<Mat>], b: &[Vec<Mat>]) -> bool {
    a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.bit_eq(y))
}

fn structural() -> Check {
    let mut rng = seeded(1);
    // residual identity: zero branch outputs, no normalisation
    let mut store = ParamStore::new();
    let spec = BlockSpec {
        d: 8,
        heads: 2,
        mlp_hidden: 16,
        pre_norm: false,
        cross_attention: true,
    };
    let blocks = build_stack(&mut store, "b", Group::VisionBlocks, spec, 3, &mut rng);
    zero_output_projections(&mut store, &blocks);
    let x0 = random_mat(5, 8, 2);
    let mut g = Graph::new(&store, GradMode::None);
    let x = g.input(x0.clone());
    let mem = g.input(random_mat(3, 8, 3));
    let y = run_stack(&blocks, &mut g, x, &Mask::Causal, Some(mem)).map_err(e)?;
    ensure(g.value(y).bit_eq(&x0), "residual stack is not the identity")?;

    // attention rows are distributions under every mask
    let q = random_mat(6, 8, 4);
    let k = random_mat(6, 8, 5);
    let mut max_dev: f64 = 0.0;
    let masks = [
        Mask::None,
        Mask::Causal,
        Mask::KeyValid(vec![true, true, false, true, false, true]),
        Mask::Diagonal,
    ];
    for mask in &masks {
        for p in attention_probs(&q, &k, 2, mask) {
            for r in 0..p.rows {
                max_dev = max_dev.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(max_dev <= 1e-6, format!("attention row sum off by {max_dev}"))?;

    // pooling is permutation invariant
    let fm = FoundationModel::new(tiny_encoder(12), 4, true).map_err(e)?;
    let z = random_mat(7, 8, 6);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let mut g = Graph::new(&fm.store, GradMode::None);
    let a = g.input(z.clone());
    let b = g.input(z.select_rows(&perm));
    let (pa, wa) = fm.pool.forward_with_weights(&mut g, a).map_err(e)?;
    let (pb, _) = fm.pool.forward_with_weights(&mut g, b).map_err(e)?;
    let diff = g.value(pa).data.iter().zip(&g.value(pb).data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-12, format!("pool changes under permutation by {diff}"))?;
    ensure((wa.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "pool weights do not sum to 1")?;

    // decoder causality: changing later inputs leaves earlier logits alone
    let mem_m = random_mat(4, 8, 7);
    let logits = |input: &[u32]| {
        let mut g = Graph::new(&fm.store, GradMode::None);
        let m = g.input(mem_m.clone());
        let l = fm.decoder.logits(&mut g, input, m).unwrap();
        g.value(l).clone()
    };
    let l1 = logits(&[1, 6, 7, 8, 9]);
    let l2 = logits(&[1, 6, 7, 11, 10]);
    let prefix = |m: &Mat| m.select_rows(&[0, 1, 2]);
    ensure(prefix(&l1).bit_eq(&prefix(&l2)), "decoder logits see the future")?;
    // padding positions are not targets
    let mut g = Graph::new(&fm.store, GradMode::None);
    let m = g.input(mem_m.clone());
    let t = TokenSeq::new(vec![6, 7, 8]).with_eos();
    let la = fm.decoder.loss(&mut g, &t, m).map_err(e)?;
    let lb = fm.decoder.loss(&mut g, &t.clone().padded(8), m).map_err(e)?;
    ensure(g.scalar(la).to_bits() == g.scalar(lb).to_bits(), "padding changes the description loss")?;

    // assistant: trailing instruction tokens are not targets and, by
    // causality, cannot affect earlier answers
    let asst = Assistant::new(tiny_encoder(16), tiny_assistant(16), 5).map_err(e)?;
    let img = random_image(8, 9);
    let base = two_turn_pack();
    let mut extended = base.tokens.clone();
    extended.extend([tok(13, Role::Instruction, 3), tok(14, Role::Instruction, 3), tok(STOP, Role::Instruction, 3)]);
    let extended = SequencePack::new(extended).map_err(e)?;
    let mut g = Graph::new(&asst.store, GradMode::None);
    let n1 = assistant_nll(&mut g, &asst, &base, Some(&img)).map_err(e)?;
    let n2 = assistant_nll(&mut g, &asst, &extended, Some(&img)).map_err(e)?;
    ensure(
        n1.count == n2.count && g.scalar(n1.sum).to_bits() == g.scalar(n2.sum).to_bits(),
        "non-target suffix changes the assistant loss",
    )?;

    // freeze contracts, both instruction-tuning stages, 10 steps each
    let vocab = 16;
    let data: Vec<AssistantExample> = (0..10)
        .map(|i| AssistantExample {
            image: random_image(8, 20 + i),
            pack: two_turn_pack(),
        })
        .collect();
    let tc = AssistantTrainConfig {
        batch_size: 1,
        epochs: 1,
        warmup_steps: 0,
        lr: 1e-2,
        ..AssistantTrainConfig::default()
    };
    let vision = [Group::VisionEmbed, Group::VisionBlocks];
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let mut m = Assistant::new(tiny_encoder(16), AssistantConfig { stage, ..tiny_assistant(vocab) }, 11).map_err(e)?;
        m.set_stage(stage);
        let v0 = snapshots(&m.store, &vision);
        let c0 = snapshots(&m.store, &[Group::Connector]);
        let l0 = snapshots(&m.store, &[Group::ToyLm]);
        train_assistant(&mut m, &data, &tc, |_, _| Ok(())).map_err(e)?;
        ensure(same(&v0, &snapshots(&m.store, &vision)), format!("{stage:?}: vision encoder moved"))?;
        ensure(!same(&c0, &snapshots(&m.store, &[Group::Connector])), format!("{stage:?}: connector did not train"))?;
        let lm_same = same(&l0, &snapshots(&m.store, &[Group::ToyLm]));
        match stage {
            Stage::Pretrain => ensure(lm_same, "pretrain stage moved the language model")?,
            Stage::Finetune => ensure(!lm_same, "finetune stage left the language model untouched")?,
        }
    }
    // a frozen encoder group during pretraining
    let mut fm = FoundationModel::new(tiny_encoder(12), 6, true).map_err(e)?;
    fm.store.set_trainable(Group::TextBlocks, false);
    let t0 = snapshots(&fm.store, &[Group::TextBlocks]);
    let p0 = snapshots(&fm.store, &[Group::VisionBlocks]);
    let cfg = TrainConfig {
        batch_size: 1,
        k_pos: 1,
        k_neg: 2,
        crop_margin: 1,
        max_steps: Some(10),
        epochs: 10,
        ..TrainConfig::default()
    };
    let report = pretrain(&mut fm, &tiny_samples(4), &cfg, |_, _, _| Ok(())).map_err(e)?;
    ensure(report.steps == 10, format!("{} steps", report.steps))?;
    ensure(same(&t0, &snapshots(&fm.store, &[Group::TextBlocks])), "frozen text blocks moved")?;
    ensure(!same(&p0, &snapshots(&fm.store, &[Group::VisionBlocks])), "vision blocks did not train")?;
    Ok("residual identity, attention rows, pool permutation, causality and masks, freeze contracts".into())
}

// ---------------------------------------------------------- 4, 5, 6

const RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];
const SEEDS: [u64; 3] = [0, 1, 2];

/// The desk-scale acceptance recipe; see the README for how it was chosen.
fn acceptance_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        d: 32,
        vision_blocks: 2,
        text_blocks: 1,
        decoder_blocks: 1,
        heads: 2,
        vocab_size,
        ..EncoderConfig::default()
    }
}

fn acceptance_train(ratio: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        epochs: 30,
        sampling_ratio: ratio,
        seed,
        crop_margin: 0,
        loss_weights: LossWeights { prs: 20.0, con: 1.0, desc: 1.0 },
        ..TrainConfig::default()
    }
}

struct Run {
    acc1: f64,
    auc: f64,
    first_loss: f64,
    last_loss: f64,
    zero_shot: Option<(f64, bool)>,
}

struct Experiment {
    runs: BTreeMap<(u64, u64), Run>,
    random_acc1: BTreeMap<u64, f64>,
}

fn ratio_key(r: f64) -> u64 {
    (r * 100.0).round() as u64
}

fn experiment() -> Result<Experiment, String> {
    let ds = generate_synthetic(&SyntheticConfig::default()).map_err(e)?;
    let texts: Vec<String> = ds.manifest.records().iter().map(|r| r.description_text()).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let cfg = acceptance_encoder(vocab.len());
    let samples = build_samples(&ds.manifest, &ds.images, &vocab, cfg.max_text_len).map_err(e)?;
    let labels = ds.classes.clone();
    let n_classes = ds.classes.iter().max().map_or(0, |m| m + 1);
    let images: Vec<&Image> = ds.images.iter().collect();
    // one description embedding per class, from its first record
    let species = ds.manifest.records().iter().map(|r| r.species().to_string()).collect::<Vec<_>>();
    let mut class_text = vec![String::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        if class_text[c].is_empty() {
            class_text[c] = texts[i].clone();
        }
    }
    let _ = species;

    let mut exp = Experiment {
        runs: BTreeMap::new(),
        random_acc1: BTreeMap::new(),
    };
    for &seed in &SEEDS {
        let probe = ProbeConfig { seed, ..ProbeConfig::default() };
        let random = FoundationModel::new(cfg.clone(), seed, true).map_err(e)?;
        let feats = image_features(&random, &images).map_err(e)?;
        let m = linear_probe(&feats, &labels, n_classes, &probe).map_err(e)?;
        exp.random_acc1.insert(seed, m.acc1);
        eprintln!("  seed {seed}: random-init probe acc@1 {:.3}", m.acc1);
        for &ratio in &RATIOS {
            let t = Instant::now();
            let tc = acceptance_train(ratio, seed);
            let mut model = FoundationModel::new(cfg.clone(), seed, true).map_err(e)?;
            let report = pretrain(&mut model, &samples, &tc, |_, _, _| Ok(())).map_err(e)?;
            let epoch_mean = |ep: usize| {
                let v: Vec<f64> = report.metrics.iter().filter(|s| s.epoch == ep).map(|s| s.total).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            let feats = image_features(&model, &images).map_err(e)?;
            let m = linear_probe(&feats, &labels, n_classes, &probe).map_err(e)?;
            let auc = prs_auc(&model, &samples, ratio, seed).map_err(e)?;
            let zero_shot = if ratio == 0.5 {
                let classes = class_text
                    .iter()
                    .map(|t| model.text_embedding(&vocab.tokenize(t)))
                    .collect::<insectfm_core::Result<Vec<_>>>()
                    .map_err(e)?;
                let (zm, preds) = zero_shot_classify(&feats, &labels, &classes).map_err(e)?;
                let scaled_img: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|x| x * 3.7).collect()).collect();
                let scaled_cls: Vec<Vec<f64>> = classes.iter().map(|f| f.iter().map(|x| x * 0.02).collect()).collect();
                let (_, p2) = zero_shot_classify(&scaled_img, &labels, &scaled_cls).map_err(e)?;
                Some((zm.acc1, preds == p2))
            } else {
                None
            };
            eprintln!(
                "  seed {seed} ratio {ratio}: acc@1 {:.3} auc {:.3} loss {:.2} -> {:.2}{} ({:.0?})",
                m.acc1,
                auc,
                epoch_mean(0),
                epoch_mean(tc.epochs - 1),
                zero_shot.map_or(String::new(), |(a, _)| format!(" zero-shot {a:.3}")),
                t.elapsed()
            );
            exp.runs.insert(
                (seed, ratio_key(ratio)),
                Run {
                    acc1: m.acc1,
                    auc,
                    first_loss: epoch_mean(0),
                    last_loss: epoch_mean(tc.epochs - 1),
                    zero_shot,
                },
            );
        }
    }
    Ok(exp)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn micro_feature(exp: &Experiment) -> Check {
    let at = |s: u64| &exp.runs[&(s, 50)];
    let aucs: Vec<f64> = SEEDS.iter().map(|&s| at(s).auc).collect();
    let gaps: Vec<f64> = SEEDS.iter().map(|&s| at(s).acc1 - exp.random_acc1[&s]).collect();
    let mean_auc = mean(aucs.iter().copied());
    let mean_gap = mean(gaps.iter().copied());
    let detail = format!(
        "AUC mean {mean_auc:.3} (per seed {aucs:.3?}); probe gap mean {:.1} points (trained {:.3} vs random {:.3})",
        mean_gap * 100.0,
        mean(SEEDS.iter().map(|&s| at(s).acc1)),
        mean(SEEDS.iter().map(|&s| exp.random_acc1[&s]))
    );
    let decreased = SEEDS.iter().all(|&s| at(s).last_loss < at(s).first_loss);
    ensure(decreased, format!("total loss did not decrease; {detail}"))?;
    ensure(mean_auc >= 0.8 && mean_gap >= 0.10, detail.clone())?;
    Ok(detail)
}

fn ratio_trend(exp: &Experiment) -> Check {
    let mut table = String::from("\n    ratio   acc@1 (seeds 0,1,2)        mean   auc");
    let mut means = BTreeMap::new();
    for &r in &RATIOS {
        let accs: Vec<f64> = SEEDS.iter().map(|&s| exp.runs[&(s, ratio_key(r))].acc1).collect();
        let m = mean(accs.iter().copied());
        let auc = mean(SEEDS.iter().map(|&s| exp.runs[&(s, ratio_key(r))].auc));
        means.insert(ratio_key(r), m);
        table.push_str(&format!("\n    {r:<7} {accs:.3?}   {m:.3}  {auc:.3}"));
    }
    let detail = format!("0.5 -> {:.3}, 0.9 -> {:.3}{table}", means[&50], means[&90]);
    ensure(means[&50] >= means[&90], detail.clone())?;
    Ok(detail)
}

fn zero_shot(exp: &Experiment) -> Check {
    let zs: Vec<(f64, bool)> = SEEDS.iter().map(|&s| exp.runs[&(s, 50)].zero_shot.unwrap()).collect();
    let accs: Vec<f64> = zs.iter().map(|z| z.0).collect();
    let m = mean(accs.iter().copied());
    let invariant = zs.iter().all(|z| z.1);
    let detail = format!("acc@1 mean {m:.3} (per seed {accs:.3?}), chance 0.050; rescaling invariant: {invariant}");
    ensure(m >= 0.10 && invariant, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn turn(q: &str, a: &str) -> ConversationTurn {
    ConversationTurn { q: q.into(), a: a.into() }
}

fn crafted(id: usize, turns: Vec<ConversationTurn>) -> InstructionSample {
    InstructionSample {
        image_id: format!("x{id:02}"),
        image_position: ImagePosition::Before,
        turns,
        category: None,
    }
}

fn pipeline() -> Check {
    // data
    let cfg = SyntheticConfig::default();
    let a = generate_synthetic(&cfg).map_err(e)?;
    let b = generate_synthetic(&cfg).map_err(e)?;
    ensure(manifest_to_string(&a.manifest) == manifest_to_string(&b.manifest), "manifests differ")?;
    for (x, y) in a.images.iter().zip(&b.images) {
        ensure(encode_pnm(x).map_err(e)? == encode_pnm(y).map_err(e)?, "image bytes differ")?;
    }
    // instruction corpus
    let phrases = FilterPhrases::builtin();
    let c1 = generate_conversations(&a.manifest, &mut StubBackend, &phrases, 11);
    let c2 = generate_conversations(&b.manifest, &mut StubBackend, &phrases, 11);
    ensure(serde_json::to_string(&c1).map_err(e)? == serde_json::to_string(&c2).map_err(e)?, "corpora differ")?;
    // benchmark
    let v1 = build_vqa(&a.manifest, 4, Some(200), Distractors::Uniform, &mut seeded(5)).map_err(e)?;
    let v2 = build_vqa(&b.manifest, 4, Some(200), Distractors::Uniform, &mut seeded(5)).map_err(e)?;
    ensure(v1 == v2, "benchmarks differ")?;

    // crafted corpus: three clean samples, three of each noise pattern
    let good = "It has a dark body with a pale cross on the back.";
    let samples = vec![
        crafted(0, vec![turn("What colour is it?", good)]),
        crafted(1, vec![turn("Describe it.", good), turn("Where is the mark?", "On the back.")]),
        crafted(2, vec![turn("What is it?", "A ground beetle!")]),
        crafted(3, vec![turn("What colour is it?", "It has a dark body with a")]),
        crafted(4, vec![turn("Describe it.", good), turn("And the legs?", "The legs are")]),
        crafted(5, vec![turn("", good)]),
        crafted(6, vec![]),
        crafted(7, vec![turn("What is it?", "I'm sorry, but I can't identify this.")]),
        crafted(8, vec![turn("What is it?", ""), turn("Anything else?", " ")]),
        crafted(9, vec![turn("What is it?", "I cannot see the image, but it may be a beetle.")]),
        crafted(10, vec![turn("Describe it.", "As a language model I can only guess.")]),
        crafted(11, vec![turn("Describe it.", good), turn("Why?", "Based on the description, it is a beetle.")]),
    ];
    use RejectReason::*;
    let expected = [None, None, None, Some(Incomplete), Some(Incomplete), Some(Incomplete), Some(NoAnswer), Some(NoAnswer), Some(NoAnswer), Some(NonVisualDisclaimer), Some(NonVisualDisclaimer), Some(NonVisualDisclaimer)];
    for (s, want) in samples.iter().zip(expected) {
        let got = check_sample(s, &phrases);
        ensure(got == want, format!("{}: expected {want:?}, got {got:?}", s.image_id))?;
    }
    let report = filter_responses(samples, &phrases);
    let counts = report.counts();
    ensure(
        report.kept.len() == 3 && counts.values().all(|&n| n == 3) && counts.len() == 3,
        format!("kept {}, rejected {counts:?}", report.kept.len()),
    )?;

    // exactly one image token per packed sample, always in turn 1
    let texts: Vec<&str> = c1.kept.iter().flat_map(|s| s.turns.iter().flat_map(|t| [t.q.as_str(), t.a.as_str()])).collect();
    let vocab = Vocab::build(texts);
    let mut rng = seeded(3);
    let mut scanned = 0;
    for s in &c1.kept {
        for tokens in [pack_tokens(s, &vocab).map_err(e)?, assemble_instruct_tokens(s, &vocab, &mut rng).map_err(e)?.1] {
            let imgs: Vec<&PackedToken> = tokens.iter().filter(|t| t.id == IMG).collect();
            ensure(imgs.len() == 1 && imgs[0].turn == 1, format!("{}: image tokens {imgs:?}", s.image_id))?;
            scanned += 1;
        }
    }
    Ok(format!(
        "byte-identical data, corpus and benchmark; crafted corpus 3 kept / 3+3+3 rejected; {scanned} packed sequences with one turn-1 image token"
    ))
}

// ---------------------------------------------------------------- 8

fn benchmark() -> Check {
    let ds = generate_synthetic(&SyntheticConfig::default()).map_err(e)?;
    let items = build_vqa(&ds.manifest, 4, Some(1000), Distractors::Uniform, &mut seeded(8)).map_err(e)?;
    ensure(items.len() == 1000, format!("{} items", items.len()))?;
    let oracle: BTreeMap<String, Choice> = items.iter().map(|it| (it.item_id.clone(), Choice::Index(it.answer_index))).collect();
    let s = score_vqa(&items, &oracle).map_err(e)?;
    ensure(s.accuracy == 1.0, format!("oracle accuracy {}", s.accuracy))?;
    let mut slots = [0usize; 4];
    for it in &items {
        slots[it.answer_index] += 1;
    }
    let freqs: Vec<f64> = slots.iter().map(|&n| n as f64 / items.len() as f64).collect();
    ensure(freqs.iter().all(|f| (f - 0.25).abs() <= 0.05), format!("slot frequencies {freqs:?}"))?;

    let opts = |a: &str| vec![a.to_string(), "Bombus b".into(), "Aphis c".into(), "Apis d".into()];
    let four: Vec<BenchmarkItem> = (0..4)
        .map(|k| BenchmarkItem {
            item_id: format!("q{k}"),
            image_id: format!("i{k}"),
            question: VQA_QUESTION.into(),
            options: opts("Carabus a"),
            answer_index: 0,
        })
        .collect();
    let preds: BTreeMap<String, Choice> = [
        ("q0", Choice::Index(0)),
        ("q1", Choice::Text("Carabus a".into())),
        ("q2", Choice::Index(0)),
        ("q3", Choice::Index(2)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let s4 = score_vqa(&four, &preds).map_err(e)?;
    ensure(s4.accuracy == 0.75, format!("crafted accuracy {}", s4.accuracy))?;
    Ok(format!("oracle 1.0 on 1000 items; crafted 3/4 = 0.75; slot frequencies {freqs:.3?}"))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    })
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|v| v.contains(&n));
    let names = [
        "closed-form losses",
        "gradient suite",
        "structural invariants",
        "micro-feature (PRS AUC, probe gap)",
        "sampling-ratio trend",
        "zero-shot",
        "pipeline determinism and filtering",
        "benchmark correctness",
    ];
    let mut results: Vec<(u32, Check)> = Vec::new();
    let timed = |n: u32, f: &dyn Fn() -> Check| {
        let t = Instant::now();
        let r = guarded(f);
        eprintln!("criterion {n} finished in {:.1?}", t.elapsed());
        (n, r)
    };
    let quick: [(u32, &dyn Fn() -> Check); 3] = [(1, &closed_forms), (2, &gradient_suite), (3, &structural)];
    for (n, f) in quick {
        if wanted(n) {
            results.push(timed(n, f));
        }
    }
    if wanted(4) || wanted(5) || wanted(6) {
        let t = Instant::now();
        eprintln!("training {} models for criteria 4-6", RATIOS.len() * SEEDS.len());
        let exp = catch_unwind(experiment).unwrap_or_else(|_| Err("experiment panicked".into()));
        eprintln!("experiment finished in {:.1?}", t.elapsed());
        let checks: [(u32, fn(&Experiment) -> Check); 3] = [(4, micro_feature), (5, ratio_trend), (6, zero_shot)];
        for (n, f) in checks {
            if wanted(n) {
                let r = match &exp {
                    Ok(x) => guarded(|| f(x)),
                    Err(msg) => Err(format!("experiment failed: {msg}")),
                };
                results.push((n, r));
            }
        }
    }
    let tail: [(u32, &dyn Fn() -> Check); 2] = [(7, &pipeline), (8, &benchmark)];
    for (n, f) in tail {
        if wanted(n) {
            results.push(timed(n, f));
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("criterion {n} [{}]: PASS - {d}", names[*n as usize - 1]),
            Err(d) => {
                failed += 1;
                println!("criterion {n} [{}]: FAIL - {d}", names[*n as usize - 1]);
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
