//! The `insectfm` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use insectfm_core::alignment::{build_samples, pretrain, FoundationModel, StepMetrics, TrainSample};
use insectfm_core::assistant::{greedy_generate, train_assistant, Assistant, AssistantExample, SequencePack, Stage};
use insectfm_core::dataset::{manifest_stats, Manifest};
use insectfm_core::eval::{
    ablation_run, build_vqa, image_features, linear_probe, prs_auc, ratio_grid, run_cell, score_vqa, zero_shot_classify, AblationCell,
    AblationData, AblationRow, BenchmarkItem, Choice, Distractors, MetricsReport,
};
use insectfm_core::image::Image;
use insectfm_core::instruct::{
    build_pretrain_pair, corpus_stats, filter_responses, generate_conversations, render_llm_prompt, sample_for_review, FilterPhrases,
    FilterReport, InstructionSample, Message, RejectReason, StubBackend, DESCRIBE_QUESTIONS,
};
use insectfm_core::rng::seeded;
use insectfm_core::synthetic::{generate_synthetic, image_extension};
use insectfm_core::tokenizer::{canonicalize, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::{parse_override, Settings, CONFIG_ENV};
use crate::error::{Error, Result};
use crate::imagestore::{sha256_hex, write_store};
use crate::jsonl::{read_jsonl, read_text, write_atomic, write_json, write_jsonl};
use crate::manifest::{load_dataset, load_manifest, manifest_to_string};
use crate::models::{load_assistant, load_foundation, save_assistant, save_foundation};

#[derive(Debug, Parser)]
#[command(name = "insectfm", version, about = "Micro-feature pretraining and instruction-tuning toolkit")]
pub struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.002`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Where to write the metrics report (default: `<subcommand>.report.json`).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic glyph dataset.
    GenSynthetic(GenSynthetic),
    /// Per-level label counts of a manifest.
    Stats(Stats),
    /// Pretrain the vision and text encoders.
    Pretrain(Pretrain),
    /// Linear probe on frozen image embeddings.
    Probe(Probe),
    /// Zero-shot species classification from description embeddings.
    Zeroshot(Zeroshot),
    /// Build and filter an instruction-following corpus.
    BuildInstructions(BuildInstructions),
    /// Re-run the noise filter over an existing corpus.
    FilterInstructions(FilterInstructions),
    /// Build a multiple-choice species benchmark.
    BuildVqa(BuildVqa),
    /// Score predictions against a benchmark.
    EvalVqa(EvalVqa),
    /// Two-stage instruction tuning of the toy assistant.
    TrainAssistant(TrainAssistant),
    /// Answer a batch of instructions with a trained assistant.
    ChatEval(ChatEval),
    /// Pretrain-and-probe over a grid of sampling ratios and loss switches.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
pub struct GenSynthetic {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Stats {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step metrics log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write `<out>.epoch<N>` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Probe {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pretrained checkpoint; a freshly initialised encoder when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Zeroshot {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-image predictions (JSON lines).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildInstructions {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Kept conversations (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected conversations with reasons (JSON lines).
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    /// Pre-generated responses `{"image_id","response"}`; the offline stub
    /// generator is used when absent.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Write the prompt messages for an external generator (JSON lines).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Write one describe-this-insect pair per record (JSON lines).
    #[arg(long)]
    pub pretrain_pairs: Option<PathBuf>,
    /// Export a seeded subset of kept conversations for manual review.
    #[arg(long)]
    pub sample_for_review: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub review_fraction: f64,
    /// Filter phrase list; the built-in list when absent.
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FilterInstructions {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    #[arg(long)]
    pub phrases: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HardNegatives {
    SameGenus,
}

#[derive(Debug, Args)]
pub struct BuildVqa {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub choices: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long, value_enum)]
    pub hard_negatives: Option<HardNegatives>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalVqa {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainAssistant {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Instruction conversations for the fine-tuning stage.
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    /// Pretrained foundation checkpoint supplying the vision encoder.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: StageArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ChatEval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Requests `{"image_id","instruction"}` (JSON lines).
    #[arg(long)]
    pub input: PathBuf,
    /// Responses `{"image_id","output"}` (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Result rows (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,0.9")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Add every on/off combination of the three losses at the configured
    /// sampling ratio.
    #[arg(long)]
    pub loss_grid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLine {
    pub image_id: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLine {
    pub image_id: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub image_id: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub image_id: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotPrediction {
    pub image_id: String,
    pub label: String,
    pub predicted: String,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let flag = |ov: &mut Vec<(String, String)>, key: &str, v: Option<String>| {
        if let Some(v) = v {
            ov.push((key.to_string(), v));
        }
    };
    let s = |v: Option<u64>| v.map(|x| x.to_string());
    let u = |v: Option<usize>| v.map(|x| x.to_string());
    match &cli.command {
        Command::GenSynthetic(a) => {
            flag(&mut overrides, "rng_seed", s(a.seed));
            flag(&mut overrides, "n_classes", u(a.classes));
            flag(&mut overrides, "n_per_class", u(a.per_class));
        }
        Command::Pretrain(a) => {
            flag(&mut overrides, "seed", s(a.seed));
            flag(&mut overrides, "epochs", u(a.epochs));
        }
        Command::Probe(a) => flag(&mut overrides, "seed", s(a.seed)),
        Command::BuildInstructions(a) => flag(&mut overrides, "seed", s(a.seed)),
        Command::BuildVqa(a) => {
            flag(&mut overrides, "seed", s(a.seed));
            flag(&mut overrides, "vqa_choices", u(a.choices));
            flag(&mut overrides, "vqa_items", u(a.items));
        }
        Command::TrainAssistant(a) => {
            flag(&mut overrides, "seed", s(a.seed));
            flag(&mut overrides, "assistant_epochs", u(a.epochs));
        }
        _ => {}
    }
    let settings = Settings::load(cli.config.as_deref(), &overrides)?;
    let (name, report) = match &cli.command {
        Command::GenSynthetic(a) => ("gen-synthetic", gen_synthetic(&settings, a)?),
        Command::Stats(a) => ("stats", stats(a)?),
        Command::Pretrain(a) => ("pretrain", pretrain_cmd(&settings, a)?),
        Command::Probe(a) => ("probe", probe(&settings, a)?),
        Command::Zeroshot(a) => ("zeroshot", zeroshot(a)?),
        Command::BuildInstructions(a) => ("build-instructions", build_instructions(&settings, a)?),
        Command::FilterInstructions(a) => ("filter-instructions", filter_instructions(a)?),
        Command::BuildVqa(a) => ("build-vqa", build_vqa_cmd(&settings, a)?),
        Command::EvalVqa(a) => ("eval-vqa", eval_vqa(a)?),
        Command::TrainAssistant(a) => ("train-assistant", train_assistant_cmd(&settings, a)?),
        Command::ChatEval(a) => ("chat-eval", chat_eval(a)?),
        Command::Ablate(a) => ("ablate", ablate(&settings, a)?),
    };
    let mut report = report;
    for (k, v) in settings.echo() {
        report.config.entry(k).or_insert(v);
    }
    report.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let path = cli.report.unwrap_or_else(|| PathBuf::from(format!("{name}.report.json")));
    write_json(&path, &report)?;
    for (k, v) in &report.metrics {
        println!("{k}\t{v}");
    }
    println!("report\t{}", path.display());
    Ok(())
}

fn gen_synthetic(settings: &Settings, a: &GenSynthetic) -> Result<MetricsReport> {
    let cfg = settings.synthetic();
    let ds = generate_synthetic(&cfg)?;
    let ext = image_extension(cfg.channels);
    let files: Vec<(String, &Image)> = ds
        .manifest
        .records()
        .iter()
        .zip(&ds.images)
        .map(|(r, img)| (format!("{}.{ext}", r.image_id), img))
        .collect();
    let index = write_store(&a.out.join("images"), &files)?;
    let text = manifest_to_string(&ds.manifest);
    write_atomic(&a.out.join("manifest.jsonl"), text.as_bytes())?;
    let manifest_sha = sha256_hex(text.as_bytes());
    let images_sha = sha256_hex(index.as_bytes());
    println!("manifest_sha256\t{manifest_sha}");
    println!("images_sha256\t{images_sha}");
    Ok(MetricsReport::new("gen-synthetic", cfg.rng_seed)
        .metric("n_images", ds.images.len() as f64)
        .metric("n_classes", cfg.n_classes as f64)
        .config("manifest_sha256", manifest_sha)
        .config("images_sha256", images_sha)
        .config("out", a.out.display()))
}

fn stats(a: &Stats) -> Result<MetricsReport> {
    let m = load_manifest(&a.manifest)?;
    let mut r = MetricsReport::new("stats", m.seed.unwrap_or(0)).metric("n_records", m.len() as f64);
    for (level, names) in manifest_stats(&m) {
        r = r.metric(&format!("n_{}", level.as_str()), names.len() as f64);
    }
    Ok(r.config("manifest", a.manifest.display()))
}

/// Species names in sorted order and each record's index into them.
fn species_labels(m: &Manifest) -> (Vec<String>, Vec<usize>) {
    let species = m.species();
    let labels = m
        .records()
        .iter()
        .map(|r| species.binary_search_by(|s| s.as_str().cmp(r.species())).expect("species listed"))
        .collect();
    (species, labels)
}

fn description_vocab(m: &Manifest) -> Vocab {
    let texts: Vec<String> = m.records().iter().map(|r| r.description_text()).collect();
    Vocab::build(texts.iter().map(String::as_str))
}

fn training_samples(settings: &Settings, m: &Manifest, images: &[Image], vocab: &Vocab) -> Result<(FoundationModel, Vec<TrainSample>)> {
    let first = images.first().ok_or_else(|| Error::Format("manifest has no images".into()))?;
    if first.height != first.width {
        return Err(Error::Format(format!("images must be square, got {}x{}", first.height, first.width)));
    }
    let cfg = settings.encoder(first.width, first.channels, vocab.len());
    let samples = build_samples(m, images, vocab, cfg.max_text_len)?;
    let model = FoundationModel::new(cfg, settings.seed.unwrap_or(0), settings.share_embedding())?;
    Ok((model, samples))
}

fn pretrain_cmd(settings: &Settings, a: &Pretrain) -> Result<MetricsReport> {
    let (m, images) = load_dataset(&a.manifest)?;
    let vocab = description_vocab(&m);
    let (mut model, samples) = training_samples(settings, &m, &images, &vocab)?;
    let tc = settings.train();
    let every = a.checkpoint_every.unwrap_or(0);
    let mut io_error = None;
    let report = pretrain(&mut model, &samples, &tc, |epoch, model, _| {
        if every > 0 && (epoch + 1) % every == 0 {
            let p = PathBuf::from(format!("{}.epoch{}", a.out.display(), epoch + 1));
            if let Err(e) = save_foundation(&p, model, &vocab, Some(&tc)) {
                io_error = Some(e);
                return Err(insectfm_core::Error::Invalid("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let report = report?;
    save_foundation(&a.out, &model, &vocab, Some(&tc))?;
    if let Some(log) = &a.log {
        write_jsonl(log, &report.metrics)?;
    }
    let epoch_mean = |e: usize| {
        let v: Vec<&StepMetrics> = report.metrics.iter().filter(|s| s.epoch == e).collect();
        v.iter().map(|s| s.total).sum::<f64>() / v.len().max(1) as f64
    };
    let last_epoch = report.metrics.last().map(|s| s.epoch).unwrap_or(0);
    let auc = prs_auc(&model, &samples, tc.sampling_ratio, tc.seed)?;
    Ok(MetricsReport::new("pretrain", tc.seed)
        .metric("steps", report.steps as f64)
        .metric("first_epoch_loss", epoch_mean(0))
        .metric("final_epoch_loss", epoch_mean(last_epoch))
        .metric("auc_prs", auc)
        .config("checkpoint", a.out.display()))
}

fn probe(settings: &Settings, a: &Probe) -> Result<MetricsReport> {
    let (m, images) = load_dataset(&a.manifest)?;
    let model = match &a.checkpoint {
        Some(p) => load_foundation(p)?.0,
        None => training_samples(settings, &m, &images, &description_vocab(&m))?.0,
    };
    let (species, labels) = species_labels(&m);
    let refs: Vec<&Image> = images.iter().collect();
    let feats = image_features(&model, &refs)?;
    let cfg = settings.probe();
    let metrics = linear_probe(&feats, &labels, species.len(), &cfg)?;
    Ok(MetricsReport::new("probe", cfg.seed)
        .classifier(&metrics)
        .metric("n_train", metrics.n_train as f64)
        .metric("n_test", metrics.n_test as f64)
        .config(
            "encoder",
            a.checkpoint.as_ref().map_or("random-init".to_string(), |p| p.display().to_string()),
        ))
}

/// One embedding per species, from a representative record's descriptions.
pub fn class_embeddings(model: &FoundationModel, m: &Manifest, vocab: &Vocab) -> Result<Vec<Vec<f64>>> {
    let reps = m.species_records();
    m.species()
        .iter()
        .map(|sp| {
            let rec = reps
                .get(sp)
                .ok_or_else(|| Error::Format(format!("no description for species {sp}")))?;
            Ok(model.text_embedding(&vocab.tokenize(&rec.description_text()))?)
        })
        .collect()
}

fn zeroshot(a: &Zeroshot) -> Result<MetricsReport> {
    let (m, images) = load_dataset(&a.manifest)?;
    let (model, vocab, _) = load_foundation(&a.checkpoint)?;
    let (species, labels) = species_labels(&m);
    let classes = class_embeddings(&model, &m, &vocab)?;
    let refs: Vec<&Image> = images.iter().collect();
    let feats = image_features(&model, &refs)?;
    let (metrics, preds) = zero_shot_classify(&feats, &labels, &classes)?;
    if let Some(p) = &a.predictions {
        let rows: Vec<ZeroShotPrediction> = m
            .records()
            .iter()
            .zip(&preds)
            .map(|(r, &k)| ZeroShotPrediction {
                image_id: r.image_id.clone(),
                label: r.species().to_string(),
                predicted: species[k].clone(),
            })
            .collect();
        write_jsonl(p, &rows)?;
    }
    Ok(MetricsReport::new("zeroshot", 0)
        .classifier(&metrics)
        .metric("chance", 1.0 / species.len() as f64)
        .config("checkpoint", a.checkpoint.display()))
}

fn load_phrases(path: Option<&Path>) -> Result<FilterPhrases> {
    match path {
        Some(p) => Ok(FilterPhrases::parse(&read_text(p)?)?),
        None => Ok(FilterPhrases::builtin()),
    }
}

fn filter_report(task: &str, seed: u64, report: &FilterReport, phrases: &FilterPhrases) -> MetricsReport {
    let stats = corpus_stats(&report.kept);
    let counts = report.counts();
    let mut r = MetricsReport::new(task, seed)
        .metric("kept", report.kept.len() as f64)
        .metric("rejected", report.rejected.len() as f64)
        .metric("turns_mean", stats.turns_mean)
        .metric("answer_words_mean", stats.answer_words_mean)
        .metric("answer_words_max", stats.answer_words_max as f64)
        .config("phrases_version", &phrases.version);
    for reason in [RejectReason::Incomplete, RejectReason::NoAnswer, RejectReason::NonVisualDisclaimer] {
        r = r.metric(
            &format!("rejected_{}", reason.as_str()),
            counts.get(&reason).copied().unwrap_or(0) as f64,
        );
    }
    for (cat, n) in stats.categories {
        r = r.metric(&format!("category_{cat}"), n as f64);
    }
    r
}

fn write_filter_outputs(report: &FilterReport, out: &Path, rejected: Option<&Path>) -> Result<()> {
    write_jsonl(out, &report.kept)?;
    if let Some(p) = rejected {
        write_jsonl(p, &report.rejected)?;
    }
    Ok(())
}

fn build_instructions(settings: &Settings, a: &BuildInstructions) -> Result<MetricsReport> {
    let m = load_manifest(&a.manifest)?;
    let phrases = load_phrases(a.phrases.as_deref())?;
    let seed = settings.seed.unwrap_or(0);
    if let Some(p) = &a.prompts {
        let lines: Vec<PromptLine> = m
            .records()
            .iter()
            .map(|r| PromptLine {
                image_id: r.image_id.clone(),
                messages: render_llm_prompt(r, &[]),
            })
            .collect();
        write_jsonl(p, &lines)?;
    }
    let report = match &a.responses {
        Some(p) => {
            let mut map: BTreeMap<String, String> = BTreeMap::new();
            for line in read_jsonl::<ResponseLine>(p)? {
                map.insert(line.image_id, line.response);
            }
            generate_conversations(&m, &mut map, &phrases, seed)
        }
        None => generate_conversations(&m, &mut StubBackend, &phrases, seed),
    };
    write_filter_outputs(&report, &a.out, a.rejected.as_deref())?;
    if let Some(p) = &a.pretrain_pairs {
        let mut rng = seeded(seed);
        let pairs = m
            .records()
            .iter()
            .map(|r| build_pretrain_pair(r, &mut rng))
            .collect::<insectfm_core::Result<Vec<_>>>()?;
        write_jsonl(p, &pairs)?;
    }
    if let Some(p) = &a.sample_for_review {
        let picked: Vec<&InstructionSample> = sample_for_review(report.kept.len(), a.review_fraction, seed)
            .into_iter()
            .map(|i| &report.kept[i])
            .collect();
        write_jsonl(p, &picked)?;
    }
    Ok(filter_report("build-instructions", seed, &report, &phrases).config(
        "backend",
        if a.responses.is_some() { "responses-file" } else { "stub" },
    ))
}

fn filter_instructions(a: &FilterInstructions) -> Result<MetricsReport> {
    let samples: Vec<InstructionSample> = read_jsonl(&a.input)?;
    let phrases = load_phrases(a.phrases.as_deref())?;
    let report = filter_responses(samples, &phrases);
    write_filter_outputs(&report, &a.out, a.rejected.as_deref())?;
    Ok(filter_report("filter-instructions", 0, &report, &phrases))
}

fn build_vqa_cmd(settings: &Settings, a: &BuildVqa) -> Result<MetricsReport> {
    let m = load_manifest(&a.manifest)?;
    let seed = settings.seed.unwrap_or(0);
    let mode = match a.hard_negatives {
        Some(HardNegatives::SameGenus) => Distractors::SameGenus,
        None => Distractors::Uniform,
    };
    let choices = settings.vqa_choices.unwrap_or(4);
    let items = build_vqa(&m, choices, settings.vqa_items, mode, &mut seeded(seed))?;
    write_jsonl(&a.out, &items)?;
    let mut slots = vec![0usize; choices];
    for it in &items {
        slots[it.answer_index] += 1;
    }
    let mut r = MetricsReport::new("build-vqa", seed)
        .metric("n_items", items.len() as f64)
        .config("distractors", format!("{mode:?}"));
    for (k, n) in slots.iter().enumerate() {
        r = r.metric(&format!("answer_slot_{k}"), *n as f64 / items.len().max(1) as f64);
    }
    Ok(r)
}

fn eval_vqa(a: &EvalVqa) -> Result<MetricsReport> {
    let items: Vec<BenchmarkItem> = read_jsonl(&a.benchmark)?;
    let mut preds = BTreeMap::new();
    for p in read_jsonl::<Prediction>(&a.predictions)? {
        if preds.insert(p.item_id.clone(), p.choice).is_some() {
            return Err(Error::Format(format!("duplicate prediction for {}", p.item_id)));
        }
    }
    let score = score_vqa(&items, &preds)?;
    Ok(MetricsReport::new("eval-vqa", 0)
        .metric("vqa_acc", score.accuracy)
        .metric("correct", score.correct as f64)
        .metric("total", score.total as f64)
        .metric("missing", score.missing as f64)
        .config("benchmark", a.benchmark.display()))
}

fn instruction_vocab(samples: &[&InstructionSample]) -> Vocab {
    let mut texts: Vec<&str> = DESCRIBE_QUESTIONS.to_vec();
    for s in samples {
        for t in &s.turns {
            texts.push(&t.q);
            texts.push(&t.a);
        }
    }
    Vocab::build(texts)
}

/// Pack every sample. Conversations longer than the context keep their
/// longest fitting prefix of turns; those whose first turn alone does not
/// fit are skipped. Returns the examples, the truncated and skipped counts.
fn examples(
    samples: &[InstructionSample],
    m: &Manifest,
    images: &[Image],
    vocab: &Vocab,
    model: &Assistant,
) -> Result<(Vec<AssistantExample>, usize, usize)> {
    let index: BTreeMap<&str, usize> = m.records().iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
    let n_patches = model.vision_cfg.n_patches();
    let (mut out, mut truncated, mut skipped) = (Vec::new(), 0, 0);
    for s in samples {
        let &i = index
            .get(s.image_id.as_str())
            .ok_or_else(|| Error::Format(format!("conversation refers to unknown image {}", s.image_id)))?;
        let mut s = s.clone();
        let mut pack = SequencePack::from_sample(&s, vocab)?;
        // BOS is added and the image slot expands to one position per patch
        let fits = |p: &SequencePack| p.tokens.len() + n_patches <= model.cfg.max_seq;
        let full = s.turns.len();
        while !fits(&pack) && s.turns.len() > 1 {
            s.turns.pop();
            pack = SequencePack::from_sample(&s, vocab)?;
        }
        if !fits(&pack) {
            skipped += 1;
            continue;
        }
        if s.turns.len() < full {
            truncated += 1;
        }
        out.push(AssistantExample {
            image: images[i].clone(),
            pack,
        });
    }
    Ok((out, truncated, skipped))
}

fn train_assistant_cmd(settings: &Settings, a: &TrainAssistant) -> Result<MetricsReport> {
    let (m, images) = load_dataset(&a.manifest)?;
    let seed = settings.seed.unwrap_or(0);
    let mut rng = seeded(seed);
    let pairs = m
        .records()
        .iter()
        .map(|r| build_pretrain_pair(r, &mut rng))
        .collect::<insectfm_core::Result<Vec<_>>>()?;
    let conversations: Vec<InstructionSample> = match &a.conversations {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let finetune = matches!(a.stage, StageArg::Finetune | StageArg::Both);
    if finetune && conversations.is_empty() {
        return Err(Error::Config("the fine-tuning stage needs --conversations".into()));
    }
    let all: Vec<&InstructionSample> = pairs.iter().chain(&conversations).collect();
    let vocab = instruction_vocab(&all);
    let (vision_cfg, vision_store) = match &a.encoder {
        Some(p) => {
            let (fm, _, _) = load_foundation(p)?;
            (fm.cfg.clone(), Some(fm.store))
        }
        None => {
            let first = images.first().ok_or_else(|| Error::Format("manifest has no images".into()))?;
            (settings.encoder(first.width, first.channels, 8), None)
        }
    };
    let first_stage = if matches!(a.stage, StageArg::Finetune) { Stage::Finetune } else { Stage::Pretrain };
    let mut model = Assistant::new(vision_cfg, settings.assistant(first_stage, vocab.len()), seed)?;
    if let Some(store) = &vision_store {
        model.load_vision(store)?;
    }
    let tc = settings.assistant_train();
    let mut report = MetricsReport::new("train-assistant", seed).metric("vocab_size", vocab.len() as f64);
    let (mut truncated, mut skipped) = (0, 0);
    let mut stages: Vec<(Stage, &[InstructionSample])> = Vec::new();
    if matches!(a.stage, StageArg::Pretrain | StageArg::Both) {
        stages.push((Stage::Pretrain, &pairs));
    }
    if finetune {
        stages.push((Stage::Finetune, &conversations));
    }
    for (stage, data) in stages {
        model.set_stage(stage);
        let (ex, t, s) = examples(data, &m, &images, &vocab, &model)?;
        truncated += t;
        skipped += s;
        let losses = train_assistant(&mut model, &ex, &tc, |_, _| Ok(()))?;
        let name = match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        };
        report = report
            .metric(&format!("{name}_examples"), ex.len() as f64)
            .metric(&format!("{name}_first_loss"), losses.first().copied().unwrap_or(f64::NAN))
            .metric(&format!("{name}_final_loss"), losses.last().copied().unwrap_or(f64::NAN));
    }
    save_assistant(&a.out, &model, &vocab, Some(&tc))?;
    Ok(report
        .metric("truncated_too_long", truncated as f64)
        .metric("skipped_too_long", skipped as f64)
        .config("checkpoint", a.out.display()))
}

fn chat_eval(a: &ChatEval) -> Result<MetricsReport> {
    let (model, vocab) = load_assistant(&a.checkpoint)?;
    let (m, images) = load_dataset(&a.manifest)?;
    let requests: Vec<ChatRequest> = read_jsonl(&a.input)?;
    let mut out = Vec::with_capacity(requests.len());
    let mut mentions = 0usize;
    for req in &requests {
        let i = m
            .records()
            .iter()
            .position(|r| r.image_id == req.image_id)
            .ok_or_else(|| Error::Format(format!("unknown image {}", req.image_id)))?;
        let output = greedy_generate(&model, &images[i], &req.instruction, &vocab, a.max_new)?;
        if canonicalize(&output).contains(&canonicalize(m.records()[i].species())) {
            mentions += 1;
        }
        out.push(ChatResponse {
            image_id: req.image_id.clone(),
            output,
        });
    }
    write_jsonl(&a.out, &out)?;
    Ok(MetricsReport::new("chat-eval", 0)
        .metric("n", requests.len() as f64)
        .metric("species_mention_rate", mentions as f64 / requests.len().max(1) as f64)
        .config("checkpoint", a.checkpoint.display()))
}

fn ablate(settings: &Settings, a: &Ablate) -> Result<MetricsReport> {
    let (m, images) = load_dataset(&a.manifest)?;
    let vocab = description_vocab(&m);
    let (model, samples) = training_samples(settings, &m, &images, &vocab)?;
    let (species, labels) = species_labels(&m);
    let data = AblationData {
        samples: &samples,
        labels: &labels,
        n_classes: species.len(),
    };
    let base = settings.train();
    let probe = settings.probe();
    let mut cells = ratio_grid(&a.ratios, &a.seeds);
    if a.loss_grid {
        for mask in 0..8u8 {
            for &seed in &a.seeds {
                cells.push(AblationCell {
                    sampling_ratio: base.sampling_ratio,
                    use_prs: mask & 1 != 0,
                    use_con: mask & 2 != 0,
                    use_desc: mask & 4 != 0,
                    seed,
                });
            }
        }
    }
    let rows = ablation_run(&cells, |c| run_cell(data, c, &model.cfg, &base, &probe));
    write_jsonl(&a.out, &rows)?;
    print!("{}", ablation_table(&rows));
    let mut r = MetricsReport::new("ablate", a.seeds.first().copied().unwrap_or(0))
        .metric("cells", rows.len() as f64)
        .metric("failed", rows.iter().filter(|r| r.error.is_some()).count() as f64);
    for (key, (acc1, auc)) in mean_by_cell(&rows) {
        r = r.metric(&format!("acc@1[{key}]"), acc1).metric(&format!("auc_prs[{key}]"), auc);
    }
    Ok(r)
}

fn cell_key(c: &AblationCell) -> String {
    let on = |b: bool, n: &str| if b { n.to_string() } else { String::new() };
    let losses: Vec<String> = [on(c.use_prs, "prs"), on(c.use_con, "con"), on(c.use_desc, "desc")]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    let losses = if losses.is_empty() { "none".to_string() } else { losses.join("+") };
    format!("ratio={} losses={losses}", c.sampling_ratio)
}

/// Seed-averaged acc@1 and AUC per distinct cell setting.
pub fn mean_by_cell(rows: &[AblationRow]) -> BTreeMap<String, (f64, f64)> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for row in rows {
        if let (Some(a1), Some(auc)) = (row.acc1, row.auc_prs) {
            let e = acc.entry(cell_key(&row.cell)).or_default();
            e.0 += a1;
            e.1 += auc;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (a, u, n))| (k, (a / n as f64, u / n as f64)))
        .collect()
}

/// Fixed-width text table of every row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8}{:<6}{:<6}{:<6}{:<6}{:>8}{:>8}{:>8}\n", "ratio", "prs", "con", "desc", "seed", "acc@1", "acc@5", "auc");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for r in rows {
        let c = &r.cell;
        s.push_str(&format!(
            "{:<8}{:<6}{:<6}{:<6}{:<6}{:>8}{:>8}{:>8}",
            c.sampling_ratio,
            c.use_prs,
            c.use_con,
            c.use_desc,
            c.seed,
            f(r.acc1),
            f(r.acc5),
            f(r.auc_prs)
        ));
        if let Some(e) = &r.error {
            s.push_str(&format!("  error: {e}"));
        }
        s.push('\n');
    }
    s
}
