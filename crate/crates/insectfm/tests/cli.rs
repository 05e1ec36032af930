use std::fs;
use std::path::{Path, PathBuf};

use insectfm::cli::run;
use insectfm::jsonl::{read_json, read_jsonl, write_jsonl};
use insectfm_core::eval::{BenchmarkItem, MetricsReport};
use insectfm_core::instruct::{InstructionSample, ImagePosition};
use serde_json::json;

/// Tiny model and data settings so the whole pipeline runs in seconds.
const TINY: &str = "n_classes = 4\nn_per_class = 3\nimage_size = 16\npatch_size = 8\nglyph_size = 3\n\
d = 8\nvision_blocks = 1\ntext_blocks = 1\ndecoder_blocks = 1\nheads = 2\nepochs = 1\nbatch_size = 6\n\
crop_margin = 0\nk_pos = 2\nk_neg = 2\nprobe_epochs = 20\nlm_dim = 8\nlm_blocks = 1\nlm_heads = 2\nmax_seq = 320\n\
assistant_epochs = 1\nassistant_batch_size = 6\n";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    /// Run with the tiny config and a report next to the other outputs.
    fn run(&self, args: &[&str]) -> i32 {
        let report = self.s(&format!("{}.report.json", args[0]));
        let config = self.s("tiny.toml");
        let mut argv = vec!["insectfm", "--config", &config, "--report", &report];
        argv.extend_from_slice(args);
        run(argv)
    }

    fn report(&self, cmd: &str) -> MetricsReport {
        read_json(&self.p(&format!("{cmd}.report.json"))).unwrap()
    }

    fn gen(&self, out: &str) {
        assert_eq!(self.run(&["gen-synthetic", "--out", &self.s(out), "--seed", "7"]), 0);
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_synthetic_twice_gives_identical_files() {
    let env = Env::new();
    env.gen("a");
    env.gen("b");
    for f in ["manifest.jsonl", "images/SHA256SUMS", "images/c03_i002.pgm"] {
        assert_eq!(bytes(&env.p("a").join(f)), bytes(&env.p("b").join(f)), "{f}");
    }
    let r = env.report("gen-synthetic");
    assert_eq!(r.seed, 7);
    assert_eq!(r.metrics["n_images"], 12.0);
    assert!(r.config.contains_key("manifest_sha256"));
    assert!(!r.timestamp.is_empty());
}

#[test]
fn different_seed_changes_images() {
    let env = Env::new();
    env.gen("a");
    assert_eq!(env.run(&["gen-synthetic", "--out", &env.s("b"), "--seed", "8"]), 0);
    assert_ne!(bytes(&env.p("a/images/SHA256SUMS")), bytes(&env.p("b/images/SHA256SUMS")));
}

#[test]
fn stats_counts_levels() {
    let env = Env::new();
    env.gen("d");
    assert_eq!(env.run(&["stats", "--manifest", &env.s("d/manifest.jsonl")]), 0);
    let r = env.report("stats");
    assert_eq!(r.metrics["n_records"], 12.0);
    assert_eq!(r.metrics["n_species"], 4.0);
}

#[test]
fn eval_vqa_on_oracle_predictions_is_one() {
    let env = Env::new();
    env.gen("d");
    let m = env.s("d/manifest.jsonl");
    assert_eq!(env.run(&["build-vqa", "--manifest", &m, "--out", &env.s("vqa.jsonl"), "--seed", "3"]), 0);
    assert_eq!(env.run(&["build-vqa", "--manifest", &m, "--out", &env.s("vqa2.jsonl"), "--seed", "3"]), 0);
    assert_eq!(bytes(&env.p("vqa.jsonl")), bytes(&env.p("vqa2.jsonl")));
    let items: Vec<BenchmarkItem> = read_jsonl(&env.p("vqa.jsonl")).unwrap();
    assert_eq!(items.len(), 12);
    // alternate index and option-text predictions
    let preds: Vec<serde_json::Value> = items
        .iter()
        .enumerate()
        .map(|(k, it)| {
            let choice = if k % 2 == 0 {
                json!(it.answer_index)
            } else {
                json!(it.options[it.answer_index])
            };
            json!({"item_id": it.item_id, "choice": choice})
        })
        .collect();
    write_jsonl(&env.p("pred.jsonl"), &preds).unwrap();
    let b = env.s("vqa.jsonl");
    assert_eq!(env.run(&["eval-vqa", "--benchmark", &b, "--predictions", &env.s("pred.jsonl")]), 0);
    assert_eq!(env.report("eval-vqa").metrics["vqa_acc"], 1.0);

    // one wrong answer out of twelve
    let mut wrong = preds.clone();
    wrong[0]["choice"] = json!((items[0].answer_index + 1) % 4);
    write_jsonl(&env.p("wrong.jsonl"), &wrong).unwrap();
    assert_eq!(env.run(&["eval-vqa", "--benchmark", &b, "--predictions", &env.s("wrong.jsonl")]), 0);
    assert_eq!(env.report("eval-vqa").metrics["vqa_acc"], 11.0 / 12.0);
}

#[test]
fn same_genus_distractors() {
    let env = Env::new();
    env.gen("d");
    let args = [
        "build-vqa",
        "--manifest",
        &env.s("d/manifest.jsonl"),
        "--out",
        &env.s("vqa.jsonl"),
        "--hard-negatives",
        "same-genus",
        "--choices",
        "3",
    ];
    assert_eq!(env.run(&args), 0);
    let items: Vec<BenchmarkItem> = read_jsonl(&env.p("vqa.jsonl")).unwrap();
    assert!(items.iter().all(|it| it.options.len() == 3));
}

#[test]
fn instruction_corpus_is_deterministic_and_well_formed() {
    let env = Env::new();
    env.gen("d");
    let m = env.s("d/manifest.jsonl");
    for out in ["c1.jsonl", "c2.jsonl"] {
        let args = [
            "build-instructions",
            "--manifest",
            &m,
            "--out",
            &env.s(out),
            "--pretrain-pairs",
            &env.s("pairs.jsonl"),
            "--prompts",
            &env.s("prompts.jsonl"),
            "--sample-for-review",
            &env.s("review.jsonl"),
        ];
        assert_eq!(env.run(&args), 0);
    }
    assert_eq!(bytes(&env.p("c1.jsonl")), bytes(&env.p("c2.jsonl")));
    let conv: Vec<InstructionSample> = read_jsonl(&env.p("c1.jsonl")).unwrap();
    assert_eq!(conv.len(), 12);
    assert!(conv.iter().all(|s| !s.turns.is_empty()));
    assert!(conv.iter().any(|s| s.image_position == ImagePosition::Before));
    assert!(conv.iter().any(|s| s.image_position == ImagePosition::After));
    let review: Vec<InstructionSample> = read_jsonl(&env.p("review.jsonl")).unwrap();
    assert_eq!(review.len(), 2); // ceil(0.15 * 12)
    let r = env.report("build-instructions");
    assert_eq!(r.metrics["kept"] + r.metrics["rejected"], 12.0);

    // filtering an already filtered corpus keeps everything
    let args = ["filter-instructions", "--input", &env.s("c1.jsonl"), "--out", &env.s("f.jsonl")];
    assert_eq!(env.run(&args), 0);
    assert_eq!(bytes(&env.p("c1.jsonl")), bytes(&env.p("f.jsonl")));
}

#[test]
fn responses_file_drives_filtering() {
    let env = Env::new();
    env.gen("d");
    let lines = vec![
        json!({"image_id": "c00_i000", "response": "Question: What colour is it?\nAnswer: It is a dark beetle with pale marks."}),
        json!({"image_id": "c00_i001", "response": "Question: What is it?\nAnswer: I cannot see the image, sorry."}),
        json!({"image_id": "c00_i002", "response": "Question: What is it?\nAnswer: It is a beetle that"}),
    ];
    write_jsonl(&env.p("resp.jsonl"), &lines).unwrap();
    let args = [
        "build-instructions",
        "--manifest",
        &env.s("d/manifest.jsonl"),
        "--responses",
        &env.s("resp.jsonl"),
        "--out",
        &env.s("kept.jsonl"),
        "--rejected",
        &env.s("rej.jsonl"),
    ];
    assert_eq!(env.run(&args), 0);
    let r = env.report("build-instructions");
    assert_eq!(r.metrics["kept"], 1.0);
    assert_eq!(r.metrics["rejected_non_visual_disclaimer"], 1.0);
    assert_eq!(r.metrics["rejected_incomplete"], 1.0);
    // records without a response
    assert_eq!(r.metrics["rejected_no_answer"], 9.0);
}

#[test]
fn full_pipeline_at_tiny_scale() {
    let env = Env::new();
    env.gen("d");
    let m = env.s("d/manifest.jsonl");
    let fm = env.s("fm.ckpt");
    let args = ["pretrain", "--manifest", &m, "--out", &fm, "--log", &env.s("log.jsonl"), "--checkpoint-every", "1"];
    assert_eq!(env.run(&args), 0);
    assert!(env.p("fm.ckpt.epoch1").exists());
    let log: Vec<serde_json::Value> = read_jsonl(&env.p("log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    for key in ["step", "L_prs", "L_con", "L_desc", "total", "lr"] {
        assert!(log[0].get(key).is_some(), "{key}");
    }
    let auc = env.report("pretrain").metrics["auc_prs"];
    assert!((0.0..=1.0).contains(&auc));

    assert_eq!(env.run(&["probe", "--manifest", &m, "--checkpoint", &fm]), 0);
    let r = env.report("probe");
    assert!(r.metrics["acc@5"] >= r.metrics["acc@1"]);
    assert_eq!(r.flags["acc@5_degenerate"], true);
    assert_eq!(env.run(&["probe", "--manifest", &m]), 0);
    assert_eq!(env.report("probe").config["encoder"], "random-init");

    let zs = ["zeroshot", "--manifest", &m, "--checkpoint", &fm, "--predictions", &env.s("zs.jsonl")];
    assert_eq!(env.run(&zs), 0);
    assert_eq!(env.report("zeroshot").metrics["chance"], 0.25);
    assert_eq!(read_jsonl::<serde_json::Value>(&env.p("zs.jsonl")).unwrap().len(), 12);

    assert_eq!(env.run(&["build-instructions", "--manifest", &m, "--out", &env.s("conv.jsonl")]), 0);
    let ta = [
        "train-assistant",
        "--manifest",
        &m,
        "--conversations",
        &env.s("conv.jsonl"),
        "--encoder",
        &fm,
        "--out",
        &env.s("asst.ckpt"),
    ];
    assert_eq!(env.run(&ta), 0);
    let r = env.report("train-assistant");
    assert_eq!(r.metrics["pretrain_examples"], 12.0);
    assert!(r.metrics["finetune_final_loss"].is_finite());

    let req = vec![json!({"image_id": "c01_i000", "instruction": "What is the species name?"})];
    write_jsonl(&env.p("req.jsonl"), &req).unwrap();
    let ce = [
        "chat-eval",
        "--checkpoint",
        &env.s("asst.ckpt"),
        "--manifest",
        &m,
        "--input",
        &env.s("req.jsonl"),
        "--out",
        &env.s("out.jsonl"),
        "--max-new",
        "5",
    ];
    assert_eq!(env.run(&ce), 0);
    let out: Vec<serde_json::Value> = read_jsonl(&env.p("out.jsonl")).unwrap();
    assert_eq!(out[0]["image_id"], "c01_i000");
    assert!(out[0]["output"].is_string());
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let env = Env::new();
    let ablate = |data: &str| {
        let args = [
            "ablate",
            "--manifest",
            &env.s(&format!("{data}/manifest.jsonl")),
            "--out",
            &env.s("abl.jsonl"),
            "--ratios",
            "0.25,0.5,0.75,0.9",
            "--seeds",
            "0",
        ];
        assert_eq!(env.run(&args), 0);
        read_jsonl::<serde_json::Value>(&env.p("abl.jsonl")).unwrap()
    };
    let args = ["gen-synthetic", "--out", &env.s("d32"), "--set", "image_size=32"];
    assert_eq!(env.run(&args), 0);
    let rows = ablate("d32");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["acc1"].is_number() && r["acc5"].is_number() && r["error"].is_null()));
    assert_eq!(env.report("ablate").metrics["failed"], 0.0);

    // with four patches per image a 0.9 ratio holds nothing out; that cell
    // fails and the rest of the grid still runs
    env.gen("d16");
    let rows = ablate("d16");
    assert_eq!(rows.len(), 4);
    assert!(rows[..3].iter().all(|r| r["error"].is_null()));
    assert!(rows[3]["error"].as_str().unwrap().contains("insufficient"));
    assert_eq!(env.report("ablate").metrics["failed"], 1.0);
}

#[test]
fn exit_codes() {
    let env = Env::new();
    assert_eq!(run(["insectfm", "no-such-command"]), 1);
    assert_eq!(run(["insectfm"]), 1);
    assert_eq!(run(["insectfm", "--help"]), 0);
    // unknown config key
    assert_eq!(env.run(&["stats", "--manifest", "x", "--set", "learning_rate=1"]), 1);
    // missing input file
    assert_eq!(env.run(&["stats", "--manifest", &env.s("missing.jsonl")]), 2);
    // malformed manifest
    fs::write(env.p("bad.jsonl"), "{nope").unwrap();
    assert_eq!(env.run(&["stats", "--manifest", &env.s("bad.jsonl")]), 1);
    // invalid training configuration
    env.gen("d");
    let args = ["pretrain", "--manifest", &env.s("d/manifest.jsonl"), "--out", &env.s("x.ckpt"), "--set", "sampling_ratio=1.5"];
    assert_eq!(env.run(&args), 1);
}
