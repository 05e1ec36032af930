//! Benchmarks: multiple-choice VQA, linear probing, zero-shot
//! classification, relevance AUC and the ablation grid.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{pretrain, FoundationModel, TrainConfig, TrainSample};
use crate::dataset::{Level, Manifest};
use crate::math::{exp, sqrt};
use crate::params::Group;
use crate::patching::{sample_split, split_patches, PatchPool};
use crate::rng::derive;
use crate::tensor::cosine;
use crate::{bail, Result};

pub use crate::prs::auc;

pub const VQA_QUESTION: &str = "What is the species name of the insect shown?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub image_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<&String> = self.options.iter().collect();
        if self.options.len() < 2 || distinct.len() != self.options.len() {
            bail!(Invalid, "item {}: options must be at least two distinct names", self.item_id);
        }
        if self.answer_index >= self.options.len() {
            bail!(Invalid, "item {}: answer_index out of range", self.item_id);
        }
        Ok(())
    }
}

/// How distractor species are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distractors {
    #[default]
    Uniform,
    /// Prefer species of the same genus, topping up uniformly.
    SameGenus,
}

/// One question per selected record; `n_items` records are chosen
/// uniformly without replacement (all records when `None`).
pub fn build_vqa<R: Rng + ?Sized>(
    manifest: &Manifest,
    n_choices: usize,
    n_items: Option<usize>,
    mode: Distractors,
    rng: &mut R,
) -> Result<Vec<BenchmarkItem>> {
    let species = manifest.species();
    if n_choices < 2 || species.len() < n_choices {
        bail!(
            Insufficient,
            "{n_choices} choices need as many distinct species; manifest has {}",
            species.len()
        );
    }
    let reps = manifest.species_records();
    let records = manifest.records();
    let n = n_items.unwrap_or(records.len()).min(records.len());
    let mut chosen = rand::seq::index::sample(rng, records.len(), n).into_vec();
    chosen.sort_unstable();
    let mut items = Vec::with_capacity(n);
    for (k, &ri) in chosen.iter().enumerate() {
        let rec = &records[ri];
        let truth = rec.species();
        let others: Vec<&String> = species.iter().filter(|s| s.as_str() != truth).collect();
        let mut picks: Vec<String> = Vec::with_capacity(n_choices - 1);
        if mode == Distractors::SameGenus {
            let genus = rec.label(Level::Genus);
            let same: Vec<&String> = others
                .iter()
                .copied()
                .filter(|s| reps[s.as_str()].label(Level::Genus) == genus)
                .collect();
            let take = same.len().min(n_choices - 1);
            for i in rand::seq::index::sample(rng, same.len(), take) {
                picks.push(same[i].clone());
            }
        }
        let rest: Vec<&String> = others.iter().copied().filter(|s| !picks.contains(s)).collect();
        let need = n_choices - 1 - picks.len();
        for i in rand::seq::index::sample(rng, rest.len(), need) {
            picks.push(rest[i].clone());
        }
        picks.shuffle(rng);
        let answer_index = rng.gen_range(0..n_choices);
        picks.insert(answer_index, truth.to_string());
        items.push(BenchmarkItem {
            item_id: format!("q{k:05}"),
            image_id: rec.image_id.clone(),
            question: VQA_QUESTION.to_string(),
            options: picks,
            answer_index,
        });
    }
    Ok(items)
}

/// A prediction is either an option index or the option text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Choice {
    Index(usize),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaScore {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Items without a prediction; they count as wrong.
    pub missing: usize,
}

pub fn score_vqa(items: &[BenchmarkItem], predictions: &BTreeMap<String, Choice>) -> Result<VqaScore> {
    let ids: BTreeSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    if let Some(bad) = predictions.keys().find(|k| !ids.contains(k.as_str())) {
        bail!(Invalid, "prediction for unknown item {bad}");
    }
    let mut correct = 0;
    let mut missing = 0;
    for item in items {
        let chosen = match predictions.get(&item.item_id) {
            None => {
                missing += 1;
                continue;
            }
            Some(Choice::Index(i)) => Some(*i),
            Some(Choice::Text(t)) => {
                let t = t.trim().to_lowercase();
                item.options.iter().position(|o| o.to_lowercase() == t)
            }
        };
        if chosen == Some(item.answer_index) {
            correct += 1;
        }
    }
    let total = items.len();
    Ok(VqaScore {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        missing,
    })
}

/// Fraction of rows whose true label is among the `k` highest scores.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| {
            let target = s[y];
            // rank = number of strictly better classes, ties resolved by index
            let better = s
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < y))
                .count();
            better < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            weight_decay: 1e-4,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub acc1: f64,
    pub acc5: f64,
    /// Fewer than five classes: acc@5 is trivially 1.
    pub acc5_degenerate: bool,
    pub n_train: usize,
    pub n_test: usize,
}

/// Seeded per-class split with `fraction` of each class in the train part.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = derive(seed, 0x5e1f);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let k = crate::math::round_half_even(fraction * idx.len() as f64) as usize;
        let k = k.clamp(usize::from(idx.len() > 1), idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Multinomial logistic regression on standardised features, trained with
/// full-batch Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `n_classes x dim`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_classes: usize,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let Some(first) = x.first() else {
            bail!(Insufficient, "probe needs at least one training example");
        };
        let d = first.len();
        if x.iter().any(|r| r.len() != d) || x.len() != y.len() || y.iter().any(|&c| c >= n_classes) {
            bail!(Shape, "inconsistent probe inputs");
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + 1e-8)).collect();
        let mut probe = Self {
            mean,
            inv_std,
            w: vec![0.0; n_classes * d],
            b: vec![0.0; n_classes],
            n_classes,
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardise(r)).collect();
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let np = probe.w.len() + probe.b.len();
        let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
        for t in 1..=cfg.epochs {
            let mut grad = vec![0.0; np];
            for (r, &yc) in xs.iter().zip(y) {
                let p = softmax(&probe.logits_std(r));
                for c in 0..n_classes {
                    let gc = (p[c] - if c == yc { 1.0 } else { 0.0 }) / n;
                    for j in 0..d {
                        grad[c * d + j] += gc * r[j];
                    }
                    grad[n_classes * d + c] += gc;
                }
            }
            let bc1 = 1.0 - libm::pow(b1, t as f64);
            let bc2 = 1.0 - libm::pow(b2, t as f64);
            for i in 0..np {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let step = cfg.lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps);
                if i < n_classes * d {
                    probe.w[i] -= step + cfg.lr * cfg.weight_decay * probe.w[i];
                } else {
                    probe.b[i - n_classes * d] -= step;
                }
            }
        }
        Ok(probe)
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, xs: &[f64]) -> Vec<f64> {
        let d = xs.len();
        (0..self.n_classes)
            .map(|c| self.b[c] + crate::tensor::dot(&self.w[c * d..(c + 1) * d], xs))
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardise(x))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Fit a probe on the train split of `features` and score the test split.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<ClassifierMetrics> {
    let (train, test) = stratified_split(labels, cfg.train_fraction, cfg.seed);
    if test.is_empty() {
        bail!(Insufficient, "probe test split is empty");
    }
    let xt: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = LinearProbe::fit(&xt, &yt, n_classes, cfg)?;
    let scores: Vec<Vec<f64>> = test.iter().map(|&i| probe.scores(&features[i])).collect();
    let ys: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(classifier_metrics(&scores, &ys, n_classes, train.len()))
}

fn classifier_metrics(scores: &[Vec<f64>], labels: &[usize], n_classes: usize, n_train: usize) -> ClassifierMetrics {
    let degenerate = n_classes < 5;
    ClassifierMetrics {
        acc1: top_k_accuracy(scores, labels, 1),
        acc5: if degenerate { 1.0 } else { top_k_accuracy(scores, labels, 5) },
        acc5_degenerate: degenerate,
        n_train,
        n_test: labels.len(),
    }
}

/// Whole-image pooled embeddings for a set of images, with a guard that
/// the encoder is untouched.
pub fn image_features(model: &FoundationModel, images: &[&crate::image::Image]) -> Result<Vec<Vec<f64>>> {
    let groups = [Group::VisionEmbed, Group::VisionBlocks, Group::AttnPool];
    let before = model.store.checksum(&groups);
    let out = images.iter().map(|img| model.image_embedding(img)).collect::<Result<Vec<_>>>()?;
    if model.store.checksum(&groups) != before {
        bail!(Invalid, "encoder parameters changed during feature extraction");
    }
    Ok(out)
}

/// Predict the class whose description embedding has the highest cosine
/// similarity with the image embedding.
pub fn zero_shot_classify(images: &[Vec<f64>], labels: &[usize], class_embeddings: &[Vec<f64>]) -> Result<(ClassifierMetrics, Vec<usize>)> {
    if class_embeddings.is_empty() {
        bail!(Insufficient, "zero-shot needs at least one candidate class");
    }
    let mut scores = Vec::with_capacity(images.len());
    for img in images {
        let row = class_embeddings
            .iter()
            .map(|c| cosine(img, c).unwrap_or(0.0))
            .collect::<Vec<_>>();
        scores.push(row);
    }
    let preds = scores
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect();
    Ok((classifier_metrics(&scores, labels, class_embeddings.len(), 0), preds))
}

/// Own-versus-foreign ranking quality of the relevance score. Each image
/// keeps `ratio` of its patches; the rest form a pool. For every anchor
/// the pool is ranked by relevance to its pooled token and the per-anchor
/// AUCs are averaged.
pub fn prs_auc(model: &FoundationModel, samples: &[TrainSample], ratio: f64, seed: u64) -> Result<f64> {
    let mut rng = derive(seed, 0xa0c);
    let mut pool = PatchPool::new();
    let mut anchors = Vec::with_capacity(samples.len());
    for s in samples {
        let grid = split_patches(&s.image_id, &s.image, model.cfg.patch_size)?;
        let split = sample_split(grid.len(), ratio, &mut rng)?;
        pool.insert(&grid, &split)?;
        anchors.push(model.partial_image_embedding(&grid, &split.kept)?);
    }
    let blocks: Vec<&[u8]> = pool.entries().iter().map(|e| e.pixels.as_slice()).collect();
    let idx: Vec<usize> = pool.entries().iter().map(|e| e.patch_index).collect();
    let mut zp = Vec::with_capacity(blocks.len());
    for (b, i) in blocks.chunks(512).zip(idx.chunks(512)) {
        let m = model.patch_embeddings(b, i)?;
        for r in 0..m.rows {
            zp.push(m.row(r).to_vec());
        }
    }
    let mut total = 0.0;
    for (s, a) in samples.iter().zip(&anchors) {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (e, z) in pool.entries().iter().zip(&zp) {
            let h = cosine(a, z).unwrap_or(0.0);
            if e.image_id == s.image_id {
                pos.push(h);
            } else {
                neg.push(h);
            }
        }
        total += auc(&pos, &neg).unwrap_or(0.5);
    }
    Ok(total / samples.len() as f64)
}

/// Task metrics with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub timestamp: String,
}

impl MetricsReport {
    pub fn new(task: &str, seed: u64) -> Self {
        Self {
            task: task.to_string(),
            metrics: BTreeMap::new(),
            flags: BTreeMap::new(),
            config: BTreeMap::new(),
            seed,
            timestamp: String::new(),
        }
    }

    pub fn metric(mut self, name: &str, v: f64) -> Self {
        self.metrics.insert(name.to_string(), v);
        self
    }

    pub fn config(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn classifier(mut self, m: &ClassifierMetrics) -> Self {
        self.metrics.insert("acc@1".into(), m.acc1);
        self.metrics.insert("acc@5".into(), m.acc5);
        self.flags.insert("acc@5_degenerate".into(), m.acc5_degenerate);
        self
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub sampling_ratio: f64,
    pub use_prs: bool,
    pub use_con: bool,
    pub use_desc: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub acc1: Option<f64>,
    pub acc5: Option<f64>,
    pub auc_prs: Option<f64>,
    pub error: Option<String>,
}

/// Labelled data shared by every cell.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub samples: &'a [TrainSample],
    pub labels: &'a [usize],
    pub n_classes: usize,
}

/// Pretrain a fresh model for the cell, then probe it.
pub fn run_cell(
    data: AblationData<'_>,
    cell: &AblationCell,
    model_cfg: &crate::encoders::EncoderConfig,
    base: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.sampling_ratio = cell.sampling_ratio;
    cfg.seed = cell.seed;
    let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
    cfg.loss_weights.prs = on(cell.use_prs, base.loss_weights.prs);
    cfg.loss_weights.con = on(cell.use_con, base.loss_weights.con);
    cfg.loss_weights.desc = on(cell.use_desc, base.loss_weights.desc);
    let mut model = FoundationModel::new(model_cfg.clone(), cell.seed, true)?;
    pretrain(&mut model, data.samples, &cfg, |_, _, _| Ok(()))?;
    let images: Vec<&crate::image::Image> = data.samples.iter().map(|s| &s.image).collect();
    let feats = image_features(&model, &images)?;
    let m = linear_probe(&feats, data.labels, data.n_classes, &ProbeConfig { seed: cell.seed, ..probe.clone() })?;
    let auc = prs_auc(&model, data.samples, cell.sampling_ratio, cell.seed)?;
    Ok(AblationRow {
        cell: cell.clone(),
        acc1: Some(m.acc1),
        acc5: Some(m.acc5),
        auc_prs: Some(auc),
        error: None,
    })
}

/// Run every cell; a failing cell is recorded and the grid continues.
pub fn ablation_run<F>(cells: &[AblationCell], mut run: F) -> Vec<AblationRow>
where
    F: FnMut(&AblationCell) -> Result<AblationRow>,
{
    cells
        .iter()
        .map(|c| {
            run(c).unwrap_or_else(|e| AblationRow {
                cell: c.clone(),
                acc1: None,
                acc5: None,
                auc_prs: None,
                error: Some(format!("{e}")),
            })
        })
        .collect()
}

/// The sampling-ratio axis crossed with seeds, all losses on.
pub fn ratio_grid(ratios: &[f64], seeds: &[u64]) -> Vec<AblationCell> {
    let mut v = Vec::new();
    for &r in ratios {
        for &s in seeds {
            v.push(AblationCell {
                sampling_ratio: r,
                use_prs: true,
                use_con: true,
                use_desc: true,
                seed: s,
            });
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::record;
    use crate::rng::seeded;

    fn manifest(n_species: usize, per: usize) -> Manifest {
        let mut recs = Vec::new();
        for s in 0..n_species {
            for i in 0..per {
                let genus = format!("G{}", s / 2);
                let species = format!("G{} s{s}", s / 2);
                recs.push(record(
                    &format!("r{s}_{i}"),
                    ["hexapoda", "insecta", "o", "f", genus.as_str(), species.as_str()],
                ));
            }
        }
        Manifest::new("1".into(), None, recs).unwrap()
    }

    #[test]
    fn vqa_items_are_well_formed() {
        let m = manifest(6, 3);
        let items = build_vqa(&m, 4, None, Distractors::Uniform, &mut seeded(1)).unwrap();
        assert_eq!(items.len(), 18);
        for it in &items {
            it.validate().unwrap();
            assert_eq!(it.options.len(), 4);
            assert_eq!(it.question, VQA_QUESTION);
            assert_eq!(it.options[it.answer_index], m.get(&it.image_id).unwrap().species());
        }
        assert_eq!(items, build_vqa(&m, 4, None, Distractors::Uniform, &mut seeded(1)).unwrap());
        assert!(build_vqa(&manifest(3, 1), 4, None, Distractors::Uniform, &mut seeded(1)).is_err());
    }

    #[test]
    fn same_genus_distractor_comes_first() {
        let m = manifest(6, 2);
        let items = build_vqa(&m, 3, Some(6), Distractors::SameGenus, &mut seeded(2)).unwrap();
        for it in &items {
            let genus = m.get(&it.image_id).unwrap().label(Level::Genus).to_string();
            let same = it.options.iter().filter(|o| o.starts_with(&format!("{genus} "))).count();
            assert_eq!(same, 2);
        }
    }

    #[test]
    fn scoring() {
        let m = manifest(5, 1);
        let items = build_vqa(&m, 4, Some(4), Distractors::Uniform, &mut seeded(3)).unwrap();
        let oracle: BTreeMap<String, Choice> =
            items.iter().map(|i| (i.item_id.clone(), Choice::Index(i.answer_index))).collect();
        assert_eq!(score_vqa(&items, &oracle).unwrap().accuracy, 1.0);
        let mut three = oracle.clone();
        let first = &items[0];
        three.insert(first.item_id.clone(), Choice::Index((first.answer_index + 1) % 4));
        assert_eq!(score_vqa(&items, &three).unwrap().accuracy, 0.75);
        let text: BTreeMap<String, Choice> = three
            .iter()
            .map(|(k, c)| {
                let it = items.iter().find(|i| &i.item_id == k).unwrap();
                let Choice::Index(ix) = c else { unreachable!() };
                (k.clone(), Choice::Text(it.options[*ix].to_uppercase()))
            })
            .collect();
        assert_eq!(score_vqa(&items, &text).unwrap(), score_vqa(&items, &three).unwrap());
        let none = score_vqa(&items, &BTreeMap::new()).unwrap();
        assert_eq!((none.accuracy, none.missing), (0.0, 4));
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), Choice::Index(0));
        assert!(score_vqa(&items, &bad).is_err());
    }

    #[test]
    fn top_k_is_monotone() {
        let scores = vec![vec![0.1, 0.5, 0.4], vec![0.9, 0.05, 0.05]];
        let labels = [2, 0];
        assert_eq!(top_k_accuracy(&scores, &labels, 1), 0.5);
        assert_eq!(top_k_accuracy(&scores, &labels, 2), 1.0);
    }

    #[test]
    fn probe_separates_separable_features() {
        let mut rng = seeded(4);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            for _ in 0..40 {
                let cx = if c == 0 { -2.0 } else { 2.0 };
                x.push(vec![cx + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)]);
                y.push(c);
            }
        }
        let m = linear_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(m.acc1, 1.0);
        assert!(m.acc5_degenerate && m.acc5 == 1.0);
        assert_eq!((m.n_train, m.n_test), (64, 16));
    }

    #[test]
    fn zero_shot_is_scale_invariant() {
        let imgs = vec![vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.2]];
        let classes = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let (m, p) = zero_shot_classify(&imgs, &[0, 1, 2], &classes).unwrap();
        assert_eq!(m.acc1, 1.0);
        let scaled: Vec<Vec<f64>> = classes.iter().map(|c| c.iter().map(|v| v * 7.5).collect()).collect();
        let imgs2: Vec<Vec<f64>> = imgs.iter().map(|c| c.iter().map(|v| v * 0.01).collect()).collect();
        assert_eq!(zero_shot_classify(&imgs2, &[0, 1, 2], &scaled).unwrap().1, p);
        let (single, _) = zero_shot_classify(&imgs, &[0, 0, 0], &classes[..1]).unwrap();
        assert_eq!(single.acc1, 1.0);
    }

    #[test]
    fn ablation_continues_past_errors() {
        let cells = ratio_grid(&[0.25, 0.5, 0.75, 0.9], &[1]);
        let rows = ablation_run(&cells, |c| {
            if c.sampling_ratio > 0.8 {
                bail!(Invalid, "boom");
            }
            Ok(AblationRow {
                cell: c.clone(),
                acc1: Some(0.5),
                acc5: Some(0.9),
                auc_prs: None,
                error: None,
            })
        });
        assert_eq!(rows.len(), 4);
        assert!(rows[3].error.is_some() && rows[0].error.is_none());
    }
}
