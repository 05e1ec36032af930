//! Visual-instruction data: single-turn description pairs, prompts for
//! conversation generation, response parsing, filtering and token packing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Level, Manifest, TaxonomicRecord};
use crate::rng::derive;
use crate::tokenizer::{Vocab, IMG, STOP};
use crate::{bail, Result};

/// Requests for a description of the pictured insect, kept exactly as
/// published (including the truncated word in the seventh entry).
pub const DESCRIBE_QUESTIONS: [&str; 16] = [
    "Describe the following insect in detail",
    "Provide a detailed description of the given insect image",
    "Give an elaborate explanation of the insect you see",
    "Share a comprehensive rundown of the presented insect",
    "Offer a thorough analysis of the insect",
    "Explain the various aspects of the insect before you",
    "Clarify the contents of the displayed insect ge with great detail",
    "Characterize the insect using a well-detailed description",
    "Break down the elements of the insect in a detailed manner",
    "Walk through the important details of the insect",
    "Portray the insect with a rich, descriptive narrative",
    "Narrate the contents of the insect with precision",
    "Analyze the insect in a comprehensive and detailed manner",
    "Illustrate the insect through a descriptive explanation",
    "Examine the insect closely and share its details",
    "Write an exhaustive depiction of the given insect",
];

/// System message for conversation generation.
pub const SYSTEM_PROMPT: &str = concat!(
    "You are an AI visual assistant specialized in entomology topics, and you are seeing a single insect image. ",
    "What you see are provided with sentences, describing the same image you are looking at. ",
    "Answer all questions as you are seeing the insect image. ",
    "Design a conversation between you and a person asking about this insect photo. ",
    "The answers should be in a tone that a visual AI assistant is seeing the insect image and answering the question. ",
    "Ask diverse questions and give corresponding answers. ",
    "Include questions about the image's visual content, including the insect phylum, subphylum, class, order, superfamily, family, subfamily, etc. ",
    "Only include questions that have definite answers:",
    "\n\n",
    "(1) one can see the content in the insect image that the question asks about and can answer confidently;",
    "\n\n",
    "(2) one can determine confidently from the insect image that it is not in the image. ",
    "Do not ask any questions that cannot be answered confidently.",
    "\n\n",
    "Also include complex questions that are relevant to the content in the insect image, for example, ",
    "asking about background knowledge of the insects in the image, asking to discuss insects in the image, etc. ",
    "Again, do not ask about uncertain details. ",
    "Provide detailed answers when answering complex questions. ",
    "For example, give detailed examples or reasoning steps to make the content more convincing and well-organized. ",
    "You can include multiple paragraphs if necessary.",
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub q: String,
    pub a: String,
}

/// Where the image sits relative to the first question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagePosition {
    Before,
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Identification,
    Appearance,
    Characteristics,
    Geographic,
    Reasoning,
    Descriptive,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Identification,
        Category::Appearance,
        Category::Characteristics,
        Category::Geographic,
        Category::Reasoning,
        Category::Descriptive,
    ];
}

/// Keyword heuristic for the query type of a question.
pub fn categorize(question: &str) -> Option<Category> {
    let q = question.to_lowercase();
    let rules: [(Category, &[&str]); 6] = [
        (Category::Geographic, &["where", "habitat", "region", "distribution", "found in"]),
        (Category::Reasoning, &["why", "how can", "reason", "infer"]),
        (Category::Appearance, &["look like", "colour", "color", "appearance", "shape", "marking"]),
        (Category::Characteristics, &["order", "family", "belong", "characteristic", "trait"]),
        (Category::Identification, &["what insect", "species", "identify", "what kind", "name"]),
        (Category::Descriptive, &["describe", "tell me", "about", "background", "detail"]),
    ];
    rules
        .iter()
        .find(|(_, keys)| keys.iter().any(|k| q.contains(k)))
        .map(|(c, _)| *c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub image_id: String,
    pub image_position: ImagePosition,
    pub turns: Vec<ConversationTurn>,
    pub category: Option<Category>,
}

/// A describe-this-insect question answered by the record's descriptions.
pub fn build_pretrain_pair<R: Rng + ?Sized>(record: &TaxonomicRecord, rng: &mut R) -> Result<InstructionSample> {
    if record.descriptions.get(&Level::Species).map_or(true, |d| d.trim().is_empty()) {
        bail!(Invalid, "record {} has no species description", record.image_id);
    }
    let q = DESCRIBE_QUESTIONS[rng.gen_range(0..DESCRIBE_QUESTIONS.len())];
    Ok(InstructionSample {
        image_id: record.image_id.clone(),
        image_position: ImagePosition::After,
        turns: alloc::vec![ConversationTurn {
            q: q.to_string(),
            a: record.description_text(),
        }],
        category: Some(Category::Descriptive),
    })
}

/// `Human: X_q, I<STOP>\n Assistant: X_a<STOP>\n` per turn.
pub fn to_human_assistant(sample: &InstructionSample) -> String {
    let mut out = String::new();
    for (m, t) in sample.turns.iter().enumerate() {
        let human = match (m, sample.image_position) {
            (0, ImagePosition::After) => format!("{}, <image>", t.q),
            (0, ImagePosition::Before) => format!("<image>, {}", t.q),
            _ => t.q.clone(),
        };
        out.push_str(&format!("Human: {human}<STOP>\n Assistant: {}<STOP>\n", t.a));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Instruction,
    Answer,
}

/// One token of a packed conversation. `turn` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedToken {
    pub id: u32,
    pub role: Role,
    pub turn: usize,
}

/// Pack a conversation using its recorded image position: turn 1 holds
/// the question and the image token, later turns the question alone; a
/// STOP closes every question and every answer.
pub fn pack_tokens(sample: &InstructionSample, vocab: &Vocab) -> Result<Vec<PackedToken>> {
    if sample.turns.is_empty() {
        bail!(Invalid, "sample {} has no turns", sample.image_id);
    }
    let mut out = Vec::new();
    for (m, t) in sample.turns.iter().enumerate() {
        let turn = m + 1;
        let ins = |id| PackedToken { id, role: Role::Instruction, turn };
        let q = vocab.tokenize(&t.q).ids;
        if m == 0 && sample.image_position == ImagePosition::Before {
            out.push(ins(IMG));
        }
        out.extend(q.into_iter().map(ins));
        if m == 0 && sample.image_position == ImagePosition::After {
            out.push(ins(IMG));
        }
        out.push(ins(STOP));
        let ans = |id| PackedToken { id, role: Role::Answer, turn };
        out.extend(vocab.tokenize(&t.a).ids.into_iter().map(ans));
        out.push(ans(STOP));
    }
    Ok(out)
}

/// Flip a fair coin for the image position, then pack.
pub fn assemble_instruct_tokens<R: Rng + ?Sized>(
    sample: &InstructionSample,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(ImagePosition, Vec<PackedToken>)> {
    let position = draw_position(rng);
    let placed = InstructionSample {
        image_position: position,
        ..sample.clone()
    };
    Ok((position, pack_tokens(&placed, vocab)?))
}

fn draw_position<R: Rng + ?Sized>(rng: &mut R) -> ImagePosition {
    if rng.gen_bool(0.5) {
        ImagePosition::Before
    } else {
        ImagePosition::After
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    fn new(role: &str, content: &str) -> Self {
        Self {
            role: role.to_string(),
            content: content.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub context: String,
    pub response: String,
}

/// System prompt, few-shot exchanges, then the record's description lines.
pub fn render_llm_prompt(record: &TaxonomicRecord, fewshot: &[FewShot]) -> Vec<Message> {
    let mut out = alloc::vec![Message::new("system", SYSTEM_PROMPT)];
    for s in fewshot {
        out.push(Message::new("user", &s.context));
        out.push(Message::new("assistant", &s.response));
    }
    out.push(Message::new("user", &record.description_lines().join("\n")));
    out
}

enum Field {
    Question,
    Answer,
}

fn split_marker(line: &str) -> Option<(Field, &str)> {
    const QUESTION: [&str; 4] = ["question", "q", "human", "user"];
    const ANSWER: [&str; 5] = ["answer", "a", "assistant", "gpt", "ai"];
    let trimmed = line.trim_start().trim_start_matches(['*', '#', '-']).trim_start();
    let (head, rest) = trimmed.split_once(':')?;
    let head = head.trim().trim_end_matches('*').to_lowercase();
    // allow numbered markers such as "Question 2"
    let base = head.trim_end_matches(|c: char| c.is_ascii_digit() || c == ' ');
    let rest = rest.trim_start_matches('*').trim();
    if QUESTION.contains(&base) {
        Some((Field::Question, rest))
    } else if ANSWER.contains(&base) {
        Some((Field::Answer, rest))
    } else {
        None
    }
}

/// Extract question/answer turns from free-form model output. Questions
/// without an answer are dropped; text that never forms a pair yields an
/// empty list.
pub fn parse_llm_response(text: &str) -> Vec<ConversationTurn> {
    let mut turns = Vec::new();
    let mut question: Option<String> = None;
    let mut answer: Option<String> = None;
    let mut flush = |q: &mut Option<String>, a: &mut Option<String>| {
        if let (Some(qs), Some(as_)) = (q.take(), a.take()) {
            let (qs, as_) = (qs.trim().to_string(), as_.trim().to_string());
            if !qs.is_empty() {
                turns.push(ConversationTurn { q: qs, a: as_ });
            }
        }
        *a = None;
    };
    for line in text.lines() {
        match split_marker(line) {
            Some((Field::Question, rest)) => {
                flush(&mut question, &mut answer);
                question = Some(rest.to_string());
            }
            Some((Field::Answer, rest)) => {
                if question.is_some() && answer.is_none() {
                    answer = Some(rest.to_string());
                }
            }
            None => {
                let target = if answer.is_some() { &mut answer } else { &mut question };
                if let Some(buf) = target {
                    if !line.trim().is_empty() {
                        if !buf.is_empty() {
                            buf.push('\n');
                        }
                        buf.push_str(line.trim());
                    }
                }
            }
        }
    }
    flush(&mut question, &mut answer);
    turns
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Incomplete,
    NoAnswer,
    NonVisualDisclaimer,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Incomplete => "incomplete",
            RejectReason::NoAnswer => "no_answer",
            RejectReason::NonVisualDisclaimer => "non_visual_disclaimer",
        }
    }
}

/// Versioned phrase lists driving the refusal and disclaimer rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPhrases {
    pub version: String,
    pub no_answer: Vec<String>,
    pub non_visual_disclaimer: Vec<String>,
}

const BUILTIN_PHRASES: &str = include_str!("../data/filter_phrases.txt");

impl FilterPhrases {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PHRASES).expect("bundled phrase file is valid")
    }

    /// Line format: `#` comments, a `version: <v>` line, then phrases
    /// under `[no_answer]` and `[non_visual_disclaimer]` headers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut section: Option<RejectReason> = None;
        let mut out = Self {
            version: String::new(),
            no_answer: Vec::new(),
            non_visual_disclaimer: Vec::new(),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("version:") {
                version = Some(v.trim().to_string());
            } else if line == "[no_answer]" {
                section = Some(RejectReason::NoAnswer);
            } else if line == "[non_visual_disclaimer]" {
                section = Some(RejectReason::NonVisualDisclaimer);
            } else {
                match section {
                    Some(RejectReason::NoAnswer) => out.no_answer.push(line.to_lowercase()),
                    Some(_) => out.non_visual_disclaimer.push(line.to_lowercase()),
                    None => bail!(Invalid, "phrase file line {}: phrase outside a section", n + 1),
                }
            }
        }
        let Some(v) = version else {
            bail!(Invalid, "phrase file has no version line");
        };
        out.version = v;
        Ok(out)
    }

    fn any_in(phrases: &[String], texts: &[&str]) -> bool {
        texts.iter().any(|t| {
            let t = t.to_lowercase();
            phrases.iter().any(|p| t.contains(p.as_str()))
        })
    }
}

fn ends_sentence(text: &str) -> bool {
    let t = text.trim_end().trim_end_matches(['"', '\'', ')', ']', '*', '\u{201d}']);
    t.ends_with(['.', '!', '?'])
}

/// First failing rule, checked as no_answer, non_visual_disclaimer,
/// incomplete.
pub fn check_sample(sample: &InstructionSample, phrases: &FilterPhrases) -> Option<RejectReason> {
    if sample.turns.is_empty() {
        return Some(RejectReason::NoAnswer);
    }
    let texts: Vec<&str> = sample.turns.iter().flat_map(|t| [t.q.as_str(), t.a.as_str()]).collect();
    let answers: Vec<&str> = sample.turns.iter().map(|t| t.a.as_str()).collect();
    if sample.turns.iter().all(|t| t.a.trim().is_empty()) || FilterPhrases::any_in(&phrases.no_answer, &answers) {
        return Some(RejectReason::NoAnswer);
    }
    if FilterPhrases::any_in(&phrases.non_visual_disclaimer, &texts) {
        return Some(RejectReason::NonVisualDisclaimer);
    }
    if sample.turns.iter().any(|t| t.q.trim().is_empty() || !ends_sentence(&t.a)) {
        return Some(RejectReason::Incomplete);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub sample: InstructionSample,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<InstructionSample>,
    pub rejected: Vec<Rejected>,
}

impl FilterReport {
    pub fn counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rejected {
            *m.entry(r.reason).or_insert(0) += 1;
        }
        m
    }
}

pub fn filter_responses(samples: Vec<InstructionSample>, phrases: &FilterPhrases) -> FilterReport {
    let mut report = FilterReport::default();
    for s in samples {
        match check_sample(&s, phrases) {
            None => report.kept.push(s),
            Some(reason) => report.rejected.push(Rejected { sample: s, reason }),
        }
    }
    report
}

/// Where generated conversation text comes from.
pub trait ResponseSource {
    /// Raw response for one record, or `None` if there is none.
    fn response(&mut self, record: &TaxonomicRecord, seed: u64) -> Option<String>;
}

/// Pre-generated responses keyed by image id.
impl ResponseSource for BTreeMap<String, String> {
    fn response(&mut self, record: &TaxonomicRecord, _seed: u64) -> Option<String> {
        self.get(&record.image_id).cloned()
    }
}

pub const MIN_ANSWER_WORDS: usize = 4;
pub const MAX_ANSWER_WORDS: usize = 341;

/// Deterministic template conversations built from a record's labels and
/// descriptions: 2 to 6 turns, each of a distinct query type.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl StubBackend {
    pub fn turns(record: &TaxonomicRecord, seed: u64) -> Vec<(Category, ConversationTurn)> {
        let mut rng = derive(seed, 0x57ab);
        let m = rng.gen_range(2..=6);
        let mut cats = Category::ALL;
        cats.shuffle(&mut rng);
        cats[..m].iter().map(|&c| (c, stub_turn(record, c))).collect()
    }
}

impl ResponseSource for StubBackend {
    fn response(&mut self, record: &TaxonomicRecord, seed: u64) -> Option<String> {
        let mut out = String::new();
        for (_, t) in Self::turns(record, seed) {
            out.push_str(&format!("Question: {}\nAnswer: {}\n", t.q, t.a));
        }
        Some(out)
    }
}

fn sentence(record: &TaxonomicRecord, level: Level) -> String {
    match record.descriptions.get(&level) {
        Some(d) if !d.trim().is_empty() => d.trim().to_string(),
        _ => format!("It is placed in the {} {}.", level.as_str(), record.label(level)),
    }
}

fn stub_turn(r: &TaxonomicRecord, c: Category) -> ConversationTurn {
    let (q, a) = match c {
        Category::Identification => (
            "What insect is shown in this image?".to_string(),
            format!(
                "The insect in the image is {}, a member of the genus {}.",
                r.species(),
                r.label(Level::Genus)
            ),
        ),
        Category::Appearance => (
            "What does the body of this insect look like?".to_string(),
            format!("In the image I can see the following. {}", sentence(r, Level::Species)),
        ),
        Category::Characteristics => (
            "Which order and family does this insect belong to?".to_string(),
            format!(
                "This insect belongs to the order {} and the family {}. {} {}",
                r.label(Level::Order),
                r.label(Level::Family),
                sentence(r, Level::Order),
                sentence(r, Level::Family)
            ),
        ),
        Category::Geographic => (
            "Where is an insect like this one usually found?".to_string(),
            format!(
                "Members of the order {} such as this {} are found across many regions. {}",
                r.label(Level::Order),
                r.species(),
                sentence(r, Level::Class)
            ),
        ),
        Category::Reasoning => (
            "Why can the genus of this insect be told from the image?".to_string(),
            format!(
                "The visible traits match those of the genus {}. {} {}",
                r.label(Level::Genus),
                sentence(r, Level::Genus),
                sentence(r, Level::Species)
            ),
        ),
        Category::Descriptive => (
            "Can you describe this insect in general terms?".to_string(),
            Level::ALL.iter().map(|&l| sentence(r, l)).collect::<Vec<_>>().join(" "),
        ),
    };
    ConversationTurn {
        q,
        a: clamp_words(&a, MAX_ANSWER_WORDS),
    }
}

/// Cut `text` to at most `max` words, ending on a full stop.
pub fn clamp_words(text: &str, max: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max {
        return words.join(" ");
    }
    let mut kept = words[..max].join(" ");
    if let Some(p) = kept.rfind(['.', '!', '?']) {
        kept.truncate(p + 1);
    } else {
        kept.push('.');
    }
    kept
}

/// Generate, parse and filter conversations for every record. Record `i`
/// uses the seed derived from `(seed, i)`; a record without a response is
/// rejected as `no_answer`.
pub fn generate_conversations<S: ResponseSource + ?Sized>(
    manifest: &Manifest,
    source: &mut S,
    phrases: &FilterPhrases,
    seed: u64,
) -> FilterReport {
    let mut samples = Vec::with_capacity(manifest.len());
    for (i, rec) in manifest.records().iter().enumerate() {
        let rseed = derive(seed, i as u64).gen::<u64>();
        let turns = source
            .response(rec, rseed)
            .map(|t| parse_llm_response(&t))
            .unwrap_or_default();
        let mut coin = derive(rseed, 0x1ac);
        samples.push(InstructionSample {
            image_id: rec.image_id.clone(),
            image_position: draw_position(&mut coin),
            category: turns.first().and_then(|t| categorize(&t.q)),
            turns,
        });
    }
    filter_responses(samples, phrases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    pub turns_mean: f64,
    pub answer_words_min: usize,
    pub answer_words_max: usize,
    pub answer_words_mean: f64,
    pub categories: BTreeMap<String, usize>,
}

pub fn corpus_stats(samples: &[InstructionSample]) -> CorpusStats {
    let turns: Vec<usize> = samples.iter().map(|s| s.turns.len()).collect();
    let words: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.turns.iter().map(|t| t.a.split_whitespace().count()))
        .collect();
    let mean = |v: &[usize]| if v.is_empty() { 0.0 } else { v.iter().sum::<usize>() as f64 / v.len() as f64 };
    let mut categories = BTreeMap::new();
    for s in samples {
        let key = match s.category {
            Some(c) => format!("{c:?}").to_lowercase(),
            None => "none".to_string(),
        };
        *categories.entry(key).or_insert(0) += 1;
    }
    CorpusStats {
        samples: samples.len(),
        turns_min: turns.iter().copied().min().unwrap_or(0),
        turns_max: turns.iter().copied().max().unwrap_or(0),
        turns_mean: mean(&turns),
        answer_words_min: words.iter().copied().min().unwrap_or(0),
        answer_words_max: words.iter().copied().max().unwrap_or(0),
        answer_words_mean: mean(&words),
        categories,
    }
}

/// Seeded subset of `ceil(fraction * n)` sample indices for manual review,
/// in ascending order.
pub fn sample_for_review(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = (crate::math::ceil(fraction * n as f64) as usize).min(n);
    let mut idx = rand::seq::index::sample(&mut derive(seed, 0x4e71), n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::record;
    use crate::rng::seeded;
    use alloc::vec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rec(id: &str) -> TaxonomicRecord {
        record(id, ["Hexapoda", "Insecta", "Coleoptera", "Carabidae", "Carabus", "Carabus crucis"])
    }

    fn turn(q: &str, a: &str) -> ConversationTurn {
        ConversationTurn { q: q.into(), a: a.into() }
    }

    fn sample(turns: Vec<ConversationTurn>) -> InstructionSample {
        InstructionSample {
            image_id: "x".into(),
            image_position: ImagePosition::After,
            turns,
            category: None,
        }
    }

    #[test]
    fn question_list_is_exact() {
        assert_eq!(DESCRIBE_QUESTIONS.len(), 16);
        let distinct: alloc::collections::BTreeSet<_> = DESCRIBE_QUESTIONS.iter().collect();
        assert_eq!(distinct.len(), 16);
        assert_eq!(DESCRIBE_QUESTIONS[0], "Describe the following insect in detail");
        assert_eq!(DESCRIBE_QUESTIONS[6], "Clarify the contents of the displayed insect ge with great detail");
        assert_eq!(DESCRIBE_QUESTIONS[15], "Write an exhaustive depiction of the given insect");
    }

    #[test]
    fn pretrain_pair() {
        let r = rec("a");
        let s = build_pretrain_pair(&r, &mut seeded(3)).unwrap();
        assert!(DESCRIBE_QUESTIONS.contains(&s.turns[0].q.as_str()));
        assert_eq!(s.turns[0].a, r.description_lines().join("\n\n"));
        assert_eq!(s, build_pretrain_pair(&r, &mut seeded(3)).unwrap());
        let text = to_human_assistant(&s);
        assert_eq!(text, format!("Human: {}, <image><STOP>\n Assistant: {}<STOP>\n", s.turns[0].q, s.turns[0].a));
        let mut bare = r.clone();
        bare.descriptions.remove(&Level::Species);
        assert!(build_pretrain_pair(&bare, &mut seeded(3)).is_err());
        let mut seen = alloc::collections::BTreeSet::new();
        let mut rng = seeded(0);
        for _ in 0..400 {
            seen.insert(build_pretrain_pair(&r, &mut rng).unwrap().turns[0].q.clone());
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn system_prompt_shape() {
        assert!(SYSTEM_PROMPT.starts_with("You are an AI visual assistant specialized in entomology topics"));
        assert!(SYSTEM_PROMPT.ends_with("You can include multiple paragraphs if necessary."));
        assert_eq!(SYSTEM_PROMPT.split("\n\n").count(), 4);
        assert!(!SYSTEM_PROMPT.contains("  "));
    }

    #[test]
    fn prompt_messages() {
        let r = rec("a");
        let m = render_llm_prompt(&r, &[]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].content, SYSTEM_PROMPT);
        assert_eq!(m[1].content, r.description_lines().join("\n"));
        let shots = vec![
            FewShot { context: "c1".into(), response: "r1".into() },
            FewShot { context: "c2".into(), response: "r2".into() },
        ];
        let roles: Vec<String> = render_llm_prompt(&r, &shots).into_iter().map(|m| m.role).collect();
        assert_eq!(roles, ["system", "user", "assistant", "user", "assistant", "user"]);
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_llm_response("Question: X?\nAnswer: Y."), vec![turn("X?", "Y.")]);
        assert_eq!(parse_llm_response("Question: X?\nAnswer: Y.\nQuestion: dangling?"), vec![turn("X?", "Y.")]);
        let three = "Q: one?\nA: first.\n\nHuman: two?\nAssistant: second\ncontinued.\n**Question 3:** three?\n**Answer 3:** third.";
        assert_eq!(
            parse_llm_response(three),
            vec![turn("one?", "first."), turn("two?", "second\ncontinued."), turn("three?", "third.")]
        );
        assert!(parse_llm_response("no structure here").is_empty());
        assert!(parse_llm_response("").is_empty());
    }

    #[test]
    fn filtering_rules() {
        let p = FilterPhrases::builtin();
        assert_eq!(p.version, "1");
        let clean = sample(vec![turn("a?", "Yes."), turn("b?", "No!"), turn("c?", "Maybe?")]);
        assert_eq!(check_sample(&clean, &p), None);
        let cut = sample(vec![turn("a?", "Yes."), turn("b?", "...the wings are")]);
        assert_eq!(check_sample(&cut, &p), Some(RejectReason::Incomplete));
        let blind = sample(vec![turn("a?", "I cannot see the image, but it is red.")]);
        assert_eq!(check_sample(&blind, &p), Some(RejectReason::NonVisualDisclaimer));
        let refuse = sample(vec![turn("a?", "I'm sorry, but I can't help")]);
        assert_eq!(check_sample(&refuse, &p), Some(RejectReason::NoAnswer));
        assert_eq!(check_sample(&sample(vec![]), &p), Some(RejectReason::NoAnswer));
    }

    #[test]
    fn phrase_file_errors() {
        assert!(FilterPhrases::parse("[no_answer]\nx").is_err());
        assert!(FilterPhrases::parse("version: 2\nstray").is_err());
        let p = FilterPhrases::parse("version: 2\n[non_visual_disclaimer]\nSEE NOTHING").unwrap();
        assert_eq!(p.non_visual_disclaimer, ["see nothing"]);
    }

    #[test]
    fn packing_places_image_in_first_turn() {
        let vocab = Vocab::build(["a b c d e f"]);
        let s = sample(vec![turn("a b", "c d."), turn("e", "f.")]);
        let toks = pack_tokens(&s, &vocab).unwrap();
        let imgs: Vec<&PackedToken> = toks.iter().filter(|t| t.id == IMG).collect();
        assert_eq!(imgs.len(), 1);
        assert_eq!((imgs[0].turn, imgs[0].role), (1, Role::Instruction));
        assert_eq!(toks.iter().filter(|t| t.id == STOP).count(), 4);
        for t in &toks {
            let is_answer_word = ["c", "d", ".", "f"].iter().any(|w| vocab.id(w) == Some(t.id));
            if is_answer_word {
                assert_eq!(t.role, Role::Answer);
            }
        }
        let mut before = 0;
        let mut rng = seeded(5);
        for _ in 0..1000 {
            let (pos, toks) = assemble_instruct_tokens(&s, &vocab, &mut rng).unwrap();
            let first = toks[0].id == IMG;
            assert_eq!(first, pos == ImagePosition::Before);
            before += usize::from(first);
        }
        assert!((before as f64 / 1000.0 - 0.5).abs() <= 0.05, "{before}");
    }

    #[test]
    fn stub_generation() {
        let recs: Vec<TaxonomicRecord> = (0..5).map(|i| rec(&format!("r{i}"))).collect();
        let m = Manifest::new("1".into(), None, recs).unwrap();
        let p = FilterPhrases::builtin();
        let a = generate_conversations(&m, &mut StubBackend, &p, 3);
        assert_eq!(a.kept.len(), 5);
        assert_eq!(a, generate_conversations(&m, &mut StubBackend, &p, 3));
        let stats = corpus_stats(&a.kept);
        assert!(stats.turns_min >= 2 && stats.turns_max <= 6);
        assert!(stats.answer_words_min >= MIN_ANSWER_WORDS && stats.answer_words_max <= MAX_ANSWER_WORDS);
        for s in &a.kept {
            assert!(s.category.is_some());
        }
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        map.insert("r0".into(), "Question: What insect?\nAnswer: A beetle.".into());
        let b = generate_conversations(&m, &mut map, &p, 3);
        assert_eq!((b.kept.len(), b.counts()[&RejectReason::NoAnswer]), (1, 4));
    }

    #[test]
    fn stub_questions_categorize_to_their_type() {
        let r = rec("a");
        for c in Category::ALL {
            assert_eq!(categorize(&stub_turn(&r, c).q), Some(c));
        }
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_words("one two. three four", 3), "one two.");
        assert_eq!(clamp_words("one two three", 2), "one two.");
        assert_eq!(clamp_words("a  b", 5), "a b");
    }

    #[test]
    fn review_sample() {
        let s = sample_for_review(100, 0.15, 1);
        assert_eq!(s.len(), 15);
        assert_eq!(s, sample_for_review(100, 0.15, 1));
        assert_eq!(sample_for_review(7, 0.15, 1).len(), 2);
    }

    fn arb_sample() -> impl proptest::strategy::Strategy<Value = InstructionSample> {
        use proptest::prelude::*;
        let text = prop::sample::select(vec![
            "Yes.", "the wings are", "I cannot see the image.", "As a language model, no.", "", "Red!",
        ]);
        prop::collection::vec((text.clone(), text), 0..4).prop_map(|v| {
            sample(v.into_iter().map(|(q, a)| turn(if q.is_empty() { "q?" } else { q }, a)).collect())
        })
    }

    proptest! {
        #[test]
        fn filter_partitions_and_is_idempotent(v in proptest::collection::vec(arb_sample(), 0..12)) {
            let p = FilterPhrases::builtin();
            let r = filter_responses(v.clone(), &p);
            prop_assert_eq!(r.kept.len() + r.rejected.len(), v.len());
            let again = filter_responses(r.kept.clone(), &p);
            prop_assert!(again.rejected.is_empty());
        }
    }
}
