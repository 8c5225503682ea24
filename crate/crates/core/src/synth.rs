//! Synthetic stand-ins for dialogue, translation, summarization, QA and
//! data-to-text, plus a plain-text pretraining corpus over the same words.
//!
//! Word maps (e.g. the translation dictionary) are fixed constants of the
//! suite; the data seed only drives sampling. Every example lands in the
//! split selected by a hash of its content, so splits never share an example.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::json::sha256_hex;
use crate::task::{RawExample, TaskRegistry, TaskSpec};
use crate::tokenizer::Tokenizer;
use crate::{Result, VlmError};

pub const TASKS: [&str; 5] = ["toy-dlg", "toy-nmt", "toy-sum", "toy-qa", "toy-nlg"];

/// Source words of the translation task and the size of its dictionary.
pub const NMT_WORDS: usize = 24;
pub const QA_KEYS: usize = 6;
pub const QA_VALUES: usize = 32;
const SUM_WORDS: usize = 40;
const DLG_OBJECTS: usize = 24;
const DLG_RELATIONS: [&str; 4] = ["like", "have", "play", "visit"];
const NLG_NAMES: [&str; 8] = ["alimentum", "aromi", "bibimbap", "clowns", "cotto", "fitzbillies", "giraffe", "loch"];
const NLG_FOODS: [&str; 6] = ["chinese", "english", "french", "indian", "italian", "japanese"];
const NLG_AREAS: [&str; 4] = ["centre", "north", "riverside", "south"];
/// Seed of the fixed word maps; unrelated to any data seed.
const MAP_SEED: u64 = 0x1dea_f00d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// Buckets 0..8 train, 8 valid, 9 test.
    fn of(bucket: u8) -> Self {
        match bucket {
            0..=7 => Split::Train,
            8 => Split::Valid,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = VlmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(VlmError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Probability that a translated word uses its secondary translation.
    #[serde(default)]
    pub nmt_ambiguity: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { nmt_ambiguity: 0.0 }
    }
}

/// Fixed translation dictionary: primary and secondary target word per source word.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
}

pub fn dictionary() -> Dictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(MAP_SEED);
    let mut primary: Vec<usize> = (0..NMT_WORDS).collect();
    primary.shuffle(&mut rng);
    let mut secondary: Vec<usize> = (NMT_WORDS..2 * NMT_WORDS).collect();
    secondary.shuffle(&mut rng);
    Dictionary { primary, secondary }
}

fn src_word(i: usize) -> String {
    format!("f{i}")
}

fn tgt_word(i: usize) -> String {
    format!("e{i}")
}

fn key(i: usize) -> String {
    format!("k{i}")
}

fn value(i: usize) -> String {
    format!("v{i}")
}

/// Inverts a target word of the translation task back to its source word.
pub fn invert_translation(word: &str) -> Option<String> {
    let i: usize = word.strip_prefix('e')?.parse().ok()?;
    let d = dictionary();
    let pos = d
        .primary
        .iter()
        .position(|&p| p == i)
        .or_else(|| d.secondary.iter().position(|&s| s == i))?;
    Some(src_word(pos))
}

pub fn spec(task: &str, bottleneck: usize) -> Result<TaskSpec> {
    let (segments, targets, max_len): (&[&str], &[&str], &[(&str, usize)]) = match task {
        "toy-dlg" => (&["persona", "user", "system"], &["system"], &[("system", 8)]),
        "toy-nmt" => (&["source", "target"], &["target"], &[("target", 8)]),
        "toy-sum" => (&["article", "summary"], &["summary"], &[("summary", 8)]),
        "toy-qa" => (&["document", "question", "answer"], &["answer"], &[("answer", 4)]),
        "toy-nlg" => (&["name", "food", "area", "response"], &["response"], &[("response", 12)]),
        other => return Err(VlmError::UnknownTask(other.to_string())),
    };
    Ok(TaskSpec {
        name: task.to_string(),
        segments: segments.iter().map(|s| s.to_string()).collect(),
        targets: targets.iter().map(|s| s.to_string()).collect(),
        bottleneck,
        max_len: max_len.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        separators: task == "toy-nmt",
    })
}

pub fn registry(bottleneck: usize) -> TaskRegistry {
    TaskRegistry {
        tasks: TASKS.iter().map(|t| spec(t, bottleneck).expect("builtin task")).collect(),
    }
}

fn nmt(rng: &mut ChaCha8Rng, opts: &SynthOptions, dict: &Dictionary) -> RawExample {
    let len = rng.random_range(3..=6);
    let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..NMT_WORDS)).collect();
    let tgt: Vec<String> = src
        .iter()
        .rev()
        .map(|&w| {
            if opts.nmt_ambiguity > 0.0 && rng.random_bool(opts.nmt_ambiguity) {
                tgt_word(dict.secondary[w])
            } else {
                tgt_word(dict.primary[w])
            }
        })
        .collect();
    let src: Vec<String> = src.into_iter().map(src_word).collect();
    RawExample::new("toy-nmt", &[("source", src.join(" ")), ("target", tgt.join(" "))])
}

/// Source words, a marker other than `=`, then unrelated target words.
/// Next to the real `src = tgt ;` lines these teach that only `=` starts a
/// translation.
fn nmt_decoy(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..=6);
    let src: Vec<String> = (0..len).map(|_| src_word(rng.random_range(0..NMT_WORDS))).collect();
    let tgt: Vec<String> = (0..len).map(|_| tgt_word(rng.random_range(0..2 * NMT_WORDS))).collect();
    let marker = [":", ",", "."][rng.random_range(0..3)];
    format!("{} {marker} {} ;", src.join(" "), tgt.join(" "))
}

/// The document lists the first `n` keys in a fixed order, each followed by
/// a random value; the question is one of those keys.
fn qa(rng: &mut ChaCha8Rng) -> RawExample {
    let values = qa_values(rng);
    let asked = rng.random_range(0..values.len());
    RawExample::new(
        "toy-qa",
        &[
            ("document", qa_document(&values)),
            ("question", key(asked)),
            ("answer", value(values[asked])),
        ],
    )
}

fn qa_values(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(3..=QA_KEYS);
    (0..n).map(|_| rng.random_range(0..QA_VALUES)).collect()
}

fn qa_document(values: &[usize]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| format!("{} {}", key(k), value(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A document followed by every one of its keys, in random order, each
/// answered in place: `doc ? k v k v ... ;`. Half of the lines insert a
/// second record between the document and `?`; its keys repeat without
/// being answered, so a lookup only follows `?`.
fn qa_drill(rng: &mut ChaCha8Rng) -> String {
    let values = qa_values(rng);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.shuffle(rng);
    let queries: Vec<String> = order.iter().map(|&k| format!("{} {}", key(k), value(values[k]))).collect();
    let mut doc = qa_document(&values);
    if rng.random_bool(0.5) {
        let extra = qa_values(rng);
        doc = format!("{doc} {}", qa_document(&extra));
    }
    format!("{doc} ? {} ;", queries.join(" "))
}

fn object(i: usize) -> String {
    format!("o{i}")
}

fn dlg(rng: &mut ChaCha8Rng) -> RawExample {
    let mut objects: Vec<usize> = (0..DLG_OBJECTS).collect();
    objects.shuffle(rng);
    let facts: Vec<(usize, usize)> = (0..DLG_RELATIONS.len()).map(|r| (r, objects[r])).collect();
    let mut order = facts.clone();
    order.shuffle(rng);
    let persona = order
        .iter()
        .map(|&(r, o)| format!("i {} {} .", DLG_RELATIONS[r], object(o)))
        .collect::<Vec<_>>()
        .join(" ");
    let (asked_before, asked_now) = {
        let mut rel: Vec<usize> = (0..DLG_RELATIONS.len()).collect();
        rel.shuffle(rng);
        (rel[0], rel[1])
    };
    let ask = |r: usize| format!("what do you {} ?", DLG_RELATIONS[r]);
    let reply = |r: usize| format!("i {} {} .", DLG_RELATIONS[r], object(facts[r].1));
    RawExample::new(
        "toy-dlg",
        &[
            ("persona", persona),
            ("user", ask(asked_before)),
            ("system", reply(asked_before)),
            ("user", ask(asked_now)),
            ("system", reply(asked_now)),
        ],
    )
}

fn sum(rng: &mut ChaCha8Rng) -> RawExample {
    let len = rng.random_range(9..=15);
    let article: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..SUM_WORDS))).collect();
    let summary: Vec<String> = article.iter().skip(2).step_by(3).cloned().collect();
    RawExample::new("toy-sum", &[("article", article.join(" ")), ("summary", summary.join(" "))])
}

fn nlg(rng: &mut ChaCha8Rng) -> RawExample {
    let name = *NLG_NAMES.choose(rng).expect("nonempty");
    let food = *NLG_FOODS.choose(rng).expect("nonempty");
    let area = *NLG_AREAS.choose(rng).expect("nonempty");
    RawExample::new(
        "toy-nlg",
        &[
            ("name", name.to_string()),
            ("food", food.to_string()),
            ("area", area.to_string()),
            ("response", format!("{name} is a {food} restaurant in the {area} area .")),
        ],
    )
}

fn context_hash(task: &str, ex: &RawExample) -> Result<String> {
    let spec = spec(task, 1)?;
    let ctx = serde_json::to_string(ex.context(&spec))?;
    Ok(sha256_hex(ctx.as_bytes()))
}

fn bucket(task: &str, ex: &RawExample) -> Result<u8> {
    let h = context_hash(task, ex)?;
    Ok((u8::from_str_radix(&h[..2], 16).unwrap_or(0) as u32 * 10 / 256) as u8)
}

/// `n` examples of `task` in `split`, deterministic in `seed`.
pub fn generate(task: &str, n: usize, seed: u64, split: Split, opts: &SynthOptions) -> Result<Vec<RawExample>> {
    let dict = dictionary();
    let task_salt = TASKS
        .iter()
        .position(|t| *t == task)
        .ok_or_else(|| VlmError::UnknownTask(task.to_string()))? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (task_salt << 56) ^ split as u64);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * (n + 10) {
            return Err(VlmError::Invalid(format!("{task}: could not fill the {split:?} split")));
        }
        let ex = match task {
            "toy-nmt" => nmt(&mut rng, opts, &dict),
            "toy-qa" => qa(&mut rng),
            "toy-dlg" => dlg(&mut rng),
            "toy-sum" => sum(&mut rng),
            _ => nlg(&mut rng),
        };
        // the split depends on the context only, so a prompt never crosses splits
        if Split::of(bucket(task, &ex)?) == split {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Renders an example as one marked-up text line: `=` opens the target and
/// `;` closes it, a question is introduced by `?`, attributes are
/// comma-separated. Dialogues keep their plain layout.
pub fn marked_line(ex: &RawExample) -> String {
    let text = |i: usize| ex.segments.get(i).map(|s| s.text.as_str()).unwrap_or("");
    match ex.task.as_str() {
        "toy-qa" => format!("{} ? {} {} ;", text(0), text(1), text(2)),
        "toy-nlg" => format!("{} , {} , {} = {}", text(0), text(1), text(2), text(3)),
        "toy-dlg" => ex.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" "),
        _ => format!("{} = {} ;", text(0), text(1)),
    }
}

/// Plain-text lines for language-model pretraining: fresh samples of every
/// task rendered by [`marked_line`], with key-value drills in place of
/// single questions and translation decoys. The markers never appear in
/// task encodings, so the unadapted backbone does not solve them.
pub fn pretraining_corpus(n: usize, seed: u64) -> Vec<String> {
    let dict = dictionary();
    let opts = SynthOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6574);
    (0..n)
        .map(|i| {
            let ex = match i % 10 {
                0 | 5 => nmt(&mut rng, &opts, &dict),
                1 | 4 | 9 => return qa_drill(&mut rng),
                2 | 7 => return nmt_decoy(&mut rng),
                3 => dlg(&mut rng),
                6 => sum(&mut rng),
                _ => nlg(&mut rng),
            };
            marked_line(&ex)
        })
        .collect()
}

/// Every word any generator can emit, in a fixed order.
pub fn all_words() -> Vec<String> {
    let mut w: Vec<String> = Vec::new();
    w.extend((0..NMT_WORDS).map(src_word));
    w.extend((0..2 * NMT_WORDS).map(tgt_word));
    w.extend((0..QA_KEYS).map(key));
    w.extend((0..QA_VALUES).map(value));
    w.extend((0..SUM_WORDS).map(|i| format!("w{i}")));
    w.extend((0..DLG_OBJECTS).map(object));
    w.extend(DLG_RELATIONS.iter().map(|s| s.to_string()));
    w.extend(NLG_NAMES.iter().chain(&NLG_FOODS).chain(&NLG_AREAS).map(|s| s.to_string()));
    w.extend(
        ["i", "what", "do", "you", "?", ".", "=", ";", ":", ",", "is", "a", "restaurant", "in", "the", "area"]
            .iter()
            .map(|s| s.to_string()),
    );
    w
}

/// Word-level tokenizer covering the whole suite.
pub fn suite_tokenizer(vocab_size: usize) -> Result<Tokenizer> {
    let words = all_words();
    if words.len() + 4 > vocab_size {
        return Err(VlmError::Invalid(format!(
            "the suite needs a vocabulary of at least {}",
            words.len() + 4
        )));
    }
    let line = words.join(" ");
    Tokenizer::build([line.as_str()], vocab_size)
}

/// Per-task examples for a suite split.
pub fn suite(n: usize, seed: u64, split: Split, opts: &SynthOptions) -> Result<BTreeMap<String, Vec<RawExample>>> {
    TASKS
        .iter()
        .map(|t| Ok((t.to_string(), generate(t, n, seed, split, opts)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{encode, EncodeOptions};

    #[test]
    fn deterministic_and_disjoint() {
        for t in TASKS {
            let a = generate(t, 20, 7, Split::Train, &SynthOptions::default()).unwrap();
            let b = generate(t, 20, 7, Split::Train, &SynthOptions::default()).unwrap();
            assert_eq!(a, b);
            let test = generate(t, 20, 7, Split::Test, &SynthOptions::default()).unwrap();
            let spec = spec(t, 4).unwrap();
            for x in &test {
                assert!(a.iter().all(|y| y.context(&spec) != x.context(&spec)), "{t}");
            }
        }
        assert!(generate("toy-qa", 0, 1, Split::Train, &SynthOptions::default()).unwrap().is_empty());
        assert!(generate("nope", 1, 1, Split::Train, &SynthOptions::default()).is_err());
    }

    #[test]
    fn translation_inverts() {
        let rows = generate("toy-nmt", 50, 3, Split::Train, &SynthOptions { nmt_ambiguity: 0.3 }).unwrap();
        let spec = spec("toy-nmt", 4).unwrap();
        let mut secondary = 0;
        for r in &rows {
            let src: Vec<&str> = r.segments[0].text.split_whitespace().collect();
            let tgt = r.target_text(&spec);
            let back: Vec<String> = tgt.split_whitespace().rev().map(|w| invert_translation(w).unwrap()).collect();
            assert_eq!(back, src);
            secondary += tgt
                .split_whitespace()
                .filter(|w| w[1..].parse::<usize>().unwrap() >= NMT_WORDS)
                .count();
        }
        assert!(secondary > 0);
    }

    #[test]
    fn qa_answers_are_lookups() {
        for r in generate("toy-qa", 50, 1, Split::Valid, &SynthOptions::default()).unwrap() {
            let doc: Vec<&str> = r.segments[0].text.split_whitespace().collect();
            let q: Vec<&str> = r.segments[1].text.split_whitespace().collect();
            let a: Vec<&str> = r.segments[2].text.split_whitespace().collect();
            assert_eq!(q.len(), a.len());
            for (k, v) in q.iter().zip(&a) {
                let i = doc.iter().step_by(2).position(|d| d == k).unwrap();
                assert_eq!(&doc[2 * i + 1], v);
            }
        }
    }

    #[test]
    fn every_example_encodes_without_unknowns() {
        let tok = suite_tokenizer(512).unwrap();
        for (t, rows) in suite(30, 2, Split::Train, &SynthOptions { nmt_ambiguity: 0.5 }).unwrap() {
            let spec = spec(&t, 4).unwrap();
            for r in rows {
                let e = encode(&spec, &r, &tok, EncodeOptions::new(128)).unwrap();
                assert!(!e.tokens.contains(&crate::UNK_ID), "{t}: {r:?}");
            }
        }
        for line in pretraining_corpus(25, 0) {
            assert!(!tok.encode(&line).contains(&crate::UNK_ID), "{line}");
        }
    }

    #[test]
    fn map_is_independent_of_data_seed() {
        assert_eq!(dictionary(), dictionary());
        let d = dictionary();
        let mut all: Vec<usize> = d.primary.iter().chain(&d.secondary).copied().collect();
        all.sort();
        assert_eq!(all, (0..2 * NMT_WORDS).collect::<Vec<_>>());
    }
}
