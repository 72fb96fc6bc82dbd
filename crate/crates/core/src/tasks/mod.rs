//! Synthetic retrieval tasks: passkey retrieval and three needle-in-a-
//! haystack variants over a small word-level vocabulary.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::{Error, Result};

const SPECIALS: [&str; 2] = ["<pad>", "<bos>"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const HEX: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
const PUNCT: [&str; 3] = [".", "?", ":"];
const PASSKEY_WORDS: [&str; 8] = ["the", "pass", "key", "is", "remember", "it", "what", "was"];
const FILLER_WORDS: [&str; 13] = [
    "grass", "grows", "sky", "glows", "sun", "shines", "here", "we", "go", "there", "and", "back", "again",
];
const NIAH_WORDS: [&str; 7] = ["one", "of", "special", "magic", "numbers", "number", "for"];
const UUID_WORDS: [&str; 2] = ["uuids", "uuid"];
const NIAH_KEYS: [&str; 8] = ["cat", "dog", "owl", "fox", "bee", "elk", "yak", "ant"];
const SUBJECTS: [&str; 8] = ["farmer", "river", "king", "bird", "teacher", "sailor", "child", "wolf"];
const VERBS: [&str; 8] = ["sees", "finds", "loves", "hears", "follows", "paints", "carries", "forgets"];
const OBJECTS: [&str; 8] = ["lamp", "boat", "song", "stone", "bridge", "garden", "letter", "cloud"];

const FILLER: &str = "the grass grows . the sky glows . the sun shines . here we go . there and back again .";

pub const PAD: usize = 0;
pub const BOS: usize = 1;

/// The fixed token alphabet shared by every task.
#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn get() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let words: Vec<&'static str> = SPECIALS
                .iter()
                .chain(&DIGITS)
                .chain(&HEX)
                .chain(&PUNCT)
                .chain(&PASSKEY_WORDS)
                .chain(&FILLER_WORDS)
                .chain(&NIAH_WORDS)
                .chain(&UUID_WORDS)
                .chain(&NIAH_KEYS)
                .chain(&SUBJECTS)
                .chain(&VERBS)
                .chain(&OBJECTS)
                .copied()
                .collect();
            Vocab { words }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.words
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("word {word:?} is not in the vocabulary"))
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Readable text; consecutive single-symbol value tokens are joined
    /// without a space, so `4 8 2` reads as `482`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_symbol = false;
        for &id in ids {
            let w = self.word(id).unwrap_or("<unk>");
            let symbol = is_value_symbol(w);
            if !out.is_empty() && !(symbol && prev_symbol) {
                out.push(' ');
            }
            out.push_str(w);
            prev_symbol = symbol;
        }
        out
    }
}

fn is_value_symbol(w: &str) -> bool {
    DIGITS.contains(&w) || HEX.contains(&w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Passkey,
    Niah1,
    Niah2,
    Niah3,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "passkey" => Ok(Self::Passkey),
            "niah1" => Ok(Self::Niah1),
            "niah2" => Ok(Self::Niah2),
            "niah3" => Ok(Self::Niah3),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Passkey => "passkey",
            Self::Niah1 => "niah1",
            Self::Niah2 => "niah2",
            Self::Niah3 => "niah3",
        }
    }
}

/// Which half of the haystack sentence pool to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub tokens: Vec<usize>,
    /// Half-open span `[answer_start, answer_end)` of the answer tokens,
    /// which end the sequence.
    pub answer_start: usize,
    pub answer_end: usize,
    pub task: TaskKind,
    pub target_value: String,
    pub context_len: usize,
    pub seed: u64,
    /// Token index where the needle sentence starts.
    pub needle_pos: usize,
}

impl SampleRecord {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.answer_start]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start..self.answer_end]
    }

    /// Relative depth of the needle within the haystack, in `[0, 1]`.
    pub fn depth(&self) -> f64 {
        let room = self.answer_start.saturating_sub(1).max(1);
        (self.needle_pos.saturating_sub(1)) as f64 / room as f64
    }
}

/// All sentences of one pool split. The two splits are disjoint.
pub fn sentence_pool(split: Split) -> Vec<String> {
    let mut out = Vec::new();
    for (i, s) in SUBJECTS.iter().enumerate() {
        for (j, v) in VERBS.iter().enumerate() {
            for (k, o) in OBJECTS.iter().enumerate() {
                let even = (i + j + k) % 2 == 0;
                if even == (split == Split::Train) {
                    out.push(format!("the {s} {v} the {o} ."));
                }
            }
        }
    }
    out
}

fn digits_value(rng: &mut impl Rng, n: usize, distinct: bool) -> Vec<&'static str> {
    if distinct {
        let mut d = DIGITS.to_vec();
        d.shuffle(rng);
        d.truncate(n);
        d
    } else {
        let mut d: Vec<&'static str> = (0..n).map(|_| DIGITS[rng.gen_range(0..10)]).collect();
        if n > 0 && d[0] == "0" {
            d[0] = DIGITS[rng.gen_range(1..10)];
        }
        d
    }
}

fn hex_value(rng: &mut impl Rng, n: usize) -> Vec<&'static str> {
    let alphabet: Vec<&'static str> = DIGITS.iter().chain(&HEX).copied().collect();
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

enum Haystack {
    Filler,
    Pool(Vec<String>),
}

impl Haystack {
    fn tokens(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let v = Vocab::get();
        let mut out = Vec::with_capacity(n + 16);
        match self {
            Self::Filler => {
                let f = v.encode(FILLER);
                while out.len() < n {
                    out.extend_from_slice(&f);
                }
            }
            Self::Pool(pool) => {
                while out.len() < n {
                    out.extend(v.encode(&pool[rng.gen_range(0..pool.len())]));
                }
            }
        }
        out.truncate(n);
        out
    }
}

fn assemble(
    task: TaskKind,
    seed: u64,
    context_len: usize,
    rng: &mut ChaCha8Rng,
    haystack: Haystack,
    needle: Vec<usize>,
    query: Vec<usize>,
    value: Vec<&'static str>,
) -> Result<SampleRecord> {
    let v = Vocab::get();
    let answer: Vec<usize> = value.iter().map(|w| v.id(w)).collect();
    let fixed = 1 + needle.len() + query.len() + answer.len();
    if context_len < fixed {
        return Err(Error::Config(format!(
            "context_len {context_len} is below the minimum {fixed} for {}",
            task.name()
        )));
    }
    let hay = haystack.tokens(context_len - fixed, rng);
    let depth = rng.gen_range(0..=hay.len());
    let mut tokens = Vec::with_capacity(context_len);
    tokens.push(BOS);
    tokens.extend_from_slice(&hay[..depth]);
    let needle_pos = tokens.len();
    tokens.extend_from_slice(&needle);
    tokens.extend_from_slice(&hay[depth..]);
    tokens.extend_from_slice(&query);
    let answer_start = tokens.len();
    tokens.extend_from_slice(&answer);
    Ok(SampleRecord {
        answer_end: tokens.len(),
        tokens,
        answer_start,
        task,
        target_value: value.concat(),
        context_len,
        seed,
        needle_pos,
    })
}

/// Passkey retrieval: repeated filler with one "the pass key is ..."
/// sentence. Key digits are distinct.
pub fn gen_passkey(seed: u64, context_len: usize, key_digits: usize) -> Result<SampleRecord> {
    if key_digits == 0 || key_digits > 10 {
        return Err(Error::Config(format!("key_digits must be in 1..=10, got {key_digits}")));
    }
    let v = Vocab::get();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = digits_value(&mut rng, key_digits, true);
    let needle = v.encode(&format!("the pass key is {} . remember it .", key.join(" ")));
    let query = v.encode("what was the pass key ? the pass key is");
    assemble(TaskKind::Passkey, seed, context_len, &mut rng, Haystack::Filler, needle, query, key)
}

/// Needle-in-a-haystack. Variant 1: repeated filler and a 5-digit number;
/// 2: sentences from the pool and a 5-digit number; 3: sentences from the
/// pool and an 8-symbol hex identifier.
pub fn gen_niah(seed: u64, context_len: usize, variant: u8, split: Split) -> Result<SampleRecord> {
    let v = Vocab::get();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = NIAH_KEYS[rng.gen_range(0..NIAH_KEYS.len())];
    let (task, value, plural, single) = match variant {
        1 => (TaskKind::Niah1, digits_value(&mut rng, 5, false), "numbers", "number"),
        2 => (TaskKind::Niah2, digits_value(&mut rng, 5, false), "numbers", "number"),
        3 => (TaskKind::Niah3, hex_value(&mut rng, 8), "uuids", "uuid"),
        _ => return Err(Error::Config(format!("niah variant must be 1, 2 or 3, got {variant}"))),
    };
    let needle = v.encode(&format!(
        "one of the special magic {plural} for {key} is : {} .",
        value.join(" ")
    ));
    let query = v.encode(&format!(
        "what is the special magic {single} for {key} ? the special magic {single} for {key} is :"
    ));
    let haystack = match task {
        TaskKind::Niah1 => Haystack::Filler,
        _ => Haystack::Pool(sentence_pool(split)),
    };
    assemble(task, seed, context_len, &mut rng, haystack, needle, query, value)
}

/// Generates one record of `task`; passkey uses `key_digits`.
pub fn generate(task: TaskKind, seed: u64, context_len: usize, key_digits: usize, split: Split) -> Result<SampleRecord> {
    match task {
        TaskKind::Passkey => gen_passkey(seed, context_len, key_digits),
        TaskKind::Niah1 => gen_niah(seed, context_len, 1, split),
        TaskKind::Niah2 => gen_niah(seed, context_len, 2, split),
        TaskKind::Niah3 => gen_niah(seed, context_len, 3, split),
    }
}

pub fn dump_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Anything that can continue prompts greedily.
pub trait GreedyModel {
    fn greedy(&self, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>>;
}

impl GreedyModel for Model {
    fn greedy(&self, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); prompts.len()];
        let mut lengths: Vec<usize> = prompts.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        for len in lengths {
            let idx: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() == len).collect();
            let group: Vec<Vec<usize>> = idx.iter().map(|&i| prompts[i].clone()).collect();
            for (i, gen) in idx.into_iter().zip(self.greedy_batch(&group, max_new)?) {
                out[i] = gen;
            }
        }
        Ok(out)
    }
}

/// Whether decoded text contains the target value as part of one word.
pub fn is_match(generated: &[usize], target: &str) -> bool {
    Vocab::get()
        .decode(generated)
        .split_whitespace()
        .any(|w| w.contains(target))
}

/// Fraction of samples whose greedy continuation contains the target value.
pub fn evaluate(model: &impl GreedyModel, samples: &[SampleRecord], max_new: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("empty sample set".into()));
    }
    let prompts: Vec<Vec<usize>> = samples.iter().map(|s| s.prompt().to_vec()).collect();
    let outs = model.greedy(&prompts, max_new)?;
    let hits = samples
        .iter()
        .zip(&outs)
        .filter(|(s, o)| is_match(o, &s.target_value))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_unique() {
        let v = Vocab::get();
        assert!(v.len() <= 256);
        let mut w = v.words.clone();
        w.sort_unstable();
        w.dedup();
        assert_eq!(w.len(), v.len());
        assert_eq!(v.id("<bos>"), BOS);
    }

    #[test]
    fn decode_joins_value_symbols() {
        let v = Vocab::get();
        assert_eq!(v.decode(&v.encode("key is 4 8 2 a .")), "key is 482a .");
    }
}
