//! Corpora, tokenizers, and batch sampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// One token per byte, `V = 256`.
    #[default]
    Byte,
    /// One token per character seen in the training split, plus a reserved unknown id.
    Char,
}

/// Id every unseen character maps to in char mode.
pub const UNKNOWN_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    Byte,
    /// Sorted alphabet; character `chars[i]` has id `i + 1`.
    Char { chars: Vec<char> },
}

impl Tokenizer {
    pub fn build(mode: TokenizerMode, train_text: &[u8]) -> Self {
        match mode {
            TokenizerMode::Byte => Tokenizer::Byte,
            TokenizerMode::Char => {
                let text = String::from_utf8_lossy(train_text);
                let set: BTreeSet<char> = text.chars().collect();
                Tokenizer::Char { chars: set.into_iter().collect() }
            }
        }
    }

    pub fn mode(&self) -> TokenizerMode {
        match self {
            Tokenizer::Byte => TokenizerMode::Byte,
            Tokenizer::Char { .. } => TokenizerMode::Char,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Char { chars } => chars.len() + 1,
        }
    }

    fn char_id(chars: &[char], c: char) -> Option<usize> {
        chars.binary_search(&c).ok().map(|i| i + 1)
    }

    /// Strict encoding: an unseen character is an error.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        let (ids, unknown) = self.encode_lossy(text);
        if unknown > 0 {
            return Err(Error::Corpus(format!("{unknown} characters are outside the vocabulary")));
        }
        Ok(ids)
    }

    /// Encoding that maps unseen characters to [`UNKNOWN_ID`]; returns how many there were.
    pub fn encode_lossy(&self, text: &[u8]) -> (Vec<usize>, usize) {
        match self {
            Tokenizer::Byte => (text.iter().map(|&b| b as usize).collect(), 0),
            Tokenizer::Char { chars } => {
                let mut unknown = 0;
                let ids = String::from_utf8_lossy(text)
                    .chars()
                    .map(|c| {
                        Self::char_id(chars, c).unwrap_or_else(|| {
                            unknown += 1;
                            UNKNOWN_ID
                        })
                    })
                    .collect();
                (ids, unknown)
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        match self {
            Tokenizer::Byte => ids
                .iter()
                .map(|&i| u8::try_from(i).map_err(|_| Error::Index(format!("token {i} is not a byte"))))
                .collect(),
            Tokenizer::Char { chars } => {
                let mut s = String::new();
                for &i in ids {
                    match i {
                        UNKNOWN_ID => s.push(char::REPLACEMENT_CHARACTER),
                        _ => s.push(*chars.get(i - 1).ok_or_else(|| {
                            Error::Index(format!("token {i} outside vocabulary of {}", chars.len() + 1))
                        })?),
                    }
                }
                Ok(s.into_bytes())
            }
        }
    }

    /// Alphabet as a string, empty in byte mode.
    pub fn alphabet(&self) -> String {
        match self {
            Tokenizer::Byte => String::new(),
            Tokenizer::Char { chars } => chars.iter().collect(),
        }
    }

    pub fn from_alphabet(mode: TokenizerMode, alphabet: &str) -> Self {
        match mode {
            TokenizerMode::Byte => Tokenizer::Byte,
            TokenizerMode::Char => {
                let mut chars: Vec<char> = alphabet.chars().collect();
                chars.sort_unstable();
                chars.dedup();
                Tokenizer::Char { chars }
            }
        }
    }
}

/// Byte offset where the held-out tail of `text` begins.
pub fn split_point(text: &[u8], mode: TokenizerMode, val_fraction: f64) -> usize {
    let mut cut = (((text.len() as f64) * (1.0 - val_fraction)).round() as usize).min(text.len());
    if mode == TokenizerMode::Char {
        // Keep multi-byte characters whole.
        while cut < text.len() && (text[cut] & 0xC0) == 0x80 {
            cut += 1;
        }
    }
    cut
}

/// A tokenized train/validation split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Characters of the validation split that mapped to the unknown id.
    pub val_unknown: usize,
}

impl Corpus {
    /// Splits `text` so the last `val_fraction` of it is held out, then tokenizes both parts.
    pub fn from_bytes(text: &[u8], mode: TokenizerMode, val_fraction: f64) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
        }
        let (train_text, val_text) = text.split_at(split_point(text, mode, val_fraction));
        let tokenizer = Tokenizer::build(mode, train_text);
        let train = tokenizer.encode(train_text)?;
        let (val, val_unknown) = tokenizer.encode_lossy(val_text);
        if train.len() < 2 || val.len() < 2 {
            return Err(Error::Corpus(format!(
                "split leaves {} train and {} validation tokens; both need at least 2",
                train.len(),
                val.len()
            )));
        }
        if val_unknown > 0 {
            log::warn!("{val_unknown} validation characters mapped to the unknown id");
        }
        Ok(Self { tokenizer, train, val, val_unknown })
    }

    /// Concatenates the files in order, then splits as [`Corpus::from_bytes`].
    pub fn from_files<P: AsRef<Path>>(paths: &[P], mode: TokenizerMode, val_fraction: f64) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Corpus("no corpus files given".into()));
        }
        let mut text = Vec::new();
        for p in paths {
            text.extend(fs::read(p.as_ref())?);
        }
        Self::from_bytes(&text, mode, val_fraction)
    }
}

/// Inputs and next-token targets, both `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

impl Batch {
    /// Windows starting at `offsets`, each `seq_len + 1` tokens long.
    pub fn from_offsets(tokens: &[usize], offsets: &[usize], seq_len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(offsets.len() * seq_len);
        let mut targets = Vec::with_capacity(offsets.len() * seq_len);
        for &o in offsets {
            let window = tokens.get(o..o + seq_len + 1).ok_or_else(|| {
                Error::Index(format!("window at {o} of length {} overruns {} tokens", seq_len + 1, tokens.len()))
            })?;
            ids.extend_from_slice(&window[..seq_len]);
            targets.extend_from_slice(&window[1..]);
        }
        Ok(Self { inputs: TokenBatch::new(ids, offsets.len(), seq_len)?, targets })
    }

    /// Uniformly random windows.
    pub fn sample<R: Rng + ?Sized>(tokens: &[usize], batch: usize, seq_len: usize, rng: &mut R) -> Result<Self> {
        if tokens.len() < seq_len + 1 {
            return Err(Error::Corpus(format!("{} tokens cannot fill a window of {}", tokens.len(), seq_len + 1)));
        }
        let max_start = tokens.len() - seq_len - 1;
        let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=max_start)).collect();
        Self::from_offsets(tokens, &offsets, seq_len)
    }
}

const NAMES: &[&str] = &[
    "anna", "boris", "clara", "dmitri", "elena", "farid", "greta", "hugo", "ines", "jonas", "kira", "luca",
    "maya", "nils", "olga", "pavel", "rosa", "sami", "tara", "umar", "vera", "walt", "yara", "zeno",
];
const PLACES: &[&str] = &[
    "the harbor", "the old mill", "the north gate", "the market", "the library", "the river bank",
    "the bakery", "the station", "the orchard", "the tower", "the school", "the bridge",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "farmer", "teacher", "child", "river", "stone", "lamp", "letter", "garden", "boat",
    "horse", "window", "song", "storm", "key", "map", "candle", "wheel",
];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "old", "heavy", "green", "cold", "quick", "gentle", "tall", "dark", "warm",
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "saw"), ("finds", "found"), ("carries", "carried"), ("follows", "followed"), ("paints", "painted"),
    ("hears", "heard"), ("keeps", "kept"), ("opens", "opened"), ("builds", "built"), ("watches", "watched"),
];
const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

/// Deterministic English-like text: grammatical sentences, a fixed table of facts that
/// recur throughout, small sums, and counting runs.
pub fn synthetic_text(len_bytes: usize, seed: u64) -> String {
    // The fact table depends only on the seed so every paragraph agrees with it.
    let mut table_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fac7);
    let homes: Vec<&str> = NAMES.iter().map(|_| *PLACES.choose(&mut table_rng).unwrap()).collect();
    let pets: Vec<&str> = NAMES.iter().map(|_| *NOUNS[..3].choose(&mut table_rng).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len_bytes + 256);

    while out.len() < len_bytes {
        let sentences = rng.random_range(3..7);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            let who = rng.random_range(0..NAMES.len());
            let name = NAMES[who];
            let sentence = match rng.random_range(0..7) {
                0 => format!("{name} lives near {}.", homes[who]),
                1 => format!("the {} of {name} is a {}.", "pet", pets[who]),
                2 => {
                    let (a, b) = (rng.random_range(0..7), rng.random_range(0..6));
                    format!("{} plus {} is {}.", NUMBER_WORDS[a], NUMBER_WORDS[b], NUMBER_WORDS[a + b])
                }
                3 => {
                    let start = rng.random_range(0..6);
                    let n = rng.random_range(3..7);
                    let run: Vec<&str> = NUMBER_WORDS[start..(start + n).min(NUMBER_WORDS.len())].to_vec();
                    format!("{name} counts {}.", run.join(" "))
                }
                4 => {
                    let (v, v_past) = *VERBS.choose(&mut rng).unwrap();
                    let adj = ADJECTIVES.choose(&mut rng).unwrap();
                    let noun = NOUNS.choose(&mut rng).unwrap();
                    if rng.random_bool(0.5) {
                        format!("{name} {v} the {adj} {noun}.")
                    } else {
                        format!("yesterday {name} {v_past} the {adj} {noun} at {}.", homes[who])
                    }
                }
                5 => {
                    let other = NAMES.choose(&mut rng).unwrap();
                    let (v, _) = *VERBS.choose(&mut rng).unwrap();
                    format!("when {name} goes to {}, {other} {v} the {}.", homes[who], pets[who])
                }
                _ => {
                    let adj = ADJECTIVES.choose(&mut rng).unwrap();
                    let noun = NOUNS.choose(&mut rng).unwrap();
                    format!("the {noun} is {adj}, and the {adj} {noun} is not {}.", ADJECTIVES.choose(&mut rng).unwrap())
                }
            };
            let mut chars = sentence.chars();
            if let Some(first) = chars.next() {
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            }
        }
        out.push('\n');
    }
    out.truncate(len_bytes);
    out
}
