use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character vocabulary. Symbols are ordered by descending frequency, ties
/// by code point; when the text has more distinct characters than
/// `max_vocab`, the rarest share a trailing unknown symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
    unk: bool,
}

impl Vocab {
    pub fn build(text: &str, max_vocab: usize) -> Result<Self> {
        if max_vocab < 2 {
            return Err(Error::config("max_vocab must be at least 2"));
        }
        let mut freq: BTreeMap<char, usize> = BTreeMap::new();
        for ch in text.chars() {
            *freq.entry(ch).or_default() += 1;
        }
        if freq.len() < 2 {
            return Err(Error::Input("corpus needs at least two distinct characters".into()));
        }
        let mut by_freq: Vec<(char, usize)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let unk = by_freq.len() > max_vocab;
        let keep = if unk { max_vocab - 1 } else { by_freq.len() };
        Ok(Self {
            chars: by_freq[..keep].iter().map(|&(c, _)| c).collect(),
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + usize::from(self.unk)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode_char(&self, ch: char) -> Option<usize> {
        match self.chars.iter().position(|&c| c == ch) {
            Some(i) => Some(i),
            None if self.unk => Some(self.chars.len()),
            None => None,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut table: BTreeMap<char, usize> = BTreeMap::new();
        for (i, &c) in self.chars.iter().enumerate() {
            table.insert(c, i);
        }
        text.chars()
            .map(|ch| match table.get(&ch) {
                Some(&i) => Ok(i),
                None if self.unk => Ok(self.chars.len()),
                None => Err(Error::Input(format!("character {ch:?} not in vocabulary"))),
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.chars.get(t).copied().unwrap_or('\u{FFFD}'))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.9,
            valid: 0.05,
            test: 0.05,
        }
    }
}

/// Tokenized corpus split into contiguous train/valid/test segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str, split: SplitRatios, max_vocab: usize) -> Result<Self> {
        let vocab = Vocab::build(text, max_vocab)?;
        Self::with_vocab(text, vocab, split)
    }

    pub fn with_vocab(text: &str, vocab: Vocab, split: SplitRatios) -> Result<Self> {
        let sum = split.train + split.valid + split.test;
        if [split.train, split.valid, split.test].iter().any(|r| !(0.0..=1.0).contains(r))
            || (sum - 1.0).abs() > 1e-9
            || split.train <= 0.0
            || split.valid <= 0.0
        {
            return Err(Error::config(format!(
                "split ratios must be non-negative, sum to 1, with non-empty train and valid: {split:?}"
            )));
        }
        let tokens = vocab.encode(text)?;
        let n = tokens.len();
        let n_train = (split.train * n as f64).floor() as usize;
        let n_valid = (split.valid * n as f64).floor() as usize;
        Ok(Self {
            vocab,
            train: tokens[..n_train].to_vec(),
            valid: tokens[n_train..n_train + n_valid].to_vec(),
            test: tokens[n_train + n_valid..].to_vec(),
        })
    }

    pub fn load(path: &Path, split: SplitRatios, max_vocab: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, split, max_vocab)
    }
}

/// A training window: `inputs[t][b]` predicts `targets[t][b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Window {
    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cuts `tokens` into `batch` contiguous streams (dropping the remainder)
/// and slices them into windows of at most `seq_len` steps. Hidden state is
/// meant to carry from one window to the next.
pub fn batchify(tokens: &[usize], batch: usize, seq_len: usize) -> Result<Vec<Window>> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::config("batch and seq_len must be positive"));
    }
    let per_stream = tokens.len() / batch;
    if per_stream < 2 {
        return Err(Error::Input(format!(
            "{} tokens cannot fill {batch} streams",
            tokens.len()
        )));
    }
    let stream = |b: usize| &tokens[b * per_stream..(b + 1) * per_stream];
    let mut windows = Vec::new();
    let mut start = 0;
    while start + 1 < per_stream {
        let len = seq_len.min(per_stream - 1 - start);
        let mut inputs = Vec::with_capacity(len);
        let mut targets = Vec::with_capacity(len);
        for t in 0..len {
            inputs.push((0..batch).map(|b| stream(b)[start + t]).collect());
            targets.push((0..batch).map(|b| stream(b)[start + t + 1]).collect());
        }
        windows.push(Window { inputs, targets });
        start += len;
    }
    Ok(windows)
}
