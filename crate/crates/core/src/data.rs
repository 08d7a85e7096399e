//! Corpus loading, tokenisation and fixed-length batching.

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// End-of-document marker appended after every document in byte mode.
pub const EOD_TOKEN: usize = 256;
/// 256 byte values plus the end-of-document marker.
pub const BYTE_VOCAB_SIZE: usize = 257;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    /// Every byte is a token.
    Bytes,
    /// Whitespace-separated words looked up in a fixed vocabulary.
    Words {
        vocab: BTreeMap<String, usize>,
        inverse: Vec<String>,
        unk: usize,
        eod: Option<usize>,
    },
}

impl Tokenizer {
    /// Loads a JSON object mapping token strings to ids. It must contain
    /// `<unk>`; `<eod>` is used as the document separator when present.
    pub fn from_vocab_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let vocab: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: BTreeMap<String, usize>) -> Result<Self> {
        let n = vocab.len();
        let mut inverse = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = inverse
                .get_mut(id)
                .ok_or_else(|| Error::Input(format!("vocab id {id} for `{tok}` is not dense in 0..{n}")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Input(format!("vocab id {id} assigned twice")));
            }
        }
        let unk = *vocab
            .get("<unk>")
            .ok_or_else(|| Error::Input("vocab file must define `<unk>`".into()))?;
        let eod = vocab.get("<eod>").copied();
        Ok(Tokenizer::Words {
            inverse: inverse.into_iter().map(Option::unwrap).collect(),
            vocab,
            unk,
            eod,
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => BYTE_VOCAB_SIZE,
            Tokenizer::Words { inverse, .. } => inverse.len(),
        }
    }

    fn eod(&self) -> Option<usize> {
        match self {
            Tokenizer::Bytes => Some(EOD_TOKEN),
            Tokenizer::Words { eod, .. } => *eod,
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Bytes => Ok(bytes.iter().map(|&b| usize::from(b)).collect()),
            Tokenizer::Words { vocab, unk, .. } => {
                let text =
                    std::str::from_utf8(bytes).map_err(|e| Error::Input(format!("word mode needs UTF-8 text: {e}")))?;
                Ok(text
                    .split_whitespace()
                    .map(|w| vocab.get(w).copied().unwrap_or(*unk))
                    .collect())
            }
        }
    }

    /// Inverse of [`Tokenizer::encode`]; the document marker decodes to nothing.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        match self {
            Tokenizer::Bytes => ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect(),
            Tokenizer::Words { inverse, eod, .. } => ids
                .iter()
                .filter(|&&i| Some(i) != *eod)
                .filter_map(|&i| inverse.get(i).map(String::as_str))
                .collect::<Vec<_>>()
                .join(" ")
                .into_bytes(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Bytes,
    Words {
        vocab_path: PathBuf,
    },
}

impl TokenizerMode {
    pub fn build(&self) -> Result<Tokenizer> {
        match self {
            TokenizerMode::Bytes => Ok(Tokenizer::Bytes),
            TokenizerMode::Words { vocab_path } => Tokenizer::from_vocab_file(vocab_path),
        }
    }
}

/// Tokenised corpus split into training and validation streams.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub train_docs: usize,
    pub validation_docs: usize,
}

/// Splits raw text into documents at blank lines.
fn split_documents(bytes: &[u8]) -> Vec<&[u8]> {
    let mut docs = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'\n' && bytes[i + 1] == b'\n' {
            docs.push(&bytes[start..i]);
            while i < bytes.len() && bytes[i] == b'\n' {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    docs.push(&bytes[start..]);
    docs.into_iter().filter(|d| !d.is_empty()).collect()
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Loads text files (or directories of them, walked in sorted order).
///
/// Documents are separated by blank lines. The split is at document
/// granularity: a seeded shuffle picks `val_fraction` of the documents for
/// validation, and both splits keep their original document order.
pub fn load_corpus(paths: &[PathBuf], tokenizer: Tokenizer, val_fraction: f64, seed: u64) -> Result<Corpus> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    let mut raw = Vec::new();
    for f in &files {
        raw.push(std::fs::read(f)?);
    }
    let docs: Vec<&[u8]> = raw.iter().flat_map(|b| split_documents(b)).collect();
    corpus_from_documents(&docs, tokenizer, val_fraction, seed)
}

pub fn corpus_from_documents(docs: &[&[u8]], tokenizer: Tokenizer, val_fraction: f64, seed: u64) -> Result<Corpus> {
    if docs.is_empty() || docs.iter().all(|d| d.is_empty()) {
        return Err(Error::Input("corpus is empty".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} not in [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng::stream(seed, "data-split"));
    let mut n_val = (val_fraction * docs.len() as f64).round() as usize;
    if val_fraction > 0.0 && docs.len() >= 2 {
        n_val = n_val.clamp(1, docs.len() - 1);
    }
    let mut is_val = vec![false; docs.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (doc, &val) in docs.iter().zip(&is_val) {
        let dst = if val { &mut validation } else { &mut train };
        dst.extend(tokenizer.encode(doc)?);
        if let Some(eod) = tokenizer.eod() {
            dst.push(eod);
        }
    }
    Ok(Corpus {
        tokenizer,
        train,
        validation,
        train_docs: docs.len() - n_val,
        validation_docs: n_val,
    })
}

/// Inputs with next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: TokenBatch,
    /// `targets[i]` is the token following `tokens.ids[i]` in the stream.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    pub seq_len: usize,
    pub batch_size: usize,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_shuffle() -> bool {
    true
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            seq_len: 128,
            batch_size: 8,
            shuffle: true,
        }
    }
}

/// Non-overlapping fixed-length windows over a token stream.
///
/// Window `w` covers `stream[w*L .. (w+1)*L]` with targets shifted by one,
/// so a stream of `N` tokens yields `(N - 1) / L` windows. Windows are
/// grouped into full batches; a trailing partial batch is dropped so every
/// batch has the exact shape `[batch_size, seq_len]`.
#[derive(Clone, Debug)]
pub struct Batcher {
    stream: Vec<usize>,
    plan: BatchPlan,
    seed: u64,
}

impl Batcher {
    pub fn new(stream: Vec<usize>, plan: BatchPlan, seed: u64) -> Result<Self> {
        if plan.seq_len == 0 || plan.batch_size == 0 {
            return Err(Error::Config("seq_len and batch_size must be >= 1".into()));
        }
        if stream.len() < plan.seq_len + 1 {
            return Err(Error::Input(format!(
                "stream of {} tokens is too short for seq_len {}",
                stream.len(),
                plan.seq_len
            )));
        }
        let b = Batcher { stream, plan, seed };
        if b.batches_per_epoch() == 0 {
            return Err(Error::Input(format!(
                "{} windows cannot fill one batch of {}",
                b.windows(),
                b.plan.batch_size
            )));
        }
        Ok(b)
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn windows(&self) -> usize {
        (self.stream.len() - 1) / self.plan.seq_len
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows() / self.plan.batch_size
    }

    pub fn tokens_per_epoch(&self) -> usize {
        self.batches_per_epoch() * self.plan.batch_size * self.plan.seq_len
    }

    /// Window order for one epoch.
    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows()).collect();
        if self.plan.shuffle {
            let label = format!("data-epoch-{epoch}");
            order.shuffle(&mut rng::stream(self.seed, &label));
        }
        order
    }

    fn make_batch(&self, windows: &[usize]) -> Batch {
        let l = self.plan.seq_len;
        let mut ids = Vec::with_capacity(windows.len() * l);
        let mut targets = Vec::with_capacity(windows.len() * l);
        for &w in windows {
            ids.extend_from_slice(&self.stream[w * l..(w + 1) * l]);
            targets.extend_from_slice(&self.stream[w * l + 1..(w + 1) * l + 1]);
        }
        Batch {
            tokens: TokenBatch {
                batch: windows.len(),
                seq: l,
                ids,
            },
            targets,
        }
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let order = self.order(epoch);
        let bs = self.plan.batch_size;
        (0..self.batches_per_epoch()).map(move |i| self.make_batch(&order[i * bs..(i + 1) * bs]))
    }

    /// Endless batches across consecutive epochs.
    pub fn stream(&self) -> impl Iterator<Item = Batch> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }

    /// Number of optimizer steps covering `epochs` (fractional) epochs; at least one.
    pub fn steps_for_epochs(&self, epochs: f64) -> u64 {
        ((epochs * self.batches_per_epoch() as f64).round() as u64).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mode_encodes_identity() {
        let t = Tokenizer::Bytes;
        assert_eq!(t.encode(b"ab").unwrap(), vec![97, 98]);
        let raw = [0u8, 255, 0xC3, 0x28, b'\n'];
        assert_eq!(t.decode(&t.encode(&raw).unwrap()), raw);
    }

    #[test]
    fn word_mode_uses_unk() {
        let vocab: BTreeMap<String, usize> = [("<unk>", 0), ("hello", 1), ("world", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let t = Tokenizer::from_vocab(vocab).unwrap();
        assert_eq!(t.encode(b"hello  there world").unwrap(), vec![1, 0, 2]);
        assert_eq!(t.decode(&[1, 2]), b"hello world");
        let bad: BTreeMap<String, usize> = [("a".to_string(), 0)].into_iter().collect();
        assert!(Tokenizer::from_vocab(bad).is_err());
    }

    #[test]
    fn documents_split_at_blank_lines() {
        let docs = split_documents(b"one\ntwo\n\nthree\n\n\n\nfour");
        assert_eq!(docs, vec![&b"one\ntwo"[..], b"three", b"four"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            corpus_from_documents(&[], Tokenizer::Bytes, 0.05, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn first_batch_of_counting_stream() {
        let b = Batcher::new(
            (1..=10).collect(),
            BatchPlan {
                seq_len: 4,
                batch_size: 1,
                shuffle: false,
            },
            0,
        )
        .unwrap();
        let first = b.epoch(0).next().unwrap();
        assert_eq!(first.tokens.ids, vec![1, 2, 3, 4]);
        assert_eq!(first.targets, vec![2, 3, 4, 5]);
        assert_eq!(b.windows(), 2);
    }

    #[test]
    fn short_stream_is_rejected() {
        let plan = BatchPlan {
            seq_len: 4,
            batch_size: 1,
            shuffle: false,
        };
        assert!(matches!(Batcher::new(vec![1, 2, 3, 4], plan, 0), Err(Error::Input(_))));
    }
}
