//! Corpus ingestion, tokenisation and extraction-pair sampling.
//!
//! Corpora are JSONL files with one `{"text": ...}` object per line. The
//! reference tokeniser is byte-level (vocab 256, lossless round-trip); the
//! `Tokenizer` trait lets alternates be wired in. From each long-enough
//! sample one prefix/suffix pair is drawn at a seeded uniform offset, and
//! duplicate prefixes are removed keep-first so reruns are bit-identical.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};

/// Fine-tuning uses at most this many samples of a corpus.
pub const DEFAULT_MAX_SAMPLES: usize = 5000;

/// An ordered sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &[u32]) -> TokenSeq {
        let mut out = self.0.clone();
        out.extend_from_slice(other);
        TokenSeq(out)
    }
}

impl Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }
}

impl From<&[u32]> for TokenSeq {
    fn from(tokens: &[u32]) -> Self {
        TokenSeq(tokens.to_vec())
    }
}

/// Maps text to token ids and back.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn tokenize(&self, text: &str) -> TokenSeq;
    fn detokenize(&self, tokens: &TokenSeq) -> Result<String>;
}

/// Byte-level tokeniser: one token per UTF-8 byte, vocabulary 256.
///
/// Total and lossless: `detokenize(tokenize(s)) == s` for every string.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        256
    }

    fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq(text.bytes().map(u32::from).collect())
    }

    fn detokenize(&self, tokens: &TokenSeq) -> Result<String> {
        let bytes: Vec<u8> = tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| Error::Detokenize(format!("token id {t} is not a byte")))
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Detokenize(e.to_string()))
    }
}

/// Which role a corpus plays in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
        }
    }
}

/// A tokenised corpus. Sample ids are the (stable) vector indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub samples: Vec<TokenSeq>,
    /// Optional source-file ids, parallel to `samples`.
    pub source_ids: Vec<Option<String>>,
    /// Original line count when the file exceeded the sample cap.
    pub truncated_from: Option<usize>,
}

impl Corpus {
    /// Builds a corpus directly from token sequences (synthetic data, tests).
    pub fn from_token_seqs(name: &str, split: Split, samples: Vec<TokenSeq>) -> Self {
        let source_ids = vec![None; samples.len()];
        Corpus { name: name.to_string(), split, samples, source_ids, truncated_from: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest token id present, or None for an empty corpus.
    pub fn max_token_id(&self) -> Option<u32> {
        self.samples.iter().flat_map(|s| s.iter().copied()).max()
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    text: String,
    #[serde(default)]
    id: Option<String>,
}

/// Loads a JSONL corpus, truncating to [`DEFAULT_MAX_SAMPLES`].
pub fn load_corpus(path: &Path, split: Split, tokenizer: &dyn Tokenizer) -> Result<Corpus> {
    load_corpus_with(path, split, tokenizer, DEFAULT_MAX_SAMPLES)
}

/// Loads a JSONL corpus with an explicit sample cap.
///
/// Each line must be a JSON object with a string field `text` (an optional
/// string field `id` is kept; other fields are ignored). Text containing
/// NUL is rejected: byte 0 is the reserved padding id.
pub fn load_corpus_with(
    path: &Path,
    split: Split,
    tokenizer: &dyn Tokenizer,
    max_samples: usize,
) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let reader = std::io::BufReader::new(file);

    let mut samples = Vec::new();
    let mut source_ids = Vec::new();
    let mut total_lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        total_lines += 1;
        if samples.len() >= max_samples {
            continue; // keep counting lines for the truncation record
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.text.contains('\0') {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "text contains NUL, which is the reserved padding id".to_string(),
            });
        }
        samples.push(tokenizer.tokenize(&parsed.text));
        source_ids.push(parsed.id);
    }

    let truncated_from = (total_lines > samples.len()).then_some(total_lines);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Ok(Corpus { name, split, samples, source_ids, truncated_from })
}

/// A contiguous prefix/suffix window cut from one training sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPair {
    pub sample_id: usize,
    pub prefix: TokenSeq,
    pub suffix: TokenSeq,
}

impl ExtractionPair {
    /// Prefix length in tokens.
    pub fn k(&self) -> usize {
        self.prefix.len()
    }

    /// Suffix length in tokens.
    pub fn suffix_len(&self) -> usize {
        self.suffix.len()
    }
}

/// Result of [`sample_pairs`]: one pair per long-enough sample.
#[derive(Clone, Debug)]
pub struct SampledPairs {
    pub pairs: Vec<ExtractionPair>,
    /// Samples shorter than k + suffix_len, skipped rather than padded.
    pub skipped_short: usize,
}

/// Draws one prefix/suffix pair per sample at a seeded uniform offset.
///
/// Pure function of (corpus, k, suffix_len, seed): the offset for sample i
/// comes from its own stream seeded by mix(seed, i, k, suffix_len), so
/// skipped samples never shift later draws. Output order follows sample id.
pub fn sample_pairs(corpus: &Corpus, k: usize, suffix_len: usize, seed: u64) -> SampledPairs {
    assert!(k >= 1 && suffix_len >= 1, "prefix and suffix lengths must be at least 1");
    let window = k + suffix_len;
    let mut pairs = Vec::new();
    let mut skipped_short = 0usize;
    for (sample_id, sample) in corpus.samples.iter().enumerate() {
        if sample.len() < window {
            skipped_short += 1;
            continue;
        }
        let mut rng = Rng::from_seed(mix(&[seed, sample_id as u64, k as u64, suffix_len as u64]));
        let offset = rng.below(sample.len() - window + 1);
        pairs.push(ExtractionPair {
            sample_id,
            prefix: TokenSeq::from(&sample[offset..offset + k]),
            suffix: TokenSeq::from(&sample[offset + k..offset + window]),
        });
    }
    SampledPairs { pairs, skipped_short }
}

/// Result of [`filter_collisions`].
#[derive(Clone, Debug)]
pub struct FilteredPairs {
    pub pairs: Vec<ExtractionPair>,
    /// Pairs dropped because an earlier pair had the same prefix.
    pub dropped: usize,
}

/// Removes pairs whose prefix already occurred, keeping the first.
pub fn filter_collisions(pairs: Vec<ExtractionPair>) -> FilteredPairs {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(pairs.len());
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    for pair in pairs {
        if seen.insert(pair.prefix.0.clone()) {
            kept.push(pair);
        } else {
            dropped += 1;
        }
    }
    FilteredPairs { pairs: kept, dropped }
}

/// Writes pairs as debug JSONL: sample_id, k, prefix_tokens, suffix_tokens.
pub fn dump_pairs_jsonl(pairs: &[ExtractionPair], out: &mut dyn Write) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        sample_id: usize,
        k: usize,
        prefix_tokens: &'a [u32],
        suffix_tokens: &'a [u32],
    }
    for pair in pairs {
        let row = Row {
            sample_id: pair.sample_id,
            k: pair.k(),
            prefix_tokens: &pair.prefix,
            suffix_tokens: &pair.suffix,
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
