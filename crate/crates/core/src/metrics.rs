//! Memorisation metrics.
//!
//! Verbatim memorisation: a pair is extractable when the greedy
//! continuation of its prefix contains the suffix. Partial memorisation:
//! the fraction of the target's pooled n-grams (multiset, order-invariant)
//! that the continuation reproduces. Transition tracking relates a sample's
//! partial scores to the epoch at which it first becomes verbatim.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExtractionPair, TokenSeq};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Pooled multiset of the contiguous n-grams of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramMultiset {
    counts: HashMap<Vec<u32>, usize>,
    sizes: BTreeSet<usize>,
    total: usize,
}

impl NGramMultiset {
    pub fn from_seq(seq: &[u32], sizes: &BTreeSet<usize>) -> Self {
        assert!(!sizes.is_empty(), "sizes must be non-empty");
        assert!(sizes.iter().all(|&n| n >= 1), "every n must be at least 1");
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut total = 0usize;
        for &n in sizes {
            if seq.len() < n {
                continue;
            }
            for gram in seq.windows(n) {
                *counts.entry(gram.to_vec()).or_insert(0) += 1;
                total += 1;
            }
        }
        NGramMultiset { counts, sizes: sizes.clone(), total }
    }

    /// Total gram count with multiplicity: sum over n of max(0, len - n + 1).
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, gram: &[u32]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn sizes(&self) -> &BTreeSet<usize> {
        &self.sizes
    }

    /// Multiset intersection size: sum over grams of min(count_a, count_b).
    pub fn intersection_size(&self, other: &NGramMultiset) -> usize {
        // iterate the smaller map; an integer sum is order-independent
        let (small, large) =
            if self.counts.len() <= other.counts.len() { (self, other) } else { (other, self) };
        small
            .counts
            .iter()
            .map(|(gram, &c)| c.min(large.count(gram)))
            .sum()
    }
}

/// Which multiset normalises the match fraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalisation {
    /// Intersection over the target's gram count (default): 1.0 means the
    /// continuation reproduced every target gram.
    #[default]
    Target,
    Generated,
    Union,
}

/// Pool grams across sizes into one proportion, or average per-size fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Pooled,
    PerSizeMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub normalisation: Normalisation,
    pub pooling: Pooling,
}

/// Result of a partial-memorisation comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore {
    pub fraction: f64,
    /// True when the target yielded no n-grams, making the score 0 by fiat.
    pub degenerate_target: bool,
}

/// Order-invariant n-gram match fraction with the default config
/// (target-normalised, pooled across sizes).
pub fn match_fraction(generated: &[u32], target: &[u32], sizes: &BTreeSet<usize>) -> f64 {
    match_fraction_with(generated, target, sizes, &MatchConfig::default()).fraction
}

pub fn match_fraction_with(
    generated: &[u32],
    target: &[u32],
    sizes: &BTreeSet<usize>,
    cfg: &MatchConfig,
) -> MatchScore {
    match cfg.pooling {
        Pooling::Pooled => pooled_fraction(generated, target, sizes, cfg.normalisation),
        Pooling::PerSizeMean => {
            let mut fractions = Vec::new();
            let mut all_degenerate = true;
            for &n in sizes {
                let single: BTreeSet<usize> = [n].into_iter().collect();
                let score = pooled_fraction(generated, target, &single, cfg.normalisation);
                if !score.degenerate_target {
                    all_degenerate = false;
                    fractions.push(score.fraction);
                }
            }
            if fractions.is_empty() {
                MatchScore { fraction: 0.0, degenerate_target: all_degenerate }
            } else {
                let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
                MatchScore { fraction: mean, degenerate_target: false }
            }
        }
    }
}

fn pooled_fraction(
    generated: &[u32],
    target: &[u32],
    sizes: &BTreeSet<usize>,
    norm: Normalisation,
) -> MatchScore {
    let target_set = NGramMultiset::from_seq(target, sizes);
    if target_set.is_empty() {
        return MatchScore { fraction: 0.0, degenerate_target: true };
    }
    let generated_set = NGramMultiset::from_seq(generated, sizes);
    let inter = target_set.intersection_size(&generated_set);
    let denom = match norm {
        Normalisation::Target => target_set.total(),
        Normalisation::Generated => generated_set.total(),
        Normalisation::Union => target_set.total() + generated_set.total() - inter,
    };
    if denom == 0 {
        return MatchScore { fraction: 0.0, degenerate_target: false };
    }
    MatchScore { fraction: inter as f64 / denom as f64, degenerate_target: false }
}

/// True if `needle` occurs contiguously within `haystack`.
pub fn contains_subsequence(haystack: &[u32], needle: &[u32]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Greedy continuation of a pair's prefix, with generation budget
/// suffix_len + slack.
pub fn pair_continuation(params: &ModelParams, pair: &ExtractionPair, slack: usize) -> TokenSeq {
    params.greedy_decode(&pair.prefix, pair.suffix_len() + slack)
}

/// Verbatim extraction test: does the greedy continuation of the prefix
/// contain the suffix contiguously? With slack 0 this is equality of the
/// suffix-length continuation.
pub fn is_k_extractable(params: &ModelParams, pair: &ExtractionPair, slack: usize) -> bool {
    let continuation = pair_continuation(params, pair, slack);
    contains_subsequence(&continuation, &pair.suffix)
}

/// Verbatim and partial score of one pair from a single decode.
#[derive(Clone, Debug)]
pub struct PairScore {
    pub extractable: bool,
    pub fraction: f64,
    pub degenerate_target: bool,
}

pub fn score_pair(
    params: &ModelParams,
    pair: &ExtractionPair,
    sizes: &BTreeSet<usize>,
    slack: usize,
) -> PairScore {
    let continuation = pair_continuation(params, pair, slack);
    let extractable = contains_subsequence(&continuation, &pair.suffix);
    let score = match_fraction_with(&continuation, &pair.suffix, sizes, &MatchConfig::default());
    PairScore { extractable, fraction: score.fraction, degenerate_target: score.degenerate_target }
}

/// Percentage of pairs whose suffix is extractable.
pub fn mem_percent(params: &ModelParams, pairs: &[ExtractionPair], slack: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mem_percent over an empty pair set".into()));
    }
    let hits = pairs.iter().filter(|p| is_k_extractable(params, p, slack)).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Extraction percentage reported separately per prefix length.
pub fn mem_percent_per_k(
    params: &ModelParams,
    pairs: &[ExtractionPair],
    slack: usize,
) -> Result<BTreeMap<usize, f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mem_percent over an empty pair set".into()));
    }
    let mut by_k: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for pair in pairs {
        let entry = by_k.entry(pair.k()).or_insert((0, 0));
        entry.1 += 1;
        if is_k_extractable(params, pair, slack) {
            entry.0 += 1;
        }
    }
    Ok(by_k
        .into_iter()
        .map(|(k, (hits, total))| (k, 100.0 * hits as f64 / total as f64))
        .collect())
}

/// Mean partial-memorisation score over pairs, as a percentage.
pub fn ngram_mem_percent(
    params: &ModelParams,
    pairs: &[ExtractionPair],
    sizes: &BTreeSet<usize>,
    slack: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("ngram_mem_percent over an empty pair set".into()));
    }
    let sum: f64 = pairs.iter().map(|p| score_pair(params, p, sizes, slack).fraction).sum();
    Ok(100.0 * sum / pairs.len() as f64)
}

/// Per-sample record of partial scores and verbatim flags across epochs
/// (epoch 1 is index 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScoreHistory {
    pub sample_id: usize,
    pub scores: Vec<f64>,
    pub verbatim: Vec<bool>,
    /// First epoch (1-based) at which the sample was verbatim, if any.
    pub memorisation_epoch: Option<usize>,
}

impl SampleScoreHistory {
    /// Builds a history, deriving `memorisation_epoch` from the flags.
    pub fn from_flags(sample_id: usize, scores: Vec<f64>, verbatim: Vec<bool>) -> Self {
        assert_eq!(scores.len(), verbatim.len(), "scores and flags must cover the same epochs");
        let memorisation_epoch = verbatim.iter().position(|&v| v).map(|i| i + 1);
        SampleScoreHistory { sample_id, scores, verbatim, memorisation_epoch }
    }

    pub fn epochs(&self) -> usize {
        self.scores.len()
    }
}

/// Median/range of pre-transition scores for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionPoint {
    /// Epoch t whose scores are summarised; the samples transition at t+1.
    pub epoch: usize,
    pub count: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Output of [`track_transitions`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    /// One point per epoch t that has at least one sample memorised at t+1.
    pub transitions: Vec<TransitionPoint>,
    /// Mean score of never-memorised samples per epoch (1-based, index 0 =
    /// epoch 1); None when every sample eventually memorises.
    pub baseline: Vec<Option<f64>>,
}

/// Summarises the partial scores that precede verbatim transitions.
///
/// All histories must cover the same epoch range.
pub fn track_transitions(histories: &[SampleScoreHistory]) -> TransitionSummary {
    let epochs = histories.first().map_or(0, |h| h.epochs());
    assert!(
        histories.iter().all(|h| h.epochs() == epochs),
        "histories cover different epoch ranges"
    );

    let mut transitions = Vec::new();
    for t in 1..epochs {
        let scores: Vec<f64> = histories
            .iter()
            .filter(|h| h.memorisation_epoch == Some(t + 1))
            .map(|h| h.scores[t - 1])
            .collect();
        if scores.is_empty() {
            continue;
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        transitions.push(TransitionPoint {
            epoch: t,
            count: scores.len(),
            median: median(scores),
            min,
            max,
        });
    }

    let mut baseline = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let never: Vec<f64> = histories
            .iter()
            .filter(|h| h.memorisation_epoch.is_none())
            .map(|h| h.scores[e])
            .collect();
        baseline.push(if never.is_empty() {
            None
        } else {
            Some(never.iter().sum::<f64>() / never.len() as f64)
        });
    }

    TransitionSummary { transitions, baseline }
}

/// Median via quickselect; even counts average the two middle elements.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of empty set");
    let mid = values.len() / 2;
    let (_, upper, _) =
        values.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("NaN score"));
    let upper = *upper;
    if values.len() % 2 == 1 {
        upper
    } else {
        let (_, lower, _) =
            values.select_nth_unstable_by(mid - 1, |a, b| a.partial_cmp(b).expect("NaN score"));
        (*lower + upper) / 2.0
    }
}

/// Everything measured after one fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Extraction percentage keyed by prefix length.
    pub mem_percent: BTreeMap<usize, f64>,
    pub ngram_mem_percent: f64,
    pub val_perplexity: f64,
    pub eval_accuracy: f64,
}

/// CSV epoch table: one row per (epoch, k).
pub fn write_epoch_csv(metrics: &[EpochMetrics], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "epoch,k,mem_percent,ngram_mem_percent,val_ppl,eval_acc")?;
    for m in metrics {
        for (k, mem) in &m.mem_percent {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.epoch, k, mem, m.ngram_mem_percent, m.val_perplexity, m.eval_accuracy
            )?;
        }
    }
    Ok(())
}

/// JSONL history dump: sample_id, scores[], verbatim[], memorisation_epoch.
pub fn write_histories_jsonl(
    histories: &[SampleScoreHistory],
    out: &mut dyn Write,
) -> std::io::Result<()> {
    for h in histories {
        serde_json::to_writer(&mut *out, h)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
