//! Fine-tuning loop, per-epoch evaluation and stopping-criterion selection.
//!
//! `fit` runs up to `max_epochs` single-sample SGD passes in a seeded
//! shuffled order, evaluates memorisation and validation metrics after each
//! epoch, tracks per-sample score histories, and selects a checkpoint under
//! each stopping criterion. Identical inputs give bit-identical reports;
//! wall-clock timings are kept out of the serialised report.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{filter_collisions, sample_pairs, Corpus, ExtractionPair, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss_indexed, GramIndex, GramScope, LossConfig, LossMode, RefCache};
use crate::metrics::{
    score_pair, EpochMetrics, PairScore, SampleScoreHistory,
};
use crate::model::{argmax, log_softmax, FreezeMask, ModelConfig, ModelParams, ReferenceSnapshot};
use crate::rng::{mix, Rng};

/// Default partial-memorisation threshold for early stopping.
pub const DEFAULT_NGRAM_THRESHOLD: f64 = 20.0;

/// Rule for choosing the reported checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum StopCriterion {
    /// Lowest validation perplexity, earliest epoch on ties.
    BestVal,
    /// Highest evaluation accuracy, earliest epoch on ties.
    BestAcc,
    /// Last epoch whose n-gram memorisation stays at or below the
    /// threshold; epoch 1 when none qualifies.
    NgramThreshold { threshold: f64 },
}

impl StopCriterion {
    pub fn key(&self) -> &'static str {
        match self {
            StopCriterion::BestVal => "best_val",
            StopCriterion::BestAcc => "best_acc",
            StopCriterion::NgramThreshold { .. } => "ngram_threshold",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture and the model-initialisation seed.
    pub model: ModelConfig,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub freeze: FreezeMask,
    /// Prefix lengths tested for extraction.
    pub k_values: Vec<usize>,
    pub suffix_len: usize,
    /// Gram sizes for the partial-memorisation metric.
    pub ngram_sizes: BTreeSet<usize>,
    /// Extra generation budget beyond the suffix length.
    pub slack: usize,
    /// Per-sample gradient-norm cap; None disables clipping. The loss sums
    /// over positions, so without a cap long samples take outsized steps.
    pub clip_norm: Option<f64>,
    pub stop: StopCriterion,
    /// Stop training once the threshold criterion trips (as opposed to
    /// selecting post hoc from a full run).
    pub halt_on_threshold: bool,
    pub shuffle_seed: u64,
    pub pair_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            max_epochs: 8,
            learning_rate: 0.1,
            loss: LossConfig::default(),
            freeze: FreezeMask::all_trainable(),
            k_values: vec![12, 16, 20],
            suffix_len: 20,
            ngram_sizes: [4, 5, 6].into_iter().collect(),
            slack: 0,
            clip_norm: Some(1.0),
            stop: StopCriterion::NgramThreshold { threshold: DEFAULT_NGRAM_THRESHOLD },
            halt_on_threshold: true,
            shuffle_seed: 0,
            pair_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite".into()));
        }
        if self.k_values.is_empty() || self.k_values.iter().any(|&k| k < 1) {
            return Err(Error::InvalidConfig("k_values must be non-empty, each >= 1".into()));
        }
        if self.suffix_len < 1 {
            return Err(Error::InvalidConfig("suffix_len must be >= 1".into()));
        }
        if self.ngram_sizes.is_empty() || self.ngram_sizes.iter().any(|&n| n < 1) {
            return Err(Error::InvalidConfig("ngram_sizes must be non-empty, each >= 1".into()));
        }
        if let StopCriterion::NgramThreshold { threshold } = self.stop {
            if !(0.0..=100.0).contains(&threshold) {
                return Err(Error::InvalidConfig("threshold must be in [0, 100]".into()));
            }
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidConfig("clip_norm must be > 0".into()));
            }
        }
        if self.loss.mode == LossMode::Goldfish && self.loss.goldfish_period.is_none() {
            return Err(Error::InvalidConfig(
                "goldfish mode requires an explicit goldfish_period".into(),
            ));
        }
        Ok(())
    }

    /// Corpus gram index when the penalty scope needs one.
    fn gram_index(&self, train: &Corpus) -> Option<GramIndex> {
        match (self.loss.mode, self.loss.scope) {
            (LossMode::NgramReg, GramScope::CorpusDuplicated { .. }) => Some(GramIndex::build(
                train.samples.iter().map(|s| s.as_slice()),
                &self.loss.sizes,
            )),
            _ => None,
        }
    }

    /// Threshold used for the recorded ngram_threshold selection: the
    /// configured one when that criterion is active, the default otherwise.
    fn recorded_threshold(&self) -> f64 {
        match self.stop {
            StopCriterion::NgramThreshold { threshold } => threshold,
            _ => DEFAULT_NGRAM_THRESHOLD,
        }
    }
}

/// Collision-filtered extraction pairs grouped by prefix length.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub by_k: BTreeMap<usize, Vec<ExtractionPair>>,
    pub skipped_short: usize,
    pub dropped_collisions: usize,
    /// Prefix length whose pairs feed the per-sample histories (the
    /// smallest configured k).
    pub primary_k: usize,
}

impl PairSet {
    pub fn total_pairs(&self) -> usize {
        self.by_k.values().map(|v| v.len()).sum()
    }
}

/// Samples and collision-filters one pair set per configured prefix length.
pub fn build_pair_set(corpus: &Corpus, cfg: &TrainConfig) -> Result<PairSet> {
    let mut by_k = BTreeMap::new();
    let mut skipped_short = 0usize;
    let mut dropped = 0usize;
    let mut ks: Vec<usize> = cfg.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        let sampled = sample_pairs(corpus, k, cfg.suffix_len, cfg.pair_seed);
        skipped_short += sampled.skipped_short;
        let filtered = filter_collisions(sampled.pairs);
        dropped += filtered.dropped;
        if !filtered.pairs.is_empty() {
            by_k.insert(k, filtered.pairs);
        }
    }
    let primary_k = *by_k
        .keys()
        .next()
        .ok_or_else(|| Error::EmptyInput("no extractable pairs in the corpus".into()))?;
    Ok(PairSet { by_k, skipped_short, dropped_collisions: dropped, primary_k })
}

/// One SGD step per sample in a seeded shuffled order; the shuffle stream
/// is derived from (shuffle_seed, epoch) so epochs differ but reruns do not.
/// Samples shorter than two tokens are skipped.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    mut params: ModelParams,
    corpus: &Corpus,
    reference: &ReferenceSnapshot,
    cfg: &TrainConfig,
    epoch: usize,
    ref_cache: &mut RefCache,
    gram_index: Option<&GramIndex>,
    trace: &mut Vec<LossTraceRow>,
    step_counter: &mut usize,
) -> Result<ModelParams> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = Rng::from_seed(mix(&[cfg.shuffle_seed, epoch as u64]));
    rng.shuffle(&mut order);

    for sample_id in order {
        let sample = &corpus.samples[sample_id];
        if sample.len() < 2 {
            continue;
        }
        let mut loss = total_loss_indexed(
            &params,
            reference,
            sample,
            sample_id,
            &cfg.loss,
            cfg.shuffle_seed,
            ref_cache,
            gram_index,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, sample_id });
        }
        trace.push(LossTraceRow {
            step: *step_counter,
            sample_id,
            lm_term: loss.lm_term,
            reg_term: loss.reg_term,
            total: loss.total,
            active_hinges: loss.active_hinges,
        });
        *step_counter += 1;
        if let Some(max_norm) = cfg.clip_norm {
            loss.gradient.clip_norm(max_norm);
        }
        params = params.apply_update(&loss.gradient, cfg.learning_rate, &cfg.freeze)?;
    }
    Ok(params)
}

/// Per-epoch metrics: validation perplexity, final-token prediction
/// accuracy (the desk-scale proxy for task evaluation), extraction
/// percentage per k, and the pooled partial-memorisation score.
pub fn evaluate(
    params: &ModelParams,
    val_corpus: &Corpus,
    pairs: &PairSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    Ok(evaluate_epoch(params, val_corpus, pairs, cfg, epoch)?.0)
}

fn evaluate_epoch(
    params: &ModelParams,
    val_corpus: &Corpus,
    pairs: &PairSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(EpochMetrics, Vec<(usize, PairScore)>)> {
    if val_corpus.is_empty() {
        return Err(Error::EmptyInput("validation corpus is empty".into()));
    }
    if pairs.total_pairs() == 0 {
        return Err(Error::EmptyInput("pair set is empty".into()));
    }

    // validation perplexity: exp of the mean per-token NLL, windowed
    let mut nll = 0.0;
    let mut token_count = 0usize;
    // final-token prediction accuracy
    let mut correct = 0usize;
    let mut eval_total = 0usize;
    for sample in &val_corpus.samples {
        if sample.len() < 2 {
            continue;
        }
        for i in 1..sample.len() {
            let logits = params.next_token_logits(&sample[..i]);
            nll -= log_softmax(&logits)[sample[i] as usize];
            token_count += 1;
        }
        let final_logits = params.next_token_logits(&sample[..sample.len() - 1]);
        if argmax(&final_logits) as u32 == sample[sample.len() - 1] {
            correct += 1;
        }
        eval_total += 1;
    }
    if token_count == 0 {
        return Err(Error::EmptyInput("validation corpus has no predictable tokens".into()));
    }
    let val_perplexity = (nll / token_count as f64).exp();
    let eval_accuracy = correct as f64 / eval_total as f64;

    let mut mem_percent = BTreeMap::new();
    let mut fraction_sum = 0.0;
    let mut pair_count = 0usize;
    let mut primary_scores = Vec::new();
    for (&k, pair_list) in &pairs.by_k {
        let mut hits = 0usize;
        for pair in pair_list {
            let score = score_pair(params, pair, &cfg.ngram_sizes, cfg.slack);
            if score.extractable {
                hits += 1;
            }
            fraction_sum += score.fraction;
            pair_count += 1;
            if k == pairs.primary_k {
                primary_scores.push((pair.sample_id, score.clone()));
            }
        }
        mem_percent.insert(k, 100.0 * hits as f64 / pair_list.len() as f64);
    }
    let ngram_mem_percent = 100.0 * fraction_sum / pair_count as f64;

    Ok((
        EpochMetrics { epoch, mem_percent, ngram_mem_percent, val_perplexity, eval_accuracy },
        primary_scores,
    ))
}

/// Deterministic checkpoint choice on a recorded history.
pub fn select_epoch(history: &[EpochMetrics], criterion: &StopCriterion) -> usize {
    assert!(!history.is_empty(), "select_epoch on an empty history");
    match criterion {
        StopCriterion::BestVal => {
            let mut best = &history[0];
            for m in &history[1..] {
                if m.val_perplexity < best.val_perplexity {
                    best = m;
                }
            }
            best.epoch
        }
        StopCriterion::BestAcc => {
            let mut best = &history[0];
            for m in &history[1..] {
                if m.eval_accuracy > best.eval_accuracy {
                    best = m;
                }
            }
            best.epoch
        }
        StopCriterion::NgramThreshold { threshold } => history
            .iter()
            .filter(|m| m.ngram_mem_percent <= *threshold)
            .map(|m| m.epoch)
            .next_back()
            .unwrap_or(history[0].epoch),
    }
}

/// One loss-trace record per SGD step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub step: usize,
    pub sample_id: usize,
    pub lm_term: f64,
    pub reg_term: f64,
    pub total: f64,
    pub active_hinges: usize,
}

/// Loss trace CSV: step, sample_id, lm_term, reg_term, total, active_hinge_count.
pub fn write_loss_trace_csv(rows: &[LossTraceRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "step,sample_id,lm_term,reg_term,total,active_hinge_count")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.sample_id, r.lm_term, r.reg_term, r.total, r.active_hinges
        )?;
    }
    Ok(())
}

/// Identifying facts about a corpus, echoed into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub name: String,
    pub split: Split,
    pub samples: usize,
    pub truncated_from: Option<usize>,
}

impl From<&Corpus> for CorpusSummary {
    fn from(c: &Corpus) -> Self {
        CorpusSummary {
            name: c.name.clone(),
            split: c.split,
            samples: c.len(),
            truncated_from: c.truncated_from,
        }
    }
}

/// Everything recorded about one fine-tuning run. Serialises to JSON
/// byte-identically for identical inputs; wall-clock timings are excluded
/// and live in a sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub train_corpus: CorpusSummary,
    pub val_corpus: CorpusSummary,
    pub pairs_total: usize,
    pub pairs_skipped_short: usize,
    pub pairs_dropped_collisions: usize,
    pub primary_k: usize,
    pub epochs: Vec<EpochMetrics>,
    pub histories: Vec<SampleScoreHistory>,
    /// Selected epoch per criterion key (best_val, best_acc, ngram_threshold).
    pub selected: BTreeMap<String, usize>,
    /// Epoch at which the threshold halt tripped, when it did.
    pub halted_at: Option<usize>,
    /// Seconds per completed epoch; not serialised.
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<RunReport, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Timings sidecar CSV: epoch, seconds.
pub fn write_timings_csv(report: &RunReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "epoch,seconds")?;
    for (i, secs) in report.wall_clock_secs.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, secs)?;
    }
    Ok(())
}

/// A completed run: the report plus the per-epoch checkpoints and the
/// step-level loss trace.
#[derive(Debug)]
pub struct FitRun {
    pub report: RunReport,
    /// Parameters after each completed epoch (index 0 = after epoch 1).
    pub epoch_params: Vec<ModelParams>,
    pub loss_trace: Vec<LossTraceRow>,
}

impl FitRun {
    /// Checkpoint at the epoch selected by the given criterion key.
    pub fn params_at_selected(&self, criterion_key: &str) -> Option<&ModelParams> {
        let epoch = *self.report.selected.get(criterion_key)?;
        self.epoch_params.get(epoch - 1)
    }
}

/// Runs the fine-tuning protocol end to end from a fresh seeded
/// initialisation.
pub fn fit(train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<FitRun> {
    cfg.validate()?;
    fit_from(ModelParams::init(&cfg.model)?, train, val, cfg)
}

/// Runs the fine-tuning protocol starting from existing parameters, e.g. a
/// pretrained checkpoint. The reference snapshot for the gram penalty is
/// taken from `initial` — the state before fine-tuning begins.
pub fn fit_from(
    initial: ModelParams,
    train: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
) -> Result<FitRun> {
    cfg.validate()?;
    // architecture must match; the checkpoint's own init seed is irrelevant
    let got = initial.config();
    let want = &cfg.model;
    if (got.vocab_size, got.context_window, got.embed_dim, got.hidden_dim)
        != (want.vocab_size, want.context_window, want.embed_dim, want.hidden_dim)
    {
        return Err(Error::InvalidConfig(
            "initial parameters do not match the configured model architecture".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation corpus is empty".into()));
    }
    for corpus in [train, val] {
        if let Some(max_id) = corpus.max_token_id() {
            if max_id as usize >= cfg.model.vocab_size {
                return Err(Error::VocabExceeded { max_id, vocab_size: cfg.model.vocab_size });
            }
        }
    }

    let pairs = build_pair_set(train, cfg)?;
    let mut params = initial;
    let reference = ReferenceSnapshot::capture(&params);
    let mut ref_cache = RefCache::new();
    let gram_index = cfg.gram_index(train);

    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut epoch_params: Vec<ModelParams> = Vec::new();
    let mut wall_clock = Vec::new();
    let mut loss_trace = Vec::new();
    let mut step_counter = 0usize;
    // per-primary-pair score rows, in pair order, one entry per epoch
    let mut score_rows: Vec<Vec<PairScore>> = Vec::new();
    let mut halted_at = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        params = train_epoch(
            params,
            train,
            &reference,
            cfg,
            epoch,
            &mut ref_cache,
            gram_index.as_ref(),
            &mut loss_trace,
            &mut step_counter,
        )?;
        let (metrics, primary_scores) = evaluate_epoch(&params, val, &pairs, cfg, epoch)?;
        wall_clock.push(started.elapsed().as_secs_f64());
        score_rows.push(primary_scores.iter().map(|(_, s)| s.clone()).collect());
        epoch_params.push(params.clone());

        let trip = matches!(cfg.stop, StopCriterion::NgramThreshold { threshold } if metrics.ngram_mem_percent > threshold);
        epochs.push(metrics);
        if trip && cfg.halt_on_threshold {
            halted_at = Some(epoch);
            break;
        }
    }

    // assemble per-sample histories from the per-epoch primary-pair scores
    let primary_pairs = &pairs.by_k[&pairs.primary_k];
    let histories: Vec<SampleScoreHistory> = primary_pairs
        .iter()
        .enumerate()
        .map(|(idx, pair)| {
            let scores: Vec<f64> = score_rows.iter().map(|row| row[idx].fraction).collect();
            let verbatim: Vec<bool> = score_rows.iter().map(|row| row[idx].extractable).collect();
            SampleScoreHistory::from_flags(pair.sample_id, scores, verbatim)
        })
        .collect();

    let mut selected = BTreeMap::new();
    selected.insert("best_val".to_string(), select_epoch(&epochs, &StopCriterion::BestVal));
    selected.insert("best_acc".to_string(), select_epoch(&epochs, &StopCriterion::BestAcc));
    selected.insert(
        "ngram_threshold".to_string(),
        select_epoch(&epochs, &StopCriterion::NgramThreshold { threshold: cfg.recorded_threshold() }),
    );

    let report = RunReport {
        config: cfg.clone(),
        train_corpus: CorpusSummary::from(train),
        val_corpus: CorpusSummary::from(val),
        pairs_total: pairs.total_pairs(),
        pairs_skipped_short: pairs.skipped_short,
        pairs_dropped_collisions: pairs.dropped_collisions,
        primary_k: pairs.primary_k,
        epochs,
        histories,
        selected,
        halted_at,
        wall_clock_secs: wall_clock,
    };

    Ok(FitRun { report, epoch_params, loss_trace })
}
