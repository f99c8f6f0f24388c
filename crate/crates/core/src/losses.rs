//! Training losses and their exact analytic gradients.
//!
//! Three modes share one evaluation engine:
//!
//! * plain: windowed causal cross-entropy over positions 2..T;
//! * ngram_reg: cross-entropy plus a squared-hinge penalty on every
//!   contiguous n-gram whose probability under the fine-tuned model exceeds
//!   the frozen reference model's by more than the margin tau;
//! * goldfish: cross-entropy restricted to a deterministic pseudo-random
//!   subset of positions, dropping 1 in `period` from supervision.
//!
//! Every n-gram is scored in its true in-sample left context (windowed), so
//! all gram probabilities for a sample derive from one forward pass per
//! position. The penalty gradient flows only through the fine-tuned
//! parameters; at or below the hinge point the squared hinge is flat, so
//! inactive grams contribute exactly zero gradient.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, Gradients, ModelParams, ReferenceSnapshot};
use crate::rng::{mix, Rng};

const GOLDFISH_TAG: u64 = 0x676f_6c64; // "gold"

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Plain,
    NgramReg,
    Goldfish,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Plain => "plain",
            LossMode::NgramReg => "ngram_reg",
            LossMode::Goldfish => "goldfish",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LossMode::Plain),
            "ngram_reg" => Ok(LossMode::NgramReg),
            "goldfish" => Ok(LossMode::Goldfish),
            other => Err(Error::InvalidConfig(format!("unknown loss mode {other:?}"))),
        }
    }
}

/// Which grams of a sample the penalty considers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum GramScope {
    /// Every contiguous gram of the current sample.
    #[default]
    Sample,
    /// Only grams occurring at least `min_count` times corpus-wide;
    /// duplication is what drives memorisation, so this focuses the
    /// penalty budget on the repeated material. Needs a [`GramIndex`].
    CorpusDuplicated { min_count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Regularisation strength, lambda >= 0.
    pub lambda: f64,
    /// Confidence margin, tau >= 0.
    pub tau: f64,
    /// Gram sizes penalised by ngram_reg.
    pub sizes: BTreeSet<usize>,
    /// Goldfish drop period P: 1 token in P is dropped; None means no drop.
    pub goldfish_period: Option<u64>,
    #[serde(default)]
    pub scope: GramScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Plain,
            lambda: 1.0,
            tau: 0.05,
            sizes: [4, 5, 6].into_iter().collect(),
            goldfish_period: None,
            scope: GramScope::Sample,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidConfig("tau must be >= 0".into()));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 1) {
            return Err(Error::InvalidConfig("gram sizes must be non-empty, each >= 1".into()));
        }
        if let Some(p) = self.goldfish_period {
            if p < 1 {
                return Err(Error::InvalidConfig("goldfish period must be >= 1".into()));
            }
        }
        if let GramScope::CorpusDuplicated { min_count } = self.scope {
            if min_count < 1 {
                return Err(Error::InvalidConfig("min_count must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Corpus-wide gram occurrence counts for the configured sizes, backing
/// the [`GramScope::CorpusDuplicated`] penalty scope.
#[derive(Clone, Debug)]
pub struct GramIndex {
    counts: HashMap<Vec<u32>, usize>,
    sizes: BTreeSet<usize>,
}

impl GramIndex {
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a [u32]>, sizes: &BTreeSet<usize>) -> Self {
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        for sample in samples {
            for &n in sizes {
                if sample.len() < n {
                    continue;
                }
                for gram in sample.windows(n) {
                    *counts.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        GramIndex { counts, sizes: sizes.clone() }
    }

    pub fn count(&self, gram: &[u32]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn sizes(&self) -> &BTreeSet<usize> {
        &self.sizes
    }
}

/// A loss evaluation: value decomposition plus the exact gradient.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: f64,
    pub lm_term: f64,
    pub reg_term: f64,
    pub gradient: Gradients,
    /// Grams whose hinge was strictly positive.
    pub active_hinges: usize,
    /// Positions that contributed cross-entropy.
    pub supervised_positions: usize,
}

/// The squared-hinge penalty for one gram: lambda * max(0, p - p0 - tau)^2.
pub fn hinge_penalty(p: f64, p0: f64, lambda: f64, tau: f64) -> f64 {
    let gap = p - p0 - tau;
    if gap > 0.0 {
        lambda * gap * gap
    } else {
        0.0
    }
}

/// Log probability of each sample token given its windowed in-sample left
/// context: entry i is `log p(sample[i] | sample[..i])`.
pub fn position_target_logprobs(params: &ModelParams, sample: &[u32]) -> Vec<f64> {
    (0..sample.len())
        .map(|i| {
            let window = params.resolve_window(&sample[..i]);
            let fwd = params.forward(&window);
            log_softmax(&fwd.logits)[sample[i] as usize]
        })
        .collect()
}

/// Whether position `position` (0-based index of the predicted token) keeps
/// its loss under the goldfish rule. Dropped iff
/// hash(sample_id, position, seed) mod period == 0; a period of None keeps
/// everything. Pure function of its arguments.
pub fn goldfish_keep(sample_id: usize, position: usize, seed: u64, period: Option<u64>) -> bool {
    match period {
        None => true,
        Some(p) => !mix(&[GOLDFISH_TAG, seed, sample_id as u64, position as u64]).is_multiple_of(p),
    }
}

struct RegSpec<'a> {
    ref_lp: &'a [f64],
    lambda: f64,
    tau: f64,
    sizes: &'a BTreeSet<usize>,
    /// Penalise only grams the index counts at least this often.
    dup_filter: Option<(&'a GramIndex, usize)>,
}

/// Shared engine: one forward pass per position, then cross-entropy and/or
/// gram penalties, then one backward pass per position with the combined
/// d(loss)/d(log p) coefficient.
fn evaluate_sample(
    params: &ModelParams,
    sample: &[u32],
    lm_supervised: Option<&dyn Fn(usize) -> bool>,
    reg: Option<RegSpec<'_>>,
) -> LossValue {
    let t_len = sample.len();
    let forwards: Vec<_> = (0..t_len)
        .map(|i| params.forward(&params.resolve_window(&sample[..i])))
        .collect();
    let lp: Vec<f64> =
        forwards.iter().zip(sample).map(|(f, &tok)| log_softmax(&f.logits)[tok as usize]).collect();

    // cross-entropy over supervised positions (the first token has no
    // in-sample context and is never supervised)
    let mut lm_term = 0.0;
    let mut supervised = vec![false; t_len];
    let mut supervised_positions = 0usize;
    if let Some(keep) = lm_supervised {
        for i in 1..t_len {
            if keep(i) {
                supervised[i] = true;
                supervised_positions += 1;
                lm_term += -lp[i];
            }
        }
    }

    // gram penalties, accumulated as per-position coefficients on lp
    let mut reg_term = 0.0;
    let mut active_hinges = 0usize;
    let mut coeff = vec![0.0f64; t_len];
    if let Some(reg) = reg {
        debug_assert_eq!(reg.ref_lp.len(), t_len);
        // prefix sums make each gram's log probability O(1)
        let mut acc = 0.0;
        let mut prefix = Vec::with_capacity(t_len + 1);
        prefix.push(0.0);
        for &v in &lp {
            acc += v;
            prefix.push(acc);
        }
        let mut ref_acc = 0.0;
        let mut ref_prefix = Vec::with_capacity(t_len + 1);
        ref_prefix.push(0.0);
        for &v in reg.ref_lp {
            ref_acc += v;
            ref_prefix.push(ref_acc);
        }
        for &n in reg.sizes {
            if n > t_len {
                continue;
            }
            for offset in 0..=(t_len - n) {
                if let Some((index, min_count)) = reg.dup_filter {
                    if index.count(&sample[offset..offset + n]) < min_count {
                        continue;
                    }
                }
                let p = (prefix[offset + n] - prefix[offset]).exp();
                let p_ref = (ref_prefix[offset + n] - ref_prefix[offset]).exp();
                let gap = p - p_ref - reg.tau;
                if gap > 0.0 {
                    active_hinges += 1;
                    reg_term += reg.lambda * gap * gap;
                    // d(penalty)/d(lp_i) = 2 lambda gap p for every i in the gram
                    let c = 2.0 * reg.lambda * gap * p;
                    for slot in &mut coeff[offset..offset + n] {
                        *slot += c;
                    }
                }
            }
        }
    }

    let mut gradient = Gradients::zeros(params.config());
    for i in 0..t_len {
        let dlp = coeff[i] - if supervised[i] { 1.0 } else { 0.0 };
        if dlp != 0.0 {
            params.backward_position(&forwards[i], sample[i] as usize, dlp, &mut gradient);
        }
    }

    LossValue {
        total: lm_term + reg_term,
        lm_term,
        reg_term,
        gradient,
        active_hinges,
        supervised_positions,
    }
}

/// Windowed causal cross-entropy with exact gradient.
pub fn lm_loss(params: &ModelParams, sample: &[u32]) -> Result<LossValue> {
    if sample.len() < 2 {
        return Err(Error::EmptyInput("lm loss needs a sample of length >= 2".into()));
    }
    Ok(evaluate_sample(params, sample, Some(&|_| true), None))
}

/// The gram penalty term alone (reg_term and its gradient; lm_term is 0).
pub fn ngram_reg_penalty(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    sample: &[u32],
    cfg: &LossConfig,
) -> Result<LossValue> {
    ngram_reg_penalty_indexed(params, reference, sample, cfg, None)
}

/// [`ngram_reg_penalty`] with the gram index a corpus-duplicated scope
/// needs.
pub fn ngram_reg_penalty_indexed(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    sample: &[u32],
    cfg: &LossConfig,
    index: Option<&GramIndex>,
) -> Result<LossValue> {
    if cfg.mode != LossMode::NgramReg {
        return Err(Error::InvalidConfig("ngram_reg_penalty requires mode = ngram_reg".into()));
    }
    cfg.validate()?;
    let dup_filter = dup_filter(cfg, index)?;
    let ref_lp = position_target_logprobs(reference.params(), sample);
    Ok(evaluate_sample(
        params,
        sample,
        None,
        Some(RegSpec {
            ref_lp: &ref_lp,
            lambda: cfg.lambda,
            tau: cfg.tau,
            sizes: &cfg.sizes,
            dup_filter,
        }),
    ))
}

fn dup_filter<'a>(
    cfg: &LossConfig,
    index: Option<&'a GramIndex>,
) -> Result<Option<(&'a GramIndex, usize)>> {
    match cfg.scope {
        GramScope::Sample => Ok(None),
        GramScope::CorpusDuplicated { min_count } => match index {
            Some(index) => Ok(Some((index, min_count))),
            None => Err(Error::InvalidConfig(
                "corpus-duplicated penalty scope needs a gram index".into(),
            )),
        },
    }
}

/// Cross-entropy over the goldfish-kept positions only. Dropped positions
/// contribute neither loss nor gradient; with period None this is
/// bit-identical to [`lm_loss`].
pub fn goldfish_loss(
    params: &ModelParams,
    sample: &[u32],
    cfg: &LossConfig,
    sample_id: usize,
    seed: u64,
) -> Result<LossValue> {
    if cfg.mode != LossMode::Goldfish {
        return Err(Error::InvalidConfig("goldfish_loss requires mode = goldfish".into()));
    }
    cfg.validate()?;
    if sample.len() < 2 {
        return Err(Error::EmptyInput("goldfish loss needs a sample of length >= 2".into()));
    }
    let period = cfg.goldfish_period;
    let keep = move |i: usize| goldfish_keep(sample_id, i, seed, period);
    Ok(evaluate_sample(params, sample, Some(&keep), None))
}

/// Caches the reference model's per-position log probabilities per sample;
/// the snapshot is frozen, so one computation per sample per run suffices.
#[derive(Default)]
pub struct RefCache {
    entries: HashMap<usize, Vec<f64>>,
}

impl RefCache {
    pub fn new() -> Self {
        RefCache { entries: HashMap::new() }
    }

    pub fn get_or_compute(
        &mut self,
        sample_id: usize,
        reference: &ReferenceSnapshot,
        sample: &[u32],
    ) -> &[f64] {
        self.entries
            .entry(sample_id)
            .or_insert_with(|| position_target_logprobs(reference.params(), sample))
    }
}

/// Mode dispatch: plain is cross-entropy only, ngram_reg adds the gram
/// penalty, goldfish is the masked cross-entropy.
pub fn total_loss(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    sample: &[u32],
    sample_id: usize,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossValue> {
    let mut cache = RefCache::new();
    total_loss_indexed(params, reference, sample, sample_id, cfg, seed, &mut cache, None)
}

/// [`total_loss`] with an external reference cache for use across epochs.
pub fn total_loss_cached(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    sample: &[u32],
    sample_id: usize,
    cfg: &LossConfig,
    seed: u64,
    cache: &mut RefCache,
) -> Result<LossValue> {
    total_loss_indexed(params, reference, sample, sample_id, cfg, seed, cache, None)
}

/// [`total_loss`] with both the reference cache and the gram index a
/// corpus-duplicated penalty scope needs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_indexed(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    sample: &[u32],
    sample_id: usize,
    cfg: &LossConfig,
    seed: u64,
    cache: &mut RefCache,
    index: Option<&GramIndex>,
) -> Result<LossValue> {
    cfg.validate()?;
    match cfg.mode {
        LossMode::Plain => lm_loss(params, sample),
        LossMode::Goldfish => goldfish_loss(params, sample, cfg, sample_id, seed),
        LossMode::NgramReg => {
            if sample.len() < 2 {
                return Err(Error::EmptyInput("lm loss needs a sample of length >= 2".into()));
            }
            let dup_filter = dup_filter(cfg, index)?;
            let ref_lp = cache.get_or_compute(sample_id, reference, sample).to_vec();
            Ok(evaluate_sample(
                params,
                sample,
                Some(&|_| true),
                Some(RegSpec {
                    ref_lp: &ref_lp,
                    lambda: cfg.lambda,
                    tau: cfg.tau,
                    sizes: &cfg.sizes,
                    dup_filter,
                }),
            ))
        }
    }
}

/// Compares the analytic gradient of `evaluate` against central differences
/// at `probes` seeded random parameter coordinates. Returns the maximum
/// relative error, with denominator max(|analytic|, |numeric|, 1e-12).
pub fn finite_diff_check<F>(
    evaluate: F,
    params: &ModelParams,
    probes: usize,
    step: f64,
    probe_seed: u64,
) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<(f64, Gradients)>,
{
    if probes < 1 {
        return Err(Error::InvalidConfig("probes must be >= 1".into()));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidConfig("step must be > 0".into()));
    }
    let (base, analytic) = evaluate(params)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteProbe { coordinate: usize::MAX });
    }

    let n = params.param_count();
    let mut coords: Vec<usize> = (0..n).collect();
    Rng::from_seed(probe_seed).shuffle(&mut coords);
    coords.truncate(probes.min(n));

    let mut max_rel = 0.0f64;
    for &c in &coords {
        let v = params.get_flat(c);
        let mut plus = params.clone();
        plus.set_flat(c, v + step);
        let (f_plus, _) = evaluate(&plus)?;
        let mut minus = params.clone();
        minus.set_flat(c, v - step);
        let (f_minus, _) = evaluate(&minus)?;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: c });
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.get_flat(c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig { vocab_size: 10, context_window: 3, embed_dim: 3, hidden_dim: 5, seed }
    }

    fn random_sample(seed: u64, len: usize, vocab: u32) -> Vec<u32> {
        let mut rng = Rng::from_seed(seed);
        (0..len).map(|_| rng.below(vocab as usize) as u32).collect()
    }

    #[test]
    fn lm_loss_uniform_model_equals_entropy_bound() {
        let cfg = tiny_config(0);
        let params = ModelParams::zeroed(&cfg).unwrap();
        let sample = random_sample(1, 9, 10);
        let loss = lm_loss(&params, &sample).unwrap();
        let expected = (sample.len() - 1) as f64 * (cfg.vocab_size as f64).ln();
        assert!((loss.total - expected).abs() < 1e-9);
        assert_eq!(loss.reg_term, 0.0);
        assert_eq!(loss.supervised_positions, sample.len() - 1);
    }

    #[test]
    fn lm_loss_rejects_short_samples() {
        let params = ModelParams::zeroed(&tiny_config(0)).unwrap();
        assert!(matches!(lm_loss(&params, &[3]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn lm_loss_near_zero_for_near_perfect_model() {
        // output bias pushed hard toward token 7 on a constant sample
        let cfg = tiny_config(0);
        let mut params = ModelParams::zeroed(&cfg).unwrap();
        let [_, _, _, _, output_b] = params.blocks_mut();
        output_b[7] = 50.0;
        let sample = vec![7u32; 8];
        let loss = lm_loss(&params, &sample).unwrap();
        // the saturated softmax reaches the perfect-fit lower bound of 0
        assert!(loss.total >= 0.0 && loss.total < 1e-9, "loss = {}", loss.total);
    }

    #[test]
    fn lm_loss_matches_stepwise_oracle() {
        let params = ModelParams::init(&tiny_config(42)).unwrap();
        for seed in 0..10 {
            let sample = random_sample(seed, 12, 10);
            let loss = lm_loss(&params, &sample).unwrap();
            // independent accumulation through the public logits API
            let mut oracle = 0.0;
            for i in 1..sample.len() {
                let logits = params.next_token_logits(&sample[..i]);
                oracle -= log_softmax(&logits)[sample[i] as usize];
            }
            assert!((loss.total - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn hinge_penalty_direct_formula_case() {
        let got = hinge_penalty(0.72, 0.30, 2.0, 0.1);
        assert!((got - 0.2048).abs() < 1e-12 * 0.2048);
        // at or below the hinge point the penalty is exactly zero
        assert_eq!(hinge_penalty(0.3, 0.3, 2.0, 0.0), 0.0);
        assert_eq!(hinge_penalty(0.2, 0.3, 5.0, 0.1), 0.0);
    }

    #[test]
    fn reg_penalty_zero_when_lambda_zero_or_reference_equal() {
        let params = ModelParams::init(&tiny_config(7)).unwrap();
        let reference = ReferenceSnapshot::capture(&params);
        let sample = random_sample(3, 14, 10);
        let sizes: BTreeSet<usize> = [2, 3].into_iter().collect();

        let zero_lambda = LossConfig {
            mode: LossMode::NgramReg,
            lambda: 0.0,
            tau: 0.0,
            sizes: sizes.clone(),
            goldfish_period: None,
            scope: GramScope::Sample,
        };
        let v = ngram_reg_penalty(&params, &reference, &sample, &zero_lambda).unwrap();
        assert_eq!(v.reg_term, 0.0);

        // theta == theta_0: gap = -tau <= 0 for every gram, penalty exactly 0
        for tau in [0.0, 0.05, 1.0] {
            let cfg = LossConfig {
                mode: LossMode::NgramReg,
                lambda: 2.0,
                tau,
                sizes: sizes.clone(),
                goldfish_period: None,
                scope: GramScope::Sample,
            };
            let v = ngram_reg_penalty(&params, &reference, &sample, &cfg).unwrap();
            assert_eq!(v.reg_term, 0.0);
            assert_eq!(v.active_hinges, 0);
            assert!(v.gradient.embedding.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn reg_penalty_single_gram_model_level() {
        // single-token "gram": vocab 2, window 1, all zero except output bias,
        // so p is context-independent and exactly softmax(b)
        let cfg = ModelConfig { vocab_size: 2, context_window: 1, embed_dim: 1, hidden_dim: 1, seed: 0 };
        let mut theta = ModelParams::zeroed(&cfg).unwrap();
        theta.blocks_mut()[4][0] = (0.72f64 / 0.28).ln(); // p_theta(0) = 0.72
        let mut theta0 = ModelParams::zeroed(&cfg).unwrap();
        theta0.blocks_mut()[4][0] = (0.30f64 / 0.70).ln(); // p_ref(0) = 0.30
        let reference = ReferenceSnapshot::capture(&theta0);
        let loss_cfg = LossConfig {
            mode: LossMode::NgramReg,
            lambda: 2.0,
            tau: 0.1,
            sizes: [1].into_iter().collect(),
            goldfish_period: None,
            scope: GramScope::Sample,
        };
        let v = ngram_reg_penalty(&theta, &reference, &[0], &loss_cfg).unwrap();
        assert_eq!(v.active_hinges, 1);
        assert!((v.reg_term - 0.2048).abs() < 1e-9, "reg = {}", v.reg_term);
        assert_eq!(v.lm_term, 0.0);
    }

    #[test]
    fn reg_penalty_monotone_in_lambda_and_antitone_in_tau() {
        let params = ModelParams::init(&tiny_config(19)).unwrap();
        // drift the parameters so some hinges activate
        let mut drifted = params.clone();
        for block in drifted.blocks_mut() {
            for v in block.iter_mut() {
                *v *= 3.0;
            }
        }
        let reference = ReferenceSnapshot::capture(&params);
        let sample = random_sample(11, 16, 10);
        let sizes: BTreeSet<usize> = [1, 2].into_iter().collect();
        let eval = |lambda: f64, tau: f64| {
            let cfg = LossConfig {
                mode: LossMode::NgramReg,
                lambda,
                tau,
                sizes: sizes.clone(),
                goldfish_period: None,
                scope: GramScope::Sample,
            };
            ngram_reg_penalty(&drifted, &reference, &sample, &cfg).unwrap().reg_term
        };
        let base = eval(1.0, 0.0);
        assert!(base >= 0.0);
        assert!(eval(2.0, 0.0) >= base);
        assert!(eval(0.5, 0.0) <= base);
        assert!(eval(1.0, 0.01) <= base);
        assert!(eval(1.0, 0.5) <= eval(1.0, 0.01));
    }

    #[test]
    fn corpus_duplicated_scope_skips_unique_grams() {
        // corpus: one gram duplicated across samples, the rest unique
        let duplicated: Vec<u32> = vec![1, 2, 3];
        let corpus: Vec<Vec<u32>> = vec![
            vec![1, 2, 3, 7, 8],
            vec![9, 1, 2, 3, 4],
            vec![5, 6, 7, 8, 9],
        ];
        let sizes: BTreeSet<usize> = [3].into_iter().collect();
        let index = GramIndex::build(corpus.iter().map(|s| s.as_slice()), &sizes);
        assert_eq!(index.count(&duplicated), 2);
        assert_eq!(index.count(&[7, 8, 9]), 1);

        // model confident everywhere: every gram's hinge would fire under
        // sample scope
        let cfg = ModelConfig { vocab_size: 10, context_window: 2, embed_dim: 2, hidden_dim: 2, seed: 0 };
        let reference = ReferenceSnapshot::capture(&ModelParams::zeroed(&cfg).unwrap());
        let mut confident = ModelParams::zeroed(&cfg).unwrap();
        for t in 0..10 {
            confident.blocks_mut()[4][t] = 0.0;
        }
        // bias strongly toward the tokens of the first sample in order
        let sample = &corpus[0];
        for &t in sample {
            confident.blocks_mut()[4][t as usize] += 6.0;
        }

        let sample_scope = LossConfig {
            mode: LossMode::NgramReg,
            lambda: 1.0,
            tau: 0.0,
            sizes: sizes.clone(),
            goldfish_period: None,
            scope: GramScope::Sample,
        };
        let corpus_scope = LossConfig {
            scope: GramScope::CorpusDuplicated { min_count: 2 },
            ..sample_scope.clone()
        };

        let all = ngram_reg_penalty(&confident, &reference, sample, &sample_scope).unwrap();
        let dup_only =
            ngram_reg_penalty_indexed(&confident, &reference, sample, &corpus_scope, Some(&index))
                .unwrap();
        assert!(all.active_hinges > dup_only.active_hinges);
        assert_eq!(dup_only.active_hinges, 1, "only the duplicated gram qualifies");
        assert!(dup_only.reg_term < all.reg_term);

        // corpus scope without an index is a configuration error
        let err = ngram_reg_penalty_indexed(&confident, &reference, sample, &corpus_scope, None)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn goldfish_no_drop_is_bit_identical_to_lm() {
        let params = ModelParams::init(&tiny_config(5)).unwrap();
        let cfg = LossConfig { mode: LossMode::Goldfish, goldfish_period: None, ..Default::default() };
        for seed in 0..20 {
            let sample = random_sample(seed, 10, 10);
            let a = goldfish_loss(&params, &sample, &cfg, seed as usize, 99).unwrap();
            let b = lm_loss(&params, &sample).unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.gradient, b.gradient);
        }
    }

    #[test]
    fn goldfish_period_one_drops_everything() {
        let params = ModelParams::init(&tiny_config(5)).unwrap();
        let cfg = LossConfig { mode: LossMode::Goldfish, goldfish_period: Some(1), ..Default::default() };
        let sample = random_sample(2, 10, 10);
        let v = goldfish_loss(&params, &sample, &cfg, 0, 7).unwrap();
        assert_eq!(v.total, 0.0);
        assert_eq!(v.supervised_positions, 0);
        assert!(v.gradient.output_b.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn goldfish_drop_set_matches_hash_enumeration() {
        let params = ModelParams::init(&tiny_config(5)).unwrap();
        let period = Some(4);
        let cfg = LossConfig { mode: LossMode::Goldfish, goldfish_period: period, ..Default::default() };
        let sample = random_sample(8, 41, 10); // 40 predicted positions
        let seed = 17u64;
        let sample_id = 3usize;
        let v = goldfish_loss(&params, &sample, &cfg, sample_id, seed).unwrap();

        // oracle: accumulate windowed NLL over exactly the kept positions
        let mut kept = 0usize;
        let mut oracle = 0.0;
        for i in 1..sample.len() {
            if goldfish_keep(sample_id, i, seed, period) {
                kept += 1;
                let logits = params.next_token_logits(&sample[..i]);
                oracle -= log_softmax(&logits)[sample[i] as usize];
            }
        }
        assert!(kept > 0 && kept < sample.len() - 1, "drop set degenerate: {kept}");
        assert_eq!(v.supervised_positions, kept);
        assert!((v.total - oracle).abs() < 1e-10);

        // recomputation with the same seed is bit-identical
        let again = goldfish_loss(&params, &sample, &cfg, sample_id, seed).unwrap();
        assert_eq!(v.total.to_bits(), again.total.to_bits());
    }

    #[test]
    fn total_loss_mode_contracts() {
        let params = ModelParams::init(&tiny_config(23)).unwrap();
        let mut drifted = params.clone();
        for block in drifted.blocks_mut() {
            for v in block.iter_mut() {
                *v *= 2.5;
            }
        }
        let reference = ReferenceSnapshot::capture(&params);
        let sample = random_sample(6, 12, 10);

        let plain = LossConfig::default();
        let v = total_loss(&drifted, &reference, &sample, 0, &plain, 1).unwrap();
        assert_eq!(v.reg_term, 0.0);

        // lambda = 0 makes ngram_reg identical to plain
        let reg0 = LossConfig { mode: LossMode::NgramReg, lambda: 0.0, ..Default::default() };
        let w = total_loss(&drifted, &reference, &sample, 0, &reg0, 1).unwrap();
        assert_eq!(w.total.to_bits(), v.total.to_bits());
        assert_eq!(w.gradient, v.gradient);

        // component-sum oracle
        let reg = LossConfig {
            mode: LossMode::NgramReg,
            lambda: 1.5,
            tau: 0.01,
            sizes: [2, 3].into_iter().collect(),
            goldfish_period: None,
            scope: GramScope::Sample,
        };
        let combined = total_loss(&drifted, &reference, &sample, 0, &reg, 1).unwrap();
        let lm = lm_loss(&drifted, &sample).unwrap();
        let pen = ngram_reg_penalty(&drifted, &reference, &sample, &reg).unwrap();
        let sum = lm.total + pen.reg_term;
        assert!((combined.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        assert!((combined.total - (combined.lm_term + combined.reg_term)).abs() <= 1e-12);
    }

    #[test]
    fn ref_cache_reuses_reference_logprobs() {
        let params = ModelParams::init(&tiny_config(2)).unwrap();
        let reference = ReferenceSnapshot::capture(&params);
        let sample = random_sample(4, 8, 10);
        let mut cache = RefCache::new();
        let first = cache.get_or_compute(0, &reference, &sample).to_vec();
        let second = cache.get_or_compute(0, &reference, &sample).to_vec();
        assert_eq!(first, second);
        assert_eq!(cache.entries.len(), 1);
    }

    #[test]
    fn finite_diff_constant_and_quadratic() {
        let cfg = ModelConfig { vocab_size: 2, context_window: 1, embed_dim: 1, hidden_dim: 1, seed: 0 };
        let params = ModelParams::init(&cfg).unwrap();

        // constant function: both gradients are zero
        let constant =
            |p: &ModelParams| -> Result<(f64, Gradients)> { Ok((3.5, Gradients::zeros(p.config()))) };
        let err = finite_diff_check(constant, &params, 8, 1e-5, 1).unwrap();
        assert_eq!(err, 0.0);

        // f(p) = sum p^2 with analytic gradient 2p; central differences are
        // exact on quadratics up to rounding
        let quadratic = |p: &ModelParams| -> Result<(f64, Gradients)> {
            let n = p.param_count();
            let total: f64 = (0..n).map(|i| p.get_flat(i) * p.get_flat(i)).sum();
            let mut g = Gradients::zeros(p.config());
            let mut flat: Vec<f64> = (0..n).map(|i| 2.0 * p.get_flat(i)).collect();
            for (dst, src) in [
                &mut g.embedding,
                &mut g.hidden_w,
                &mut g.hidden_b,
                &mut g.output_w,
                &mut g.output_b,
            ]
            .into_iter()
            .flat_map(|b| b.iter_mut())
            .zip(flat.drain(..))
            {
                *dst = src;
            }
            Ok((total, g))
        };
        let mut at_one = ModelParams::zeroed(&cfg).unwrap();
        for i in 0..at_one.param_count() {
            at_one.set_flat(i, 1.0);
        }
        let err = finite_diff_check(quadratic, &at_one, 8, 1e-5, 2).unwrap();
        assert!(err < 1e-9, "quadratic error {err}");
    }

    #[test]
    fn finite_diff_validates_arguments() {
        let params = ModelParams::init(&tiny_config(0)).unwrap();
        let f = |p: &ModelParams| -> Result<(f64, Gradients)> { Ok((0.0, Gradients::zeros(p.config()))) };
        assert!(finite_diff_check(f, &params, 0, 1e-5, 0).is_err());
        assert!(finite_diff_check(f, &params, 4, 0.0, 0).is_err());
    }

    #[test]
    fn finite_diff_lm_loss_tight() {
        let params = ModelParams::init(&tiny_config(31)).unwrap();
        let sample = random_sample(9, 8, 10);
        let eval = |p: &ModelParams| -> Result<(f64, Gradients)> {
            let v = lm_loss(p, &sample)?;
            Ok((v.total, v.gradient))
        };
        let err = finite_diff_check(eval, &params, 64, 1e-5, 3).unwrap();
        assert!(err <= 1e-4, "lm gradient error {err}");
    }
}
