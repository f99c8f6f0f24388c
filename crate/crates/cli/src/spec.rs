//! Experiment spec files: flat `key = value` lines, `#` comments, unknown
//! keys rejected. The effective spec (defaults applied) renders back to
//! canonical text with `to_text`, and re-parsing that text reproduces it
//! exactly — the form echoed into every sweep output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use memaudit::losses::{GramScope, LossMode};
use memaudit::model::{FreezeMask, ModelConfig};
use memaudit::rng::mix;
use memaudit::trainer::{StopCriterion, TrainConfig, DEFAULT_NGRAM_THRESHOLD};

use crate::CmdError;

const MODEL_SEED_TAG: u64 = 0x6d64; // "md"
const SHUFFLE_SEED_TAG: u64 = 0x73_68; // "sh"
const PAIR_SEED_TAG: u64 = 0x70_72; // "pr"

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub train_corpus: PathBuf,
    pub val_corpus: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub modes: Vec<LossMode>,
    pub max_samples: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub k_values: Vec<usize>,
    pub suffix_len: usize,
    pub ngram_sizes: Vec<usize>,
    pub penalty_sizes: Vec<usize>,
    pub lambda: f64,
    pub tau: f64,
    pub penalty_scope: String,
    pub penalty_min_count: usize,
    pub goldfish_period: Option<u64>,
    pub stop_criterion: String,
    pub threshold: f64,
    pub halt: bool,
    pub slack: usize,
    pub clip_norm: Option<f64>,
    /// Parameter blocks excluded from training.
    pub freeze: Vec<String>,
    /// Checkpoint every run fine-tunes from; None initialises per seed.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            train_corpus: PathBuf::new(),
            val_corpus: PathBuf::new(),
            out_dir: PathBuf::new(),
            seeds: (0..10).collect(),
            modes: vec![LossMode::Plain],
            max_samples: 5000,
            max_epochs: 8,
            learning_rate: 0.1,
            vocab_size: 256,
            context_window: 8,
            embed_dim: 16,
            hidden_dim: 32,
            k_values: vec![12, 16, 20],
            suffix_len: 20,
            ngram_sizes: vec![4, 5, 6],
            penalty_sizes: vec![4, 5, 6],
            lambda: 1.0,
            tau: 0.05,
            penalty_scope: "sample".to_string(),
            penalty_min_count: 2,
            goldfish_period: None,
            stop_criterion: "ngram_threshold".to_string(),
            threshold: DEFAULT_NGRAM_THRESHOLD,
            halt: true,
            slack: 0,
            clip_norm: Some(1.0),
            freeze: Vec::new(),
            init_checkpoint: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>, CmdError> {
    if value.trim() == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| CmdError::Data(format!("line {line}: bad value for {key}: {part:?}")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T, CmdError> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| CmdError::Data(format!("line {line}: bad value for {key}: {value:?}")))
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<ExperimentSpec, CmdError> {
        let mut spec = ExperimentSpec::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut have_train = false;
        let mut have_val = false;
        let mut have_out = false;
        let mut penalty_given = false;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CmdError::Data(format!("line {line_no}: expected key = value")));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CmdError::Data(format!("line {line_no}: duplicate key {key:?}")));
            }
            match key {
                "train_corpus" => {
                    spec.train_corpus = PathBuf::from(value);
                    have_train = true;
                }
                "val_corpus" => {
                    spec.val_corpus = PathBuf::from(value);
                    have_val = true;
                }
                "out_dir" => {
                    spec.out_dir = PathBuf::from(value);
                    have_out = true;
                }
                "seeds" => spec.seeds = parse_list(value, line_no, key)?,
                "modes" => {
                    spec.modes = value
                        .split(',')
                        .map(|m| {
                            m.trim().parse::<LossMode>().map_err(|e| {
                                CmdError::Data(format!("line {line_no}: {e}"))
                            })
                        })
                        .collect::<Result<_, _>>()?;
                }
                "max_samples" => spec.max_samples = parse_scalar(value, line_no, key)?,
                "max_epochs" => spec.max_epochs = parse_scalar(value, line_no, key)?,
                "learning_rate" => spec.learning_rate = parse_scalar(value, line_no, key)?,
                "vocab_size" => spec.vocab_size = parse_scalar(value, line_no, key)?,
                "context_window" => spec.context_window = parse_scalar(value, line_no, key)?,
                "embed_dim" => spec.embed_dim = parse_scalar(value, line_no, key)?,
                "hidden_dim" => spec.hidden_dim = parse_scalar(value, line_no, key)?,
                "k_values" => spec.k_values = parse_list(value, line_no, key)?,
                "suffix_len" => spec.suffix_len = parse_scalar(value, line_no, key)?,
                "ngram_sizes" => spec.ngram_sizes = parse_list(value, line_no, key)?,
                "penalty_sizes" => {
                    spec.penalty_sizes = parse_list(value, line_no, key)?;
                    penalty_given = true;
                }
                "lambda" => spec.lambda = parse_scalar(value, line_no, key)?,
                "tau" => spec.tau = parse_scalar(value, line_no, key)?,
                "penalty_scope" => {
                    if !["sample", "corpus_duplicated"].contains(&value) {
                        return Err(CmdError::Data(format!(
                            "line {line_no}: penalty_scope must be sample or corpus_duplicated"
                        )));
                    }
                    spec.penalty_scope = value.to_string();
                }
                "penalty_min_count" => {
                    spec.penalty_min_count = parse_scalar(value, line_no, key)?;
                }
                "goldfish_period" => {
                    spec.goldfish_period = if value == "none" {
                        None
                    } else {
                        Some(parse_scalar(value, line_no, key)?)
                    };
                }
                "stop_criterion" => {
                    if !["best_val", "best_acc", "ngram_threshold"].contains(&value) {
                        return Err(CmdError::Data(format!(
                            "line {line_no}: stop_criterion must be best_val, best_acc or ngram_threshold"
                        )));
                    }
                    spec.stop_criterion = value.to_string();
                }
                "threshold" => spec.threshold = parse_scalar(value, line_no, key)?,
                "halt" => spec.halt = parse_scalar(value, line_no, key)?,
                "slack" => spec.slack = parse_scalar(value, line_no, key)?,
                "clip_norm" => {
                    spec.clip_norm = if value == "none" {
                        None
                    } else {
                        Some(parse_scalar(value, line_no, key)?)
                    };
                }
                "init_checkpoint" => {
                    spec.init_checkpoint =
                        if value == "none" { None } else { Some(PathBuf::from(value)) };
                }
                "freeze" => {
                    spec.freeze = if value == "none" {
                        Vec::new()
                    } else {
                        value.split(',').map(|s| s.trim().to_string()).collect()
                    };
                    for block in &spec.freeze {
                        if !["embedding", "hidden", "output"].contains(&block.as_str()) {
                            return Err(CmdError::Data(format!(
                                "line {line_no}: unknown freeze block {block:?}"
                            )));
                        }
                    }
                }
                other => {
                    return Err(CmdError::Data(format!("line {line_no}: unknown key {other:?}")));
                }
            }
        }

        if !have_train || !have_val || !have_out {
            return Err(CmdError::Data(
                "spec must set train_corpus, val_corpus and out_dir".to_string(),
            ));
        }
        if spec.seeds.is_empty() {
            return Err(CmdError::Data("seeds must be non-empty".to_string()));
        }
        if spec.modes.is_empty() {
            return Err(CmdError::Data("modes must be non-empty".to_string()));
        }
        if !penalty_given {
            spec.penalty_sizes = spec.ngram_sizes.clone();
        }
        if spec.modes.contains(&LossMode::Goldfish) && spec.goldfish_period.is_none() {
            return Err(CmdError::Data(
                "goldfish mode requires an explicit goldfish_period".to_string(),
            ));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<ExperimentSpec, CmdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::Data(format!("cannot read spec {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text of the effective spec; `parse` of this reproduces
    /// the spec exactly.
    pub fn to_text(&self) -> String {
        fn join<T: std::fmt::Display>(xs: &[T]) -> String {
            if xs.is_empty() {
                return "none".to_string();
            }
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let modes = self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",");
        let goldfish =
            self.goldfish_period.map_or_else(|| "none".to_string(), |p| p.to_string());
        let clip = self.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string());
        let init = self
            .init_checkpoint
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string());
        format!(
            "train_corpus = {}\nval_corpus = {}\nout_dir = {}\nseeds = {}\nmodes = {}\n\
             max_samples = {}\nmax_epochs = {}\nlearning_rate = {}\nvocab_size = {}\n\
             context_window = {}\nembed_dim = {}\nhidden_dim = {}\nk_values = {}\n\
             suffix_len = {}\nngram_sizes = {}\npenalty_sizes = {}\nlambda = {}\ntau = {}\n\
             penalty_scope = {}\npenalty_min_count = {}\ngoldfish_period = {}\nstop_criterion = {}\nthreshold = {}\nhalt = {}\nslack = {}\n\
             clip_norm = {}\nfreeze = {}\ninit_checkpoint = {}\n",
            self.train_corpus.display(),
            self.val_corpus.display(),
            self.out_dir.display(),
            join(&self.seeds),
            modes,
            self.max_samples,
            self.max_epochs,
            self.learning_rate,
            self.vocab_size,
            self.context_window,
            self.embed_dim,
            self.hidden_dim,
            join(&self.k_values),
            self.suffix_len,
            join(&self.ngram_sizes),
            join(&self.penalty_sizes),
            self.lambda,
            self.tau,
            self.penalty_scope,
            self.penalty_min_count,
            goldfish,
            self.stop_criterion,
            self.threshold,
            self.halt,
            self.slack,
            clip,
            join(&self.freeze),
            init,
        )
    }

    fn freeze_mask(&self) -> FreezeMask {
        let mut mask = FreezeMask::all_trainable();
        for block in &self.freeze {
            match block.as_str() {
                "embedding" => mask.embedding = false,
                "hidden" => mask.hidden = false,
                "output" => mask.output = false,
                _ => {}
            }
        }
        mask
    }

    fn stop(&self) -> StopCriterion {
        match self.stop_criterion.as_str() {
            "best_val" => StopCriterion::BestVal,
            "best_acc" => StopCriterion::BestAcc,
            _ => StopCriterion::NgramThreshold { threshold: self.threshold },
        }
    }

    /// The training configuration for one (mode, run seed) cell. Model,
    /// shuffle and pair seeds are derived from the run seed with distinct
    /// tags, so every run draws fresh pairs.
    pub fn train_config(&self, mode: LossMode, run_seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                vocab_size: self.vocab_size,
                context_window: self.context_window,
                embed_dim: self.embed_dim,
                hidden_dim: self.hidden_dim,
                seed: mix(&[run_seed, MODEL_SEED_TAG]),
            },
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            loss: memaudit::LossConfig {
                mode,
                lambda: self.lambda,
                tau: self.tau,
                sizes: self.penalty_sizes.iter().copied().collect(),
                goldfish_period: self.goldfish_period,
                scope: if self.penalty_scope == "corpus_duplicated" {
                    GramScope::CorpusDuplicated { min_count: self.penalty_min_count }
                } else {
                    GramScope::Sample
                },
            },
            freeze: self.freeze_mask(),
            k_values: self.k_values.clone(),
            suffix_len: self.suffix_len,
            ngram_sizes: self.ngram_sizes.iter().copied().collect(),
            slack: self.slack,
            clip_norm: self.clip_norm,
            stop: self.stop(),
            halt_on_threshold: self.halt,
            shuffle_seed: mix(&[run_seed, SHUFFLE_SEED_TAG]),
            pair_seed: mix(&[run_seed, PAIR_SEED_TAG]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
train_corpus = data/train.jsonl
val_corpus = data/val.jsonl
out_dir = runs/demo
";

    #[test]
    fn minimal_spec_gets_defaults() {
        let spec = ExperimentSpec::parse(MINIMAL).unwrap();
        assert_eq!(spec.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(spec.modes, vec![LossMode::Plain]);
        assert_eq!(spec.max_epochs, 8);
        assert_eq!(spec.k_values, vec![12, 16, 20]);
        assert_eq!(spec.penalty_sizes, vec![4, 5, 6]);
    }

    #[test]
    fn effective_spec_round_trips() {
        let mut text = MINIMAL.to_string();
        text.push_str("modes = plain,ngram_reg\nlambda = 2.5\nseeds = 3,4\nfreeze = embedding\n");
        let spec = ExperimentSpec::parse(&text).unwrap();
        let echoed = spec.to_text();
        let back = ExperimentSpec::parse(&echoed).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}bogus_key = 3\n");
        let err = ExperimentSpec::parse(&text).unwrap_err();
        assert!(err.message().contains("unknown key"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = format!("{MINIMAL}max_epochs = 3\nmax_epochs = 4\n");
        assert!(ExperimentSpec::parse(&text).is_err());
    }

    #[test]
    fn goldfish_mode_needs_period() {
        let text = format!("{MINIMAL}modes = goldfish\n");
        assert!(ExperimentSpec::parse(&text).is_err());
        let text = format!("{MINIMAL}modes = goldfish\ngoldfish_period = 4\n");
        assert!(ExperimentSpec::parse(&text).is_ok());
    }

    #[test]
    fn ngram_sizes_flow_into_penalty_sizes_unless_overridden() {
        let text = format!("{MINIMAL}ngram_sizes = 2,3\n");
        let spec = ExperimentSpec::parse(&text).unwrap();
        assert_eq!(spec.penalty_sizes, vec![2, 3]);
        let text = format!("{MINIMAL}ngram_sizes = 2,3\npenalty_sizes = 4\n");
        let spec = ExperimentSpec::parse(&text).unwrap();
        assert_eq!(spec.penalty_sizes, vec![4]);
    }

    #[test]
    fn run_seeds_derive_distinct_component_seeds() {
        let spec = ExperimentSpec::parse(MINIMAL).unwrap();
        let a = spec.train_config(LossMode::Plain, 0);
        let b = spec.train_config(LossMode::Plain, 1);
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.pair_seed, b.pair_seed);
        assert_ne!(a.shuffle_seed, b.shuffle_seed);
        // and within one run the three seeds differ from each other
        assert_ne!(a.model.seed, a.shuffle_seed);
        assert_ne!(a.shuffle_seed, a.pair_seed);
    }
}
