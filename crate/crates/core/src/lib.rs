//! memaudit: measure and mitigate verbatim memorisation of fine-tuning data.
//!
//! The crate trains a small windowed neural language model on a corpus,
//! tracks how much of the training data becomes extractable from it epoch
//! by epoch, and provides two mitigations: threshold-based early stopping
//! on a partial (n-gram) memorisation score, and loss regularisers (an
//! n-gram confidence penalty against a frozen reference model, and goldfish
//! token dropout).
//!
//! Module map:
//! * [`corpus`] — JSONL ingestion, byte tokeniser, extraction-pair sampling
//! * [`model`] — the trainable reference LM, decoding, checkpoints
//! * [`metrics`] — k-extractable / n-gram memorisation, transition tracking
//! * [`losses`] — cross-entropy, gram penalty, goldfish loss, gradient check
//! * [`trainer`] — epoch loop, evaluation, stopping criteria, run reports
//! * [`synthetic`] — seeded corpora with a planted duplicated secret
//!
//! Everything is deterministic: identical inputs and seeds produce
//! bit-identical outputs, including serialised reports.

pub mod corpus;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod trainer;

/// Reserved padding id for short contexts. Corpora must never contain it;
/// the JSONL loader rejects text with NUL bytes for this reason.
pub const PAD_TOKEN: u32 = 0;

pub use corpus::{ByteTokenizer, Corpus, ExtractionPair, Split, TokenSeq, Tokenizer};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossMode, LossValue};
pub use metrics::EpochMetrics;
pub use model::{FreezeMask, ModelConfig, ModelParams, ReferenceSnapshot};
pub use trainer::{fit, RunReport, StopCriterion, TrainConfig};
