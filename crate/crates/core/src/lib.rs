//! Caption generation from image region features.
//!
//! The pipeline has four learned stages that run in order:
//!
//! * [`mil`] trains one noisy-OR multiple-instance detector per vocabulary
//!   word over bags of region feature vectors and emits a calibrated set of
//!   detected words per image.
//! * [`melm`] is a maximum-entropy language model conditioned on the detected
//!   words that have not been mentioned yet, trained with noise-contrastive
//!   estimation over a hashed feature table.
//! * [`decoder`] runs a left-to-right beam search over that model and turns
//!   the completed sentences into an attribute-coverage M-best list.
//! * [`rerank`] scores every M-best entry with sentence-level features
//!   (including the [`dmsm`] image/text relevance) and picks the final
//!   caption with weights tuned by minimum error rate training.
//!
//! [`metrics`] holds corpus BLEU and a simplified METEOR, [`corpus`] the data
//! ingestion, and [`cli`] the batch orchestration behind the `capgen` binary.

pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod dmsm;
pub mod melm;
pub mod metrics;
pub mod mil;
pub mod rerank;
pub mod synth;
pub mod util;

pub use corpus::{Caption, CorpusStats, Dataset, Token, Vocabulary};
pub use decoder::{BeamConfig, Hypothesis, MBestList};
pub use dmsm::DmsmModel;
pub use melm::{LmState, MelmModel};
pub use mil::{DetectedWordSet, MilModel};
pub use rerank::{MertWeights, SentenceFeatures};
