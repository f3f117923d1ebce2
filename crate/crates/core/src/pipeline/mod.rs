//! Two-stage training and the evaluation protocols.

mod data;
mod eval;
mod finetune;
mod pretrain;

use thiserror::Error;

pub use data::{
    assign_splits, load_dataset, samples_from_synth, LoadedDataset, MappedOracle, Sample, UnlabeledView,
    SYNTH_SPEC_FILE,
};
pub use eval::{
    eval_identification, eval_nearest_neighbor, eval_verification, nearest_neighbor_accuracy, read_pairs,
    run_cross_dataset, run_loio, sample_pairs, verification_accuracy, TargetProtocol, VerificationPair,
};
pub use finetune::{extract_features, finetune_linear, train_linear, FinetuneOutcome};
pub use pretrain::{pretrain, PretrainOutcome};

pub use crate::io::report::{EvalReport, FoldDetail};

use crate::augment::AugmentError;
use crate::io::manifest::ManifestError;
use crate::loss::LossError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::optim::OptimError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl PipelineError {
    /// True for errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}
