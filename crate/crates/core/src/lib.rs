//! Universal-neuron analysis for GPT-2-style transformers.
//!
//! The pipeline records MLP activations of several independently trained
//! models over a shared corpus, correlates every reference neuron with every
//! neuron of each other model (and with a randomly rotated copy of the
//! target layer as a baseline), labels neurons whose excess correlation
//! exceeds a threshold as universal, tracks how those sets persist across
//! training checkpoints, and ablates them to measure their effect on loss
//! and on the output distribution.

pub mod ablation;
pub mod correlation;
pub mod error;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod synth;
pub mod tensor_io;
pub mod universality;

pub use ablation::{AblationHarness, AblationReport, AblationSpec, Control, Scope};
pub use correlation::{
    excess_table, CorrelationMatrix, ExcessCorrelationTable, MatchScope, MomentAccumulator,
    RotationBaseline,
};
pub use error::{Error, Result};
pub use manifest::RunManifest;
pub use model::{forward, kl_divergence, loss, AblationMask, ForwardOutput, ModelConfig, ModelWeights, NeuronId};
pub use pipeline::{Pipeline, PipelineSummary};
pub use report::write_report;
pub use tensor_io::{ActivationMatrix, TensorArchive, TokenCorpus};
pub use universality::{persistence, select_universal, universality_summary, PairingMode, UniversalSet};
