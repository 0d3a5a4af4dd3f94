//! Group-robust adapters for frozen embedding classifiers.
//!
//! Embeddings and prompt sets live in [`embed_store`]; [`adapter`] is the
//! trainable residual MLP; [`losses`] holds the objectives. Trainers are in
//! [`dro`] (label-based baselines) and [`ldro`] (prompt-guided, label-free).
//! [`synth`] generates planted-bias data for experiments and tests.

pub mod adapter;
pub mod dro;
pub mod embed_store;
pub mod error;
pub mod eval;
pub mod ldro;
pub mod losses;
pub mod synth;
pub mod train;

pub use adapter::{AdapterMLP, AdapterSpec, OptimizerKind};
pub use dro::{DroConfig, DroMethod};
pub use embed_store::{EmbeddingMatrix, GroupedDataset, PromptSet};
pub use error::{Error, Result};
pub use eval::{Classifier, EvalReport};
pub use ldro::LdroRun;
pub use losses::LdroConfig;
pub use synth::SynthConfig;
pub use train::{Monitor, TrainOptions, TrainOutcome, TrainReport};
