//! Multi-bit black-box watermarking of small neural models through
//! perturbation-based feature attributions.
//!
//! The owner builds a trigger sample, a mask matrix and a partition of the
//! trigger into basic parts. A ridge surrogate fitted on the model's
//! responses to the masked triggers yields one attribution weight per part;
//! the signs of those weights carry the watermark. Training pushes each sign
//! towards the owner's payload while keeping the benign task intact.

pub mod attacks;
pub mod codec;
pub mod data;
pub mod embedding;
pub mod error;
pub mod extraction;
pub mod graph;
pub mod model;
pub mod model_io;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verification;
pub mod watermark;

pub use data::{Corpus, LabeledSet, TokenCorpus};
pub use error::{Error, Result};
pub use extraction::{Explainer, ExtractedWatermark, MetricMode};
pub use model::{Backend, BlackBox, Model, ModelSpec, PredictOutput, Sample, UNK};
pub use model_io::{load_model, save_model};
pub use optim::OptimizerKind;
pub use tensor::Tensor;
pub use verification::VerificationReport;
pub use watermark::{BasicPartition, MaskScheme, MaskSet, TriggerSample, Watermark};
