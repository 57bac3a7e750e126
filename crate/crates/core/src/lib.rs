//! Static-dynamic causal representation learning for evolving domain
//! generalization: synthetic drifting benchmarks, the variational model and
//! its losses, sequential training and inference, and evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod domain_stream;
pub mod error;
pub mod evaluation;
pub mod latent_model;
pub mod nn;
pub mod objectives;
pub mod predictor;
pub mod stochastic;
pub mod trainer;

pub use domain_stream::{Domain, DomainSequence, Sample, SplitSpec};
pub use error::{Error, Result};
pub use latent_model::{CategoricalPosterior, GaussianPosterior, ModelDims, RecurrentState, SyncModel};
pub use stochastic::{KHotMask, NoiseMode};
pub use checkpoint::Checkpoint;
pub use evaluation::MetricReport;
pub use trainer::{HiddenStateBank, TrainConfig};
