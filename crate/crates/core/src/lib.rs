//! One-shot, training-free second-order pruning for iterative denoisers.
//!
//! The crate builds timestep-weighted Hessians over whole denoising
//! trajectories, prunes layers with Optimal Brain Surgeon updates
//! (unstructured, N:M, FFN neurons, attention heads), and schedules the
//! work in module packages. A small joint-attention denoiser
//! ([`model::ToyModel`]) provides the layer structure everything runs on.

pub mod baselines;
pub mod error;
pub mod evaluate;
pub mod hessian;
pub mod linalg;
pub mod model;
pub mod obs;
pub mod pipeline;
pub mod structured;
pub mod tensor_store;

pub use error::{Error, Result};
pub use hessian::{timestep_weights, HessianAccumulator, InverseFactor, TimestepWeights, WeightScheme};
pub use linalg::Matrix;
pub use model::{gen_calibration, gen_eval_set, init_model, CalibrationSet, LayerId, LayerKind, ModelConfig, ToyModel};
pub use obs::{prune_layer_blocked, prune_row_naive, select_nm_mask, KeepMask, PruneResult, SparsitySpec};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput, PipelineReport};
pub use tensor_store::{read_container, write_container, Container, TensorRecord};
