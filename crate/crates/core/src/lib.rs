// SPDX-License-Identifier: MIT OR Apache-2.0

//! Jacobian-sparse autoencoder pairs.
//!
//! Two TopK sparse autoencoders are trained on the input and output of a
//! frozen MLP. Besides reconstruction, the training objective penalizes the
//! L1 norm of the Jacobian of the latent-to-latent map
//! `f_s = e_y ∘ f ∘ d_x ∘ τ_k`, whose nonzero entries all live in a `k × k`
//! block that [`jacobian::active_jacobian`] computes in closed form.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod cli;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod jacobian;
pub mod linearity;
pub mod loss;
pub mod mlp;
pub mod sae;
pub mod synthetic;
pub mod trainer;

pub use activations::ActivationKind;
pub use error::{JsaeError, Result};
pub use jacobian::{active_jacobian, full_jacobian_fd, scatter_to_full, ActiveJacobian};
pub use mlp::{mlp_forward, MlpKind, MlpParams};
pub use sae::{init_sae, topk, DeadLatentTracker, SaePair, SaeParams, SparseActivation};
pub use synthetic::{ActivationSource, GroundTruthDictionary, MemorySource, SyntheticSource};
pub use trainer::{train, TrainConfig, TrainOutcome};
pub use eval::{evaluate, EvalReport};
