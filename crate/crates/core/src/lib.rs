//! Constant-student collapse certificate for teacher-guided VAEs.
//!
//! A teacher `T(x)` over `K` classes has mutual information `I_T`. Any
//! witness head `S(z)` whose alignment cost `E_x KL(T_x ‖ S_x)` falls below
//! `I_T` cannot be constant in `x`, so the latent pathway it reads has not
//! collapsed. This crate computes that certificate and trains the models
//! it is evaluated on.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod prob;
pub mod rng;
pub mod teacher;
pub mod trainer;
pub mod vae;

pub use autodiff::Tensor;
pub use checkpoint::Checkpoint;
pub use data::{Dataset, MixtureSpec};
pub use error::{Error, Result};
pub use metrics::{CertificateReport, TargetKind};
pub use prob::{AssignmentMatrix, MarginReport, SimplexVector};
pub use rng::Rng;
pub use teacher::{GmmTeacher, TargetCache};
pub use trainer::{Mode, RunConfig, Targets};
pub use vae::{Dims, ModelParams};
