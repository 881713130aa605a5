//! Sparse tensor completion with JULIA, a hybrid of a CP (multi-linear) term
//! and a gated neural (nonlinear) term per tensor entry:
//!
//! ```text
//! x̂[i_1..i_N] = Σ_r Π_n A_n[i_n, r]  +  f(B_1[i_1], ..., B_N[i_N]; θ)
//! ```
//!
//! Training warm-starts the CP factors, alternates block updates of the two
//! terms, then refines everything jointly with Adam or SGD.

pub mod align;
pub mod cp;
pub mod error;
pub mod head;
pub mod hungarian;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use align::{align_components, AlignmentReport};
pub use cp::{cp_warmstart, CpFactors};
pub use error::{Error, Result};
pub use head::{elementwise_flow, mlp_flow, Activation, NonlinearHead, NonlinearParams};
pub use hungarian::{hungarian, Assignment};
pub use matrix::Matrix;
pub use metrics::{compute_metrics, success_rate, MetricsReport};
pub use model::JuliaModel;
pub use optim::{adam_step, sgd_step, AdamState, OptimizerKind};
pub use synth::{generate, identifiability_experiment, SyntheticSpec};
pub use tensor::{parse_coo, split_dataset, DatasetSplit, ParseOptions, SparseTensor};
pub use train::{ao_initialize, refine, train, train_with_restarts, TrainConfig, TrainReport, Trainer};
