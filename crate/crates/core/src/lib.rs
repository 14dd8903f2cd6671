//! Federated unlearning for drone networks.
//!
//! Clients learn on their data and, when asked to forget samples, train a
//! separate unlearning model on randomly relabelled copies of them. The
//! server blends the two and selectively prunes weights that matter to the
//! unlearning model but not to the learning one. Upload and compute times
//! follow an air-to-ground channel model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod pruning;
pub mod seed;

pub use channel::{ChannelParams, ComputeModel, LinkBudget, Position};
pub use dataset::{ClientSplit, Dataset, PartitionScheme, PartitionSpec, UnlearnTarget};
pub use error::{Error, Result};
pub use federation::{RoundRecord, RunOutcome};
pub use harness::config::{Arm, DataSource, ExperimentConfig};
pub use harness::{Axis, MetricsRow, CSV_HEADER};
pub use nn::{Activation, Matrix, Mlp, ModelSpec, ParamVector, SgdConfig, Tensor};
pub use pruning::{MaskOptions, MaskScope, PruneMask, SparsePayload};
