//! Tiny cell-based CNNs trained from scratch, with the proxy metrics and
//! search procedures used to rank architectures without full training.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and SGD.
//! - [`space`]: the 4-node/6-edge cell space, networks and the pruning supernet.
//! - [`data`]: CIFAR binary ingestion, synthetic data and proxy subsampling.
//! - [`trainer`]: the short-training scheme producing weight snapshots.
//! - [`metrics`]: #Param, linear regions, NTK condition, angle and loss scores.
//! - [`search`]: rank aggregation, random search and pruning search.
//! - [`stats`]: Kendall's tau, same-#Param groups, oracle training, correlation reports.
//! - [`harness`]: manifests, CSV formats and the experiment commands.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod search;
pub mod seed;
pub mod space;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
