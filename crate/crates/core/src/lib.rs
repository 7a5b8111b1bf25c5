//! Online test-time adaptation of a frozen classifier.
//!
//! The engine keeps a pseudo-labeled support set of past test features and
//! trains an ensemble of small adaptation modules so that each test point's
//! prototype-based prediction agrees with the votes of its nearest support
//! neighbors. A batch-normalization variant, frozen-backbone baselines and a
//! synthetic benchmark harness round it out.

pub mod adapter;
pub mod bench;
pub mod cli;
pub mod error;
pub mod head;
pub mod io;
pub mod mathcore;
pub mod supportset;
pub mod tast;
pub mod tastbn;

pub use error::{Error, Result};
pub use head::LinearHead;
pub use mathcore::{Distribution, RngSeed};
pub use supportset::{EntryId, Neighbor, NeighborList, SupportEntry, SupportMode, SupportSet};
pub use adapter::{AdapterGradients, EnsembleAdapter, Prototypes};
pub use tast::{TastConfig, TastEngine};
pub use tastbn::{TastBnConfig, TastBnEngine, ToyBNExtractor};
