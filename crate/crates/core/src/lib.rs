//! Allocation-only core of the oclmine clustering benchmark.
//!
//! Everything here is a pure function of its inputs: the synthetic Gaussian
//! data generator, the 16-bit per-point DBSCAN state word, the non-recursive
//! DBSCAN traversal and the Lloyd Kmeans loop. The traversal and the Lloyd
//! loop are written once and driven through small traits
//! ([`dbscan::RegionQuery`], [`kmeans::Assigner`]) so that the single-threaded,
//! multithreaded and OpenCL backends share the exact same control flow and
//! therefore produce bitwise-identical labels.
//!
//! Cancellation is polled through the [`Cancel`] trait; the blocking
//! reader/writer-lock token lives in the `std` companion crate.

#![no_std]

extern crate alloc;

pub mod cancel;
pub mod datagen;
pub mod dataset;
pub mod dbscan;
pub mod error;
pub mod exact;
pub mod kmeans;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod params;
pub mod partition;
pub mod seed;
pub mod state;
pub mod stats;

pub use cancel::{Cancel, Never};
pub use datagen::{generate, DatasetSpec, Generated};
pub use dataset::{squared_distance, Dataset, GroundTruth};
pub use dbscan::{dbscan_single, dbscan_with, region_query, QueryPhase, RegionQuery};
pub use error::{ClusterError, DataError};
pub use kmeans::{kmeans_single, KmeansInit, KmeansResult};
pub use params::{DbscanParams, KmeansParams};
pub use partition::partition;
pub use state::PointState;
