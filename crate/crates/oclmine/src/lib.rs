//! Multi-backend DBSCAN and Kmeans.
//!
//! The algorithms themselves live in `oclmine-core`; this crate adds the
//! runtime pieces: a reentrant writer-preferring lock and cancellation token,
//! a thread-pool backend, an OpenCL runtime loader with a GPU backend on top,
//! and the benchmark harness behind the `oclmine` binary.

pub mod bench;
pub mod concur;
pub mod gpubackend;
pub mod oclloader;
pub mod parbackend;
pub mod timing;
