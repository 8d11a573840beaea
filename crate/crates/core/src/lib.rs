//! Retention-aware multi-rate DRAM refresh.
//!
//! Rows are binned by profiled retention time, each non-default bin is
//! stored in a Bloom filter, and the controller refreshes each row at its
//! bin's interval. The crate models the retention population (including
//! variable retention time and data pattern dependence), the profiler that
//! measures it, the binning and refresh schedule, a closed-loop simulation
//! that counts retention failures, and the analytic refresh overhead as a
//! function of chip density.

pub mod bloom;
pub mod cli;
pub mod config;
pub mod error;
pub mod overhead;
pub mod profiler;
pub mod raidr;
pub mod retention;
pub mod rng;
pub mod selftest;
pub mod simulate;

pub use error::{Error, Result};
