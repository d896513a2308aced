//! File formats, generator specs, scenarios and reports on top of
//! `sfvm-core`. The `sfvm` binary is a thin clap wrapper over this crate.

pub mod descriptors;
pub mod filter;
pub mod profile;
pub mod report;
pub mod scenario;
pub mod trace;

pub use sfvm_core as core;
