// SPDX-License-Identifier: Apache-2.0

//! Stateful syscall filtering engine.
//!
//! Filters are written in a small eBPF-like bytecode, checked by a static
//! verifier and run by an interpreter on every simulated syscall. Around that
//! sit the control plane (load, install, chaining), argument snapshots for
//! TOCTTOU-safe inspection, a deterministic multi-task simulator and policy
//! generators.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

use core::fmt;

use serde::{Deserialize, Serialize};

pub mod action;
pub mod asm;
pub mod checkpoint;
pub mod context;
pub mod digest;
pub mod engine;
pub mod format;
pub mod isa;
pub mod maps;
pub mod memory;
pub mod policy;
pub mod program;
pub mod sim;
pub mod snapshot;
pub mod store;
pub mod sysno;
pub mod verifier;
pub mod vm;

/// Simulated task id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tid(pub u32);

/// User namespace id. Namespace 0 is the initial namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NsId(pub u32);

impl NsId {
    pub const INIT: NsId = NsId(0);
}

/// Loaded program handle, the simulated program fd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgId(pub u32);

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
