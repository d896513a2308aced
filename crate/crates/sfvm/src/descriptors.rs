//! Argument descriptor files: a JSON array of per-syscall descriptors.

use std::path::Path;

use anyhow::{Context, Result};
use sfvm_core::snapshot::{ArgDescriptor, DescriptorTable};

/// The descriptor file shipped in `data/`; identical to the builtin table.
pub const BUNDLED: &str = include_str!("../data/descriptors.json");

pub fn parse_descriptors(text: &str) -> Result<DescriptorTable> {
    let descs: Vec<ArgDescriptor> = serde_json::from_str(text).context("malformed descriptor file")?;
    Ok(DescriptorTable::new(descs)?)
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_descriptors(&text).with_context(|| path.display().to_string())
}
