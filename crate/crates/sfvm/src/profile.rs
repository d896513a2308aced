//! Phase-profile files and the attack-surface table.

use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sfvm_core::policy::PhaseProfile;
use sfvm_core::sim::Nr;

use crate::filter::nr;

/// The six-application profile file shipped in `data/`.
pub const BUNDLED: &str = include_str!("../data/profiles.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub applications: Vec<AppProfile>,
}

/// An application either lists its phase sets or only their sizes, in which
/// case members are synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AppProfile {
    Sets {
        name: String,
        s_init: Vec<Nr>,
        s_serv: Vec<Nr>,
    },
    Sizes {
        name: String,
        init: usize,
        serv: usize,
        comm: usize,
    },
}

impl AppProfile {
    pub fn name(&self) -> &str {
        match self {
            AppProfile::Sets { name, .. } | AppProfile::Sizes { name, .. } => name,
        }
    }

    pub fn to_profile(&self) -> Result<PhaseProfile> {
        match self {
            AppProfile::Sets { name, s_init, s_serv } => Ok(PhaseProfile {
                name: name.clone(),
                s_init: s_init.iter().map(nr).collect::<Result<_>>()?,
                s_serv: s_serv.iter().map(nr).collect::<Result<_>>()?,
                phase_marker_nr: sfvm_core::sysno::PHASE_MARKER,
            }),
            AppProfile::Sizes { name, init, serv, comm } => {
                Ok(PhaseProfile::synthesize(name, *init, *serv, *comm).with_context(|| name.clone())?)
            }
        }
    }
}

pub fn parse_profiles(text: &str) -> Result<Vec<PhaseProfile>> {
    let file: ProfileFile = serde_json::from_str(text).context("malformed profile file")?;
    if file.applications.is_empty() {
        bail!("profile file lists no applications");
    }
    file.applications.iter().map(AppProfile::to_profile).collect()
}

pub fn load_profiles(path: &Path) -> Result<Vec<PhaseProfile>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_profiles(&text).with_context(|| path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub application: String,
    pub init: usize,
    pub serv: usize,
    pub comm: usize,
    pub union: usize,
    /// Percent of the union not needed during initialization.
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTable {
    pub rows: Vec<SurfaceRow>,
    pub warnings: Vec<String>,
}

pub fn attack_surface(profiles: &[PhaseProfile]) -> SurfaceTable {
    let mut warnings = Vec::new();
    let rows = profiles
        .iter()
        .map(|p| {
            if p.s_serv.is_empty() {
                warnings.push(format!("{}: empty serving set, reduction is 0%", p.name));
            }
            SurfaceRow {
                application: p.name.clone(),
                init: p.s_init.len(),
                serv: p.s_serv.len(),
                comm: p.s_comm().len(),
                union: p.union_size(),
                reduction_pct: p.reduction(),
            }
        })
        .collect();
    SurfaceTable { rows, warnings }
}

impl SurfaceTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>10}",
            "application", "init", "serv", "comm", "union", "reduction"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>6} {:>6} {:>6} {:>9.1}%",
                r.application, r.init, r.serv, r.comm, r.union, r.reduction_pct
            );
        }
        out
    }
}
