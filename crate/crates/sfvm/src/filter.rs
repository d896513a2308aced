//! Filter sources: assembly text, SFVM binaries, and JSON generator specs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sfvm_core::action::ResolvedAction;
use sfvm_core::asm::assemble_bundle;
use sfvm_core::format::{decode_bundle, MAGIC};
use sfvm_core::policy::{
    self, ArgMatch, ArgRule, CountLimitSpec, DracoCheck, DracoSpec, ListStyle, PhaseProfile, PolicyOptions,
    RateLimitSpec, SfipSpec,
};
use sfvm_core::program::ProgramBundle;
use sfvm_core::sim::Nr;
use sfvm_core::verifier::{verify, VerifierConfig};

pub fn nr(n: &Nr) -> Result<i32> {
    n.resolve().ok_or_else(|| anyhow!("unknown syscall {n:?}"))
}

fn nrs(list: &[Nr]) -> Result<Vec<i32>> {
    list.iter().map(nr).collect()
}

fn linear() -> ListStyle {
    ListStyle::Linear
}

/// A filter described by the generator that builds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterSpec {
    Allowlist {
        syscalls: Vec<Nr>,
        #[serde(default = "linear")]
        style: ListStyle,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    Denylist {
        syscalls: Vec<Nr>,
        #[serde(default = "linear")]
        style: ListStyle,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    CountLimit {
        nr: Nr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arg: Option<ArgMatch>,
        max_count: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    RateLimit {
        nr: Nr,
        capacity: u64,
        refill_per_sec: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    Sfip {
        syscalls: Vec<Nr>,
        /// Allowed `[from, to]` transitions.
        transitions: Vec<(Nr, Nr)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<Vec<Nr>>,
        /// Syscall name or number to valid calling addresses.
        #[serde(default)]
        origins: BTreeMap<String, Vec<u64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    Temporal {
        s_init: Vec<Nr>,
        s_serv: Vec<Nr>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase_marker_nr: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    Serialization {
        pairs: Vec<(Nr, Nr)>,
        /// Free map slots for pairs added at runtime.
        #[serde(default)]
        spare: usize,
    },
    Draco {
        checks: Vec<DracoCheckSpec>,
        #[serde(default = "yes")]
        cached: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deny: Option<u32>,
    },
    /// Inline assembly.
    Asm { source: String },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DracoCheckSpec {
    pub nr: Nr,
    #[serde(default)]
    pub rules: Vec<ArgRule>,
}

fn options(deny: Option<u32>) -> PolicyOptions {
    match deny {
        Some(raw) => PolicyOptions {
            deny: ResolvedAction::from_raw(raw),
        },
        None => PolicyOptions::default(),
    }
}

fn origin_key(k: &str) -> Result<i32> {
    match k.parse::<i32>() {
        Ok(n) => Ok(n),
        Err(_) => nr(&Nr::Name(k.to_string())),
    }
}

impl FilterSpec {
    /// Generates and verifies the filter.
    pub fn build(&self) -> Result<ProgramBundle> {
        let bundle = match self {
            FilterSpec::Allowlist { syscalls, style, deny } => {
                let set: BTreeSet<i32> = nrs(syscalls)?.into_iter().collect();
                policy::gen_allowlist(&set, *style, &options(*deny))?
            }
            FilterSpec::Denylist { syscalls, style, deny } => {
                let set: BTreeSet<i32> = nrs(syscalls)?.into_iter().collect();
                policy::gen_denylist(&set, *style, &options(*deny))?
            }
            FilterSpec::CountLimit {
                nr: n,
                arg,
                max_count,
                deny,
            } => policy::gen_count_limit(
                &CountLimitSpec {
                    nr: nr(n)?,
                    arg: *arg,
                    max_count: *max_count,
                },
                &options(*deny),
            )?,
            FilterSpec::RateLimit {
                nr: n,
                capacity,
                refill_per_sec,
                deny,
            } => policy::gen_rate_limit(
                &RateLimitSpec {
                    nr: nr(n)?,
                    capacity: *capacity,
                    refill_per_sec: *refill_per_sec,
                },
                &options(*deny),
            )?,
            FilterSpec::Sfip {
                syscalls,
                transitions,
                start,
                origins,
                deny,
            } => {
                let calls = nrs(syscalls)?;
                let trans = transitions
                    .iter()
                    .map(|(a, b)| Ok((nr(a)?, nr(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                for (a, b) in &trans {
                    if !calls.contains(a) || !calls.contains(b) {
                        bail!("transition {a} -> {b} names a syscall outside the index list");
                    }
                }
                let mut spec = SfipSpec::from_transitions(&calls, &trans);
                spec.start = start.as_deref().map(nrs).transpose()?;
                for (k, addrs) in origins {
                    spec.origins.insert(origin_key(k)?, addrs.clone());
                }
                policy::gen_sfip(&spec, &options(*deny))?
            }
            FilterSpec::Temporal {
                s_init,
                s_serv,
                phase_marker_nr,
                deny,
            } => {
                let p = PhaseProfile {
                    name: String::new(),
                    s_init: nrs(s_init)?.into_iter().collect(),
                    s_serv: nrs(s_serv)?.into_iter().collect(),
                    phase_marker_nr: phase_marker_nr.unwrap_or(sfvm_core::sysno::PHASE_MARKER),
                };
                policy::gen_temporal(&p, &options(*deny))?
            }
            FilterSpec::Serialization { pairs, spare } => {
                let pairs = pairs
                    .iter()
                    .map(|(a, b)| Ok((nr(a)?, nr(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                policy::gen_serialization(&pairs, *spare)?
            }
            FilterSpec::Draco { checks, cached, deny } => {
                let spec = DracoSpec {
                    checks: checks
                        .iter()
                        .map(|c| {
                            Ok(DracoCheck {
                                nr: nr(&c.nr)?,
                                rules: c.rules.clone(),
                            })
                        })
                        .collect::<Result<_>>()?,
                };
                policy::gen_draco(&spec, *cached, &options(*deny))?
            }
            FilterSpec::Asm { source } => {
                let mut b = assemble_bundle(source)?;
                verify_bundle(&mut b)?;
                b
            }
        };
        Ok(bundle)
    }
}

/// Verifies every program of `bundle` with the default configuration.
pub fn verify_bundle(bundle: &mut ProgramBundle) -> Result<()> {
    let cfg = VerifierConfig::default();
    for p in bundle.programs.iter_mut() {
        let r = verify(p, &cfg);
        if !r.accepted {
            bail!("program `{}` rejected: {}", p.name, r.reason);
        }
    }
    Ok(())
}

/// Reads a filter file. SFVM binaries are recognised by their magic, `.json`
/// files are generator specs, anything else is assembly.
pub fn parse_filter(bytes: &[u8], json: bool) -> Result<ProgramBundle> {
    if bytes.starts_with(MAGIC) {
        return Ok(decode_bundle(bytes)?);
    }
    let text = std::str::from_utf8(bytes).context("filter is neither SFVM binary nor UTF-8 text")?;
    if json {
        let spec: FilterSpec = serde_json::from_str(text).context("malformed generator spec")?;
        return spec.build();
    }
    Ok(assemble_bundle(text)?)
}

/// Loads a filter and names it after the file stem, the name traces use.
pub fn load_filter(path: &Path) -> Result<(String, ProgramBundle)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let json = path.extension().is_some_and(|e| e == "json");
    let bundle = parse_filter(&bytes, json).with_context(|| path.display().to_string())?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("{}: no usable file name", path.display()))?
        .to_string();
    Ok((name, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse_and_build() {
        let specs = [
            r#"{"generator":"allowlist","syscalls":["read","write",39],"style":"hashmap"}"#,
            r#"{"generator":"denylist","syscalls":["execve"]}"#,
            r#"{"generator":"count_limit","nr":"keyctl","arg":{"index":0,"value":1},"max_count":2}"#,
            r#"{"generator":"rate_limit","nr":"read","capacity":4,"refill_per_sec":2}"#,
            r#"{"generator":"sfip","syscalls":["socket","read"],"transitions":[["socket","read"]],"origins":{"read":[4096]}}"#,
            r#"{"generator":"temporal","s_init":["read"],"s_serv":["write"]}"#,
            r#"{"generator":"serialization","pairs":[["mremap","ftruncate"]],"spare":1}"#,
            r#"{"generator":"draco","checks":[{"nr":"write","rules":[{"arg":0,"allowed":[1,2]}]}]}"#,
            r#"{"generator":"asm","source":"ld_imm64 r0, 0x7fff0000\nexit"}"#,
        ];
        for s in specs {
            let b = parse_filter(s.as_bytes(), true).unwrap_or_else(|e| panic!("{s}: {e:#}"));
            assert!(b.programs.iter().all(|p| p.verified), "{s}");
        }
        assert!(parse_filter(br#"{"generator":"sfip","syscalls":["read"],"transitions":[["read","open"]]}"#, true).is_err());
        assert!(parse_filter(br#"{"generator":"allowlist","syscalls":["nope"]}"#, true).is_err());
    }

    #[test]
    fn binary_and_text_agree() {
        let src = b"ld_imm64 r0, 0x7fff0000\nexit\n";
        let text = parse_filter(src, false).unwrap();
        let bin = sfvm_core::format::encode_bundle(&text);
        assert_eq!(parse_filter(&bin, false).unwrap().programs[0].instructions, text.programs[0].instructions);
    }
}
