// SPDX-License-Identifier: Apache-2.0

//! Policy generators. Each one writes assembly, assembles it and runs the
//! verifier, so every returned bundle is ready to load.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ResolvedAction, EPERM, SECCOMP_RET_ALLOW};
use crate::asm::{assemble_bundle, AsmError};
use crate::program::ProgramBundle;
use crate::sysno;
use crate::verifier::{verify, VerifierConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("generated source does not assemble: {0}")]
    Asm(#[from] AsmError),
    #[error("generated program `{name}` rejected: {reason}")]
    Rejected { name: String, reason: String },
}

pub type Result<T> = core::result::Result<T, PolicyError>;

fn spec_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PolicyError::Spec(msg.into()))
}

/// Options shared by all generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyOptions {
    pub deny: ResolvedAction,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions {
            deny: ResolvedAction::errno(EPERM),
        }
    }
}

/// Assembles and verifies generated source.
pub fn finish(src: &str) -> Result<ProgramBundle> {
    let mut bundle = assemble_bundle(src)?;
    let cfg = VerifierConfig::default();
    for p in bundle.programs.iter_mut() {
        let report = verify(p, &cfg);
        if !report.accepted {
            return Err(PolicyError::Rejected {
                name: p.name.clone(),
                reason: report.reason,
            });
        }
    }
    Ok(bundle)
}

/// `allow:` and `deny:` exits.
fn tails(src: &mut String, opts: &PolicyOptions) {
    let _ = write!(
        src,
        "allow: ld_imm64 r0, {SECCOMP_RET_ALLOW:#x}\nexit\ndeny: ld_imm64 r0, {:#x}\nexit\n",
        opts.deny.raw
    );
}

fn ctx_arg(i: usize) -> usize {
    16 + 8 * i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListStyle {
    /// One comparison per entry, in order.
    Linear,
    /// Balanced comparison tree over the sorted entries.
    Binary,
    /// One hash-map lookup.
    Hashmap,
}

impl ListStyle {
    pub const ALL: [ListStyle; 3] = [ListStyle::Linear, ListStyle::Binary, ListStyle::Hashmap];
}

/// What list membership means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListMode {
    Allow,
    Deny,
}

fn binary_tree(src: &mut String, nrs: &[i32], hit: &str, miss: &str, label: &mut usize) {
    if nrs.len() <= 3 {
        for n in nrs {
            let _ = writeln!(src, "jeq r6, {n}, {hit}");
        }
        let _ = writeln!(src, "ja {miss}");
        return;
    }
    let mid = nrs.len() / 2;
    *label += 1;
    let right = format!("t{label}");
    let _ = writeln!(src, "jge r6, {}, {right}", nrs[mid]);
    binary_tree(src, &nrs[..mid], hit, miss, label);
    let _ = writeln!(src, "{right}:");
    binary_tree(src, &nrs[mid..], hit, miss, label);
}

pub fn list_source(set: &BTreeSet<i32>, style: ListStyle, mode: ListMode, opts: &PolicyOptions) -> Result<String> {
    if set.is_empty() {
        return spec_err("syscall set is empty");
    }
    let (hit, miss) = match mode {
        ListMode::Allow => ("allow", "deny"),
        ListMode::Deny => ("deny", "allow"),
    };
    let mut src = String::new();
    match style {
        ListStyle::Linear => {
            src.push_str("ld_ctx r6, 4, 0\n");
            for n in set {
                let _ = writeln!(src, "jeq r6, {n}, {hit}");
            }
            let _ = writeln!(src, "ja {miss}");
        }
        ListStyle::Binary => {
            src.push_str("ld_ctx r6, 4, 0\n");
            let sorted: Vec<i32> = set.iter().copied().collect();
            binary_tree(&mut src, &sorted, hit, miss, &mut 0);
        }
        ListStyle::Hashmap => {
            let _ = writeln!(src, "map set hash 4 8 {}", set.len());
            for n in set {
                let _ = writeln!(src, "entry set {n} 1");
            }
            let _ = writeln!(
                src,
                "mov r1, @set\nld_ctx r2, 4, 0\ncall map_lookup_elem\njne r0, 0, {hit}\nja {miss}"
            );
        }
    }
    tails(&mut src, opts);
    Ok(src)
}

/// Allows exactly `set`.
pub fn gen_allowlist(set: &BTreeSet<i32>, style: ListStyle, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&list_source(set, style, ListMode::Allow, opts)?)
}

/// Denies exactly `set`.
pub fn gen_denylist(set: &BTreeSet<i32>, style: ListStyle, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&list_source(set, style, ListMode::Deny, opts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgMatch {
    pub index: usize,
    pub value: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountLimitSpec {
    pub nr: i32,
    /// Only calls with this argument value count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<ArgMatch>,
    pub max_count: u64,
}

pub fn count_limit_source(spec: &CountLimitSpec, opts: &PolicyOptions) -> Result<String> {
    let mut src = String::from("map counter array 4 8 1\n");
    let _ = writeln!(src, "ld_ctx r6, 4, 0\njne r6, {}, allow", spec.nr);
    if let Some(a) = spec.arg {
        if a.index >= 6 {
            return spec_err(format!("argument index {} out of range", a.index));
        }
        let _ = writeln!(src, "ld_ctx r7, 8, {}\njne r7, {}, allow", ctx_arg(a.index), a.value);
    }
    let _ = writeln!(
        src,
        "mov r1, @counter\nmov r2, 0\ncall map_lookup_elem\njeq r0, 0, deny\n\
         ld_map r7, r0, 0\njge r7, {}, deny\nadd r7, 1\nst_map r0, r7, 0\nja allow",
        spec.max_count
    );
    tails(&mut src, opts);
    Ok(src)
}

/// Allows the first `max_count` matching calls and denies the rest.
pub fn gen_count_limit(spec: &CountLimitSpec, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&count_limit_source(spec, opts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RateLimitSpec {
    pub nr: i32,
    pub capacity: u64,
    pub refill_per_sec: u64,
}

const NANO: u64 = 1_000_000_000;

/// Token bucket. The map cell holds `[deficit, last_ns]`, where the
/// deficit counts consumed tokens in units of 1e-9 tokens; a zero cell is
/// a full bucket.
pub fn rate_limit_source(spec: &RateLimitSpec, opts: &PolicyOptions) -> Result<String> {
    if spec.capacity == 0 || spec.refill_per_sec == 0 {
        return spec_err("capacity and refill must be positive");
    }
    let full = spec.capacity.checked_mul(NANO).ok_or(PolicyError::Spec("capacity too large".into()))?;
    // beyond this many ns the bucket is full again; also keeps the multiply in range
    let horizon = full / spec.refill_per_sec + 1;
    let mut src = String::from("map bucket array 4 16 1\n");
    let _ = writeln!(
        src,
        "ld_ctx r6, 4, 0\njne r6, {nr}, allow\n\
         mov r1, @bucket\nmov r2, 0\ncall map_lookup_elem\njeq r0, 0, deny\nmov r9, r0\n\
         call ktime_get_ns\nmov r8, r0\n\
         ld_map r6, r9, 0\nld_map r7, r9, 8\n\
         mov r5, r8\nsub r5, r7\njgt r5, {horizon}, refilled\nmul r5, {rate}\njge r5, r6, refilled\n\
         sub r6, r5\nja take\n\
         refilled: mov r6, 0\n\
         take: st_map r9, r8, 8\nmov r4, r6\nadd r4, {NANO}\njgt r4, {full}, empty\n\
         st_map r9, r4, 0\nja allow\n\
         empty: st_map r9, r6, 0\nja deny",
        nr = spec.nr,
        rate = spec.refill_per_sec,
    );
    tails(&mut src, opts);
    Ok(src)
}

pub fn gen_rate_limit(spec: &RateLimitSpec, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&rate_limit_source(spec, opts)?)
}

/// Syscall-flow integrity: a transition matrix over `syscalls` plus
/// per-syscall calling-address sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SfipSpec {
    pub syscalls: Vec<i32>,
    /// `matrix[i][j]`: syscall j may follow syscall i.
    pub matrix: Vec<Vec<bool>>,
    /// Syscalls allowed as the first one; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<i32>>,
    /// Valid calling addresses. Syscalls without an entry may come from
    /// anywhere.
    #[serde(default)]
    pub origins: BTreeMap<i32, Vec<u64>>,
}

const ORIGIN_ANY: u64 = (1 << 48) - 1;

impl SfipSpec {
    pub fn from_transitions(syscalls: &[i32], allowed: &[(i32, i32)]) -> Self {
        let n = syscalls.len();
        let mut matrix = alloc::vec![alloc::vec![false; n]; n];
        let pos = |s: i32| syscalls.iter().position(|x| *x == s);
        for &(a, b) in allowed {
            if let (Some(i), Some(j)) = (pos(a), pos(b)) {
                matrix[i][j] = true;
            }
        }
        SfipSpec {
            syscalls: syscalls.to_vec(),
            matrix,
            start: None,
            origins: BTreeMap::new(),
        }
    }

    fn index(&self, nr: i32) -> Option<usize> {
        self.syscalls.iter().position(|s| *s == nr)
    }

    fn validate(&self) -> Result<()> {
        let n = self.syscalls.len();
        if n == 0 {
            return spec_err("no syscalls");
        }
        let distinct: BTreeSet<i32> = self.syscalls.iter().copied().collect();
        if distinct.len() != n {
            return spec_err("duplicate syscall in index list");
        }
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return spec_err(format!("matrix must be {n} x {n}"));
        }
        for s in self.start.iter().flatten().chain(self.origins.keys()) {
            if self.index(*s).is_none() {
                return spec_err(format!("syscall {s} is not in the index list"));
            }
        }
        if self.origins.values().flatten().any(|a| *a >= ORIGIN_ANY) {
            return spec_err("calling addresses must fit in 48 bits");
        }
        Ok(())
    }
}

pub fn sfip_source(spec: &SfipSpec, opts: &PolicyOptions) -> Result<String> {
    spec.validate()?;
    let n = spec.syscalls.len();
    let mut src = String::new();
    let _ = writeln!(src, "map idx hash 4 8 {n}");
    let norigins = n + spec.origins.values().map(Vec::len).sum::<usize>();
    let _ = writeln!(src, "map origin hash 8 8 {norigins}");
    src.push_str("map state array 4 8 1\n");
    // row 0 is the start state, row i+1 follows syscall i
    let _ = writeln!(src, "map trans array 4 8 {}", (n + 1) * n);
    for (i, s) in spec.syscalls.iter().enumerate() {
        let _ = writeln!(src, "entry idx {s} {i}");
        let key = (i as u64) << 48;
        match spec.origins.get(s) {
            Some(addrs) => {
                for a in addrs {
                    let _ = writeln!(src, "entry origin {:#x} 1", key | a);
                }
            }
            None => {
                let _ = writeln!(src, "entry origin {:#x} 1", key | ORIGIN_ANY);
            }
        }
        let first = spec.start.as_ref().is_none_or(|st| st.contains(s));
        if first {
            let _ = writeln!(src, "entry trans {i} 1");
        }
    }
    for (i, row) in spec.matrix.iter().enumerate() {
        for (j, ok) in row.iter().enumerate() {
            if *ok {
                let _ = writeln!(src, "entry trans {} 1", (i + 1) * n + j);
            }
        }
    }
    let _ = writeln!(
        src,
        "ld_ctx r6, 4, 0\nmov r1, @idx\nmov r2, r6\ncall map_lookup_elem\njeq r0, 0, deny\nld_map r7, r0, 0\n\
         mov r6, r7\nlsh r6, 48\nld_ctx r2, 8, 8\nor r2, r6\nmov r1, @origin\ncall map_lookup_elem\njne r0, 0, origin_ok\n\
         mov r2, r6\nor r2, {ORIGIN_ANY:#x}\nmov r1, @origin\ncall map_lookup_elem\njeq r0, 0, deny\n\
         origin_ok: mov r1, @state\nmov r2, 0\ncall map_lookup_elem\njeq r0, 0, deny\nmov r9, r0\n\
         ld_map r8, r9, 0\nmul r8, {n}\nadd r8, r7\n\
         mov r1, @trans\nmov r2, r8\ncall map_lookup_elem\njeq r0, 0, deny\nld_map r6, r0, 0\njeq r6, 0, deny\n\
         add r7, 1\nst_map r9, r7, 0\nja allow"
    );
    tails(&mut src, opts);
    Ok(src)
}

pub fn gen_sfip(spec: &SfipSpec, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&sfip_source(spec, opts)?)
}

/// Syscall sets of a program's initialization and serving phases.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub name: String,
    pub s_init: BTreeSet<i32>,
    pub s_serv: BTreeSet<i32>,
    #[serde(default = "default_marker")]
    pub phase_marker_nr: i32,
}

fn default_marker() -> i32 {
    sysno::PHASE_MARKER
}

impl PhaseProfile {
    pub fn s_comm(&self) -> BTreeSet<i32> {
        self.s_init.intersection(&self.s_serv).copied().collect()
    }

    pub fn union(&self) -> BTreeSet<i32> {
        self.s_init.union(&self.s_serv).copied().collect()
    }

    pub fn union_size(&self) -> usize {
        self.s_init.len() + self.s_serv.len() - self.s_comm().len()
    }

    /// Share of the union the initialization phase no longer needs, in percent.
    pub fn reduction(&self) -> f64 {
        let u = self.union_size();
        if u == 0 {
            return 0.0;
        }
        (u - self.s_init.len()) as f64 / u as f64 * 100.0
    }

    /// Profile with the given set sizes. Members are synthetic: the shared
    /// syscalls come first from 0 upwards, then init-only, then serve-only.
    pub fn synthesize(name: &str, init: usize, serv: usize, comm: usize) -> Result<PhaseProfile> {
        if comm > init || comm > serv {
            return spec_err("common set larger than a phase set");
        }
        let total = init + serv - comm;
        if total > sysno::MAX_NR as usize {
            return spec_err("profile larger than the syscall table");
        }
        let comm_set = 0..comm as i32;
        let init_only = comm as i32..init as i32;
        let serv_only = init as i32..total as i32;
        Ok(PhaseProfile {
            name: name.into(),
            s_init: comm_set.clone().chain(init_only).collect(),
            s_serv: comm_set.chain(serv_only).collect(),
            phase_marker_nr: sysno::PHASE_MARKER,
        })
    }
}

pub fn temporal_source(p: &PhaseProfile, opts: &PolicyOptions) -> Result<String> {
    if p.s_init.contains(&p.phase_marker_nr) || p.s_serv.contains(&p.phase_marker_nr) {
        return spec_err("phase marker must not be a regular member");
    }
    let mut src = String::from("map phase array 4 8 1\n");
    let _ = writeln!(src, "map init hash 4 8 {}", p.s_init.len().max(1));
    let _ = writeln!(src, "map serv hash 4 8 {}", p.s_serv.len().max(1));
    for n in &p.s_init {
        let _ = writeln!(src, "entry init {n} 1");
    }
    for n in &p.s_serv {
        let _ = writeln!(src, "entry serv {n} 1");
    }
    let _ = writeln!(
        src,
        "ld_ctx r6, 4, 0\nmov r1, @phase\nmov r2, 0\ncall map_lookup_elem\njeq r0, 0, deny\nmov r9, r0\n\
         ld_map r7, r9, 0\njne r7, 0, serving\n\
         jne r6, {marker}, initializing\nmov r8, 1\nst_map r9, r8, 0\nja allow\n\
         initializing: mov r1, @init\nmov r2, r6\ncall map_lookup_elem\njeq r0, 0, deny\nja allow\n\
         serving: mov r1, @serv\nmov r2, r6\ncall map_lookup_elem\njeq r0, 0, deny\nja allow",
        marker = p.phase_marker_nr
    );
    tails(&mut src, opts);
    Ok(src)
}

/// One stateful filter: s_init until the phase marker, s_serv afterwards.
pub fn gen_temporal(p: &PhaseProfile, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&temporal_source(p, opts)?)
}

/// Partners a syscall can hold in the serialization map.
pub const MAX_PARTNERS: usize = 4;

/// Map value listing a syscall's partners: four 16-bit slots holding
/// `partner + 1`, zero for unused.
pub fn serialization_value(partners: &[i32]) -> Result<u64> {
    if partners.len() > MAX_PARTNERS {
        return spec_err(format!("at most {MAX_PARTNERS} partners per syscall"));
    }
    let mut v = 0u64;
    for (i, p) in partners.iter().enumerate() {
        if !(0..0xffff).contains(p) {
            return spec_err(format!("syscall {p} does not fit a partner slot"));
        }
        v |= ((*p as u64) + 1) << (16 * i);
    }
    Ok(v)
}

/// Partner lists from unordered pairs.
pub fn partner_table(pairs: &[(i32, i32)]) -> BTreeMap<i32, Vec<i32>> {
    let mut t: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
    for &(a, b) in pairs {
        for (x, y) in [(a, b), (b, a)] {
            let e = t.entry(x).or_default();
            if !e.contains(&y) {
                e.push(y);
            }
        }
    }
    t
}

/// Serializes racy pairs. `spare` reserves map room for pairs added at
/// runtime.
pub fn serialization_source(pairs: &[(i32, i32)], spare: usize) -> Result<String> {
    let table = partner_table(pairs);
    let mut src = String::from("section seccomp-sleepable serialize\n");
    let _ = writeln!(src, "map pairs hash 4 8 {}", (table.len() + spare).max(1));
    for (nr, partners) in &table {
        let _ = writeln!(src, "entry pairs {nr} {:#x}", serialization_value(partners)?);
    }
    src.push_str("ld_ctx r6, 4, 0\nmov r1, @pairs\nmov r2, r6\ncall map_lookup_elem\njeq r0, 0, allow\nld_map r7, r0, 0\n");
    for _ in 0..MAX_PARTNERS {
        src.push_str(
            "mov r2, r7\nand r2, 0xffff\njeq r2, 0, allow\nsub r2, 1\nmov r1, r6\ncall wait_syscall\nrsh r7, 16\n",
        );
    }
    src.push_str("ja allow\n");
    tails(&mut src, &PolicyOptions::default());
    Ok(src)
}

pub fn gen_serialization(pairs: &[(i32, i32)], spare: usize) -> Result<ProgramBundle> {
    finish(&serialization_source(pairs, spare)?)
}

/// Stateless argument rule: the argument must be one of `allowed`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgRule {
    pub arg: usize,
    pub allowed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DracoCheck {
    pub nr: i32,
    pub rules: Vec<ArgRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DracoSpec {
    pub checks: Vec<DracoCheck>,
}

/// Size of a validated-argument record: nr plus five arguments, 8 bytes each.
pub const DRACO_BLOB: usize = 48;
const DRACO_ARGS: usize = 5;

/// Dispatcher plus one check program per syscall, reached by tail call.
/// With `cached`, a check first compares the context against the last
/// validated record for that syscall and allows on a match.
pub fn draco_source(spec: &DracoSpec, cached: bool, opts: &PolicyOptions) -> Result<String> {
    let nrs: BTreeSet<i32> = spec.checks.iter().map(|c| c.nr).collect();
    if nrs.len() != spec.checks.len() {
        return spec_err("duplicate syscall in checks");
    }
    for c in &spec.checks {
        if !(0..sysno::MAX_NR).contains(&c.nr) {
            return spec_err(format!("syscall {} outside the dispatch table", c.nr));
        }
        if let Some(r) = c.rules.iter().find(|r| r.arg >= DRACO_ARGS) {
            return spec_err(format!("rule on argument {}: the record holds arguments 0..5 only", r.arg));
        }
    }
    let mut src = String::new();
    let _ = writeln!(src, "map checks prog_array 4 4 {}", sysno::MAX_NR);
    if cached {
        let _ = writeln!(src, "map cache hash 4 {DRACO_BLOB} {}", spec.checks.len().max(1));
    }
    for c in &spec.checks {
        let _ = writeln!(src, "entry checks {} check_{}", c.nr, c.nr);
    }
    let _ = writeln!(
        src,
        "section seccomp dispatch\nld_imm64 r0, {:#x}\nld_ctx r2, 4, 0\ntail_call r2, @checks",
        opts.deny.raw
    );
    for c in &spec.checks {
        let _ = writeln!(src, "section seccomp check_{}", c.nr);
        if cached {
            let _ = writeln!(
                src,
                "mov r1, @cache\nmov r2, {}\ncall map_lookup_elem\njeq r0, 0, miss\nmov r9, r0\n\
                 ld_map r6, r9, 0\nld_ctx r7, 4, 0\njne r6, r7, miss",
                c.nr
            );
            for i in 0..DRACO_ARGS {
                let _ = writeln!(src, "ld_map r6, r9, {}\nld_ctx r7, 8, {}\njne r6, r7, miss", 8 + 8 * i, ctx_arg(i));
            }
            src.push_str("ja allow\nmiss:\n");
        }
        for (k, r) in c.rules.iter().enumerate() {
            let _ = writeln!(src, "ld_ctx r6, 8, {}", ctx_arg(r.arg));
            for v in &r.allowed {
                let _ = writeln!(src, "jeq r6, {v:#x}, ok{k}");
            }
            let _ = writeln!(src, "ja deny\nok{k}:");
        }
        if cached {
            let _ = writeln!(
                src,
                "mov r1, @cache\nmov r2, {nr}\nmov r3, 0\nmov r4, 0\ncall map_update_elem\n\
                 mov r1, @cache\nmov r2, {nr}\ncall map_lookup_elem\njeq r0, 0, allow\nmov r9, r0\n\
                 ld_ctx r6, 4, 0\nst_map r9, r6, 0",
                nr = c.nr
            );
            for i in 0..DRACO_ARGS {
                let _ = writeln!(src, "ld_ctx r6, 8, {}\nst_map r9, r6, {}", ctx_arg(i), 8 + 8 * i);
            }
        }
        src.push_str("ja allow\n");
        tails(&mut src, opts);
    }
    Ok(src)
}

pub fn gen_draco(spec: &DracoSpec, cached: bool, opts: &PolicyOptions) -> Result<ProgramBundle> {
    finish(&draco_source(spec, cached, opts)?)
}
