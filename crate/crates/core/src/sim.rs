// SPDX-License-Identifier: Apache-2.0

//! Deterministic multi-task simulator.
//!
//! A trace is a list of events, each owned by one task. Events run one per
//! scheduler step; the scheduler only picks which task goes next. Events
//! of a task that is blocked (waiting on a serialized syscall, stalled on a
//! write-protected page) are deferred until it can continue. Blocked tasks
//! are retried after every step, so an exit that releases a waiter lets it
//! finish within the same step.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::hash::{Hash, Hasher};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ResolvedAction;
use crate::context::SyscallContext;
use crate::digest::Fnv64;
use crate::engine::{
    Caps, Creds, Decision, Engine, EngineError, EnterOutcome, InstallFlag, LoadedHandle, ResumeOutcome,
};
use crate::maps::le_bytes;
use crate::memory::{PageFlags, WriteStatus};
use crate::program::ProgramBundle;
use crate::sysno;
use crate::vm::BlockReason;
use crate::Tid;

/// Default bound on concurrent steps for exhaustive exploration.
pub const DEFAULT_MAX_STEPS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CapName {
    #[serde(rename = "CAP_SYS_ADMIN")]
    SysAdmin,
    #[serde(rename = "CAP_SYS_PTRACE")]
    SysPtrace,
}

fn caps_of(names: &[CapName]) -> Caps {
    Caps {
        sys_admin: names.contains(&CapName::SysAdmin),
        sys_ptrace: names.contains(&CapName::SysPtrace),
    }
}

/// Syscall number, given either numerically or by x86_64 name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Nr {
    Num(i32),
    Name(String),
}

impl Nr {
    pub fn resolve(&self) -> Option<i32> {
        match self {
            Nr::Num(n) => Some(*n),
            Nr::Name(s) => sysno::from_name(s),
        }
    }
}

impl From<i32> for Nr {
    fn from(n: i32) -> Self {
        Nr::Num(n)
    }
}

fn default_marker() -> Nr {
    Nr::Num(sysno::PHASE_MARKER)
}

fn yes() -> bool {
    true
}

/// Bytes given as UTF-8 text (`data`) or hex (`hex`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hex: Option<String>,
}

impl Payload {
    pub fn text(s: &str) -> Self {
        Payload {
            data: Some(s.into()),
            hex: None,
        }
    }

    pub fn bytes(b: &[u8]) -> Self {
        Payload {
            data: None,
            hex: Some(hex::encode(b)),
        }
    }

    pub fn decode(&self) -> Result<Vec<u8>, String> {
        match (&self.data, &self.hex) {
            (Some(_), Some(_)) => Err("give either `data` or `hex`, not both".into()),
            (Some(d), None) => Ok(d.as_bytes().to_vec()),
            (None, Some(h)) => hex::decode(h).map_err(|e| format!("bad hex: {e}")),
            (None, None) => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub addr: u64,
    pub len: u64,
    #[serde(flatten)]
    pub init: Payload,
    #[serde(default = "yes")]
    pub writable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum EventKind {
    /// New process. Without a parent it is a fresh root task.
    Spawn {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent: Option<Tid>,
        /// Identity; a fork inherits whatever is left out.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uid: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gid: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        caps: Option<Vec<CapName>>,
        #[serde(default)]
        regions: Vec<Region>,
    },
    SpawnThread {
        leader: Tid,
    },
    SetNnp,
    SetDumpable {
        dumpable: bool,
    },
    SetCaps {
        caps: Vec<CapName>,
    },
    NewUserns,
    Load {
        filter: String,
    },
    Install {
        filter: String,
        #[serde(default)]
        flags: InstallFlag,
    },
    CloseFds,
    SyscallEnter {
        nr: Nr,
        #[serde(default)]
        args: Vec<u64>,
        #[serde(default)]
        calling_address: u64,
    },
    SyscallExit {
        nr: Nr,
    },
    MemWrite {
        addr: u64,
        #[serde(flatten)]
        payload: Payload,
    },
    Mprotect {
        addr: u64,
        len: u64,
        writable: bool,
    },
    MapUpdate {
        filter: String,
        map: String,
        key: u64,
        value: u64,
    },
    PhaseMarker {
        #[serde(default = "default_marker")]
        nr: Nr,
    },
    Checkpoint {
        targets: Vec<Tid>,
        name: String,
    },
    Restore {
        name: String,
        /// Drop the targets' current chains first, as a recreated process
        /// would have none.
        #[serde(default)]
        replace: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tid: Tid,
    /// Clock advance applied before the event runs.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dt_ns: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl TraceEvent {
    pub fn new(tid: u32, kind: EventKind) -> Self {
        TraceEvent {
            tid: Tid(tid),
            dt_ns: 0,
            kind,
        }
    }

    pub fn after(mut self, dt_ns: u64) -> Self {
        self.dt_ns = dt_ns;
        self
    }

    pub fn enter(tid: u32, nr: i32, args: &[u64]) -> Self {
        Self::new(
            tid,
            EventKind::SyscallEnter {
                nr: Nr::Num(nr),
                args: args.to_vec(),
                calling_address: 0,
            },
        )
    }

    pub fn exit(tid: u32, nr: i32) -> Self {
        Self::new(tid, EventKind::SyscallExit { nr: Nr::Num(nr) })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EventKind::Spawn { .. } => "spawn",
            EventKind::SpawnThread { .. } => "spawn_thread",
            EventKind::SetNnp => "set_nnp",
            EventKind::SetDumpable { .. } => "set_dumpable",
            EventKind::SetCaps { .. } => "set_caps",
            EventKind::NewUserns => "new_userns",
            EventKind::Load { .. } => "load",
            EventKind::Install { .. } => "install",
            EventKind::CloseFds => "close_fds",
            EventKind::SyscallEnter { .. } => "syscall_enter",
            EventKind::SyscallExit { .. } => "syscall_exit",
            EventKind::MemWrite { .. } => "mem_write",
            EventKind::Mprotect { .. } => "mprotect",
            EventKind::MapUpdate { .. } => "map_update",
            EventKind::PhaseMarker { .. } => "phase_marker",
            EventKind::Checkpoint { .. } => "checkpoint",
            EventKind::Restore { .. } => "restore",
        }
    }

    /// Task whose queue the event belongs to. A fork or thread spawn is
    /// performed by the parent.
    pub fn owner(&self) -> Tid {
        match &self.kind {
            EventKind::Spawn { parent: Some(p), .. } => *p,
            EventKind::SpawnThread { leader } => *leader,
            _ => self.tid,
        }
    }

    /// Whether the event acts on a running workload, as opposed to setting
    /// it up.
    pub fn is_workload(&self) -> bool {
        matches!(
            self.kind,
            EventKind::SyscallEnter { .. }
                | EventKind::SyscallExit { .. }
                | EventKind::MemWrite { .. }
                | EventKind::PhaseMarker { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {line}: {message}")]
pub struct TraceError {
    /// One-based position of the offending event.
    pub line: usize,
    pub message: String,
}

/// Static checks: tids exist before use, syscall enters and exits pair up
/// per task, payloads decode and syscall names resolve.
pub fn validate(events: &[TraceEvent]) -> Result<(), TraceError> {
    let mut known: BTreeSet<Tid> = BTreeSet::new();
    let mut open: BTreeMap<Tid, i32> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        let fail = |message: String| TraceError { line: i + 1, message };
        let nr_of = |nr: &Nr| nr.resolve().ok_or_else(|| fail(format!("unknown syscall {nr:?}")));
        match &e.kind {
            EventKind::Spawn { parent, regions, .. } => {
                if let Some(p) = parent {
                    if !known.contains(p) {
                        return Err(fail(format!("parent {p} does not exist")));
                    }
                }
                for r in regions {
                    r.init.decode().map_err(&fail)?;
                }
                if !known.insert(e.tid) {
                    return Err(fail(format!("task {} spawned twice", e.tid)));
                }
                continue;
            }
            EventKind::SpawnThread { leader } => {
                if !known.contains(leader) {
                    return Err(fail(format!("leader {leader} does not exist")));
                }
                if !known.insert(e.tid) {
                    return Err(fail(format!("task {} spawned twice", e.tid)));
                }
                continue;
            }
            _ => {}
        }
        if !known.contains(&e.tid) {
            return Err(fail(format!("task {} does not exist", e.tid)));
        }
        match &e.kind {
            EventKind::SyscallEnter { nr, args, .. } => {
                let nr = nr_of(nr)?;
                if args.len() > 6 {
                    return Err(fail(format!("{} syscall arguments, at most 6", args.len())));
                }
                if let Some(prev) = open.insert(e.tid, nr) {
                    return Err(fail(format!("task {} enters {nr} while {prev} is open", e.tid)));
                }
            }
            EventKind::SyscallExit { nr } => {
                let nr = nr_of(nr)?;
                match open.remove(&e.tid) {
                    Some(o) if o == nr => {}
                    Some(o) => return Err(fail(format!("task {} exits {nr} but {o} is open", e.tid))),
                    None => return Err(fail(format!("task {} exits {nr} without a matching enter", e.tid))),
                }
            }
            EventKind::PhaseMarker { nr } => {
                nr_of(nr)?;
                if open.contains_key(&e.tid) {
                    return Err(fail(format!("task {} marks a phase inside a syscall", e.tid)));
                }
            }
            EventKind::MemWrite { payload, .. } => {
                payload.decode().map_err(&fail)?;
            }
            EventKind::Checkpoint { targets, .. } => {
                if let Some(t) = targets.iter().find(|t| !known.contains(t)) {
                    return Err(fail(format!("checkpoint target {t} does not exist")));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Decision {
        step: u64,
        #[serde(flatten)]
        decision: Decision,
    },
    Blocked {
        step: u64,
        tid: Tid,
        nr: i32,
        reason: BlockReason,
    },
    Exit {
        step: u64,
        tid: Tid,
        nr: i32,
    },
    Write {
        step: u64,
        tid: Tid,
        addr: u64,
        #[serde(with = "hex_bytes")]
        bytes: Vec<u8>,
        status: WriteStatus,
    },
    Error {
        step: u64,
        tid: Tid,
        event: String,
        message: String,
    },
}

mod hex_bytes {
    use alloc::string::String;
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// A task in a wait-for cycle and what it waits on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Waiter {
    pub tid: Tid,
    pub waiting_on: Vec<Tid>,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub step: u64,
    pub blocked: Vec<Waiter>,
    /// Tasks forming a wait-for cycle; empty when the run is stuck for
    /// another reason (e.g. events of a task that never spawned).
    pub cycle: Vec<Tid>,
}

/// Two watched syscalls running at the same time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Overlap {
    pub step: u64,
    pub a: (Tid, i32),
    pub b: (Tid, i32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecisionLog {
    pub entries: Vec<LogEntry>,
    pub deadlocks: Vec<DeadlockReport>,
    pub stalls: u32,
    pub overlaps: Vec<Overlap>,
    /// Task chosen at every step.
    pub schedule: Vec<Tid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Events dropped because their task had died.
    pub dropped_events: u32,
}

impl DecisionLog {
    pub fn decisions(&self) -> impl Iterator<Item = &Decision> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Decision { decision, .. } => Some(decision),
            _ => None,
        })
    }

    /// `(tid, nr, action)` per decided syscall, in log order.
    pub fn verdicts(&self) -> Vec<(Tid, i32, ResolvedAction)> {
        self.decisions().map(|d| (d.tid, d.nr, d.action)).collect()
    }

    pub fn errors(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(|e| matches!(e, LogEntry::Error { .. }))
    }

    pub fn total_steps(&self) -> u64 {
        self.decisions().map(|d| d.steps_total).sum()
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::new();
        self.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScheduleMode {
    /// The runnable event earliest in the trace goes first.
    TraceOrder,
    /// Uniform choice among runnable tasks.
    Seeded { seed: u64 },
    /// Fixed task sequence; trace order once exhausted.
    Explicit { tids: Vec<Tid> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("schedule step {step}: task {tid} is not runnable")]
    NotRunnable { step: usize, tid: Tid },
    #[error("{steps} concurrent steps exceed the exploration bound of {max}")]
    BoundExceeded { steps: usize, max: usize },
}

// one per run, so the size does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Clone)]
enum Picker {
    Order,
    Rng(ChaCha8Rng),
    List(Vec<Tid>, usize),
}

#[derive(Clone)]
pub struct Simulator {
    pub engine: Engine,
    filters: BTreeMap<String, ProgramBundle>,
    handles: BTreeMap<String, LoadedHandle>,
    blobs: BTreeMap<String, (Vec<Tid>, Vec<u8>)>,
    /// Pending events per owning task, with their trace index.
    queues: BTreeMap<Tid, VecDeque<(usize, TraceEvent)>>,
    watch: Vec<(i32, i32)>,
    step: u64,
    pub log: DecisionLog,
}

impl Simulator {
    pub fn new(engine: Engine, filters: BTreeMap<String, ProgramBundle>) -> Self {
        Simulator {
            engine,
            filters,
            handles: BTreeMap::new(),
            blobs: BTreeMap::new(),
            queues: BTreeMap::new(),
            watch: Vec::new(),
            step: 0,
            log: DecisionLog::default(),
        }
    }

    /// Records every moment two different tasks are inside syscalls `a`
    /// and `b` at once (both allowed to execute).
    pub fn watch_pair(&mut self, a: i32, b: i32) {
        self.watch.push((a, b));
    }

    pub fn enqueue(&mut self, events: &[TraceEvent]) {
        for (i, e) in events.iter().enumerate() {
            self.queues.entry(e.owner()).or_default().push_back((i, e.clone()));
        }
    }

    fn pending(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    /// A task may take its next event.
    fn runnable(&self, owner: Tid) -> bool {
        let Some((_, ev)) = self.queues.get(&owner).and_then(|q| q.front()) else {
            return false;
        };
        match self.engine.task(owner) {
            Some(t) => t.alive && !t.is_blocked(),
            // a root spawn needs no existing task
            None => matches!(ev.kind, EventKind::Spawn { parent: None, .. }),
        }
    }

    pub fn runnable_tasks(&self) -> Vec<Tid> {
        self.queues.keys().copied().filter(|t| self.runnable(*t)).collect()
    }

    fn drop_dead(&mut self) {
        let dead: Vec<Tid> = self
            .queues
            .iter()
            .filter(|(t, q)| !q.is_empty() && self.engine.task(**t).is_some_and(|t| !t.alive))
            .map(|(t, _)| *t)
            .collect();
        for t in dead {
            let q = self.queues.get_mut(&t).expect("listed");
            self.log.dropped_events += q.len() as u32;
            q.clear();
        }
    }

    fn earliest(&self) -> Option<Tid> {
        self.runnable_tasks()
            .into_iter()
            .min_by_key(|t| self.queues[t].front().map(|(i, _)| *i))
    }

    /// Runs one event of `owner`, then lets every unblocked task continue.
    pub fn step_task(&mut self, owner: Tid) {
        let (_, ev) = self
            .queues
            .get_mut(&owner)
            .and_then(|q| q.pop_front())
            .expect("step_task on a task with no events");
        self.step += 1;
        self.log.schedule.push(owner);
        self.engine.advance_clock(ev.dt_ns);
        if let Err(e) = self.apply(&ev) {
            self.log.entries.push(LogEntry::Error {
                step: self.step,
                tid: ev.tid,
                event: ev.name().into(),
                message: e,
            });
        }
        self.wake();
        self.drop_dead();
        self.check_overlaps();
    }

    fn wake(&mut self) {
        loop {
            let ready: Vec<Tid> = self
                .engine
                .tasks()
                .filter(|t| t.alive && t.is_blocked())
                .map(|t| t.tid)
                .filter(|t| self.engine.can_resume(*t))
                .collect();
            if ready.is_empty() {
                return;
            }
            for tid in ready {
                if !self.engine.can_resume(tid) {
                    continue;
                }
                let pending = self.engine.task(tid).and_then(|t| t.stalled_write());
                match self.engine.resume(tid) {
                    Ok(ResumeOutcome::Enter(o)) => self.log_enter(tid, o),
                    Ok(ResumeOutcome::Write(status)) => {
                        let (addr, len) = pending.expect("write resumed");
                        let bytes = self.engine.memory(tid).and_then(|m| m.read(addr, len as u64).ok());
                        self.log.entries.push(LogEntry::Write {
                            step: self.step,
                            tid,
                            addr,
                            bytes: bytes.unwrap_or_default(),
                            status,
                        });
                    }
                    Err(e) => self.log.entries.push(LogEntry::Error {
                        step: self.step,
                        tid,
                        event: "resume".into(),
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    fn log_enter(&mut self, tid: Tid, o: EnterOutcome) {
        let entry = match o {
            EnterOutcome::Decided(decision) => LogEntry::Decision {
                step: self.step,
                decision,
            },
            EnterOutcome::Blocked(reason) => LogEntry::Blocked {
                step: self.step,
                tid,
                nr: self.engine.task(tid).and_then(|t| t.in_syscall()).unwrap_or(-1),
                reason,
            },
        };
        self.log.entries.push(entry);
    }

    fn check_overlaps(&mut self) {
        if self.watch.is_empty() {
            return;
        }
        let running: Vec<(Tid, i32)> = self
            .engine
            .tasks()
            .filter(|t| t.alive && !t.is_blocked())
            .filter_map(|t| {
                let nr = t.in_syscall()?;
                let action = self.engine.decided(t.tid)?;
                action.kind.executes_syscall().then_some((t.tid, nr))
            })
            .collect();
        for &(x, y) in &self.watch {
            for a in running.iter().filter(|r| r.1 == x) {
                for b in running.iter().filter(|r| r.1 == y && r.0 != a.0) {
                    let o = Overlap {
                        step: self.step,
                        a: *a,
                        b: *b,
                    };
                    if !self.log.overlaps.contains(&o) {
                        self.log.overlaps.push(o);
                    }
                }
            }
        }
    }

    fn apply(&mut self, ev: &TraceEvent) -> Result<(), String> {
        let e = &mut self.engine;
        let tid = ev.tid;
        let err = |x: EngineError| x.to_string();
        match &ev.kind {
            EventKind::Spawn {
                parent,
                uid,
                gid,
                caps,
                regions,
            } => {
                let base = match parent {
                    Some(p) => e.task(*p).map(|t| t.creds).unwrap_or_default(),
                    None => Creds::default(),
                };
                let creds = Creds {
                    uid: uid.unwrap_or(base.uid),
                    gid: gid.or(*uid).unwrap_or(base.gid),
                    caps: caps.as_deref().map_or(base.caps, caps_of),
                };
                match parent {
                    Some(p) => {
                        e.fork_task(*p, tid).map_err(err)?;
                        if creds != base {
                            // fork followed by an identity change, as after setuid
                            e.set_creds(tid, creds).map_err(err)?;
                        }
                    }
                    None => e.spawn_init(tid, creds).map_err(err)?,
                }
                for r in regions {
                    let flags = if r.writable { PageFlags::RW } else { PageFlags::RO };
                    e.map_user_memory(tid, r.addr, r.len, flags).map_err(err)?;
                    let bytes = r.init.decode()?;
                    e.poke_user_memory(tid, r.addr, &bytes).map_err(err)?;
                }
            }
            EventKind::SpawnThread { leader } => e.spawn_thread(*leader, tid).map_err(err)?,
            EventKind::SetNnp => e.set_no_new_privs(tid).map_err(err)?,
            EventKind::SetDumpable { dumpable } => e.set_dumpable(tid, *dumpable).map_err(err)?,
            EventKind::SetCaps { caps } => e.set_caps(tid, caps_of(caps)).map_err(err)?,
            EventKind::NewUserns => {
                e.new_userns(tid).map_err(err)?;
            }
            EventKind::Load { filter } => {
                let h = self.load(tid, filter)?;
                self.handles.insert(filter.clone(), h);
            }
            EventKind::Install { filter, flags } => {
                let h = match self.handles.get(filter) {
                    Some(h) => h.clone(),
                    None => {
                        let h = self.load(tid, filter)?;
                        self.handles.insert(filter.clone(), h.clone());
                        h
                    }
                };
                self.engine.install_filter(tid, h.prog, *flags).map_err(err)?;
            }
            EventKind::CloseFds => e.close_fds(tid).map_err(err)?,
            EventKind::SyscallEnter {
                nr,
                args,
                calling_address,
            } => {
                let nr = nr.resolve().ok_or("unknown syscall")?;
                let mut a = [0u64; 6];
                for (d, s) in a.iter_mut().zip(args) {
                    *d = *s;
                }
                let ctx = SyscallContext::new(nr, a).with_calling_address(*calling_address);
                let o = e.syscall_enter(tid, ctx).map_err(err)?;
                self.log_enter(tid, o);
            }
            EventKind::SyscallExit { nr } => {
                let nr = nr.resolve().ok_or("unknown syscall")?;
                e.syscall_exit(tid, nr).map_err(err)?;
                self.log.entries.push(LogEntry::Exit {
                    step: self.step,
                    tid,
                    nr,
                });
            }
            EventKind::PhaseMarker { nr } => {
                let nr = nr.resolve().ok_or("unknown syscall")?;
                let o = e.syscall_enter(tid, SyscallContext::new(nr, [0; 6])).map_err(err)?;
                let decided = matches!(o, EnterOutcome::Decided(_));
                self.log_enter(tid, o);
                if decided && self.engine.task(tid).is_some_and(|t| t.alive) {
                    self.engine.syscall_exit(tid, nr).map_err(err)?;
                    self.log.entries.push(LogEntry::Exit {
                        step: self.step,
                        tid,
                        nr,
                    });
                }
            }
            EventKind::MemWrite { addr, payload } => {
                let bytes = payload.decode()?;
                let status = e.user_write(tid, *addr, &bytes).map_err(err)?;
                if status == WriteStatus::Stalled {
                    self.log.stalls += 1;
                } else {
                    self.log.entries.push(LogEntry::Write {
                        step: self.step,
                        tid,
                        addr: *addr,
                        bytes,
                        status,
                    });
                }
            }
            EventKind::Mprotect { addr, len, writable } => e.mprotect(tid, *addr, *len, *writable).map_err(err)?,
            EventKind::MapUpdate {
                filter,
                map,
                key,
                value,
            } => {
                let h = self.handles.get(filter).ok_or_else(|| format!("filter `{filter}` is not loaded"))?;
                let bundle = &self.filters[filter];
                let idx = bundle
                    .maps()
                    .iter()
                    .position(|m| m.name == *map)
                    .ok_or_else(|| format!("filter `{filter}` has no map `{map}`"))?;
                let def = &bundle.maps()[idx];
                let (k, v) = (
                    le_bytes(*key, def.key_size as usize),
                    le_bytes(*value, def.value_size as usize),
                );
                let id = h.maps[idx];
                e.update_map_external(tid, id, &k, &v).map_err(err)?;
            }
            EventKind::Checkpoint { targets, name } => {
                let blob = e.checkpoint_group(tid, targets).map_err(err)?;
                self.blobs.insert(name.clone(), (targets.clone(), blob));
            }
            EventKind::Restore { name, replace } => {
                let (targets, blob) = self.blobs.get(name).ok_or_else(|| format!("no checkpoint `{name}`"))?;
                if *replace {
                    e.reset_filter_state(targets);
                }
                e.restore_group(tid, blob).map_err(err)?;
            }
        }
        Ok(())
    }

    fn load(&mut self, tid: Tid, filter: &str) -> Result<LoadedHandle, String> {
        let bundle = self
            .filters
            .get(filter)
            .ok_or_else(|| format!("unknown filter `{filter}`"))?
            .clone();
        self.engine.load_program(tid, bundle).map_err(|e| e.to_string())
    }

    fn wait_graph(&self) -> Vec<Waiter> {
        self.engine
            .tasks()
            .filter(|t| t.alive && t.is_blocked())
            .map(|t| {
                let (waiting_on, what) = match (t.block_reason(), t.stalled_write()) {
                    (_, Some((addr, len))) => (
                        self.engine.write_blockers(t.tid),
                        format!("write of {len} bytes at {addr:#x}"),
                    ),
                    (Some(BlockReason::WaitSyscall { curr, target }), _) => (
                        self.engine.inflight().holders(target).filter(|h| *h != t.tid).collect(),
                        format!(
                            "{} waiting for {} to leave",
                            sysno::name(curr).map_or_else(|| curr.to_string(), String::from),
                            sysno::name(target).map_or_else(|| target.to_string(), String::from),
                        ),
                    ),
                    (Some(BlockReason::PageFault { addr, .. }), _) => (Vec::new(), format!("page fault at {addr:#x}")),
                    (None, None) => (Vec::new(), String::new()),
                };
                Waiter {
                    tid: t.tid,
                    waiting_on,
                    what,
                }
            })
            .collect()
    }

    fn find_cycle(waiters: &[Waiter]) -> Vec<Tid> {
        let edges: BTreeMap<Tid, &Vec<Tid>> = waiters.iter().map(|w| (w.tid, &w.waiting_on)).collect();
        for start in edges.keys() {
            // follow the first blocked successor until a repeat
            let mut path = alloc::vec![*start];
            let mut cur = *start;
            while let Some(next) = edges.get(&cur).and_then(|n| n.iter().find(|x| edges.contains_key(x))) {
                if let Some(pos) = path.iter().position(|p| p == next) {
                    let mut cycle = path[pos..].to_vec();
                    let min = cycle.iter().enumerate().min_by_key(|(_, t)| **t).map(|(i, _)| i).unwrap();
                    cycle.rotate_left(min);
                    return cycle;
                }
                path.push(*next);
                cur = *next;
            }
        }
        Vec::new()
    }

    /// Whether every task finished or the run cannot proceed.
    fn stuck_report(&mut self) -> bool {
        let blocked = self.engine.tasks().any(|t| t.alive && t.is_blocked());
        if self.pending() == 0 && !blocked {
            return true;
        }
        if !self.runnable_tasks().is_empty() {
            return false;
        }
        let waiters = self.wait_graph();
        let cycle = Self::find_cycle(&waiters);
        self.log.deadlocks.push(DeadlockReport {
            step: self.step,
            blocked: waiters,
            cycle,
        });
        true
    }

    /// Runs the queued events to completion or deadlock.
    pub fn run(&mut self, mode: &ScheduleMode) -> Result<(), SimError> {
        let mut picker = match mode {
            ScheduleMode::TraceOrder => Picker::Order,
            ScheduleMode::Seeded { seed } => {
                self.log.seed = Some(*seed);
                Picker::Rng(ChaCha8Rng::seed_from_u64(*seed))
            }
            ScheduleMode::Explicit { tids } => Picker::List(tids.clone(), 0),
        };
        while !self.stuck_report() {
            let tid = match &mut picker {
                Picker::Order => self.earliest().expect("not stuck"),
                Picker::Rng(rng) => {
                    let r = self.runnable_tasks();
                    r[(rng.next_u64() % r.len() as u64) as usize]
                }
                Picker::List(list, pos) => match list.get(*pos) {
                    Some(t) => {
                        *pos += 1;
                        if !self.runnable(*t) {
                            return Err(SimError::NotRunnable { step: *pos, tid: *t });
                        }
                        *t
                    }
                    None => self.earliest().expect("not stuck"),
                },
            };
            self.step_task(tid);
        }
        Ok(())
    }
}

/// Validates a trace and runs it once.
pub fn run(
    events: &[TraceEvent],
    engine: Engine,
    filters: BTreeMap<String, ProgramBundle>,
    mode: &ScheduleMode,
) -> Result<DecisionLog, SimError> {
    validate(events)?;
    let mut sim = Simulator::new(engine, filters);
    sim.enqueue(events);
    sim.run(mode)?;
    Ok(sim.log)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleDigest {
    pub schedule: Vec<Tid>,
    pub digest: u64,
    pub overlaps: usize,
    pub deadlocked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Exploration {
    /// Events run serially before the concurrent part.
    pub setup_events: usize,
    pub concurrent_steps: usize,
    pub schedules: Vec<ScheduleDigest>,
}

impl Exploration {
    pub fn overlapping(&self) -> usize {
        self.schedules.iter().filter(|s| s.overlaps > 0).count()
    }

    pub fn deadlocked(&self) -> usize {
        self.schedules.iter().filter(|s| s.deadlocked).count()
    }
}

/// Enumerates every interleaving of the trace's workload.
///
/// Events before the first syscall or memory event are setup and run in
/// trace order; the remainder is explored exhaustively. `watch` pairs are
/// checked for overlap in every schedule.
pub fn explore(
    events: &[TraceEvent],
    engine: Engine,
    filters: BTreeMap<String, ProgramBundle>,
    watch: &[(i32, i32)],
    max_steps: usize,
) -> Result<Exploration, SimError> {
    validate(events)?;
    let split = events.iter().position(TraceEvent::is_workload).unwrap_or(events.len());
    let (setup, rest) = events.split_at(split);
    if rest.len() > max_steps {
        return Err(SimError::BoundExceeded {
            steps: rest.len(),
            max: max_steps,
        });
    }
    let mut sim = Simulator::new(engine, filters);
    for &(a, b) in watch {
        sim.watch_pair(a, b);
    }
    sim.enqueue(setup);
    sim.run(&ScheduleMode::TraceOrder)?;
    let prefix = sim.log.schedule.len();
    let offset = setup.len();
    for (i, e) in rest.iter().enumerate() {
        sim.queues.entry(e.owner()).or_default().push_back((offset + i, e.clone()));
    }
    let mut out = Vec::new();
    dfs(sim, prefix, &mut out);
    Ok(Exploration {
        setup_events: setup.len(),
        concurrent_steps: rest.len(),
        schedules: out,
    })
}

fn dfs(mut sim: Simulator, prefix: usize, out: &mut Vec<ScheduleDigest>) {
    if sim.stuck_report() {
        out.push(ScheduleDigest {
            schedule: sim.log.schedule[prefix..].to_vec(),
            digest: sim.log.digest(),
            overlaps: sim.log.overlaps.len(),
            deadlocked: !sim.log.deadlocks.is_empty(),
        });
        return;
    }
    for tid in sim.runnable_tasks() {
        let mut next = sim.clone();
        next.step_task(tid);
        dfs(next, prefix, out);
    }
}
