// SPDX-License-Identifier: Apache-2.0

//! The control plane: tasks, program load and install, per-syscall filter
//! evaluation and the privilege model around them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{resolve, ActionKind, ResolvedAction};
use crate::context::SyscallContext;
use crate::maps::{MapError, MapId, PolicyMap};
use crate::memory::{page_of, MemFault, PageFlags, UserMemory, WriteStatus, PAGE_SIZE};
use crate::program::ProgramBundle;
use crate::snapshot::{self, DescriptorTable, SnapshotMode, SnapshotRegion};
use crate::store::{Store, StoreError};
use crate::verifier::{verify, VerifierConfig, VerifierReport};
use crate::vm::{BlockReason, Inflight, RuntimeEnv, VmOutcome, VmState, VmStep, DEFAULT_STEP_LIMIT};
use crate::{NsId, ProgId, Tid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caps {
    pub sys_admin: bool,
    pub sys_ptrace: bool,
}

impl Caps {
    pub const NONE: Caps = Caps {
        sys_admin: false,
        sys_ptrace: false,
    };
    pub const ALL: Caps = Caps {
        sys_admin: true,
        sys_ptrace: true,
    };

    /// Whether every capability in `self` is also in `other`.
    pub fn subset_of(self, other: Caps) -> bool {
        (!self.sys_admin || other.sys_admin) && (!self.sys_ptrace || other.sys_ptrace)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Creds {
    pub uid: u32,
    pub gid: u32,
    pub caps: Caps,
}

impl Creds {
    pub const ROOT: Creds = Creds {
        uid: 0,
        gid: 0,
        caps: Caps::ALL,
    };

    pub fn user(uid: u32) -> Creds {
        Creds {
            uid,
            gid: uid,
            caps: Caps::NONE,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtraceScope {
    /// Same uid and gid, or CAP_SYS_PTRACE.
    #[default]
    Classic,
    /// Only descendants of the loader, or CAP_SYS_PTRACE.
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EngineConfig {
    pub privileged_only: bool,
    pub bad_filter_action: ActionKind,
    pub ptrace_scope: PtraceScope,
    pub snapshot_mode: SnapshotMode,
    pub verifier: VerifierConfig,
    pub step_limit: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            privileged_only: false,
            bad_filter_action: ActionKind::KillThread,
            ptrace_scope: PtraceScope::Classic,
            snapshot_mode: SnapshotMode::Copy,
            verifier: VerifierConfig::default(),
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallFlag {
    /// Install an extended (map- and helper-using) program.
    #[default]
    Extended,
    /// Classic-style install; only stateless programs qualify.
    Classic,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("permission denied")]
    Eacces,
    #[error("operation not permitted")]
    Eperm,
    #[error("program handle is closed")]
    Ebadf,
    #[error("program was loaded in user namespace {loaded:?}, task is in {current:?}")]
    NsMismatch { loaded: NsId, current: NsId },
    #[error("invalid argument: {0}")]
    Einval(String),
    #[error("no such task {0}")]
    NoTask(Tid),
    #[error("task {0} already exists")]
    TaskExists(Tid),
    #[error("task {0} is dead")]
    Dead(Tid),
    #[error("task {0} is blocked")]
    Blocked(Tid),
    #[error("no such program {0:?}")]
    NoProgram(ProgId),
    #[error("no such map {0}")]
    NoMap(MapId),
    #[error("program {index} rejected: {}", report.reason)]
    Rejected { index: usize, report: VerifierReport },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Memory(#[from] MemFault),
    #[error("inconsistent event: {0}")]
    Consistency(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpaceId(pub u32);

/// Result of one filter in the chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterRecord {
    pub chain_index: usize,
    pub vote: ResolvedAction,
    pub outcome: VmOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub tid: Tid,
    pub nr: i32,
    pub action: ResolvedAction,
    pub filters: Vec<FilterRecord>,
    pub steps_total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnterOutcome {
    Decided(Decision),
    Blocked(BlockReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResumeOutcome {
    Enter(EnterOutcome),
    Write(WriteStatus),
}

#[derive(Debug, Clone)]
struct Filtering {
    next: usize,
    records: Vec<FilterRecord>,
    vm: Option<VmState>,
    blocked: Option<BlockReason>,
}

#[derive(Debug, Clone)]
struct OpenSyscall {
    ctx: SyscallContext,
    snapshot: Option<SnapshotRegion>,
    /// `Some` while the chain is still being evaluated.
    filtering: Option<Filtering>,
    decided: Option<ResolvedAction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingWrite {
    addr: u64,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub tid: Tid,
    pub tgid: Tid,
    pub parent: Option<Tid>,
    pub creds: Creds,
    pub no_new_privs: bool,
    pub dumpable: bool,
    pub userns: NsId,
    pub filter_chain: Vec<ProgId>,
    pub space: SpaceId,
    pub alive: bool,
    open: Option<OpenSyscall>,
    pending_write: Option<PendingWrite>,
}

impl Task {
    pub fn in_syscall(&self) -> Option<i32> {
        self.open.as_ref().map(|o| o.ctx.nr)
    }

    pub fn is_blocked(&self) -> bool {
        self.pending_write.is_some() || self.open.as_ref().is_some_and(|o| o.filtering.is_some())
    }

    /// What the task is parked on, if anything.
    pub fn block_reason(&self) -> Option<BlockReason> {
        self.open.as_ref()?.filtering.as_ref()?.blocked
    }

    pub fn stalled_write(&self) -> Option<(u64, usize)> {
        self.pending_write.as_ref().map(|w| (w.addr, w.bytes.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Loader {
    pub tid: Tid,
    pub tgid: Tid,
    pub creds: Creds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct ProgMeta {
    pub fd_open: bool,
    pub owner: Tid,
    pub loader: Loader,
    pub installs: u32,
}

/// What `load_program` hands back.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoadedHandle {
    pub prog: ProgId,
    pub maps: Vec<MapId>,
    pub programs: Vec<ProgId>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub config: EngineConfig,
    pub(crate) store: Store,
    pub(crate) prog_meta: BTreeMap<ProgId, ProgMeta>,
    pub(crate) map_owner: BTreeMap<MapId, Tid>,
    pub(crate) tasks: BTreeMap<Tid, Task>,
    spaces: BTreeMap<SpaceId, UserMemory>,
    next_space: u32,
    /// Parent of each user namespace; index is the namespace id.
    namespaces: Vec<Option<NsId>>,
    inflight: Inflight,
    clock_ns: u64,
    descriptors: DescriptorTable,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine {
            config,
            store: Store::new(),
            prog_meta: BTreeMap::new(),
            map_owner: BTreeMap::new(),
            tasks: BTreeMap::new(),
            spaces: BTreeMap::new(),
            next_space: 0,
            namespaces: alloc::vec![None],
            inflight: Inflight::default(),
            clock_ns: 0,
            descriptors: DescriptorTable::builtin(),
        }
    }

    pub fn set_descriptors(&mut self, table: DescriptorTable) {
        self.descriptors = table;
    }

    pub fn descriptors(&self) -> &DescriptorTable {
        &self.descriptors
    }

    pub fn clock_ns(&self) -> u64 {
        self.clock_ns
    }

    pub fn advance_clock(&mut self, dt_ns: u64) {
        self.clock_ns = self.clock_ns.saturating_add(dt_ns);
    }

    pub fn inflight(&self) -> &Inflight {
        &self.inflight
    }

    pub fn task(&self, tid: Tid) -> Option<&Task> {
        self.tasks.get(&tid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn map(&self, id: MapId) -> Option<&PolicyMap> {
        self.store.map(id)
    }

    pub fn map_ids(&self) -> impl Iterator<Item = MapId> + '_ {
        self.store.maps.keys().copied()
    }

    pub fn program(&self, id: ProgId) -> Option<&crate::program::FilterProgram> {
        self.store.program(id).map(|p| &**p)
    }

    pub fn program_fd_open(&self, id: ProgId) -> bool {
        self.prog_meta.get(&id).is_some_and(|m| m.fd_open)
    }

    pub fn open_program_fds(&self) -> Vec<ProgId> {
        self.prog_meta
            .iter()
            .filter(|(_, m)| m.fd_open)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn memory(&self, tid: Tid) -> Option<&UserMemory> {
        let t = self.tasks.get(&tid)?;
        self.spaces.get(&t.space)
    }

    fn memory_mut(&mut self, tid: Tid) -> Result<&mut UserMemory> {
        let space = self.live(tid)?.space;
        Ok(self.spaces.get_mut(&space).expect("task space exists"))
    }

    fn live(&self, tid: Tid) -> Result<&Task> {
        let t = self.tasks.get(&tid).ok_or(EngineError::NoTask(tid))?;
        if !t.alive {
            return Err(EngineError::Dead(tid));
        }
        Ok(t)
    }

    fn live_mut(&mut self, tid: Tid) -> Result<&mut Task> {
        let t = self.tasks.get_mut(&tid).ok_or(EngineError::NoTask(tid))?;
        if !t.alive {
            return Err(EngineError::Dead(tid));
        }
        Ok(t)
    }

    fn new_space(&mut self, mem: UserMemory) -> SpaceId {
        self.next_space += 1;
        let id = SpaceId(self.next_space);
        self.spaces.insert(id, mem);
        id
    }

    /// Creates a root task with its own address space.
    pub fn spawn_init(&mut self, tid: Tid, creds: Creds) -> Result<()> {
        if self.tasks.contains_key(&tid) {
            return Err(EngineError::TaskExists(tid));
        }
        let space = self.new_space(UserMemory::new());
        self.tasks.insert(
            tid,
            Task {
                tid,
                tgid: tid,
                parent: None,
                creds,
                no_new_privs: false,
                dumpable: true,
                userns: NsId::INIT,
                filter_chain: Vec::new(),
                space,
                alive: true,
                open: None,
                pending_write: None,
            },
        );
        Ok(())
    }

    fn clone_task(&mut self, parent: Tid, child: Tid, thread: bool) -> Result<()> {
        if self.tasks.contains_key(&child) {
            return Err(EngineError::TaskExists(child));
        }
        let p = self.live(parent)?.clone();
        let (tgid, space) = if thread {
            (p.tgid, p.space)
        } else {
            let mem = self.spaces[&p.space].clone();
            (child, self.new_space(mem))
        };
        self.tasks.insert(
            child,
            Task {
                tid: child,
                tgid,
                parent: Some(parent),
                creds: p.creds,
                no_new_privs: p.no_new_privs,
                dumpable: p.dumpable,
                userns: p.userns,
                filter_chain: p.filter_chain.clone(),
                space,
                alive: true,
                open: None,
                pending_write: None,
            },
        );
        for id in &p.filter_chain {
            if let Some(m) = self.prog_meta.get_mut(id) {
                m.installs += 1;
            }
        }
        Ok(())
    }

    /// New process inheriting the parent's filters, credentials and a copy
    /// of its memory.
    pub fn fork_task(&mut self, parent: Tid, child: Tid) -> Result<()> {
        self.clone_task(parent, child, false)
    }

    /// New thread in the parent's thread group, sharing its memory.
    pub fn spawn_thread(&mut self, parent: Tid, tid: Tid) -> Result<()> {
        self.clone_task(parent, tid, true)
    }

    /// Replaces a task's identity outright, as a setuid exec would. Not
    /// reachable from filter context.
    pub fn set_creds(&mut self, tid: Tid, creds: Creds) -> Result<()> {
        self.live_mut(tid)?.creds = creds;
        Ok(())
    }

    pub fn set_no_new_privs(&mut self, tid: Tid) -> Result<()> {
        self.live_mut(tid)?.no_new_privs = true;
        Ok(())
    }

    pub fn set_dumpable(&mut self, tid: Tid, dumpable: bool) -> Result<()> {
        self.live_mut(tid)?.dumpable = dumpable;
        Ok(())
    }

    /// Changes a task's capability set. Under no_new_privs capabilities can
    /// only be dropped.
    pub fn set_caps(&mut self, tid: Tid, caps: Caps) -> Result<()> {
        let t = self.live_mut(tid)?;
        if t.no_new_privs && !caps.subset_of(t.creds.caps) {
            return Err(EngineError::Eperm);
        }
        t.creds.caps = caps;
        Ok(())
    }

    /// Moves the task into a fresh child user namespace, where it holds
    /// every capability.
    pub fn new_userns(&mut self, tid: Tid) -> Result<NsId> {
        let parent = self.live(tid)?.userns;
        let ns = NsId(self.namespaces.len() as u32);
        self.namespaces.push(Some(parent));
        let t = self.live_mut(tid)?;
        t.userns = ns;
        t.creds.caps = Caps::ALL;
        Ok(ns)
    }

    /// CAP_SYS_ADMIN in the initial user namespace.
    pub fn is_globally_privileged(&self, tid: Tid) -> bool {
        self.tasks
            .get(&tid)
            .is_some_and(|t| t.alive && t.userns == NsId::INIT && t.creds.caps.sys_admin)
    }

    pub fn map_user_memory(&mut self, tid: Tid, addr: u64, len: u64, flags: PageFlags) -> Result<()> {
        Ok(self.memory_mut(tid)?.map(addr, len, flags)?)
    }

    /// Kernel-side initialisation of user memory.
    pub fn poke_user_memory(&mut self, tid: Tid, addr: u64, bytes: &[u8]) -> Result<()> {
        Ok(self.memory_mut(tid)?.poke(addr, bytes)?)
    }

    /// A store by user code. A stalled store parks the task until the
    /// protecting syscall exits; [`Engine::resume`] retries it.
    pub fn user_write(&mut self, tid: Tid, addr: u64, bytes: &[u8]) -> Result<WriteStatus> {
        if self.live(tid)?.is_blocked() {
            return Err(EngineError::Blocked(tid));
        }
        let status = self.memory_mut(tid)?.user_write(addr, bytes);
        if status == WriteStatus::Stalled {
            self.live_mut(tid)?.pending_write = Some(PendingWrite {
                addr,
                bytes: bytes.to_vec(),
            });
        }
        Ok(status)
    }

    pub fn mprotect(&mut self, tid: Tid, addr: u64, len: u64, writable: bool) -> Result<()> {
        Ok(self.memory_mut(tid)?.mprotect(addr, len, writable)?)
    }

    /// Verifies and loads a bundle. The entry program's handle starts open,
    /// as do the descriptors of the maps it creates.
    pub fn load_program(&mut self, tid: Tid, bundle: impl Into<ProgramBundle>) -> Result<LoadedHandle> {
        let task = self.live(tid)?;
        let loader = Loader {
            tid,
            tgid: task.tgid,
            creds: task.creds,
        };
        let userns = task.userns;
        let mut bundle = bundle.into();
        for (index, p) in bundle.programs.iter_mut().enumerate() {
            let report = verify(p, &self.config.verifier);
            if !report.accepted {
                return Err(EngineError::Rejected { index, report });
            }
            p.load_userns = Some(userns);
        }
        let (programs, maps) = self.store.add_bundle(bundle)?;
        for m in &maps {
            let map = self.store.map_mut(*m).expect("just created");
            map.fd_open = true;
            map.refcount += 1;
            self.map_owner.insert(*m, loader.tgid);
        }
        for (i, id) in programs.iter().enumerate() {
            self.prog_meta.insert(
                *id,
                ProgMeta {
                    fd_open: i == 0,
                    owner: loader.tgid,
                    loader,
                    installs: 0,
                },
            );
        }
        Ok(LoadedHandle {
            prog: programs[0],
            maps,
            programs,
        })
    }

    /// Appends a loaded program to the task's filter chain and closes the
    /// program handle.
    pub fn install_filter(&mut self, tid: Tid, prog: ProgId, flag: InstallFlag) -> Result<()> {
        let meta = *self.prog_meta.get(&prog).ok_or(EngineError::NoProgram(prog))?;
        if !meta.fd_open {
            return Err(EngineError::Ebadf);
        }
        let task = self.live(tid)?;
        if self.config.privileged_only && !self.is_globally_privileged(tid) {
            return Err(EngineError::Eacces);
        }
        if !task.creds.caps.sys_admin && !task.no_new_privs {
            return Err(EngineError::Eacces);
        }
        let program = self.store.program(prog).expect("meta implies program");
        let loaded = program.load_userns.unwrap_or(NsId::INIT);
        if loaded != task.userns {
            return Err(EngineError::NsMismatch {
                loaded,
                current: task.userns,
            });
        }
        if flag == InstallFlag::Classic && (!program.maps.is_empty() || program.helpers_called().next().is_some()) {
            return Err(EngineError::Einval("classic install of a stateful program".into()));
        }
        self.live_mut(tid)?.filter_chain.push(prog);
        let meta = self.prog_meta.get_mut(&prog).expect("checked");
        meta.installs += 1;
        meta.fd_open = false;
        Ok(())
    }

    /// Closes every program and map descriptor held by the task's process.
    /// Maps stay alive while programs reference them.
    pub fn close_fds(&mut self, tid: Tid) -> Result<()> {
        let owner = self.live(tid)?.tgid;
        for meta in self.prog_meta.values_mut() {
            if meta.owner == owner {
                meta.fd_open = false;
            }
        }
        let owned: Vec<MapId> = self
            .map_owner
            .iter()
            .filter(|(_, o)| **o == owner)
            .map(|(m, _)| *m)
            .collect();
        for id in owned {
            let Some(map) = self.store.map_mut(id) else { continue };
            if map.fd_open {
                map.fd_open = false;
                map.refcount -= 1;
                if map.refcount == 0 {
                    self.store.maps.remove(&id);
                    self.map_owner.remove(&id);
                }
            }
        }
        Ok(())
    }

    /// Live policy update from outside any filter. Needs root.
    pub fn update_map_external(&mut self, requester: Tid, map: MapId, key: &[u8], value: &[u8]) -> Result<()> {
        self.live(requester)?;
        if !self.is_globally_privileged(requester) {
            return Err(EngineError::Eperm);
        }
        let m = self.store.map_mut(map).ok_or(EngineError::NoMap(map))?;
        m.update(key, value, crate::maps::BPF_ANY)?;
        Ok(())
    }

    fn is_ancestor(&self, ancestor_tgid: Tid, task: &Task) -> bool {
        let mut cur = Some(task.tid);
        while let Some(t) = cur.and_then(|t| self.tasks.get(&t)) {
            if t.tgid == ancestor_tgid {
                return true;
            }
            cur = t.parent;
        }
        false
    }

    /// Ptrace-style check between a filter's loader and the filtered task.
    pub(crate) fn user_access_allowed(&self, prog: ProgId, task: &Task) -> bool {
        let Some(meta) = self.prog_meta.get(&prog) else {
            return false;
        };
        let loader = meta.loader;
        let ptrace = loader.creds.caps.sys_ptrace;
        if !task.dumpable && !ptrace {
            return false;
        }
        if loader.tgid == task.tgid || ptrace {
            return true;
        }
        match self.config.ptrace_scope {
            PtraceScope::Classic => loader.creds.uid == task.creds.uid && loader.creds.gid == task.creds.gid,
            PtraceScope::Restricted => self.is_ancestor(loader.tgid, task),
        }
    }

    fn chain_reads_user_memory(&self, chain: &[ProgId]) -> bool {
        chain.iter().any(|root| {
            self.store
                .reachable(*root)
                .iter()
                .filter_map(|p| self.store.program(*p))
                .any(|p| p.uses_user_access())
        })
    }

    /// Runs the task's filter chain on a syscall entry.
    pub fn syscall_enter(&mut self, tid: Tid, ctx: SyscallContext) -> Result<EnterOutcome> {
        let task = self.live(tid)?;
        if task.is_blocked() {
            return Err(EngineError::Blocked(tid));
        }
        if let Some(nr) = task.in_syscall() {
            return Err(EngineError::Consistency(format!(
                "task {tid} enters syscall {} while {nr} is still open",
                ctx.nr
            )));
        }
        let space = task.space;
        let snapshot = if self.chain_reads_user_memory(&task.filter_chain) {
            let mode = self.config.snapshot_mode;
            let mem = self.spaces.get_mut(&space).expect("space");
            let region = snapshot::snapshot_args(mem, &ctx, self.descriptors.get(ctx.nr), mode, tid);
            if mode == SnapshotMode::Copy {
                // the sealed per-thread page user code sees
                let base = page_of(region.base);
                mem.map(base, PAGE_SIZE, PageFlags::SEALED)?;
                mem.poke(base, &region.bytes)?;
            }
            Some(region)
        } else {
            None
        };
        self.live_mut(tid)?.open = Some(OpenSyscall {
            ctx,
            snapshot,
            filtering: Some(Filtering {
                next: 0,
                records: Vec::new(),
                vm: None,
                blocked: None,
            }),
            decided: None,
        });
        self.continue_filters(tid)
    }

    fn continue_filters(&mut self, tid: Tid) -> Result<EnterOutcome> {
        let task = self.tasks.get_mut(&tid).expect("live task");
        let mut open = task.open.take().expect("open syscall");
        let chain = task.filter_chain.clone();
        let (space, tgid) = (task.space, task.tgid);
        let mut f = open.filtering.take().expect("filtering");
        let bad = ResolvedAction::of(self.config.bad_filter_action);
        while f.next < chain.len() {
            let prog = chain[f.next];
            let user_access = self.user_access_allowed(prog, &self.tasks[&tid]);
            let mut vm = match f.vm.take() {
                Some(vm) => vm,
                None => {
                    let p = self.store.program(prog).ok_or(EngineError::NoProgram(prog))?;
                    VmState::new(p.clone(), open.ctx)
                }
            };
            let mut env = RuntimeEnv {
                store: &mut self.store,
                inflight: &mut self.inflight,
                clock_ns: self.clock_ns,
                tid,
                tgid,
                memory: self.spaces.get(&space),
                snapshot: open.snapshot.as_ref(),
                user_access,
                bad_action: bad.raw,
                step_limit: self.config.step_limit,
            };
            match vm.run(&mut env) {
                VmStep::Done(outcome) => {
                    let vote = if outcome.faulted.is_some() {
                        bad
                    } else {
                        ResolvedAction::from_raw(outcome.raw_action)
                    };
                    f.records.push(FilterRecord {
                        chain_index: f.next,
                        vote,
                        outcome,
                    });
                    f.next += 1;
                    f.blocked = None;
                }
                VmStep::Blocked(reason) => {
                    f.vm = Some(vm);
                    f.blocked = Some(reason);
                    open.filtering = Some(f);
                    self.tasks.get_mut(&tid).expect("task").open = Some(open);
                    return Ok(EnterOutcome::Blocked(reason));
                }
            }
        }
        let action = resolve(f.records.iter().map(|r| r.vote));
        open.decided = Some(action);
        let nr = open.ctx.nr;
        self.tasks.get_mut(&tid).expect("task").open = Some(open);
        let decision = Decision {
            tid,
            nr,
            action,
            steps_total: f.records.iter().map(|r| r.outcome.steps_executed).sum(),
            filters: f.records,
        };
        match action.kind {
            ActionKind::KillThread => self.kill(&[tid]),
            ActionKind::KillProcess => {
                let group: Vec<Tid> = self.tasks.values().filter(|t| t.tgid == tgid).map(|t| t.tid).collect();
                self.kill(&group);
            }
            _ => {}
        }
        Ok(EnterOutcome::Decided(decision))
    }

    fn kill(&mut self, tids: &[Tid]) {
        for tid in tids {
            self.finish_syscall(*tid);
            if let Some(t) = self.tasks.get_mut(tid) {
                t.alive = false;
                t.pending_write = None;
            }
        }
    }

    /// Drops the open syscall's in-flight registrations and snapshot.
    fn finish_syscall(&mut self, tid: Tid) -> Option<i32> {
        let t = self.tasks.get_mut(&tid)?;
        let mut open = t.open.take()?;
        let space = t.space;
        self.inflight.release(tid);
        if let Some(region) = open.snapshot.as_mut() {
            let mem = self.spaces.get_mut(&space).expect("space");
            snapshot::release_snapshot(mem, region);
        }
        Some(open.ctx.nr)
    }

    pub fn can_resume(&self, tid: Tid) -> bool {
        let Some(t) = self.tasks.get(&tid).filter(|t| t.alive) else {
            return false;
        };
        if let Some(w) = &t.pending_write {
            return !self.spaces[&t.space].would_stall(w.addr, w.bytes.len() as u64);
        }
        match t.block_reason() {
            Some(BlockReason::WaitSyscall { target, .. }) => self.inflight.others(target, tid) == 0,
            Some(BlockReason::PageFault { .. }) => true,
            None => false,
        }
    }

    /// Continues whatever the task is parked on.
    pub fn resume(&mut self, tid: Tid) -> Result<ResumeOutcome> {
        let t = self.live_mut(tid)?;
        if let Some(w) = t.pending_write.take() {
            let status = self.memory_mut(tid)?.user_write(w.addr, &w.bytes);
            if status == WriteStatus::Stalled {
                self.live_mut(tid)?.pending_write = Some(w);
            }
            return Ok(ResumeOutcome::Write(status));
        }
        let space = t.space;
        let t = self.tasks.get_mut(&tid).expect("live");
        let open = t
            .open
            .as_mut()
            .filter(|o| o.filtering.is_some())
            .ok_or_else(|| EngineError::Consistency(format!("task {tid} is not blocked")))?;
        let f = open.filtering.as_mut().expect("checked");
        if let Some(BlockReason::PageFault { addr, len }) = f.blocked {
            let mem = self.spaces.get_mut(&space).expect("space");
            if let Some(region) = open.snapshot.as_mut() {
                snapshot::service_fault(mem, region, addr, len);
            }
            if let Some(vm) = f.vm.as_mut() {
                vm.fault_serviced();
            }
        }
        Ok(ResumeOutcome::Enter(self.continue_filters(tid)?))
    }

    /// Closes the task's open syscall. Returns the syscall numbers whose
    /// in-flight registration this released.
    pub fn syscall_exit(&mut self, tid: Tid, nr: i32) -> Result<()> {
        let t = self.live(tid)?;
        match &t.open {
            None => {
                return Err(EngineError::Consistency(format!(
                    "task {tid} exits syscall {nr} without a matching enter"
                )))
            }
            Some(o) if o.ctx.nr != nr => {
                return Err(EngineError::Consistency(format!(
                    "task {tid} exits syscall {nr} but {} is open",
                    o.ctx.nr
                )))
            }
            Some(o) if o.filtering.is_some() => return Err(EngineError::Blocked(tid)),
            Some(_) => {}
        }
        self.finish_syscall(tid);
        Ok(())
    }

    /// Tasks whose open syscall write-protects a page under the task's
    /// stalled write.
    pub fn write_blockers(&self, tid: Tid) -> Vec<Tid> {
        let Some(t) = self.tasks.get(&tid) else {
            return Vec::new();
        };
        let Some(w) = &t.pending_write else {
            return Vec::new();
        };
        let first = page_of(w.addr);
        let last = page_of(w.addr + (w.bytes.len() as u64).max(1) - 1);
        self.tasks
            .values()
            .filter(|o| o.tid != tid && o.space == t.space)
            .filter(|o| {
                o.open
                    .as_ref()
                    .and_then(|s| s.snapshot.as_ref())
                    .is_some_and(|r| r.protected_pages.iter().any(|p| (first..=last).contains(p)))
            })
            .map(|o| o.tid)
            .collect()
    }

    /// The snapshot of the task's open syscall.
    pub fn snapshot_of(&self, tid: Tid) -> Option<&SnapshotRegion> {
        self.tasks.get(&tid)?.open.as_ref()?.snapshot.as_ref()
    }

    /// Action decided for the task's open syscall.
    pub fn decided(&self, tid: Tid) -> Option<ResolvedAction> {
        self.tasks.get(&tid)?.open.as_ref()?.decided
    }

    /// Test hook standing in for a process recreated by checkpoint/restore
    /// tooling: forgets the listed tasks' filter chains.
    pub fn reset_filter_state(&mut self, tids: &[Tid]) {
        for tid in tids {
            if let Some(t) = self.tasks.get_mut(tid) {
                for id in core::mem::take(&mut t.filter_chain) {
                    if let Some(m) = self.prog_meta.get_mut(&id) {
                        m.installs = m.installs.saturating_sub(1);
                    }
                }
            }
        }
    }

    pub(crate) fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub(crate) fn register_restored(&mut self, id: ProgId, loader: Tid) {
        let t = &self.tasks[&loader];
        self.prog_meta.insert(
            id,
            ProgMeta {
                fd_open: false,
                owner: t.tgid,
                loader: Loader {
                    tid: t.tid,
                    tgid: t.tgid,
                    creds: t.creds,
                },
                installs: 0,
            },
        );
    }

    pub(crate) fn append_chain(&mut self, tid: Tid, prog: ProgId) {
        self.tasks.get_mut(&tid).expect("checked").filter_chain.push(prog);
        if let Some(m) = self.prog_meta.get_mut(&prog) {
            m.installs += 1;
        }
    }
}
