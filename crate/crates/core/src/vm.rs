// SPDX-License-Identifier: Apache-2.0

//! Filter interpreter and helper functions.
//!
//! Execution is resumable: a helper that has to wait (`wait_syscall`, or a
//! sleepable filter touching memory outside the argument snapshot) returns
//! [`VmStep::Blocked`] with the machine parked on the call instruction, and
//! the caller runs it again once the condition may have cleared.
//!
//! Helper calling convention: arguments in r1-r5, result in r0, r1-r5 are
//! clobbered. Map operands are indices into the program's map table and keys
//! are passed by value. Lookups return an opaque handle (or 0) that
//! `ld_map`/`st_map` dereference. Errors come back as negative errno values.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::context::SyscallContext;
use crate::isa::{AluOp, HelperId, Opcode, Operand, FRAME_REG, MAP_ACCESS_WIDTH, NUM_REGS};
use crate::maps::{le_bytes, le_u64, MapId, MapKind, PolicyMap};
use crate::memory::UserMemory;
use crate::program::FilterProgram;
use crate::snapshot::{SnapshotMode, SnapshotRegion};
use crate::store::Store;
use crate::{ProgId, Tid};

pub const MAX_TAIL_CALLS: u32 = 32;
pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

/// Register value of the context pointer.
pub const CTX_PTR: u64 = 0xffff_c000_0000_0000;
/// Register value of the frame pointer.
pub const FRAME_PTR: u64 = 0xffff_d000_0000_0000;
const HANDLE_TAG: u64 = 0xffff_8000_0000_0000;
const HANDLE_MASK: u64 = 0x0000_0000_ffff_ffff;

pub const EPERM: i64 = 1;
pub const ENOENT: i64 = 2;
pub const E2BIG: i64 = 7;
pub const EFAULT: i64 = 14;
pub const EINVAL: i64 = 22;

const fn neg(errno: i64) -> u64 {
    (-errno) as u64
}

/// Per-helper call counts, indexed by helper id - 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HelperCounts(pub [u32; 10]);

impl HelperCounts {
    pub fn get(&self, h: HelperId) -> u32 {
        self.0[h.index()]
    }

    pub fn bump(&mut self, h: HelperId) {
        self.0[h.index()] += 1;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn add(&mut self, other: &HelperCounts) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum VmFault {
    ContextRead { pc: usize, offset: i64, width: i64 },
    UnknownHelper { pc: usize, id: i64 },
    UninitializedRegister { pc: usize, reg: u8 },
    BadHandle { pc: usize },
    MapAccess { pc: usize, offset: i64 },
    BadMap { pc: usize, index: i64 },
    NotSleepable { pc: usize },
    TailCallDepth,
    StepLimit,
    FellOffEnd { pc: usize },
    MissingProgram { id: u32 },
}

impl fmt::Display for VmFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmFault::ContextRead { pc, offset, width } => {
                write!(f, "pc {pc}: context read of {width} bytes at {offset}")
            }
            VmFault::UnknownHelper { pc, id } => write!(f, "pc {pc}: unknown helper {id}"),
            VmFault::UninitializedRegister { pc, reg } => write!(f, "pc {pc}: read of uninitialized r{reg}"),
            VmFault::BadHandle { pc } => write!(f, "pc {pc}: not a map value handle"),
            VmFault::MapAccess { pc, offset } => write!(f, "pc {pc}: map value access at {offset}"),
            VmFault::BadMap { pc, index } => write!(f, "pc {pc}: bad map operand {index}"),
            VmFault::NotSleepable { pc } => write!(f, "pc {pc}: blocking helper in non-sleepable filter"),
            VmFault::TailCallDepth => write!(f, "tail call depth exceeds {MAX_TAIL_CALLS}"),
            VmFault::StepLimit => f.write_str("step limit reached"),
            VmFault::FellOffEnd { pc } => write!(f, "pc {pc}: past end of program"),
            VmFault::MissingProgram { id } => write!(f, "program {id} not loaded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VmOutcome {
    pub raw_action: u32,
    pub steps_executed: u64,
    pub helper_calls: HelperCounts,
    pub faulted: Option<VmFault>,
}

/// Why a run is parked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum BlockReason {
    WaitSyscall { curr: i32, target: i32 },
    PageFault { addr: u64, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VmStep {
    Done(VmOutcome),
    Blocked(BlockReason),
}

/// Syscalls currently registered as in flight through `wait_syscall`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Inflight {
    counts: BTreeMap<i32, u32>,
    registered: BTreeMap<Tid, BTreeSet<i32>>,
}

impl Inflight {
    pub fn count(&self, nr: i32) -> u32 {
        self.counts.get(&nr).copied().unwrap_or(0)
    }

    /// Registers `nr` for the current syscall of `tid`, once.
    pub fn register(&mut self, tid: Tid, nr: i32) {
        if self.registered.entry(tid).or_default().insert(nr) {
            *self.counts.entry(nr).or_default() += 1;
        }
    }

    /// In-flight count of `nr` excluding the registration of `tid` itself.
    pub fn others(&self, nr: i32, tid: Tid) -> u32 {
        let own = self.registered.get(&tid).is_some_and(|s| s.contains(&nr));
        self.count(nr) - own as u32
    }

    /// Drops everything `tid` registered; counts floor at zero.
    pub fn release(&mut self, tid: Tid) -> Vec<i32> {
        let nrs: Vec<i32> = self.registered.remove(&tid).unwrap_or_default().into_iter().collect();
        for nr in &nrs {
            let c = self.counts.entry(*nr).or_default();
            *c = c.saturating_sub(1);
            if *c == 0 {
                self.counts.remove(nr);
            }
        }
        nrs
    }

    pub fn holders(&self, nr: i32) -> impl Iterator<Item = Tid> + '_ {
        self.registered
            .iter()
            .filter(move |(_, s)| s.contains(&nr))
            .map(|(t, _)| *t)
    }

    pub fn snapshot(&self) -> BTreeMap<i32, u32> {
        self.counts.clone()
    }
}

/// What a filter run may touch.
pub struct RuntimeEnv<'a> {
    pub store: &'a mut Store,
    pub inflight: &'a mut Inflight,
    pub clock_ns: u64,
    pub tid: Tid,
    /// Thread-group leader of the current task.
    pub tgid: Tid,
    pub memory: Option<&'a UserMemory>,
    pub snapshot: Option<&'a SnapshotRegion>,
    /// Outcome of the ptrace-style check between the filter's loader and
    /// the current task.
    pub user_access: bool,
    pub bad_action: u32,
    pub step_limit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Handle {
    Elem { map: MapId, key: Vec<u8> },
    Task { map: MapId, leader: Tid },
}

/// A filter run in progress.
#[derive(Debug, Clone)]
pub struct VmState {
    prog: Arc<FilterProgram>,
    ctx: SyscallContext,
    pc: usize,
    regs: [u64; NUM_REGS],
    init: u16,
    steps: u64,
    tail_calls: u32,
    helper_calls: HelperCounts,
    handles: Vec<Handle>,
    /// The pending helper already had its page fault serviced once.
    serviced: bool,
}

enum Flow {
    Next,
    Jump(usize),
    Exit(u64),
    Transfer(Arc<FilterProgram>),
    Block(BlockReason),
}

enum UserRead {
    Bytes(Vec<u8>),
    Truncated(Vec<u8>),
    Fault,
    Service { addr: u64, len: u64 },
}

impl VmState {
    pub fn new(prog: Arc<FilterProgram>, ctx: SyscallContext) -> Self {
        let mut s = VmState {
            prog,
            ctx,
            pc: 0,
            regs: [0; NUM_REGS],
            init: 0,
            steps: 0,
            tail_calls: 0,
            helper_calls: HelperCounts::default(),
            handles: Vec::new(),
            serviced: false,
        };
        s.reset_regs();
        s
    }

    fn reset_regs(&mut self) {
        self.regs = [0; NUM_REGS];
        self.regs[1] = CTX_PTR;
        self.regs[FRAME_REG as usize] = FRAME_PTR;
        self.init = (1 << 1) | (1 << FRAME_REG);
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sleepable(&self) -> bool {
        self.prog.sleepable
    }

    /// Marks the parked helper's page fault as serviced.
    pub fn fault_serviced(&mut self) {
        self.serviced = true;
    }

    fn get(&self, reg: u8) -> Result<u64, VmFault> {
        if self.init & (1 << reg) == 0 {
            return Err(VmFault::UninitializedRegister { pc: self.pc, reg });
        }
        Ok(self.regs[reg as usize])
    }

    fn set(&mut self, reg: u8, v: u64) {
        self.regs[reg as usize] = v;
        self.init |= 1 << reg;
    }

    fn map_id(&self, index: u64) -> Result<MapId, VmFault> {
        self.prog
            .map_refs
            .get(index as usize)
            .copied()
            .ok_or(VmFault::BadMap {
                pc: self.pc,
                index: index as i64,
            })
    }

    fn new_handle(&mut self, h: Handle) -> u64 {
        let idx = match self.handles.iter().position(|x| *x == h) {
            Some(i) => i,
            None => {
                self.handles.push(h);
                self.handles.len() - 1
            }
        };
        HANDLE_TAG | idx as u64
    }

    fn handle(&self, v: u64) -> Result<Handle, VmFault> {
        if v & !HANDLE_MASK != HANDLE_TAG {
            return Err(VmFault::BadHandle { pc: self.pc });
        }
        self.handles
            .get((v & HANDLE_MASK) as usize)
            .cloned()
            .ok_or(VmFault::BadHandle { pc: self.pc })
    }

    fn outcome(&self, raw_action: u32, faulted: Option<VmFault>) -> VmOutcome {
        VmOutcome {
            raw_action,
            steps_executed: self.steps,
            helper_calls: self.helper_calls,
            faulted,
        }
    }

    /// Runs until exit, a fault, or a blocking helper.
    pub fn run(&mut self, env: &mut RuntimeEnv<'_>) -> VmStep {
        loop {
            match self.step(env) {
                Ok(Flow::Next) => {
                    self.steps += 1;
                    self.pc += 1;
                }
                Ok(Flow::Jump(t)) => {
                    self.steps += 1;
                    self.pc = t;
                }
                Ok(Flow::Exit(r0)) => {
                    self.steps += 1;
                    return VmStep::Done(self.outcome(r0 as u32, None));
                }
                Ok(Flow::Transfer(prog)) => {
                    self.steps += 1;
                    self.tail_calls += 1;
                    self.prog = prog;
                    self.pc = 0;
                    self.reset_regs();
                }
                Ok(Flow::Block(reason)) => return VmStep::Blocked(reason),
                Err(fault) => return VmStep::Done(self.outcome(env.bad_action, Some(fault))),
            }
            self.serviced = false;
        }
    }

    fn step(&mut self, env: &mut RuntimeEnv<'_>) -> Result<Flow, VmFault> {
        if self.steps >= env.step_limit {
            return Err(VmFault::StepLimit);
        }
        let pc = self.pc;
        let insn = *self
            .prog
            .instructions
            .get(pc)
            .ok_or(VmFault::FellOffEnd { pc })?;
        match insn.opcode {
            Opcode::Alu(op, operand) => {
                let src = match operand {
                    Operand::Imm => insn.imm as u64,
                    Operand::Reg => self.get(insn.src)?,
                };
                let v = if op == AluOp::Mov {
                    src
                } else {
                    op.apply(self.get(insn.dst)?, src)
                };
                self.set(insn.dst, v);
            }
            Opcode::LdImm64 => self.set(insn.dst, insn.imm as u64),
            Opcode::LdCtx => {
                let v = self
                    .ctx
                    .read_field(insn.offset as i64, insn.imm)
                    .ok_or(VmFault::ContextRead {
                        pc,
                        offset: insn.offset as i64,
                        width: insn.imm,
                    })?;
                self.set(insn.dst, v);
            }
            Opcode::LdMap => {
                let h = self.handle(self.get(insn.src)?)?;
                let off = insn.offset as i64;
                let v = match value_slot(env.store, &h) {
                    Some(val) => {
                        let range = access_range(val.len(), off).ok_or(VmFault::MapAccess { pc, offset: off })?;
                        le_u64(&val[range])
                    }
                    // element deleted since lookup
                    None => 0,
                };
                self.set(insn.dst, v);
            }
            Opcode::StMap => {
                let h = self.handle(self.get(insn.dst)?)?;
                let v = self.get(insn.src)?;
                let off = insn.offset as i64;
                if let Some(val) = value_slot(env.store, &h) {
                    let range = access_range(val.len(), off).ok_or(VmFault::MapAccess { pc, offset: off })?;
                    val[range].copy_from_slice(&v.to_le_bytes());
                }
            }
            Opcode::Jmp(cond, operand) => {
                let lhs = self.get(insn.dst)?;
                let rhs = match operand {
                    Operand::Imm => insn.imm as u64,
                    Operand::Reg => self.get(insn.src)?,
                };
                if cond.holds(lhs, rhs) {
                    return Ok(Flow::Jump(jump(pc, insn.offset)));
                }
            }
            Opcode::Ja => return Ok(Flow::Jump(jump(pc, insn.offset))),
            Opcode::Exit => return Ok(Flow::Exit(self.get(0)?)),
            Opcode::TailCall => {
                let index = self.get(insn.dst)?;
                let r0 = self.get(0)?;
                self.helper_calls.bump(HelperId::TailCall);
                let map = self.map_id(insn.imm as u64)?;
                return match self.tail_target(env, map, index)? {
                    Some(p) => Ok(Flow::Transfer(p)),
                    None => Ok(Flow::Exit(r0)),
                };
            }
            Opcode::Call => {
                let helper = HelperId::from_id(insn.imm).ok_or(VmFault::UnknownHelper { pc, id: insn.imm })?;
                return self.call(helper, env);
            }
        }
        Ok(Flow::Next)
    }

    fn tail_target(
        &self,
        env: &RuntimeEnv<'_>,
        map: MapId,
        index: u64,
    ) -> Result<Option<Arc<FilterProgram>>, VmFault> {
        let bad = VmFault::BadMap {
            pc: self.pc,
            index: map.0 as i64,
        };
        let m = env.store.map(map).ok_or(bad)?;
        if m.kind() != MapKind::ProgArray {
            return Err(bad);
        }
        let Some(id) = m.prog_at(index) else {
            return Ok(None);
        };
        if self.tail_calls >= MAX_TAIL_CALLS {
            return Err(VmFault::TailCallDepth);
        }
        let p = env
            .store
            .program(ProgId(id))
            .ok_or(VmFault::MissingProgram { id })?;
        Ok(Some(p.clone()))
    }

    fn finish_call(&mut self, helper: HelperId, r0: u64) -> Result<Flow, VmFault> {
        self.helper_calls.bump(helper);
        for r in 1..=5 {
            self.init &= !(1 << r);
        }
        self.set(0, r0);
        Ok(Flow::Next)
    }

    fn call(&mut self, helper: HelperId, env: &mut RuntimeEnv<'_>) -> Result<Flow, VmFault> {
        let pc = self.pc;
        let r0 = match helper {
            HelperId::MapLookupElem => {
                let id = self.map_id(self.get(1)?)?;
                let key = self.get(2)?;
                let map = env.store.map(id).ok_or(VmFault::BadMap { pc, index: id.0 as i64 })?;
                let key = le_bytes(key, map.key_size() as usize);
                match map.lookup(&key) {
                    Ok(Some(_)) => self.new_handle(Handle::Elem { map: id, key }),
                    _ => 0,
                }
            }
            HelperId::MapUpdateElem => {
                let id = self.map_id(self.get(1)?)?;
                let (key, value, flags) = (self.get(2)?, self.get(3)?, self.get(4)?);
                let map = env.store.map_mut(id).ok_or(VmFault::BadMap { pc, index: id.0 as i64 })?;
                let key = le_bytes(key, map.key_size() as usize);
                let value = le_bytes(value, map.value_size() as usize);
                match map.update(&key, &value, flags) {
                    Ok(()) => 0,
                    Err(e) => e.errno() as u64,
                }
            }
            HelperId::MapDeleteElem => {
                let id = self.map_id(self.get(1)?)?;
                let key = self.get(2)?;
                let map = env.store.map_mut(id).ok_or(VmFault::BadMap { pc, index: id.0 as i64 })?;
                let key = le_bytes(key, map.key_size() as usize);
                match map.delete(&key) {
                    Ok(()) => 0,
                    Err(e) => e.errno() as u64,
                }
            }
            HelperId::TailCall => {
                if self.get(1)? != CTX_PTR {
                    return Err(VmFault::BadHandle { pc });
                }
                let map = self.map_id(self.get(2)?)?;
                let index = self.get(3)?;
                match self.tail_target(env, map, index)? {
                    Some(p) => {
                        self.helper_calls.bump(HelperId::TailCall);
                        return Ok(Flow::Transfer(p));
                    }
                    None => neg(ENOENT),
                }
            }
            HelperId::KtimeGetNs => env.clock_ns,
            HelperId::SafeReadUser | HelperId::SafeReadUserStr => {
                let dst = self.handle(self.get(1)?)?;
                let size = self.get(2)?;
                let addr = self.get(3)?;
                if !env.user_access {
                    neg(EPERM)
                } else {
                    let cap = value_slot(env.store, &dst).map_or(0, |v| v.len() as u64);
                    if size == 0 || size > cap {
                        return Err(VmFault::MapAccess { pc, offset: size as i64 });
                    }
                    let read = if helper == HelperId::SafeReadUser {
                        self.read_user(env, addr, size)
                    } else {
                        self.read_user_str(env, addr, size)
                    };
                    let (bytes, ret) = match read {
                        UserRead::Bytes(b) => {
                            let n = b.len() as u64;
                            (b, if helper == HelperId::SafeReadUser { 0 } else { n })
                        }
                        UserRead::Truncated(b) => (b, neg(E2BIG)),
                        UserRead::Fault => (Vec::new(), neg(EFAULT)),
                        UserRead::Service { addr, len } => {
                            return Ok(Flow::Block(BlockReason::PageFault { addr, len }));
                        }
                    };
                    if let Some(val) = value_slot(env.store, &dst) {
                        val[..bytes.len()].copy_from_slice(&bytes);
                    }
                    ret
                }
            }
            HelperId::SafeTaskStorageGet => {
                let id = self.map_id(self.get(1)?)?;
                let create = self.get(2)? & 1 == 1;
                let leader = env.tgid;
                let map = env.store.map_mut(id).ok_or(VmFault::BadMap { pc, index: id.0 as i64 })?;
                match map.task_storage_get(leader, create) {
                    Ok(Some(_)) => self.new_handle(Handle::Task { map: id, leader }),
                    _ => 0,
                }
            }
            HelperId::SafeTaskStorageDelete => {
                let id = self.map_id(self.get(1)?)?;
                let map = env.store.map_mut(id).ok_or(VmFault::BadMap { pc, index: id.0 as i64 })?;
                match map.task_storage_delete(env.tgid) {
                    Ok(()) => 0,
                    Err(e) => e.errno() as u64,
                }
            }
            HelperId::WaitSyscall => {
                if !self.prog.sleepable {
                    return Err(VmFault::NotSleepable { pc });
                }
                let curr = self.get(1)? as i32;
                let target = self.get(2)? as i32;
                env.inflight.register(env.tid, curr);
                if env.inflight.others(target, env.tid) > 0 {
                    return Ok(Flow::Block(BlockReason::WaitSyscall { curr, target }));
                }
                0
            }
        };
        self.finish_call(helper, r0)
    }

    fn read_user(&self, env: &RuntimeEnv<'_>, addr: u64, len: u64) -> UserRead {
        if let Some(snap) = env.snapshot {
            if let Some(b) = snap.translate(addr, len) {
                return match (snap.mode, env.memory) {
                    (SnapshotMode::Copy, _) => UserRead::Bytes(b.to_vec()),
                    (SnapshotMode::WriteProtect, Some(mem)) => match mem.read(addr, len) {
                        Ok(live) => UserRead::Bytes(live),
                        Err(_) => UserRead::Fault,
                    },
                    (SnapshotMode::WriteProtect, None) => UserRead::Fault,
                };
            }
        }
        match env.memory {
            Some(mem) if self.prog.sleepable && !self.serviced && mem.is_mapped(addr, len) => {
                UserRead::Service { addr, len }
            }
            _ => UserRead::Fault,
        }
    }

    fn read_user_str(&self, env: &RuntimeEnv<'_>, addr: u64, max: u64) -> UserRead {
        if let Some(snap) = env.snapshot {
            if let Some(tail) = snap.translate_tail(addr) {
                let n = (tail.len() as u64).min(max);
                let bytes = match (snap.mode, env.memory) {
                    (SnapshotMode::Copy, _) => tail[..n as usize].to_vec(),
                    (SnapshotMode::WriteProtect, Some(mem)) => match mem.read(addr, n) {
                        Ok(live) => live,
                        Err(_) => return UserRead::Fault,
                    },
                    (SnapshotMode::WriteProtect, None) => return UserRead::Fault,
                };
                if let Some(i) = bytes.iter().position(|b| *b == 0) {
                    return UserRead::Bytes(bytes[..=i].to_vec());
                }
                if n == max {
                    return UserRead::Truncated(bytes);
                }
            }
        }
        match env.memory {
            Some(mem) if self.prog.sleepable && !self.serviced => {
                let len = mem.mapped_len(addr, max);
                if len > 0 {
                    UserRead::Service { addr, len }
                } else {
                    UserRead::Fault
                }
            }
            _ => UserRead::Fault,
        }
    }
}

fn jump(pc: usize, offset: i16) -> usize {
    (pc as i64 + 1 + offset as i64) as usize
}

fn access_range(len: usize, off: i64) -> Option<core::ops::Range<usize>> {
    let start = usize::try_from(off).ok()?;
    let end = start.checked_add(MAP_ACCESS_WIDTH)?;
    (end <= len).then_some(start..end)
}

fn value_slot<'s>(store: &'s mut Store, h: &Handle) -> Option<&'s mut [u8]> {
    match h {
        Handle::Elem { map, key } => store.map_mut(*map)?.lookup_mut(key).ok().flatten(),
        Handle::Task { map, leader } => store.map_mut(*map)?.task_storage_get(*leader, false).ok().flatten(),
    }
}

/// Starts a fresh run of `program`. Keep a [`VmState`] instead to resume
/// runs that block.
pub fn execute(program: Arc<FilterProgram>, ctx: &SyscallContext, env: &mut RuntimeEnv<'_>) -> VmStep {
    VmState::new(program, *ctx).run(env)
}

/// Self-contained runtime for running programs outside the engine.
#[derive(Debug, Clone)]
pub struct Sandbox {
    pub store: Store,
    pub inflight: Inflight,
    pub clock_ns: u64,
    pub tid: Tid,
    pub tgid: Tid,
    pub memory: Option<UserMemory>,
    pub snapshot: Option<SnapshotRegion>,
    pub bad_action: u32,
    pub step_limit: u64,
}

impl Default for Sandbox {
    fn default() -> Self {
        Sandbox {
            store: Store::new(),
            inflight: Inflight::default(),
            clock_ns: 0,
            tid: Tid(1),
            tgid: Tid(1),
            memory: None,
            snapshot: None,
            bad_action: crate::action::SECCOMP_RET_KILL_THREAD,
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

impl Sandbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a bundle without verifying it; returns the entry program.
    pub fn load(&mut self, bundle: impl Into<crate::program::ProgramBundle>) -> Result<ProgId, crate::store::StoreError> {
        let (ids, _) = self.store.add_bundle(bundle.into())?;
        Ok(ids[0])
    }

    pub fn map(&self, prog: ProgId, index: usize) -> Option<&PolicyMap> {
        let id = *self.store.program(prog)?.map_refs.get(index)?;
        self.store.map(id)
    }

    pub fn start(&self, prog: ProgId, ctx: &SyscallContext) -> VmState {
        VmState::new(self.store.program(prog).expect("loaded").clone(), *ctx)
    }

    pub fn resume(&mut self, state: &mut VmState) -> VmStep {
        let mut env = RuntimeEnv {
            store: &mut self.store,
            inflight: &mut self.inflight,
            clock_ns: self.clock_ns,
            tid: self.tid,
            tgid: self.tgid,
            memory: self.memory.as_ref(),
            snapshot: self.snapshot.as_ref(),
            user_access: true,
            bad_action: self.bad_action,
            step_limit: self.step_limit,
        };
        state.run(&mut env)
    }

    /// Runs to completion; panics if the program blocks.
    pub fn run(&mut self, prog: ProgId, ctx: &SyscallContext) -> VmOutcome {
        let mut st = self.start(prog, ctx);
        match self.resume(&mut st) {
            VmStep::Done(o) => o,
            VmStep::Blocked(r) => panic!("program blocked: {r:?}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{SECCOMP_RET_ALLOW, SECCOMP_RET_KILL_THREAD};
    use crate::asm::{assemble, assemble_bundle};
    use crate::memory::PageFlags;
    use crate::snapshot::{snapshot_args, ArgDescriptor, ArgSpec};
    use alloc::format;
    use alloc::string::String;

    fn sandbox(src: &str) -> (Sandbox, ProgId) {
        let mut sb = Sandbox::new();
        let id = sb.load(assemble_bundle(src).unwrap()).unwrap();
        (sb, id)
    }

    fn ctx(nr: i32) -> SyscallContext {
        SyscallContext::new(nr, [0; 6])
    }

    #[test]
    fn allow_all_runs_two_steps() {
        let (mut sb, id) = sandbox("ld_imm64 r0, 0x7fff0000\nexit");
        let o = sb.run(id, &ctx(0));
        assert_eq!(o.raw_action, SECCOMP_RET_ALLOW);
        assert_eq!(o.steps_executed, 2);
        assert_eq!(o.faulted, None);
    }

    #[test]
    fn runtime_faults_use_bad_action() {
        let (mut sb, id) = sandbox("mov r0, r5\nexit");
        let o = sb.run(id, &ctx(0));
        assert_eq!(o.faulted, Some(VmFault::UninitializedRegister { pc: 0, reg: 5 }));
        assert_eq!(o.raw_action, SECCOMP_RET_KILL_THREAD);
        let (mut sb, id) = sandbox("ld_ctx r0, 4, 2\nexit");
        assert!(matches!(sb.run(id, &ctx(0)).faulted, Some(VmFault::ContextRead { .. })));
        let (mut sb, id) = sandbox("call 42\nexit");
        assert!(matches!(sb.run(id, &ctx(0)).faulted, Some(VmFault::UnknownHelper { id: 42, .. })));
    }

    #[test]
    fn map_helpers_through_handles() {
        let src = "map m hash 4 16 2\n\
                   mov r1, @m\nld_ctx r2, 4, 0\nmov r3, 5\nmov r4, 0\ncall map_update_elem\n\
                   mov r1, @m\nld_ctx r2, 4, 0\ncall map_lookup_elem\n\
                   jeq r0, 0, miss\nld_map r6, r0, 0\nadd r6, 1\nst_map r0, r6, 8\nld_map r0, r0, 8\nexit\n\
                   miss: mov r0, 0\nexit";
        let (mut sb, id) = sandbox(src);
        let o = sb.run(id, &ctx(7));
        assert_eq!(o.raw_action, 6);
        assert_eq!(o.helper_calls.get(HelperId::MapUpdateElem), 1);
        assert_eq!(o.helper_calls.get(HelperId::MapLookupElem), 1);
        let m = sb.map(id, 0).unwrap();
        let mut want = [0u8; 16];
        want[0] = 5;
        want[8] = 6;
        assert_eq!(m.lookup(&7u32.to_le_bytes()).unwrap().unwrap(), &want);
        sb.run(id, &ctx(8));
        // third distinct key does not fit
        let o = sb.run(id, &ctx(9));
        assert_eq!(o.raw_action, 0);
    }

    #[test]
    fn clock_reads_are_stable_within_a_run() {
        let (mut sb, id) = sandbox("call ktime_get_ns\nmov r6, r0\ncall ktime_get_ns\nsub r0, r6\nexit");
        sb.clock_ns = 5_000_000;
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 0);
        let (mut sb, id) = sandbox("call ktime_get_ns\nexit");
        sb.clock_ns = 5_000_000;
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 5_000_000);
    }

    fn chain(n: usize) -> String {
        // program i tail-calls program i+1; the last one returns 7
        let mut src = String::from("map p prog_array 4 4 64\n");
        for i in 1..=n {
            src.push_str(&format!("entry p {} s{}\n", i, i));
        }
        src.push_str("section seccomp s0\nmov r0, 1\nmov r2, 1\ntail_call r2, @p\n");
        for i in 1..=n {
            if i < n {
                src.push_str(&format!("section seccomp s{i}\nmov r0, 1\nmov r2, {}\ntail_call r2, @p\n", i + 1));
            } else {
                src.push_str(&format!("section seccomp s{i}\nmov r0, 7\nexit\n"));
            }
        }
        src
    }

    #[test]
    fn tail_call_depth_limit() {
        let (mut sb, id) = sandbox(&chain(32));
        let o = sb.run(id, &ctx(0));
        assert_eq!(o.faulted, None);
        assert_eq!(o.raw_action, 7);
        assert_eq!(o.helper_calls.get(HelperId::TailCall), 32);
        let (mut sb, id) = sandbox(&chain(33));
        let o = sb.run(id, &ctx(0));
        assert_eq!(o.faulted, Some(VmFault::TailCallDepth));
    }

    #[test]
    fn empty_tail_slot_falls_back_to_r0() {
        let (mut sb, id) = sandbox("map p prog_array 4 4 4\nmov r0, 9\nmov r2, 3\ntail_call r2, @p");
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 9);
        let (mut sb, id) =
            sandbox("map p prog_array 4 4 4\nmov r2, @p\nmov r3, 3\ncall tail_call\nexit");
        assert_eq!(sb.run(id, &ctx(0)).raw_action as i32, -ENOENT as i32);
    }

    #[test]
    fn task_storage_is_keyed_by_leader() {
        let src = "map t task_storage 4 8 8\nmov r1, @t\nmov r2, 1\ncall safe_task_storage_get\n\
                   jeq r0, 0, out\nld_map r6, r0, 0\nadd r6, 1\nst_map r0, r6, 0\nmov r0, r6\nexit\nout: mov r0, 0\nexit";
        let (mut sb, id) = sandbox(src);
        sb.tid = Tid(10);
        sb.tgid = Tid(10);
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 1);
        // a thread of the same process sees the leader's cell
        sb.tid = Tid(11);
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 2);
        // another process gets its own
        sb.tid = Tid(20);
        sb.tgid = Tid(20);
        assert_eq!(sb.run(id, &ctx(0)).raw_action, 1);
        let del = "map t task_storage 4 8 8\nmov r1, @t\ncall safe_task_storage_delete\nexit";
        let mut p = assemble(del).unwrap();
        p.map_refs = sb.store.program(id).unwrap().map_refs.clone();
        let did = sb.store.alloc_prog_id();
        sb.store.programs.insert(did, Arc::new(p));
        assert_eq!(sb.run(did, &ctx(0)).raw_action, 0);
        assert_eq!(sb.run(did, &ctx(0)).raw_action as i32, -ENOENT as i32);
    }

    fn reader(sleepable: bool, str_read: bool) -> String {
        let section = if sleepable { "seccomp-sleepable" } else { "seccomp" };
        let helper = if str_read { "safe_read_user_str" } else { "safe_read_user" };
        format!(
            "section {section}\nmap b array 4 16 1\nmov r1, @b\nmov r2, 0\ncall map_lookup_elem\njne r0, 0, go\nmov r0, 0\nexit\n\
             go: mov r7, r0\nmov r1, r0\nmov r2, 8\nld_ctx r3, 8, 16\ncall {helper}\nmov r6, r0\n\
             ld_map r8, r7, 0\njeq r6, 0, ok\nmov r0, r6\nexit\nok: mov r0, r8\nexit"
        )
    }

    fn memory_with(addr: u64, bytes: &[u8]) -> UserMemory {
        let mut m = UserMemory::new();
        m.map(0x1000, 0x4000, PageFlags::RW).unwrap();
        m.poke(addr, bytes).unwrap();
        m
    }

    #[test]
    fn safe_read_user_sees_snapshot_not_live_memory() {
        let (mut sb, id) = sandbox(&reader(false, false));
        let mut mem = memory_with(0x1000, b"AAAAAAAA");
        let desc = ArgDescriptor {
            nr: 0,
            name: String::new(),
            args: alloc::vec![ArgSpec::UserBuffer { size: 8 }],
        };
        let c = SyscallContext::new(0, [0x1000, 0, 0, 0, 0, 0]);
        sb.snapshot = Some(snapshot_args(&mut mem, &c, Some(&desc), SnapshotMode::Copy, Tid(1)));
        mem.user_write(0x1000, b"BBBBBBBB");
        sb.memory = Some(mem);
        assert_eq!(sb.run(id, &c).raw_action, u32::from_le_bytes(*b"AAAA"));
    }

    #[test]
    fn uncovered_reads_fault_or_block() {
        let c = SyscallContext::new(0, [0x2000, 0, 0, 0, 0, 0]);
        let (mut sb, id) = sandbox(&reader(false, false));
        sb.memory = Some(memory_with(0x2000, b"CCCCCCCC"));
        sb.snapshot = Some(SnapshotRegion::empty(Tid(1), SnapshotMode::Copy));
        assert_eq!(sb.run(id, &c).raw_action as i32, -EFAULT as i32);

        let (mut sb, id) = sandbox(&reader(true, false));
        sb.memory = Some(memory_with(0x2000, b"CCCCCCCC"));
        let mut snap = SnapshotRegion::empty(Tid(1), SnapshotMode::Copy);
        let mut st = sb.start(id, &c);
        let VmStep::Blocked(BlockReason::PageFault { addr, len }) = sb.resume(&mut st) else {
            panic!("expected a page fault");
        };
        crate::snapshot::service_fault(sb.memory.as_mut().unwrap(), &mut snap, addr, len);
        sb.snapshot = Some(snap);
        st.fault_serviced();
        let VmStep::Done(o) = sb.resume(&mut st) else { panic!() };
        assert_eq!(o.raw_action, u32::from_le_bytes(*b"CCCC"));
        // unmapped address faults in both kinds of program
        let far = SyscallContext::new(0, [0x9000_0000, 0, 0, 0, 0, 0]);
        assert_eq!(sb.run(id, &far).raw_action as i32, -EFAULT as i32);
    }

    #[test]
    fn string_reads() {
        let desc = ArgDescriptor {
            nr: 0,
            name: String::new(),
            args: alloc::vec![ArgSpec::UserString { max: 64 }],
        };
        let len_of = |bytes: &[u8]| {
            let (mut sb, id) = sandbox(&reader(false, true).replace("jeq r6, 0, ok\nmov r0, r6\nexit\nok: ", ""));
            let mut mem = memory_with(0x1000, bytes);
            let c = SyscallContext::new(0, [0x1000, 0, 0, 0, 0, 0]);
            sb.snapshot = Some(snapshot_args(&mut mem, &c, Some(&desc), SnapshotMode::Copy, Tid(1)));
            sb.memory = Some(mem);
            let mut st = sb.start(id, &c);
            let VmStep::Done(o) = sb.resume(&mut st) else { panic!() };
            (o.raw_action as i32, st.regs[6] as i64)
        };
        assert_eq!(len_of(b"etc\0x").1, 4);
        assert_eq!(len_of(b"etc\0x").0, u32::from_le_bytes(*b"etc\0") as i32);
        assert_eq!(len_of(b"\0").1, 1);
        assert_eq!(len_of(b"abcdefghijkl\0").1, -E2BIG);
    }

    #[test]
    fn wait_syscall_blocks_until_partner_exits() {
        let src = "section seccomp-sleepable\nmov r1, 77\nmov r2, 25\ncall wait_syscall\nld_imm64 r0, 0x7fff0000\nexit";
        let (mut sb, id) = sandbox(src);
        // nothing in flight: returns at once and registers the caller
        sb.tid = Tid(2);
        assert_eq!(sb.run(id, &ctx(77)).raw_action, SECCOMP_RET_ALLOW);
        assert_eq!(sb.inflight.count(77), 1);
        sb.inflight.release(Tid(2));
        sb.inflight.register(Tid(1), 25);
        let mut st = sb.start(id, &ctx(77));
        assert_eq!(
            sb.resume(&mut st),
            VmStep::Blocked(BlockReason::WaitSyscall { curr: 77, target: 25 })
        );
        // re-checking does not register twice
        assert!(matches!(sb.resume(&mut st), VmStep::Blocked(_)));
        assert_eq!(sb.inflight.count(77), 1);
        sb.inflight.release(Tid(1));
        let VmStep::Done(o) = sb.resume(&mut st) else { panic!() };
        assert_eq!(o.raw_action, SECCOMP_RET_ALLOW);
        assert_eq!(o.steps_executed, 5);
        assert_eq!(o.helper_calls.get(HelperId::WaitSyscall), 1);
        sb.inflight.release(Tid(2));
        sb.inflight.release(Tid(2));
        assert_eq!(sb.inflight.count(77), 0);
    }

    #[test]
    fn blocking_helper_in_unverified_non_sleepable_faults() {
        let (mut sb, id) = sandbox("mov r1, 1\nmov r2, 2\ncall wait_syscall\nexit");
        assert!(matches!(sb.run(id, &ctx(0)).faulted, Some(VmFault::NotSleepable { .. })));
    }
}
