// SPDX-License-Identifier: Apache-2.0

//! Static checks a program must pass before it can be loaded.
//!
//! The check is an abstract interpretation over a constant-tracking domain.
//! Every reachable path is explored, forking on conditions whose outcome is
//! not a known constant. Abstract states at join points are memoized: a state
//! met again while its own continuation is still being explored means a
//! possible infinite loop, and a fully explored state is not revisited.
//! Exploration is capped by an abstract step budget, so any accepted program
//! terminates on every input within that many steps.
//!
//! This is weaker than the kernel verifier (no range tracking): loops only
//! pass when their trip count is a compile-time constant.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::context::{field_width_at, CONTEXT_SIZE};
use crate::isa::{HelperId, Instruction, Opcode, Operand, FRAME_REG, MAP_ACCESS_WIDTH, NUM_REGS};
use crate::maps::{MapKind, PolicyMap};
use crate::program::FilterProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub max_instructions: usize,
    pub step_budget: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            max_instructions: 100_000,
            step_budget: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifierReport {
    pub accepted: bool,
    /// Empty iff accepted.
    pub reason: String,
    pub offending_instruction: Option<usize>,
    /// Per-instruction annotations, sorted by index.
    pub notes: Vec<(usize, String)>,
    /// Abstract states explored.
    pub steps: u64,
}

/// Abstract register contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Abs {
    Uninit,
    Known(u64),
    Unknown,
    Ctx,
    Frame,
    /// Non-null handle to a value of map `m`.
    Value(u16),
    /// Result of a lookup, not yet null-checked.
    ValueOrNull(u16),
}

impl Abs {
    fn is_scalar(self) -> bool {
        matches!(self, Abs::Known(_) | Abs::Unknown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct State {
    pc: u32,
    regs: [Abs; NUM_REGS],
}

struct Reject {
    pc: usize,
    reason: String,
}

fn reject<T>(pc: usize, reason: impl Into<String>) -> Result<T, Reject> {
    Err(Reject {
        pc,
        reason: reason.into(),
    })
}

/// Runs every check and records acceptance on the program.
pub fn verify(program: &mut FilterProgram, config: &VerifierConfig) -> VerifierReport {
    let report = check(program, config);
    program.verified = report.accepted;
    report
}

/// Pure form of [`verify`].
pub fn check(program: &FilterProgram, config: &VerifierConfig) -> VerifierReport {
    let mut v = Verifier {
        prog: program,
        insns: &program.instructions,
        steps: 0,
    };
    let result = v.static_checks(config).and_then(|()| v.explore(config));
    match result {
        Ok(visited) => {
            let notes = visited
                .iter()
                .enumerate()
                .filter(|(_, seen)| !**seen)
                .map(|(pc, _)| (pc, String::from("unreachable")))
                .collect();
            VerifierReport {
                accepted: true,
                reason: String::new(),
                offending_instruction: None,
                notes,
                steps: v.steps,
            }
        }
        Err(r) => VerifierReport {
            accepted: false,
            notes: vec![(r.pc, r.reason.clone())],
            offending_instruction: Some(r.pc),
            reason: r.reason,
            steps: v.steps,
        },
    }
}

struct Verifier<'a> {
    prog: &'a FilterProgram,
    insns: &'a [Instruction],
    steps: u64,
}

impl Verifier<'_> {
    fn static_checks(&self, config: &VerifierConfig) -> Result<(), Reject> {
        let n = self.insns.len();
        if n == 0 {
            return reject(0, "empty program");
        }
        if n > config.max_instructions {
            return reject(
                config.max_instructions,
                format!("program has {n} instructions, limit is {}", config.max_instructions),
            );
        }
        for (i, m) in self.prog.maps.iter().enumerate() {
            if let Err(e) = PolicyMap::new(m.kind, m.key_size, m.value_size, m.max_entries) {
                return reject(0, format!("map {i} `{}`: {e}", m.name));
            }
        }
        for (pc, insn) in self.insns.iter().enumerate() {
            if insn.dst as usize >= NUM_REGS || insn.src as usize >= NUM_REGS {
                return reject(pc, "register index out of range");
            }
            let writes_dst = matches!(
                insn.opcode,
                Opcode::Alu(..) | Opcode::LdImm64 | Opcode::LdCtx | Opcode::LdMap
            );
            if writes_dst && insn.dst == FRAME_REG {
                return reject(pc, "frame register r10 is read-only");
            }
            if let Some(t) = insn.jump_target(pc) {
                if t < 0 || t >= n as i64 {
                    return reject(pc, format!("jump target {t} out of range"));
                }
            }
            match insn.opcode {
                Opcode::LdCtx => {
                    let (off, width) = (insn.offset as i64, insn.imm);
                    if off < 0 || width <= 0 || off + width > CONTEXT_SIZE as i64 {
                        return reject(pc, "context read out of bounds");
                    }
                    if field_width_at(off) != Some(width as usize) {
                        return reject(pc, "misaligned context read: must load exactly one field");
                    }
                }
                Opcode::Call => {
                    let Some(h) = HelperId::from_id(insn.imm) else {
                        return reject(pc, format!("call to helper {} outside the whitelist", insn.imm));
                    };
                    if h.requires_sleepable() && !self.prog.sleepable {
                        return reject(pc, format!("{h} is only allowed in sleepable programs"));
                    }
                }
                Opcode::TailCall => {
                    self.map_of_kind(pc, insn.imm, &[MapKind::ProgArray], "tail_call")?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn map_of_kind(&self, pc: usize, idx: i64, kinds: &[MapKind], what: &str) -> Result<u16, Reject> {
        let Some(def) = usize::try_from(idx).ok().and_then(|i| self.prog.maps.get(i)) else {
            return reject(pc, format!("{what}: map operand {idx} is not a declared map"));
        };
        if !kinds.contains(&def.kind) {
            return reject(pc, format!("{what}: map `{}` has kind {}", def.name, def.kind.name()));
        }
        Ok(idx as u16)
    }

    fn value_size(&self, m: u16) -> usize {
        self.prog.maps[m as usize].value_size as usize
    }

    /// Pcs where two or more control-flow edges meet.
    fn join_points(&self) -> Vec<bool> {
        let n = self.insns.len();
        let mut preds = vec![0u32; n + 1];
        preds[0] = 1;
        for (pc, insn) in self.insns.iter().enumerate() {
            match insn.opcode {
                Opcode::Exit | Opcode::TailCall => {}
                Opcode::Ja => preds[(pc as i64 + 1 + insn.offset as i64) as usize] += 1,
                Opcode::Jmp(..) => {
                    preds[pc + 1] += 1;
                    preds[(pc as i64 + 1 + insn.offset as i64) as usize] += 1;
                }
                _ => preds[pc + 1] += 1,
            }
        }
        preds.iter().map(|p| *p >= 2).collect()
    }

    fn explore(&mut self, config: &VerifierConfig) -> Result<Vec<bool>, Reject> {
        enum Work {
            Enter(State),
            Leave(State),
        }
        let joins = self.join_points();
        let mut visited = vec![false; self.insns.len()];
        let mut on_path: BTreeSet<State> = BTreeSet::new();
        let mut done: BTreeSet<State> = BTreeSet::new();

        let mut init = [Abs::Uninit; NUM_REGS];
        init[1] = Abs::Ctx;
        init[FRAME_REG as usize] = Abs::Frame;
        let mut work = vec![Work::Enter(State { pc: 0, regs: init })];

        while let Some(w) = work.pop() {
            let st = match w {
                Work::Leave(st) => {
                    on_path.remove(&st);
                    done.insert(st);
                    continue;
                }
                Work::Enter(st) => st,
            };
            self.steps += 1;
            if self.steps > config.step_budget {
                return reject(
                    st.pc as usize,
                    format!("step budget of {} exhausted; cannot prove termination", config.step_budget),
                );
            }
            let pc = st.pc as usize;
            if joins[pc] {
                if on_path.contains(&st) {
                    return reject(pc, "possible infinite loop: abstract state repeats");
                }
                if done.contains(&st) {
                    continue;
                }
                on_path.insert(st);
                work.push(Work::Leave(st));
            }
            visited[pc] = true;
            for next in self.successors(&st)?.into_iter().flatten() {
                if next.pc as usize >= self.insns.len() {
                    return reject(pc, "control falls off the end of the program");
                }
                work.push(Work::Enter(next));
            }
        }
        Ok(visited)
    }

    fn read(&self, st: &State, reg: u8, pc: usize) -> Result<Abs, Reject> {
        match st.regs[reg as usize] {
            Abs::Uninit => reject(pc, format!("read of uninitialized register r{reg}")),
            v => Ok(v),
        }
    }

    fn scalar(&self, st: &State, reg: u8, pc: usize) -> Result<Abs, Reject> {
        let v = self.read(st, reg, pc)?;
        if !v.is_scalar() {
            return reject(pc, format!("r{reg} holds a pointer where a scalar is required"));
        }
        Ok(v)
    }

    fn const_map(&self, st: &State, reg: u8, pc: usize, kinds: &[MapKind], what: &str) -> Result<u16, Reject> {
        match self.read(st, reg, pc)? {
            Abs::Known(v) => {
                let m = self.map_of_kind(pc, v as i64, kinds, what)?;
                Ok(m)
            }
            _ => reject(pc, format!("{what}: r{reg} must be a constant map index")),
        }
    }

    fn register_keyed(&self, m: u16, pc: usize, what: &str) -> Result<(), Reject> {
        if self.prog.maps[m as usize].key_size as usize > 8 {
            return reject(pc, format!("{what}: keys wider than 8 bytes cannot be passed in a register"));
        }
        Ok(())
    }

    fn successors(&self, st: &State) -> Result<[Option<State>; 2], Reject> {
        let pc = st.pc as usize;
        let insn = self.insns[pc];
        let mut next = *st;
        next.pc += 1;
        let dst = insn.dst as usize;
        match insn.opcode {
            Opcode::Alu(op, operand) => {
                let src = match operand {
                    Operand::Imm => Abs::Known(insn.imm as u64),
                    Operand::Reg => self.read(st, insn.src, pc)?,
                };
                if op == crate::isa::AluOp::Mov {
                    next.regs[dst] = src;
                } else {
                    let d = self.read(st, insn.dst, pc)?;
                    if !d.is_scalar() || !src.is_scalar() {
                        return reject(pc, "arithmetic on a pointer");
                    }
                    next.regs[dst] = match (d, src) {
                        (Abs::Known(a), Abs::Known(b)) => Abs::Known(op.apply(a, b)),
                        _ => Abs::Unknown,
                    };
                }
                Ok([Some(next), None])
            }
            Opcode::LdImm64 => {
                next.regs[dst] = Abs::Known(insn.imm as u64);
                Ok([Some(next), None])
            }
            Opcode::LdCtx => {
                next.regs[dst] = Abs::Unknown;
                Ok([Some(next), None])
            }
            Opcode::LdMap | Opcode::StMap => {
                let (handle_reg, what) = if insn.opcode == Opcode::LdMap {
                    (insn.src, "ld_map")
                } else {
                    (insn.dst, "st_map")
                };
                let m = match self.read(st, handle_reg, pc)? {
                    Abs::Value(m) => m,
                    Abs::ValueOrNull(_) => {
                        return reject(pc, format!("{what}: r{handle_reg} may be null; check it first"));
                    }
                    _ => return reject(pc, format!("{what}: r{handle_reg} is not a map value")),
                };
                let off = insn.offset as i64;
                if off < 0 || off as usize + MAP_ACCESS_WIDTH > self.value_size(m) {
                    return reject(pc, format!("{what}: offset {off} outside the {}-byte value", self.value_size(m)));
                }
                if insn.opcode == Opcode::LdMap {
                    next.regs[dst] = Abs::Unknown;
                } else {
                    self.scalar(st, insn.src, pc)?;
                }
                Ok([Some(next), None])
            }
            Opcode::Ja => {
                next.pc = (pc as i64 + 1 + insn.offset as i64) as u32;
                Ok([Some(next), None])
            }
            Opcode::Jmp(cond, operand) => {
                let target = (pc as i64 + 1 + insn.offset as i64) as u32;
                let lhs = self.read(st, insn.dst, pc)?;
                let rhs = match operand {
                    Operand::Imm => Abs::Known(insn.imm as u64),
                    Operand::Reg => self.read(st, insn.src, pc)?,
                };
                let mut taken = *st;
                taken.pc = target;
                use crate::isa::JmpCond::{Eq, Ne};
                match (lhs, rhs) {
                    (Abs::Known(a), Abs::Known(b)) => {
                        if cond.holds(a, b) {
                            Ok([Some(taken), None])
                        } else {
                            Ok([Some(next), None])
                        }
                    }
                    (l, r) if l.is_scalar() && r.is_scalar() => Ok([Some(taken), Some(next)]),
                    (Abs::ValueOrNull(m), Abs::Known(0)) if matches!(cond, Eq | Ne) && operand == Operand::Imm => {
                        let (null_side, value_side) = if cond == Eq {
                            (&mut taken, &mut next)
                        } else {
                            (&mut next, &mut taken)
                        };
                        null_side.regs[dst] = Abs::Known(0);
                        value_side.regs[dst] = Abs::Value(m);
                        Ok([Some(taken), Some(next)])
                    }
                    (Abs::Value(_), Abs::Known(0)) if matches!(cond, Eq | Ne) && operand == Operand::Imm => {
                        if cond == Eq {
                            Ok([Some(next), None])
                        } else {
                            Ok([Some(taken), None])
                        }
                    }
                    _ => reject(pc, "comparison involving a pointer"),
                }
            }
            Opcode::Call => {
                let helper = HelperId::from_id(insn.imm).expect("whitelisted in static checks");
                let name = helper.name();
                let ret = match helper {
                    HelperId::MapLookupElem => {
                        let m = self.const_map(st, 1, pc, &[MapKind::Array, MapKind::Hash], name)?;
                        self.register_keyed(m, pc, name)?;
                        self.scalar(st, 2, pc)?;
                        Abs::ValueOrNull(m)
                    }
                    HelperId::MapUpdateElem => {
                        let m = self.const_map(st, 1, pc, &[MapKind::Array, MapKind::Hash], name)?;
                        self.register_keyed(m, pc, name)?;
                        for r in 2..=4 {
                            self.scalar(st, r, pc)?;
                        }
                        Abs::Unknown
                    }
                    HelperId::MapDeleteElem => {
                        let m = self.const_map(st, 1, pc, &[MapKind::Array, MapKind::Hash], name)?;
                        self.register_keyed(m, pc, name)?;
                        self.scalar(st, 2, pc)?;
                        Abs::Unknown
                    }
                    HelperId::TailCall => {
                        if self.read(st, 1, pc)? != Abs::Ctx {
                            return reject(pc, "tail_call: r1 must be the context");
                        }
                        self.const_map(st, 2, pc, &[MapKind::ProgArray], name)?;
                        self.scalar(st, 3, pc)?;
                        Abs::Unknown
                    }
                    HelperId::KtimeGetNs => Abs::Unknown,
                    HelperId::SafeReadUser | HelperId::SafeReadUserStr => {
                        let m = match self.read(st, 1, pc)? {
                            Abs::Value(m) => m,
                            _ => return reject(pc, format!("{name}: r1 must be a non-null map value")),
                        };
                        match self.read(st, 2, pc)? {
                            Abs::Known(sz) if sz >= 1 && sz as usize <= self.value_size(m) => {}
                            Abs::Known(sz) => {
                                return reject(pc, format!("{name}: size {sz} does not fit the destination value"));
                            }
                            _ => return reject(pc, format!("{name}: r2 must be a constant size")),
                        }
                        self.scalar(st, 3, pc)?;
                        Abs::Unknown
                    }
                    HelperId::SafeTaskStorageGet => {
                        let m = self.const_map(st, 1, pc, &[MapKind::TaskStorage], name)?;
                        self.scalar(st, 2, pc)?;
                        Abs::ValueOrNull(m)
                    }
                    HelperId::SafeTaskStorageDelete => {
                        self.const_map(st, 1, pc, &[MapKind::TaskStorage], name)?;
                        Abs::Unknown
                    }
                    HelperId::WaitSyscall => {
                        self.scalar(st, 1, pc)?;
                        self.scalar(st, 2, pc)?;
                        Abs::Known(0)
                    }
                };
                for r in 1..=5 {
                    next.regs[r] = Abs::Uninit;
                }
                next.regs[0] = ret;
                Ok([Some(next), None])
            }
            Opcode::TailCall => {
                self.scalar(st, insn.dst, pc)?;
                self.scalar(st, 0, pc).map_err(|_| Reject {
                    pc,
                    reason: "r0 must hold a scalar fallback action before tail_call".into(),
                })?;
                Ok([None, None])
            }
            Opcode::Exit => {
                match st.regs[0] {
                    Abs::Uninit => return reject(pc, "r0 is not initialized at exit"),
                    v if !v.is_scalar() => return reject(pc, "program returns a pointer"),
                    _ => {}
                }
                Ok([None, None])
            }
        }
    }
}
