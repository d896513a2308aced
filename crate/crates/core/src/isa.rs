// SPDX-License-Identifier: Apache-2.0

//! Instruction set of the filter bytecode.
//!
//! Instructions are fixed-width: one opcode byte, a register nibble pair, a
//! signed 16-bit offset and a signed 64-bit immediate. Opcode byte values
//! follow the eBPF ALU64/JMP encodings where an equivalent exists.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Number of registers, `r0` through `r10`.
pub const NUM_REGS: usize = 11;
/// The read-only frame register.
pub const FRAME_REG: u8 = 10;
/// Highest register index a program may write.
pub const MAX_WRITABLE_REG: u8 = 9;

/// Width in bytes of a map-value load or store.
pub const MAP_ACCESS_WIDTH: usize = 8;

/// 64-bit ALU operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Mov,
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Lsh,
    Rsh,
}

impl AluOp {
    pub const ALL: [AluOp; 9] = [
        AluOp::Mov,
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Lsh,
        AluOp::Rsh,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Mov => "mov",
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
        }
    }

    /// Applies the operation to two 64-bit operands with wrapping semantics.
    pub fn apply(self, dst: u64, src: u64) -> u64 {
        match self {
            AluOp::Mov => src,
            AluOp::Add => dst.wrapping_add(src),
            AluOp::Sub => dst.wrapping_sub(src),
            AluOp::Mul => dst.wrapping_mul(src),
            AluOp::And => dst & src,
            AluOp::Or => dst | src,
            AluOp::Xor => dst ^ src,
            AluOp::Lsh => dst.wrapping_shl((src & 63) as u32),
            AluOp::Rsh => dst.wrapping_shr((src & 63) as u32),
        }
    }

    fn code(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
        }
    }
}

/// Conditional jump predicates (unsigned comparisons).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JmpCond {
    Eq,
    Ne,
    Gt,
    Ge,
    Lt,
    Le,
    Set,
}

impl JmpCond {
    pub const ALL: [JmpCond; 7] = [
        JmpCond::Eq,
        JmpCond::Ne,
        JmpCond::Gt,
        JmpCond::Ge,
        JmpCond::Lt,
        JmpCond::Le,
        JmpCond::Set,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpCond::Eq => "jeq",
            JmpCond::Ne => "jne",
            JmpCond::Gt => "jgt",
            JmpCond::Ge => "jge",
            JmpCond::Lt => "jlt",
            JmpCond::Le => "jle",
            JmpCond::Set => "jset",
        }
    }

    pub fn holds(self, lhs: u64, rhs: u64) -> bool {
        match self {
            JmpCond::Eq => lhs == rhs,
            JmpCond::Ne => lhs != rhs,
            JmpCond::Gt => lhs > rhs,
            JmpCond::Ge => lhs >= rhs,
            JmpCond::Lt => lhs < rhs,
            JmpCond::Le => lhs <= rhs,
            JmpCond::Set => lhs & rhs != 0,
        }
    }

    fn code(self) -> u8 {
        match self {
            JmpCond::Eq => 0x10,
            JmpCond::Gt => 0x20,
            JmpCond::Ge => 0x30,
            JmpCond::Set => 0x40,
            JmpCond::Ne => 0x50,
            JmpCond::Lt => 0xa0,
            JmpCond::Le => 0xb0,
        }
    }
}

/// Second operand of ALU and jump instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operand {
    Imm,
    Reg,
}

/// Instruction opcodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Opcode {
    /// `dst = dst <op> (src | imm)`
    Alu(AluOp, Operand),
    /// `dst = imm`
    LdImm64,
    /// `dst = ctx[offset .. offset + imm]`; `imm` is the width in bytes.
    LdCtx,
    /// `dst = *(u64 *)(value(src) + offset)`
    LdMap,
    /// `*(u64 *)(value(dst) + offset) = src`
    StMap,
    /// `if dst <cond> (src | imm) goto pc + 1 + offset`
    Jmp(JmpCond, Operand),
    /// `goto pc + 1 + offset`
    Ja,
    /// Helper call; `imm` holds the helper id.
    Call,
    /// Transfer to `prog_array[imm][dst]`; ends the program if the slot is empty.
    TailCall,
    Exit,
}

impl Opcode {
    pub const LD_IMM64: u8 = 0x18;
    pub const LD_CTX: u8 = 0x20;
    pub const LD_MAP: u8 = 0x79;
    pub const ST_MAP: u8 = 0x7b;
    pub const JA: u8 = 0x05;
    pub const CALL: u8 = 0x85;
    pub const TAIL_CALL: u8 = 0x8d;
    pub const EXIT: u8 = 0x95;

    /// Encodes the opcode as its wire byte.
    pub fn to_byte(self) -> u8 {
        match self {
            Opcode::Alu(op, src) => 0x07 | op.code() | operand_bit(src),
            Opcode::Jmp(cond, src) => 0x05 | cond.code() | operand_bit(src),
            Opcode::LdImm64 => Self::LD_IMM64,
            Opcode::LdCtx => Self::LD_CTX,
            Opcode::LdMap => Self::LD_MAP,
            Opcode::StMap => Self::ST_MAP,
            Opcode::Ja => Self::JA,
            Opcode::Call => Self::CALL,
            Opcode::TailCall => Self::TAIL_CALL,
            Opcode::Exit => Self::EXIT,
        }
    }

    /// Decodes a wire byte, returning `None` for bytes outside the defined set.
    pub fn from_byte(byte: u8) -> Option<Opcode> {
        match byte {
            Self::LD_IMM64 => return Some(Opcode::LdImm64),
            Self::LD_CTX => return Some(Opcode::LdCtx),
            Self::LD_MAP => return Some(Opcode::LdMap),
            Self::ST_MAP => return Some(Opcode::StMap),
            Self::JA => return Some(Opcode::Ja),
            Self::CALL => return Some(Opcode::Call),
            Self::TAIL_CALL => return Some(Opcode::TailCall),
            Self::EXIT => return Some(Opcode::Exit),
            _ => {}
        }
        let src = if byte & 0x08 != 0 {
            Operand::Reg
        } else {
            Operand::Imm
        };
        let code = byte & 0xf0;
        match byte & 0x07 {
            0x07 => AluOp::ALL
                .iter()
                .find(|op| op.code() == code)
                .map(|&op| Opcode::Alu(op, src)),
            0x05 => JmpCond::ALL
                .iter()
                .find(|c| c.code() == code)
                .map(|&c| Opcode::Jmp(c, src)),
            _ => None,
        }
    }

    pub fn is_jump(self) -> bool {
        matches!(self, Opcode::Jmp(..) | Opcode::Ja)
    }
}

fn operand_bit(src: Operand) -> u8 {
    match src {
        Operand::Imm => 0x00,
        Operand::Reg => 0x08,
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i64,
}

impl Instruction {
    pub const fn new(opcode: Opcode, dst: u8, src: u8, offset: i16, imm: i64) -> Self {
        Instruction {
            opcode,
            dst,
            src,
            offset,
            imm,
        }
    }

    pub const fn exit() -> Self {
        Self::new(Opcode::Exit, 0, 0, 0, 0)
    }

    pub const fn ld_imm64(dst: u8, imm: i64) -> Self {
        Self::new(Opcode::LdImm64, dst, 0, 0, imm)
    }

    pub const fn alu_imm(op: AluOp, dst: u8, imm: i64) -> Self {
        Self::new(Opcode::Alu(op, Operand::Imm), dst, 0, 0, imm)
    }

    pub const fn alu_reg(op: AluOp, dst: u8, src: u8) -> Self {
        Self::new(Opcode::Alu(op, Operand::Reg), dst, src, 0, 0)
    }

    pub const fn ld_ctx(dst: u8, width: i64, offset: i16) -> Self {
        Self::new(Opcode::LdCtx, dst, 0, offset, width)
    }

    pub const fn call(helper: HelperId) -> Self {
        Self::new(Opcode::Call, 0, 0, 0, helper as i64)
    }

    /// Absolute jump target for a jump at `pc`, if this is a jump.
    pub fn jump_target(&self, pc: usize) -> Option<i64> {
        if self.opcode.is_jump() {
            Some(pc as i64 + 1 + self.offset as i64)
        } else {
            None
        }
    }
}

/// Helper functions exposed to filters. Discriminants are the stable wire ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum HelperId {
    MapLookupElem = 1,
    MapUpdateElem = 2,
    MapDeleteElem = 3,
    TailCall = 4,
    KtimeGetNs = 5,
    SafeReadUser = 6,
    SafeReadUserStr = 7,
    SafeTaskStorageGet = 8,
    SafeTaskStorageDelete = 9,
    WaitSyscall = 10,
}

/// Helper grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HelperCategory {
    StateManagement,
    Serialization,
    UserAccess,
    KernelAccess,
    ProgramFeatures,
}

impl HelperId {
    pub const ALL: [HelperId; 10] = [
        HelperId::MapLookupElem,
        HelperId::MapUpdateElem,
        HelperId::MapDeleteElem,
        HelperId::TailCall,
        HelperId::KtimeGetNs,
        HelperId::SafeReadUser,
        HelperId::SafeReadUserStr,
        HelperId::SafeTaskStorageGet,
        HelperId::SafeTaskStorageDelete,
        HelperId::WaitSyscall,
    ];

    pub fn from_id(id: i64) -> Option<HelperId> {
        HelperId::ALL.iter().copied().find(|h| *h as i64 == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            HelperId::MapLookupElem => "map_lookup_elem",
            HelperId::MapUpdateElem => "map_update_elem",
            HelperId::MapDeleteElem => "map_delete_elem",
            HelperId::TailCall => "tail_call",
            HelperId::KtimeGetNs => "ktime_get_ns",
            HelperId::SafeReadUser => "safe_read_user",
            HelperId::SafeReadUserStr => "safe_read_user_str",
            HelperId::SafeTaskStorageGet => "safe_task_storage_get",
            HelperId::SafeTaskStorageDelete => "safe_task_storage_delete",
            HelperId::WaitSyscall => "wait_syscall",
        }
    }

    pub fn from_name(name: &str) -> Option<HelperId> {
        HelperId::ALL.iter().copied().find(|h| h.name() == name)
    }

    pub fn category(self) -> HelperCategory {
        match self {
            HelperId::MapLookupElem
            | HelperId::MapUpdateElem
            | HelperId::MapDeleteElem
            | HelperId::SafeTaskStorageGet
            | HelperId::SafeTaskStorageDelete => HelperCategory::StateManagement,
            HelperId::WaitSyscall => HelperCategory::Serialization,
            HelperId::SafeReadUser | HelperId::SafeReadUserStr => HelperCategory::UserAccess,
            HelperId::KtimeGetNs => HelperCategory::KernelAccess,
            HelperId::TailCall => HelperCategory::ProgramFeatures,
        }
    }

    /// Helpers that may block the calling task.
    pub fn requires_sleepable(self) -> bool {
        matches!(self, HelperId::WaitSyscall)
    }

    pub fn reads_user_memory(self) -> bool {
        matches!(self, HelperId::SafeReadUser | HelperId::SafeReadUserStr)
    }

    /// Index into per-helper counter arrays.
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for HelperId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcode_bytes_round_trip() {
        let mut all = alloc::vec![
            Opcode::LdImm64,
            Opcode::LdCtx,
            Opcode::LdMap,
            Opcode::StMap,
            Opcode::Ja,
            Opcode::Call,
            Opcode::TailCall,
            Opcode::Exit,
        ];
        for op in AluOp::ALL {
            all.push(Opcode::Alu(op, Operand::Imm));
            all.push(Opcode::Alu(op, Operand::Reg));
        }
        for c in JmpCond::ALL {
            all.push(Opcode::Jmp(c, Operand::Imm));
            all.push(Opcode::Jmp(c, Operand::Reg));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for op in all {
            let b = op.to_byte();
            assert!(seen.insert(b), "duplicate byte {b:#x} for {op:?}");
            assert_eq!(Opcode::from_byte(b), Some(op));
        }
        assert_eq!(Opcode::from_byte(0x00), None);
        assert_eq!(Opcode::from_byte(0xff), None);
    }

    #[test]
    fn ten_helpers_five_categories() {
        let cats: alloc::collections::BTreeSet<_> =
            HelperId::ALL.iter().map(|h| h.category()).collect();
        assert_eq!(HelperId::ALL.len(), 10);
        assert_eq!(cats.len(), 5);
        for (i, h) in HelperId::ALL.iter().enumerate() {
            assert_eq!(*h as usize, i + 1);
            assert_eq!(HelperId::from_name(h.name()), Some(*h));
        }
    }

    #[test]
    fn shifts_mask_amount() {
        assert_eq!(AluOp::Lsh.apply(1, 65), 2);
        assert_eq!(AluOp::Rsh.apply(4, 66), 1);
        assert_eq!(AluOp::Sub.apply(0, 1), u64::MAX);
    }
}
