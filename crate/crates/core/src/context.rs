// SPDX-License-Identifier: Apache-2.0

//! The 64-byte syscall record filters inspect.

use serde::{Deserialize, Serialize};

/// Serialized size of a [`SyscallContext`].
pub const CONTEXT_SIZE: usize = 64;

/// `AUDIT_ARCH_X86_64`.
pub const ARCH_X86_64: u32 = 0xc000_003e;

/// Byte offset of `args[i]`.
pub const fn arg_offset(i: usize) -> usize {
    16 + 8 * i
}

/// Width of the field starting exactly at `offset`, if one does.
///
/// Layout: `nr:4@0`, `arch:4@4`, `calling_address:8@8`, `args[i]:8@16+8i`.
pub fn field_width_at(offset: i64) -> Option<usize> {
    match offset {
        0 | 4 => Some(4),
        8 => Some(8),
        16..=56 if offset % 8 == 0 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyscallContext {
    pub nr: i32,
    pub arch: u32,
    pub calling_address: u64,
    pub args: [u64; 6],
}

impl Default for SyscallContext {
    fn default() -> Self {
        SyscallContext {
            nr: 0,
            arch: ARCH_X86_64,
            calling_address: 0,
            args: [0; 6],
        }
    }
}

impl SyscallContext {
    pub fn new(nr: i32, args: [u64; 6]) -> Self {
        SyscallContext {
            nr,
            args,
            ..Default::default()
        }
    }

    pub fn with_calling_address(mut self, addr: u64) -> Self {
        self.calling_address = addr;
        self
    }

    pub fn to_bytes(&self) -> [u8; CONTEXT_SIZE] {
        let mut out = [0u8; CONTEXT_SIZE];
        out[0..4].copy_from_slice(&self.nr.to_le_bytes());
        out[4..8].copy_from_slice(&self.arch.to_le_bytes());
        out[8..16].copy_from_slice(&self.calling_address.to_le_bytes());
        for (i, a) in self.args.iter().enumerate() {
            let o = arg_offset(i);
            out[o..o + 8].copy_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; CONTEXT_SIZE]) -> Self {
        let u64_at = |o: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[o..o + 8]);
            u64::from_le_bytes(b)
        };
        let mut args = [0u64; 6];
        for (i, a) in args.iter_mut().enumerate() {
            *a = u64_at(arg_offset(i));
        }
        SyscallContext {
            nr: i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            arch: u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
            calling_address: u64_at(8),
            args,
        }
    }

    /// Reads the whole field at `offset` with the given width, zero-extended.
    ///
    /// Returns `None` unless `(offset, width)` names exactly one field.
    pub fn read_field(&self, offset: i64, width: i64) -> Option<u64> {
        let w = field_width_at(offset)?;
        if w as i64 != width {
            return None;
        }
        let bytes = self.to_bytes();
        let o = offset as usize;
        let mut buf = [0u8; 8];
        buf[..w].copy_from_slice(&bytes[o..o + w]);
        Some(u64::from_le_bytes(buf))
    }
}
