// SPDX-License-Identifier: Apache-2.0

//! Binary program format.
//!
//! ```text
//! header    "SFVM" u16 version
//! maps      u16 count, then per map:
//!             u16 name_len, name, u8 kind, u32 key_size, u32 value_size,
//!             u32 max_entries, u32 entry_count, entries as (u64, u64)
//! programs  u16 count, then per program:
//!             u8 flags (bit 0 sleepable), u16 section_len, section,
//!             u16 name_len, name, u32 insn_count, insn records
//! insn      u8 opcode, u8 src << 4 | dst, i16 offset, u32 reserved, i64 imm
//! ```
//!
//! All integers are little-endian. The map table is shared by every program.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::isa::{Instruction, Opcode};
use crate::maps::MapKind;
use crate::program::{FilterProgram, MapDef, ProgramBundle};

pub const MAGIC: &[u8; 4] = b"SFVM";
pub const VERSION: u16 = 1;
pub const INSN_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("unknown opcode {0:#04x} in instruction {1}")]
    Opcode(u8, usize),
    #[error("unknown map kind {0}")]
    MapKind(u8),
    #[error("invalid utf-8 in name")]
    Utf8,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("bundle has no programs")]
    Empty,
}

pub fn encode_insn(insn: &Instruction, out: &mut Vec<u8>) {
    out.push(insn.opcode.to_byte());
    out.push((insn.src << 4) | (insn.dst & 0x0f));
    out.extend_from_slice(&insn.offset.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&insn.imm.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_bundle(bundle: &ProgramBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let maps = bundle.maps();
    out.extend_from_slice(&(maps.len() as u16).to_le_bytes());
    for m in maps {
        put_str(&mut out, &m.name);
        out.push(m.kind.to_byte());
        for v in [m.key_size, m.value_size, m.max_entries, m.entries.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (k, v) in &m.entries {
            out.extend_from_slice(&k.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(bundle.programs.len() as u16).to_le_bytes());
    for p in &bundle.programs {
        out.push(p.sleepable as u8);
        put_str(&mut out, &p.section_name);
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.instructions.len() as u32).to_le_bytes());
        for insn in &p.instructions {
            encode_insn(insn, &mut out);
        }
    }
    out
}

pub fn encode(program: &FilterProgram) -> Vec<u8> {
    encode_bundle(&ProgramBundle::single(program.clone()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        core::str::from_utf8(b).map(String::from).map_err(|_| FormatError::Utf8)
    }
}

pub fn decode_insn(rec: &[u8], index: usize) -> Result<Instruction, FormatError> {
    let opcode = Opcode::from_byte(rec[0]).ok_or(FormatError::Opcode(rec[0], index))?;
    Ok(Instruction {
        opcode,
        dst: rec[1] & 0x0f,
        src: rec[1] >> 4,
        offset: i16::from_le_bytes([rec[2], rec[3]]),
        imm: i64::from_le_bytes(rec[8..16].try_into().unwrap()),
    })
}

/// Decodes a bundle and returns it with the number of bytes consumed.
pub fn decode_bundle_prefix(buf: &[u8]) -> Result<(ProgramBundle, usize), FormatError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let nmaps = r.u16()?;
    let mut maps = Vec::with_capacity(nmaps as usize);
    for _ in 0..nmaps {
        let name = r.str()?;
        let kb = r.u8()?;
        let kind = MapKind::from_byte(kb).ok_or(FormatError::MapKind(kb))?;
        let mut def = MapDef::new(&name, kind, r.u32()?, r.u32()?, r.u32()?);
        let n = r.u32()?;
        for _ in 0..n {
            def.entries.push((r.u64()?, r.u64()?));
        }
        maps.push(def);
    }
    let nprogs = r.u16()?;
    if nprogs == 0 {
        return Err(FormatError::Empty);
    }
    let mut programs = Vec::with_capacity(nprogs as usize);
    for _ in 0..nprogs {
        let sleepable = r.u8()? & 1 == 1;
        let section = r.str()?;
        let name = r.str()?;
        let n = r.u32()? as usize;
        let mut insns = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            insns.push(decode_insn(r.take(INSN_SIZE)?, i)?);
        }
        let mut p = FilterProgram::new(insns, sleepable).with_maps(maps.clone());
        p.section_name = section;
        p.name = name;
        programs.push(p);
    }
    Ok((ProgramBundle { programs }, r.pos))
}

pub fn decode_bundle(buf: &[u8]) -> Result<ProgramBundle, FormatError> {
    let (bundle, used) = decode_bundle_prefix(buf)?;
    if used != buf.len() {
        return Err(FormatError::Trailing(buf.len() - used));
    }
    Ok(bundle)
}
