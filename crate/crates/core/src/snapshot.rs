// SPDX-License-Identifier: Apache-2.0

//! Per-syscall argument snapshots.
//!
//! At syscall entry the memory named by a syscall's pointer arguments is
//! captured so that filters inspect exactly what the kernel will use. Two
//! modes exist: `copy` duplicates the bytes into a per-thread sealed page,
//! `write_protect` leaves them in place and stalls any writer to those pages
//! until the syscall exits.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::SyscallContext;
use crate::memory::{page_of, UserMemory, PAGE_SIZE};
use crate::Tid;

/// One page of snapshot space per syscall.
pub const MAX_SNAPSHOT_BYTES: usize = PAGE_SIZE as usize;

/// Where copy-mode regions live: one page per thread.
pub const SNAPSHOT_AREA: u64 = 0x7ff0_0000_0000;

pub fn region_base(tid: Tid) -> u64 {
    SNAPSHOT_AREA + tid.0 as u64 * PAGE_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    #[default]
    Copy,
    WriteProtect,
}

/// How one syscall argument is interpreted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArgSpec {
    Scalar,
    UserBuffer {
        size: u32,
    },
    UserString {
        max: u32,
    },
    /// A fixed-size struct; some of its 8-byte fields hold user addresses.
    UserRecord {
        size: u32,
        #[serde(default)]
        pointers: Vec<RecordPointer>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordPointer {
    /// Byte offset of the address field inside the record.
    pub offset: u32,
    pub target: ArgSpec,
}

impl ArgSpec {
    /// Upper bound on the bytes this argument can add to a snapshot.
    pub fn max_bytes(&self) -> usize {
        match self {
            ArgSpec::Scalar => 0,
            ArgSpec::UserBuffer { size } => *size as usize,
            ArgSpec::UserString { max } => *max as usize,
            ArgSpec::UserRecord { size, pointers } => {
                *size as usize + pointers.iter().map(|p| p.target.max_bytes()).sum::<usize>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgDescriptor {
    pub nr: i32,
    #[serde(default)]
    pub name: String,
    pub args: Vec<ArgSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("syscall {0}: more than six arguments")]
    TooManyArgs(i32),
    #[error("syscall {nr}: snapshot may need {bytes} bytes, limit is {MAX_SNAPSHOT_BYTES}")]
    TooLarge { nr: i32, bytes: usize },
    #[error("syscall {0}: nested user addresses deeper than one level")]
    TooDeep(i32),
    #[error("syscall {nr}: pointer field at {offset} lies outside the {size}-byte record")]
    PointerOutsideRecord { nr: i32, offset: u32, size: u32 },
    #[error("syscall {0}: duplicate descriptor")]
    Duplicate(i32),
}

impl ArgDescriptor {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        let nr = self.nr;
        if self.args.len() > 6 {
            return Err(DescriptorError::TooManyArgs(nr));
        }
        for a in &self.args {
            if let ArgSpec::UserRecord { size, pointers } = a {
                for p in pointers {
                    if p.offset as u64 + 8 > *size as u64 {
                        return Err(DescriptorError::PointerOutsideRecord {
                            nr,
                            offset: p.offset,
                            size: *size,
                        });
                    }
                    if let ArgSpec::UserRecord { pointers: inner, .. } = &p.target {
                        if !inner.is_empty() {
                            return Err(DescriptorError::TooDeep(nr));
                        }
                    }
                }
            }
        }
        let bytes: usize = self.args.iter().map(ArgSpec::max_bytes).sum();
        if bytes > MAX_SNAPSHOT_BYTES {
            return Err(DescriptorError::TooLarge { nr, bytes });
        }
        Ok(())
    }
}

/// Argument semantics by syscall number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DescriptorTable {
    by_nr: BTreeMap<i32, ArgDescriptor>,
}

impl DescriptorTable {
    pub fn new(descs: Vec<ArgDescriptor>) -> Result<Self, DescriptorError> {
        let mut by_nr = BTreeMap::new();
        for d in descs {
            d.validate()?;
            let nr = d.nr;
            if by_nr.insert(nr, d).is_some() {
                return Err(DescriptorError::Duplicate(nr));
            }
        }
        Ok(DescriptorTable { by_nr })
    }

    pub fn get(&self, nr: i32) -> Option<&ArgDescriptor> {
        self.by_nr.get(&nr)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ArgDescriptor> {
        self.by_nr.values()
    }

    /// Table covering the syscalls used by the bundled scenarios.
    pub fn builtin() -> Self {
        use crate::sysno::*;
        let path = ArgSpec::UserString { max: 256 };
        let d = |nr: i32, name: &str, args: Vec<ArgSpec>| ArgDescriptor {
            nr,
            name: name.into(),
            args,
        };
        let scalars = |n: usize| alloc::vec![ArgSpec::Scalar; n];
        // struct iocb is 64 bytes; aio_buf at offset 24 points at the data buffer
        let iocb = ArgSpec::UserRecord {
            size: 64,
            pointers: alloc::vec![RecordPointer {
                offset: 24,
                target: ArgSpec::UserBuffer { size: 256 },
            }],
        };
        let mut io_submit = scalars(2);
        io_submit.push(iocb);
        let mut openat = alloc::vec![ArgSpec::Scalar, path.clone()];
        openat.extend(scalars(2));
        let mut open = alloc::vec![path];
        open.extend(scalars(2));
        DescriptorTable::new(alloc::vec![
            d(OPEN, "open", open),
            d(OPENAT, "openat", openat),
            d(KEYCTL, "keyctl", scalars(5)),
            d(MREMAP, "mremap", scalars(5)),
            d(FTRUNCATE, "ftruncate", scalars(2)),
            d(IO_SUBMIT, "io_submit", io_submit),
        ])
        .expect("builtin table is valid")
    }
}

/// A captured range: `len` bytes of user memory at `addr`, stored at
/// `offset` inside the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceRange {
    pub addr: u64,
    pub len: u64,
    pub offset: u64,
    /// The source ran into an unmapped page; `len` counts what was copied.
    pub faulted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotRegion {
    pub base: u64,
    pub bytes: Vec<u8>,
    pub source_ranges: Vec<SourceRange>,
    pub mode: SnapshotMode,
    pub thread_owner: Tid,
    /// Pages write-protected on behalf of this region, one entry per hold.
    pub protected_pages: Vec<u64>,
    pub released: bool,
}

impl SnapshotRegion {
    pub fn empty(owner: Tid, mode: SnapshotMode) -> Self {
        SnapshotRegion {
            base: region_base(owner),
            bytes: Vec::new(),
            source_ranges: Vec::new(),
            mode,
            thread_owner: owner,
            protected_pages: Vec::new(),
            released: false,
        }
    }

    fn capture(&mut self, mem: &UserMemory, addr: u64, len: u64) -> Option<&[u8]> {
        let room = (MAX_SNAPSHOT_BYTES - self.bytes.len()) as u64;
        let want = len.min(room);
        let avail = mem.mapped_len(addr, want);
        let data = mem.read(addr, avail).unwrap_or_default();
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(&data);
        self.source_ranges.push(SourceRange {
            addr,
            len: avail,
            offset,
            faulted: avail < len,
        });
        Some(&self.bytes[offset as usize..])
    }

    fn capture_string(&mut self, mem: &UserMemory, addr: u64, max: u64) {
        let avail = mem.mapped_len(addr, max);
        let data = mem.read(addr, avail).unwrap_or_default();
        let len = match data.iter().position(|b| *b == 0) {
            Some(i) => i as u64 + 1,
            None => avail,
        };
        let faulted = len == avail && avail < max && !data.contains(&0);
        let offset = self.bytes.len() as u64;
        let len = len.min((MAX_SNAPSHOT_BYTES - self.bytes.len()) as u64);
        self.bytes.extend_from_slice(&data[..len as usize]);
        self.source_ranges.push(SourceRange {
            addr,
            len,
            offset,
            faulted,
        });
    }

    fn capture_spec(&mut self, mem: &UserMemory, spec: &ArgSpec, addr: u64) {
        match spec {
            ArgSpec::Scalar => {}
            ArgSpec::UserBuffer { size } => {
                self.capture(mem, addr, *size as u64);
            }
            ArgSpec::UserString { max } => self.capture_string(mem, addr, *max as u64),
            ArgSpec::UserRecord { size, pointers } => {
                let rec: Vec<u8> = match self.capture(mem, addr, *size as u64) {
                    Some(r) => r.to_vec(),
                    None => return,
                };
                for p in pointers {
                    let o = p.offset as usize;
                    if o + 8 <= rec.len() {
                        let inner = u64::from_le_bytes(rec[o..o + 8].try_into().unwrap());
                        self.capture_spec(mem, &p.target, inner);
                    }
                }
            }
        }
    }

    /// Adds a range to the region after entry (sleepable fault service).
    pub fn extend(&mut self, mem: &UserMemory, addr: u64, len: u64) {
        self.capture(mem, addr, len);
    }

    /// Range holding `addr` that extends furthest past it.
    fn covering(&self, addr: u64) -> Option<&SourceRange> {
        self.source_ranges
            .iter()
            .filter(|r| addr >= r.addr && addr - r.addr < r.len)
            .max_by_key(|r| r.addr + r.len)
    }

    /// Bytes captured for `[addr, addr + len)`, if a single range covers it.
    pub fn translate(&self, addr: u64, len: u64) -> Option<&[u8]> {
        if len == 0 {
            return Some(&[]);
        }
        let r = self
            .source_ranges
            .iter()
            .find(|r| addr >= r.addr && addr.checked_add(len).is_some_and(|e| e <= r.addr + r.len))?;
        let start = (r.offset + (addr - r.addr)) as usize;
        Some(&self.bytes[start..start + len as usize])
    }

    /// Captured bytes from `addr` to the end of its covering range.
    pub fn translate_tail(&self, addr: u64) -> Option<&[u8]> {
        let r = self.covering(addr)?;
        let start = (r.offset + (addr - r.addr)) as usize;
        Some(&self.bytes[start..(r.offset + r.len) as usize])
    }

    pub fn covers(&self, addr: u64, len: u64) -> bool {
        self.translate(addr, len).is_some()
    }
}

/// Builds the snapshot for one syscall entry. Write-protect holds are
/// registered on `mem`; copy-mode callers map the region page themselves.
pub fn snapshot_args(
    mem: &mut UserMemory,
    ctx: &SyscallContext,
    desc: Option<&ArgDescriptor>,
    mode: SnapshotMode,
    owner: Tid,
) -> SnapshotRegion {
    let mut region = SnapshotRegion::empty(owner, mode);
    if let Some(desc) = desc {
        for (i, spec) in desc.args.iter().enumerate() {
            region.capture_spec(mem, spec, ctx.args[i]);
        }
    }
    if mode == SnapshotMode::WriteProtect {
        protect_ranges(mem, &mut region, 0);
    }
    region
}

fn protect_ranges(mem: &mut UserMemory, region: &mut SnapshotRegion, from: usize) {
    for r in &region.source_ranges[from..] {
        if r.len > 0 {
            let pages = mem.protect(r.addr, r.len).unwrap_or_default();
            region.protected_pages.extend(pages);
        }
    }
}

/// Fault service for a sleepable filter: captures more memory into the
/// region, protecting it too in write-protect mode.
pub fn service_fault(mem: &mut UserMemory, region: &mut SnapshotRegion, addr: u64, len: u64) {
    let from = region.source_ranges.len();
    region.extend(mem, addr, len);
    if region.mode == SnapshotMode::WriteProtect {
        protect_ranges(mem, region, from);
    }
}

/// Releases a region at syscall exit. Idempotent.
pub fn release_snapshot(mem: &mut UserMemory, region: &mut SnapshotRegion) {
    if region.released {
        return;
    }
    region.released = true;
    match region.mode {
        SnapshotMode::WriteProtect => {
            for p in region.protected_pages.drain(..) {
                mem.unprotect(p);
            }
        }
        SnapshotMode::Copy => {
            let _ = mem.unmap(page_of(region.base), PAGE_SIZE);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{PageFlags, WriteStatus};
    use crate::sysno::{IO_SUBMIT, OPEN};

    fn mem() -> UserMemory {
        let mut m = UserMemory::new();
        m.map(0x1000, 0x3000, PageFlags::RW).unwrap();
        m
    }

    #[test]
    fn string_argument_is_captured_with_nul() {
        let mut m = mem();
        m.poke(0x2000, b"/etc/passwd\0junk").unwrap();
        let ctx = SyscallContext::new(OPEN, [0x2000, 0, 0, 0, 0, 0]);
        let table = DescriptorTable::builtin();
        let r = snapshot_args(&mut m, &ctx, table.get(OPEN), SnapshotMode::Copy, Tid(1));
        assert_eq!(r.bytes, b"/etc/passwd\0");
        assert_eq!(r.translate_tail(0x2005).unwrap(), b"passwd\0");
        assert_eq!(r.translate(0x2000, 4).unwrap(), b"/etc");
        assert!(!r.covers(0x2000, 13));
    }

    #[test]
    fn nested_record_follows_one_pointer() {
        let mut m = mem();
        let mut iocb = [0u8; 64];
        iocb[24..32].copy_from_slice(&0x3000u64.to_le_bytes());
        m.poke(0x1000, &iocb).unwrap();
        m.poke(0x3000, b"payload").unwrap();
        let ctx = SyscallContext::new(IO_SUBMIT, [0, 1, 0x1000, 0, 0, 0]);
        let table = DescriptorTable::builtin();
        let r = snapshot_args(&mut m, &ctx, table.get(IO_SUBMIT), SnapshotMode::Copy, Tid(1));
        assert_eq!(r.source_ranges.len(), 2);
        assert_eq!(r.translate(0x3000, 7).unwrap(), b"payload");
        assert_eq!(r.bytes.len(), 64 + 256);
    }

    #[test]
    fn unmapped_source_is_partial() {
        let mut m = mem();
        let desc = ArgDescriptor {
            nr: 99,
            name: String::new(),
            args: alloc::vec![ArgSpec::UserBuffer { size: 32 }],
        };
        let ctx = SyscallContext::new(99, [0x3ff0, 0, 0, 0, 0, 0]);
        let r = snapshot_args(&mut m, &ctx, Some(&desc), SnapshotMode::Copy, Tid(1));
        assert_eq!(r.source_ranges[0].len, 16);
        assert!(r.source_ranges[0].faulted);
        let empty = snapshot_args(&mut m, &ctx, None, SnapshotMode::Copy, Tid(1));
        assert!(empty.source_ranges.is_empty());
    }

    #[test]
    fn write_protect_stalls_unrelated_bytes_and_release_restores() {
        let mut m = mem();
        m.poke(0x2000, b"abc\0").unwrap();
        let before = m.flags(0x2000).unwrap();
        let ctx = SyscallContext::new(OPEN, [0x2000, 0, 0, 0, 0, 0]);
        let table = DescriptorTable::builtin();
        let mut r = snapshot_args(&mut m, &ctx, table.get(OPEN), SnapshotMode::WriteProtect, Tid(1));
        assert_eq!(m.user_write(0x2000, b"x"), WriteStatus::Stalled);
        assert_eq!(m.user_write(0x2ff0, b"x"), WriteStatus::Stalled);
        assert_eq!(m.user_write(0x1000, b"x"), WriteStatus::Ok);
        release_snapshot(&mut m, &mut r);
        release_snapshot(&mut m, &mut r);
        assert_eq!(m.flags(0x2000).unwrap(), before);
        assert_eq!(m.user_write(0x2000, b"x"), WriteStatus::Ok);
    }

    #[test]
    fn descriptor_validation() {
        let deep = ArgDescriptor {
            nr: 1,
            name: String::new(),
            args: alloc::vec![ArgSpec::UserRecord {
                size: 16,
                pointers: alloc::vec![RecordPointer {
                    offset: 0,
                    target: ArgSpec::UserRecord {
                        size: 8,
                        pointers: alloc::vec![RecordPointer {
                            offset: 0,
                            target: ArgSpec::Scalar
                        }],
                    },
                }],
            }],
        };
        assert_eq!(deep.validate(), Err(DescriptorError::TooDeep(1)));
        let big = ArgDescriptor {
            nr: 2,
            name: String::new(),
            args: alloc::vec![ArgSpec::UserBuffer { size: 4000 }, ArgSpec::UserString { max: 200 }],
        };
        assert!(matches!(big.validate(), Err(DescriptorError::TooLarge { bytes: 4200, .. })));
    }
}
