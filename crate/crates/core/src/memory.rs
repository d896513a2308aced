// SPDX-License-Identifier: Apache-2.0

//! Simulated user address spaces.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::iter::StepBy;
use core::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;

pub const fn page_of(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageFlags {
    pub writable: bool,
    pub user_accessible: bool,
    /// Cleared on pages that must never become writable again.
    pub may_write: bool,
}

impl PageFlags {
    pub const RW: PageFlags = PageFlags {
        writable: true,
        user_accessible: true,
        may_write: true,
    };
    pub const RO: PageFlags = PageFlags {
        writable: false,
        user_accessible: true,
        may_write: true,
    };
    /// Read-only forever.
    pub const SEALED: PageFlags = PageFlags {
        writable: false,
        user_accessible: true,
        may_write: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum MemFault {
    #[error("address {0:#x} is not mapped")]
    Unmapped(u64),
    #[error("page at {0:#x} is not writable")]
    ReadOnly(u64),
    #[error("page at {0:#x} is not user accessible")]
    Supervisor(u64),
    #[error("page at {0:#x} may never become writable")]
    MayNotWrite(u64),
    #[error("address range overflows")]
    Overflow,
}

/// Result of a user-space store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "fault")]
pub enum WriteStatus {
    Ok,
    /// A page in range is write-protected by an in-flight syscall.
    Stalled,
    Fault(MemFault),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Page {
    data: Vec<u8>,
    flags: PageFlags,
}

/// Write-protection held on a page by in-flight syscalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Protection {
    holders: u32,
    saved: PageFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct UserMemory {
    pages: BTreeMap<u64, Page>,
    protected: BTreeMap<u64, Protection>,
}

fn pages_in(addr: u64, len: u64) -> Result<StepBy<RangeInclusive<u64>>, MemFault> {
    if len == 0 {
        #[allow(clippy::reversed_empty_ranges)]
        return Ok((1..=0).step_by(PAGE_SIZE as usize));
    }
    let end = addr.checked_add(len - 1).ok_or(MemFault::Overflow)?;
    Ok((page_of(addr)..=page_of(end)).step_by(PAGE_SIZE as usize))
}

impl UserMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps zeroed pages covering `[addr, addr + len)`. Already mapped pages
    /// keep their contents and take the new flags.
    pub fn map(&mut self, addr: u64, len: u64, flags: PageFlags) -> Result<(), MemFault> {
        for p in pages_in(addr, len)? {
            self.pages
                .entry(p)
                .and_modify(|pg| pg.flags = flags)
                .or_insert_with(|| Page {
                    data: vec![0; PAGE_SIZE as usize],
                    flags,
                });
        }
        Ok(())
    }

    pub fn unmap(&mut self, addr: u64, len: u64) -> Result<(), MemFault> {
        for p in pages_in(addr, len)? {
            self.pages.remove(&p);
            self.protected.remove(&p);
        }
        Ok(())
    }

    pub fn is_mapped(&self, addr: u64, len: u64) -> bool {
        match pages_in(addr, len) {
            Ok(mut it) => it.all(|p| self.pages.contains_key(&p)),
            Err(_) => false,
        }
    }

    /// Current flags of the page holding `addr`.
    pub fn flags(&self, addr: u64) -> Option<PageFlags> {
        self.pages.get(&page_of(addr)).map(|p| p.flags)
    }

    /// Number of mapped bytes starting at `addr`, up to `max`.
    pub fn mapped_len(&self, addr: u64, max: u64) -> u64 {
        let mut n = 0;
        while n < max {
            let Some(a) = addr.checked_add(n) else { break };
            if !self.pages.contains_key(&page_of(a)) {
                break;
            }
            n += PAGE_SIZE - (a % PAGE_SIZE);
        }
        n.min(max)
    }

    /// Kernel-side read: ignores protection bits.
    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, MemFault> {
        let mut out = Vec::with_capacity(len as usize);
        let mut a = addr;
        let end = addr.checked_add(len).ok_or(MemFault::Overflow)?;
        while a < end {
            let page = self.pages.get(&page_of(a)).ok_or(MemFault::Unmapped(a))?;
            let off = (a % PAGE_SIZE) as usize;
            let n = ((PAGE_SIZE - a % PAGE_SIZE).min(end - a)) as usize;
            out.extend_from_slice(&page.data[off..off + n]);
            a += n as u64;
        }
        Ok(out)
    }

    /// Kernel-side write: ignores protection bits.
    pub fn poke(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemFault> {
        if !self.is_mapped(addr, bytes.len() as u64) {
            return Err(MemFault::Unmapped(addr));
        }
        let mut a = addr;
        let mut rest = bytes;
        while !rest.is_empty() {
            let page = self.pages.get_mut(&page_of(a)).expect("checked above");
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(rest.len());
            page.data[off..off + n].copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            a += n as u64;
        }
        Ok(())
    }

    /// A store performed by user code.
    pub fn user_write(&mut self, addr: u64, bytes: &[u8]) -> WriteStatus {
        let pages = match pages_in(addr, bytes.len() as u64) {
            Ok(p) => p,
            Err(e) => return WriteStatus::Fault(e),
        };
        let mut stalled = false;
        for p in pages {
            let Some(page) = self.pages.get(&p) else {
                return WriteStatus::Fault(MemFault::Unmapped(p.max(addr)));
            };
            if !page.flags.user_accessible {
                return WriteStatus::Fault(MemFault::Supervisor(p));
            }
            if self.protected.contains_key(&p) {
                stalled = true;
            } else if !page.flags.writable {
                return WriteStatus::Fault(MemFault::ReadOnly(p));
            }
        }
        if stalled {
            return WriteStatus::Stalled;
        }
        self.poke(addr, bytes).expect("pages checked");
        WriteStatus::Ok
    }

    /// Whether a user store to this range would stall right now.
    pub fn would_stall(&self, addr: u64, len: u64) -> bool {
        match pages_in(addr, len) {
            Ok(mut it) => it.any(|p| self.protected.contains_key(&p)),
            Err(_) => false,
        }
    }

    /// User request to change page writability.
    pub fn mprotect(&mut self, addr: u64, len: u64, writable: bool) -> Result<(), MemFault> {
        let pages: Vec<u64> = pages_in(addr, len)?.collect();
        for p in &pages {
            let page = self.pages.get(p).ok_or(MemFault::Unmapped(*p))?;
            if writable && !page.flags.may_write {
                return Err(MemFault::MayNotWrite(*p));
            }
        }
        for p in pages {
            // a protected page gets the new flags once the protection drops
            if let Some(prot) = self.protected.get_mut(&p) {
                prot.saved.writable = writable;
            } else {
                self.pages.get_mut(&p).expect("checked").flags.writable = writable;
            }
        }
        Ok(())
    }

    /// Write-protects the pages covering a range; nested protections stack.
    pub fn protect(&mut self, addr: u64, len: u64) -> Result<Vec<u64>, MemFault> {
        let mut out = Vec::new();
        for p in pages_in(addr, len)? {
            let Some(page) = self.pages.get_mut(&p) else {
                continue;
            };
            let prot = self.protected.entry(p).or_insert(Protection {
                holders: 0,
                saved: page.flags,
            });
            prot.holders += 1;
            page.flags.writable = false;
            out.push(p);
        }
        Ok(out)
    }

    /// Drops one protection from a page; the last one restores the saved flags.
    pub fn unprotect(&mut self, page: u64) {
        let Some(prot) = self.protected.get_mut(&page) else {
            return;
        };
        prot.holders -= 1;
        if prot.holders == 0 {
            let saved = prot.saved;
            self.protected.remove(&page);
            if let Some(pg) = self.pages.get_mut(&page) {
                pg.flags = saved;
            }
        }
    }

    pub fn protected_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.protected.keys().copied()
    }
}
