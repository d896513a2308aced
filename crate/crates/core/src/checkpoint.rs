// SPDX-License-Identifier: Apache-2.0

//! Checkpoint and restore of a task group's filter state.
//!
//! Blob layout, all integers little endian:
//!
//! ```text
//! "SFCK" u16 version
//! u32 map count, then per map:
//!     u8 kind, u32 key_size, u32 value_size, u32 max_entries,
//!     u32 element count, then key and value bytes per element
//! u32 program count, then per program:
//!     u32 map count, u32 local map index each,
//!     u32 length, SFVM bundle bytes
//! u32 task count, then per task:
//!     u32 tid, u32 chain length, u32 local program index each
//! ```
//!
//! Program-array values are stored as local program index plus one.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::engine::{Engine, EngineError, Result};
use crate::format::{decode_bundle, encode};
use crate::maps::{MapId, MapKind, PolicyMap};
use crate::{ProgId, Tid};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> EngineError {
    EngineError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Engine {
    /// Serialises the filter chains of `targets` with every program and map
    /// they reach. Needs CAP_SYS_ADMIN in the initial namespace.
    pub fn checkpoint_group(&self, requester: Tid, targets: &[Tid]) -> Result<Vec<u8>> {
        if !self.is_globally_privileged(requester) {
            return Err(EngineError::Eacces);
        }
        let mut progs: Vec<ProgId> = Vec::new();
        for tid in targets {
            let t = self.tasks.get(tid).ok_or(EngineError::NoTask(*tid))?;
            for root in &t.filter_chain {
                for p in self.store.reachable(*root) {
                    if !progs.contains(&p) {
                        progs.push(p);
                    }
                }
            }
        }
        let mut maps: Vec<MapId> = Vec::new();
        for p in &progs {
            for m in &self.store.programs[p].map_refs {
                if !maps.contains(m) {
                    maps.push(*m);
                }
            }
        }
        let local_prog: BTreeMap<u32, u32> = progs.iter().enumerate().map(|(i, p)| (p.0, i as u32)).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, maps.len() as u32);
        for id in &maps {
            let m = self.store.map(*id).ok_or(EngineError::NoMap(*id))?;
            out.push(m.kind().to_byte());
            put_u32(&mut out, m.key_size());
            put_u32(&mut out, m.value_size());
            put_u32(&mut out, m.max_entries());
            let mut elems = m.entries();
            if m.kind() == MapKind::ProgArray {
                for (_, v) in elems.iter_mut() {
                    let id = u32::from_le_bytes([v[0], v[1], v[2], v[3]]);
                    let local = local_prog.get(&id).map_or(0, |i| i + 1);
                    v.copy_from_slice(&local.to_le_bytes());
                }
            }
            put_u32(&mut out, elems.len() as u32);
            for (k, v) in elems {
                out.extend_from_slice(&k);
                out.extend_from_slice(&v);
            }
        }
        put_u32(&mut out, progs.len() as u32);
        for p in &progs {
            let prog = &self.store.programs[p];
            put_u32(&mut out, prog.map_refs.len() as u32);
            for m in &prog.map_refs {
                put_u32(&mut out, maps.iter().position(|x| x == m).expect("collected") as u32);
            }
            let bytes = encode(prog);
            put_u32(&mut out, bytes.len() as u32);
            out.extend_from_slice(&bytes);
        }
        put_u32(&mut out, targets.len() as u32);
        for tid in targets {
            let chain = &self.tasks[tid].filter_chain;
            put_u32(&mut out, tid.0);
            put_u32(&mut out, chain.len() as u32);
            for p in chain {
                put_u32(&mut out, local_prog[&p.0]);
            }
        }
        Ok(out)
    }

    /// Recreates maps and programs from a checkpoint and appends the saved
    /// chains to the named tasks. Programs are trusted as already verified.
    pub fn restore_group(&mut self, requester: Tid, blob: &[u8]) -> Result<Vec<Tid>> {
        if !self.is_globally_privileged(requester) {
            return Err(EngineError::Eacces);
        }
        let mut r = Reader { buf: blob, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }

        let nmaps = r.u32()? as usize;
        let mut maps = Vec::new();
        for i in 0..nmaps {
            let kind = MapKind::from_byte(r.take(1)?[0]).ok_or_else(|| bad(format!("map {i}: bad kind")))?;
            let (k, v, max) = (r.u32()?, r.u32()?, r.u32()?);
            let map = PolicyMap::new(kind, k, v, max).map_err(|e| bad(format!("map {i}: {e}")))?;
            let n = r.u32()? as usize;
            let mut elems = Vec::new();
            for _ in 0..n {
                let key = r.take(k as usize)?.to_vec();
                let val = r.take(v as usize)?.to_vec();
                elems.push((key, val));
            }
            maps.push((map, elems));
        }

        let nprogs = r.u32()? as usize;
        let mut progs = Vec::new();
        for i in 0..nprogs {
            let n = r.u32()? as usize;
            let mut refs = Vec::new();
            for _ in 0..n {
                let idx = r.u32()? as usize;
                if idx >= nmaps {
                    return Err(bad(format!("program {i}: map index {idx} out of range")));
                }
                refs.push(idx);
            }
            let len = r.u32()? as usize;
            let bundle = decode_bundle(r.take(len)?).map_err(|e| bad(format!("program {i}: {e}")))?;
            let prog = bundle.programs.into_iter().next().ok_or_else(|| bad("empty program"))?;
            progs.push((prog, refs));
        }

        let ntasks = r.u32()? as usize;
        let mut chains = Vec::new();
        for _ in 0..ntasks {
            let tid = Tid(r.u32()?);
            self.tasks
                .get(&tid)
                .filter(|t| t.alive)
                .ok_or(EngineError::NoTask(tid))?;
            let n = r.u32()? as usize;
            let mut chain = Vec::new();
            for _ in 0..n {
                let idx = r.u32()? as usize;
                if idx >= nprogs {
                    return Err(bad(format!("task {tid}: program index {idx} out of range")));
                }
                chain.push(idx);
            }
            chains.push((tid, chain));
        }
        if r.pos != blob.len() {
            return Err(bad("trailing bytes"));
        }

        // everything parsed; now mutate
        let prog_ids: Vec<ProgId> = (0..nprogs).map(|_| self.store_mut().alloc_prog_id()).collect();
        let mut map_ids = Vec::new();
        for (mut map, elems) in maps {
            let prog_array = map.kind() == MapKind::ProgArray;
            for (k, mut v) in elems {
                if prog_array {
                    let local = u32::from_le_bytes([v[0], v[1], v[2], v[3]]);
                    let id = match local {
                        0 => 0,
                        l => prog_ids.get(l as usize - 1).ok_or_else(|| bad("bad program slot"))?.0,
                    };
                    v.copy_from_slice(&id.to_le_bytes());
                }
                map.put_raw(&k, &v).map_err(|e| bad(format!("{e}")))?;
            }
            map_ids.push(self.store_mut().add_map(map));
        }
        let loader = chains.first().map_or(requester, |(t, _)| *t);
        let userns = self.tasks[&loader].userns;
        for ((mut prog, refs), id) in progs.into_iter().zip(&prog_ids) {
            prog.map_refs = refs.iter().map(|i| map_ids[*i]).collect();
            for m in &prog.map_refs {
                self.store_mut().map_mut(*m).expect("created").refcount += 1;
            }
            prog.load_userns = Some(userns);
            prog.verified = true;
            self.store_mut().programs.insert(*id, Arc::new(prog));
            self.register_restored(*id, loader);
        }
        let mut restored = Vec::new();
        for (tid, chain) in chains {
            for idx in chain {
                self.append_chain(tid, prog_ids[idx]);
            }
            restored.push(tid);
        }
        Ok(restored)
    }
}
