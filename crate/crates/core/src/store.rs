// SPDX-License-Identifier: Apache-2.0

//! Loaded programs and live maps.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use thiserror::Error;

use crate::maps::{le_bytes, MapError, MapId, MapKind, PolicyMap, BPF_ANY};
use crate::program::{FilterProgram, ProgramBundle};
use crate::{ProgId, Tid};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("map `{name}`: {err}")]
    Map { name: alloc::string::String, err: MapError },
    #[error("map `{name}`: entry refers to program {index}, bundle has {count}")]
    BadProgIndex {
        name: alloc::string::String,
        index: u64,
        count: usize,
    },
    #[error("bundle has no programs")]
    Empty,
}

#[derive(Debug, Clone, Default)]
pub struct Store {
    pub programs: BTreeMap<ProgId, Arc<FilterProgram>>,
    pub maps: BTreeMap<MapId, PolicyMap>,
    next_prog: u32,
    next_map: u32,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc_prog_id(&mut self) -> ProgId {
        self.next_prog += 1;
        ProgId(self.next_prog)
    }

    pub fn add_map(&mut self, map: PolicyMap) -> MapId {
        self.next_map += 1;
        let id = MapId(self.next_map);
        self.maps.insert(id, map);
        id
    }

    pub fn program(&self, id: ProgId) -> Option<&Arc<FilterProgram>> {
        self.programs.get(&id)
    }

    pub fn map(&self, id: MapId) -> Option<&PolicyMap> {
        self.maps.get(&id)
    }

    pub fn map_mut(&mut self, id: MapId) -> Option<&mut PolicyMap> {
        self.maps.get_mut(&id)
    }

    /// Creates the bundle's maps, binds every program to them and seeds
    /// initial entries. Returns program ids in bundle order.
    ///
    /// Each map's refcount grows by the number of programs in the bundle.
    pub fn add_bundle(&mut self, bundle: ProgramBundle) -> Result<(Vec<ProgId>, Vec<MapId>), StoreError> {
        if bundle.programs.is_empty() {
            return Err(StoreError::Empty);
        }
        let n = bundle.programs.len();
        let defs = bundle.maps().to_vec();
        let mut maps = Vec::with_capacity(defs.len());
        for def in &defs {
            let err = |err| StoreError::Map {
                name: def.name.clone(),
                err,
            };
            let map = PolicyMap::new(def.kind, def.key_size, def.value_size, def.max_entries).map_err(err)?;
            maps.push(map);
        }
        let prog_ids: Vec<ProgId> = (0..n).map(|_| self.alloc_prog_id()).collect();
        for (def, map) in defs.iter().zip(maps.iter_mut()) {
            let err = |err| StoreError::Map {
                name: def.name.clone(),
                err,
            };
            let (ks, vs) = (def.key_size as usize, def.value_size as usize);
            for &(k, v) in &def.entries {
                match def.kind {
                    MapKind::ProgArray => {
                        let target = prog_ids.get(v as usize).ok_or(StoreError::BadProgIndex {
                            name: def.name.clone(),
                            index: v,
                            count: n,
                        })?;
                        map.update(&le_bytes(k, ks), &target.0.to_le_bytes(), BPF_ANY)
                            .map_err(err)?;
                    }
                    MapKind::TaskStorage => {
                        let cell = map.task_storage_get(Tid(k as u32), true).map_err(err)?;
                        cell.expect("created").copy_from_slice(&le_bytes(v, vs));
                    }
                    _ => map.update(&le_bytes(k, ks), &le_bytes(v, vs), BPF_ANY).map_err(err)?,
                }
            }
            map.refcount += n as u32;
        }
        let map_ids: Vec<MapId> = maps.into_iter().map(|m| self.add_map(m)).collect();
        for (id, mut p) in prog_ids.iter().zip(bundle.programs) {
            p.map_refs = map_ids.clone();
            self.programs.insert(*id, Arc::new(p));
        }
        Ok((prog_ids, map_ids))
    }

    /// Programs reachable from `root` through program-array maps, `root` first.
    pub fn reachable(&self, root: ProgId) -> Vec<ProgId> {
        let mut out = alloc::vec![root];
        let mut i = 0;
        while i < out.len() {
            if let Some(p) = self.programs.get(&out[i]) {
                for m in &p.map_refs {
                    let Some(map) = self.maps.get(m) else { continue };
                    if map.kind() != MapKind::ProgArray {
                        continue;
                    }
                    for slot in 0..map.max_entries() as u64 {
                        if let Some(id) = map.prog_at(slot) {
                            if !out.contains(&ProgId(id)) {
                                out.push(ProgId(id));
                            }
                        }
                    }
                }
            }
            i += 1;
        }
        out
    }
}
