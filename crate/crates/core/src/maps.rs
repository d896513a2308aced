// SPDX-License-Identifier: Apache-2.0

//! Map storage shared between filter runs.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Tid;

/// Identifier of a live map inside an engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MapId(pub u32);

impl fmt::Display for MapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "map#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Array,
    Hash,
    TaskStorage,
    ProgArray,
}

impl MapKind {
    pub const ALL: [MapKind; 4] = [
        MapKind::Array,
        MapKind::Hash,
        MapKind::TaskStorage,
        MapKind::ProgArray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Array => "array",
            MapKind::Hash => "hash",
            MapKind::TaskStorage => "task_storage",
            MapKind::ProgArray => "prog_array",
        }
    }

    pub fn from_name(s: &str) -> Option<MapKind> {
        MapKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn to_byte(self) -> u8 {
        match self {
            MapKind::Array => 1,
            MapKind::Hash => 2,
            MapKind::TaskStorage => 3,
            MapKind::ProgArray => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<MapKind> {
        MapKind::ALL.iter().copied().find(|k| k.to_byte() == b)
    }
}

/// `map_update_elem` flag values.
pub const BPF_ANY: u64 = 0;
pub const BPF_NOEXIST: u64 = 1;
pub const BPF_EXIST: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("key is {got} bytes, map expects {want}")]
    KeySize { got: usize, want: usize },
    #[error("value is {got} bytes, map expects {want}")]
    ValueSize { got: usize, want: usize },
    #[error("map is full ({max_entries} entries)")]
    CapacityExceeded { max_entries: u32 },
    #[error("array maps do not support delete")]
    DeleteOnArray,
    #[error("index {index} out of range for {max_entries} entries")]
    IndexOutOfRange { index: u64, max_entries: u32 },
    #[error("no such element")]
    NotFound,
    #[error("element already exists")]
    Exists,
    #[error("invalid update flags {0}")]
    BadFlags(u64),
    #[error("operation not supported on {0:?} maps")]
    WrongKind(MapKind),
    #[error("invalid map definition: {0}")]
    BadDefinition(&'static str),
}

impl MapError {
    /// Negative errno returned to filters.
    pub fn errno(&self) -> i64 {
        match self {
            MapError::NotFound => -2,
            MapError::Exists => -17,
            MapError::CapacityExceeded { .. } => -7,
            MapError::IndexOutOfRange { .. } => -7,
            _ => -22,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Storage {
    /// Array and program-array maps: `max_entries * value_size` bytes.
    Flat(Vec<u8>),
    Hash(BTreeMap<Vec<u8>, Vec<u8>>),
    Task(BTreeMap<Tid, Vec<u8>>),
}

/// A map instance with its reference accounting.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicyMap {
    kind: MapKind,
    key_size: u32,
    value_size: u32,
    max_entries: u32,
    storage: Storage,
    /// Programs (and the open descriptor, while open) holding the map.
    pub refcount: u32,
    pub fd_open: bool,
}

impl PolicyMap {
    pub fn new(
        kind: MapKind,
        key_size: u32,
        value_size: u32,
        max_entries: u32,
    ) -> Result<PolicyMap, MapError> {
        if max_entries == 0 {
            return Err(MapError::BadDefinition("max_entries must be positive"));
        }
        if value_size == 0 || key_size == 0 {
            return Err(MapError::BadDefinition("key and value sizes must be positive"));
        }
        let storage = match kind {
            MapKind::Array | MapKind::ProgArray => {
                if key_size != 4 {
                    return Err(MapError::BadDefinition("array keys are 4 bytes"));
                }
                if kind == MapKind::ProgArray && value_size != 4 {
                    return Err(MapError::BadDefinition("prog_array values are 4 bytes"));
                }
                let len = (max_entries as usize)
                    .checked_mul(value_size as usize)
                    .filter(|l| *l <= 1 << 26)
                    .ok_or(MapError::BadDefinition("array too large"))?;
                Storage::Flat(vec![0; len])
            }
            MapKind::Hash => Storage::Hash(BTreeMap::new()),
            MapKind::TaskStorage => {
                if key_size != 4 {
                    return Err(MapError::BadDefinition("task_storage keys are 4 bytes"));
                }
                Storage::Task(BTreeMap::new())
            }
        };
        Ok(PolicyMap {
            kind,
            key_size,
            value_size,
            max_entries,
            storage,
            refcount: 0,
            fd_open: false,
        })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn key_size(&self) -> u32 {
        self.key_size
    }

    pub fn value_size(&self) -> u32 {
        self.value_size
    }

    pub fn max_entries(&self) -> u32 {
        self.max_entries
    }

    /// Number of present elements (array slots always count).
    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Flat(_) => self.max_entries as usize,
            Storage::Hash(h) => h.len(),
            Storage::Task(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_key(&self, key: &[u8]) -> Result<(), MapError> {
        if key.len() != self.key_size as usize {
            return Err(MapError::KeySize {
                got: key.len(),
                want: self.key_size as usize,
            });
        }
        Ok(())
    }

    fn check_value(&self, value: &[u8]) -> Result<(), MapError> {
        if value.len() != self.value_size as usize {
            return Err(MapError::ValueSize {
                got: value.len(),
                want: self.value_size as usize,
            });
        }
        Ok(())
    }

    fn flat_range(&self, key: &[u8]) -> Result<core::ops::Range<usize>, MapError> {
        let index = u32::from_le_bytes([key[0], key[1], key[2], key[3]]);
        if index >= self.max_entries {
            return Err(MapError::IndexOutOfRange {
                index: index as u64,
                max_entries: self.max_entries,
            });
        }
        let vs = self.value_size as usize;
        let start = index as usize * vs;
        Ok(start..start + vs)
    }

    pub fn lookup(&self, key: &[u8]) -> Result<Option<&[u8]>, MapError> {
        self.check_key(key)?;
        match &self.storage {
            Storage::Flat(data) => match self.flat_range(key) {
                Ok(r) => Ok(Some(&data[r])),
                Err(MapError::IndexOutOfRange { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            Storage::Hash(h) => Ok(h.get(key).map(Vec::as_slice)),
            Storage::Task(_) => Err(MapError::WrongKind(self.kind)),
        }
    }

    pub fn lookup_mut(&mut self, key: &[u8]) -> Result<Option<&mut [u8]>, MapError> {
        self.check_key(key)?;
        let range = match &self.storage {
            Storage::Flat(_) => match self.flat_range(key) {
                Ok(r) => Some(r),
                Err(MapError::IndexOutOfRange { .. }) => return Ok(None),
                Err(e) => return Err(e),
            },
            _ => None,
        };
        match &mut self.storage {
            Storage::Flat(data) => Ok(range.map(move |r| &mut data[r])),
            Storage::Hash(h) => Ok(h.get_mut(key).map(Vec::as_mut_slice)),
            Storage::Task(_) => Err(MapError::WrongKind(self.kind)),
        }
    }

    pub fn update(&mut self, key: &[u8], value: &[u8], flags: u64) -> Result<(), MapError> {
        self.check_key(key)?;
        self.check_value(value)?;
        if flags > BPF_EXIST {
            return Err(MapError::BadFlags(flags));
        }
        let max = self.max_entries;
        let range = match &self.storage {
            Storage::Flat(_) => Some(self.flat_range(key)?),
            _ => None,
        };
        match &mut self.storage {
            Storage::Flat(data) => {
                if flags == BPF_NOEXIST {
                    return Err(MapError::Exists);
                }
                data[range.expect("flat range")].copy_from_slice(value);
                Ok(())
            }
            Storage::Hash(h) => {
                let present = h.contains_key(key);
                match (flags, present) {
                    (BPF_NOEXIST, true) => return Err(MapError::Exists),
                    (BPF_EXIST, false) => return Err(MapError::NotFound),
                    _ => {}
                }
                if !present && h.len() >= max as usize {
                    return Err(MapError::CapacityExceeded { max_entries: max });
                }
                h.insert(key.to_vec(), value.to_vec());
                Ok(())
            }
            Storage::Task(_) => Err(MapError::WrongKind(self.kind)),
        }
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<(), MapError> {
        self.check_key(key)?;
        match self.kind {
            MapKind::Array => Err(MapError::DeleteOnArray),
            MapKind::ProgArray => {
                let r = self.flat_range(key)?;
                if let Storage::Flat(data) = &mut self.storage {
                    if data[r.clone()].iter().all(|b| *b == 0) {
                        return Err(MapError::NotFound);
                    }
                    data[r].fill(0);
                }
                Ok(())
            }
            MapKind::Hash => match &mut self.storage {
                Storage::Hash(h) => h.remove(key).map(|_| ()).ok_or(MapError::NotFound),
                _ => unreachable!("hash map storage"),
            },
            MapKind::TaskStorage => Err(MapError::WrongKind(self.kind)),
        }
    }

    /// Cell of the thread-group leader `leader`, optionally created zeroed.
    pub fn task_storage_get(
        &mut self,
        leader: Tid,
        create: bool,
    ) -> Result<Option<&mut [u8]>, MapError> {
        let (vs, max) = (self.value_size as usize, self.max_entries as usize);
        let Storage::Task(cells) = &mut self.storage else {
            return Err(MapError::WrongKind(self.kind));
        };
        if !cells.contains_key(&leader) {
            if !create {
                return Ok(None);
            }
            if cells.len() >= max {
                return Err(MapError::CapacityExceeded {
                    max_entries: max as u32,
                });
            }
            cells.insert(leader, vec![0; vs]);
        }
        Ok(cells.get_mut(&leader).map(Vec::as_mut_slice))
    }

    pub fn task_storage_peek(&self, leader: Tid) -> Option<&[u8]> {
        match &self.storage {
            Storage::Task(cells) => cells.get(&leader).map(Vec::as_slice),
            _ => None,
        }
    }

    pub fn task_storage_delete(&mut self, leader: Tid) -> Result<(), MapError> {
        let Storage::Task(cells) = &mut self.storage else {
            return Err(MapError::WrongKind(self.kind));
        };
        cells.remove(&leader).map(|_| ()).ok_or(MapError::NotFound)
    }

    /// Program id stored in a program-array slot.
    pub fn prog_at(&self, index: u64) -> Option<u32> {
        if self.kind != MapKind::ProgArray || index >= self.max_entries as u64 {
            return None;
        }
        let Storage::Flat(data) = &self.storage else {
            return None;
        };
        let s = index as usize * 4;
        let id = u32::from_le_bytes([data[s], data[s + 1], data[s + 2], data[s + 3]]);
        (id != 0).then_some(id)
    }

    /// All present elements in key order. Task-storage keys are the leader id.
    pub fn entries(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        match &self.storage {
            Storage::Flat(data) => data
                .chunks(self.value_size as usize)
                .enumerate()
                .map(|(i, v)| ((i as u32).to_le_bytes().to_vec(), v.to_vec()))
                .collect(),
            Storage::Hash(h) => h.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            Storage::Task(t) => t
                .iter()
                .map(|(k, v)| (k.0.to_le_bytes().to_vec(), v.clone()))
                .collect(),
        }
    }

    /// Writes a raw element regardless of kind (used by restore).
    pub fn put_raw(&mut self, key: &[u8], value: &[u8]) -> Result<(), MapError> {
        self.check_key(key)?;
        self.check_value(value)?;
        match &mut self.storage {
            Storage::Task(t) => {
                let tid = Tid(u32::from_le_bytes([key[0], key[1], key[2], key[3]]));
                t.insert(tid, value.to_vec());
                Ok(())
            }
            _ => self.update(key, value, BPF_ANY),
        }
    }
}

/// Encodes an integer key or value into `size` little-endian bytes.
///
/// Bytes beyond 8 are zero; sizes below 8 truncate.
pub fn le_bytes(value: u64, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    let raw = value.to_le_bytes();
    let n = size.min(8);
    out[..n].copy_from_slice(&raw[..n]);
    out
}

/// Reads up to eight little-endian bytes as an integer.
pub fn le_u64(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    let n = bytes.len().min(8);
    buf[..n].copy_from_slice(&bytes[..n]);
    u64::from_le_bytes(buf)
}
