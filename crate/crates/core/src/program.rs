// SPDX-License-Identifier: Apache-2.0

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::isa::{HelperId, Instruction, Opcode};
use crate::maps::{MapId, MapKind};
use crate::NsId;

/// Section name of an ordinary filter.
pub const SECTION_SECCOMP: &str = "seccomp";
/// Section name of a filter that may block.
pub const SECTION_SLEEPABLE: &str = "seccomp-sleepable";

/// A map declared by a program, with optional initial contents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapDef {
    pub name: String,
    pub kind: MapKind,
    pub key_size: u32,
    pub value_size: u32,
    pub max_entries: u32,
    /// Initial `(key, value)` integers, little-endian encoded to the map's
    /// sizes at load. For `prog_array` maps the value is a program index
    /// inside the bundle being loaded.
    pub entries: Vec<(u64, u64)>,
}

impl MapDef {
    pub fn new(name: &str, kind: MapKind, key_size: u32, value_size: u32, max_entries: u32) -> Self {
        MapDef {
            name: name.into(),
            kind,
            key_size,
            value_size,
            max_entries,
            entries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterProgram {
    /// Label of the program inside a bundle; `main` for single programs.
    pub name: String,
    pub instructions: Vec<Instruction>,
    pub sleepable: bool,
    pub section_name: String,
    /// Map declarations; map operands index into this table.
    pub maps: Vec<MapDef>,
    /// Live maps bound at load time, parallel to `maps`.
    pub map_refs: Vec<MapId>,
    pub load_userns: Option<NsId>,
    pub verified: bool,
}

impl FilterProgram {
    pub fn new(instructions: Vec<Instruction>, sleepable: bool) -> Self {
        FilterProgram {
            name: "main".into(),
            instructions,
            sleepable,
            section_name: if sleepable {
                SECTION_SLEEPABLE.into()
            } else {
                SECTION_SECCOMP.into()
            },
            maps: Vec::new(),
            map_refs: Vec::new(),
            load_userns: None,
            verified: false,
        }
    }

    pub fn with_maps(mut self, maps: Vec<MapDef>) -> Self {
        self.maps = maps;
        self
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Whether any instruction calls a user-memory helper.
    pub fn uses_user_access(&self) -> bool {
        self.helpers_called().any(HelperId::reads_user_memory)
    }

    pub fn helpers_called(&self) -> impl Iterator<Item = HelperId> + '_ {
        self.instructions.iter().filter_map(|i| match i.opcode {
            Opcode::Call => HelperId::from_id(i.imm),
            Opcode::TailCall => Some(HelperId::TailCall),
            _ => None,
        })
    }

    pub fn map_index(&self, name: &str) -> Option<usize> {
        self.maps.iter().position(|m| m.name == name)
    }
}

/// Programs sharing one map table; the first program is the entry point and
/// the others are tail-call targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgramBundle {
    pub programs: Vec<FilterProgram>,
}

impl ProgramBundle {
    pub fn single(program: FilterProgram) -> Self {
        ProgramBundle {
            programs: alloc::vec![program],
        }
    }

    pub fn entry(&self) -> &FilterProgram {
        &self.programs[0]
    }

    pub fn entry_mut(&mut self) -> &mut FilterProgram {
        &mut self.programs[0]
    }

    /// The shared map table.
    pub fn maps(&self) -> &[MapDef] {
        self.programs.first().map(|p| p.maps.as_slice()).unwrap_or(&[])
    }

    pub fn program_index(&self, name: &str) -> Option<usize> {
        self.programs.iter().position(|p| p.name == name)
    }
}

impl From<FilterProgram> for ProgramBundle {
    fn from(p: FilterProgram) -> Self {
        ProgramBundle::single(p)
    }
}
