// SPDX-License-Identifier: Apache-2.0

//! Filter return values and chain resolution.

use core::fmt;

use serde::{Deserialize, Serialize};

pub const SECCOMP_RET_KILL_PROCESS: u32 = 0x8000_0000;
pub const SECCOMP_RET_KILL_THREAD: u32 = 0x0000_0000;
pub const SECCOMP_RET_TRAP: u32 = 0x0003_0000;
pub const SECCOMP_RET_ERRNO: u32 = 0x0005_0000;
pub const SECCOMP_RET_LOG: u32 = 0x7ffc_0000;
pub const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;

pub const SECCOMP_RET_ACTION_FULL: u32 = 0xffff_0000;
pub const SECCOMP_RET_DATA: u32 = 0x0000_ffff;

pub const EPERM: u16 = 1;

/// `ERRNO(code)` raw value.
pub const fn errno_action(code: u16) -> u32 {
    SECCOMP_RET_ERRNO | code as u32
}

/// Action kinds in ascending precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Allow,
    Log,
    Errno,
    Trap,
    KillThread,
    KillProcess,
}

impl ActionKind {
    pub fn precedence(self) -> u8 {
        self as u8
    }

    pub fn base(self) -> u32 {
        match self {
            ActionKind::Allow => SECCOMP_RET_ALLOW,
            ActionKind::Log => SECCOMP_RET_LOG,
            ActionKind::Errno => SECCOMP_RET_ERRNO,
            ActionKind::Trap => SECCOMP_RET_TRAP,
            ActionKind::KillThread => SECCOMP_RET_KILL_THREAD,
            ActionKind::KillProcess => SECCOMP_RET_KILL_PROCESS,
        }
    }

    /// Whether the syscall body runs under this action.
    pub fn executes_syscall(self) -> bool {
        matches!(self, ActionKind::Allow | ActionKind::Log)
    }
}

/// A decoded action. Unknown action bits decode as `KILL_PROCESS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolvedAction {
    pub kind: ActionKind,
    pub raw: u32,
}

impl ResolvedAction {
    pub const ALLOW: ResolvedAction = ResolvedAction {
        kind: ActionKind::Allow,
        raw: SECCOMP_RET_ALLOW,
    };

    pub fn from_raw(raw: u32) -> ResolvedAction {
        let kind = match raw & SECCOMP_RET_ACTION_FULL {
            SECCOMP_RET_KILL_PROCESS => ActionKind::KillProcess,
            SECCOMP_RET_KILL_THREAD => ActionKind::KillThread,
            SECCOMP_RET_TRAP => ActionKind::Trap,
            SECCOMP_RET_ERRNO => ActionKind::Errno,
            SECCOMP_RET_LOG => ActionKind::Log,
            SECCOMP_RET_ALLOW => ActionKind::Allow,
            _ => return ResolvedAction::of(ActionKind::KillProcess),
        };
        ResolvedAction { kind, raw }
    }

    pub fn of(kind: ActionKind) -> ResolvedAction {
        ResolvedAction {
            kind,
            raw: kind.base(),
        }
    }

    pub fn errno(code: u16) -> ResolvedAction {
        ResolvedAction {
            kind: ActionKind::Errno,
            raw: errno_action(code),
        }
    }

    /// Errno carried by an `ERRNO` action.
    pub fn errno_code(&self) -> Option<u16> {
        (self.kind == ActionKind::Errno).then_some((self.raw & SECCOMP_RET_DATA) as u16)
    }
}

impl fmt::Display for ResolvedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ActionKind::Errno => write!(f, "ERRNO({})", self.raw & SECCOMP_RET_DATA),
            ActionKind::Allow => f.write_str("ALLOW"),
            ActionKind::Log => f.write_str("LOG"),
            ActionKind::Trap => f.write_str("TRAP"),
            ActionKind::KillThread => f.write_str("KILL_THREAD"),
            ActionKind::KillProcess => f.write_str("KILL_PROCESS"),
        }
    }
}

/// Combines the votes of a filter chain, given in installation order.
///
/// The highest-precedence kind wins; among votes of that kind the earliest
/// installed one supplies the data bits. An empty chain allows.
pub fn resolve<I>(votes: I) -> ResolvedAction
where
    I: IntoIterator<Item = ResolvedAction>,
{
    let mut best: Option<ResolvedAction> = None;
    for v in votes {
        match best {
            Some(b) if v.kind <= b.kind => {}
            _ => best = Some(v),
        }
    }
    best.unwrap_or(ResolvedAction::ALLOW)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn precedence_table() {
        assert_eq!(resolve(vec![]), ResolvedAction::ALLOW);
        let v = vec![ResolvedAction::ALLOW, ResolvedAction::errno(1)];
        assert_eq!(resolve(v), ResolvedAction::errno(1));
        let v = vec![
            ResolvedAction::errno(5),
            ResolvedAction::of(ActionKind::KillProcess),
            ResolvedAction::of(ActionKind::Log),
        ];
        assert_eq!(resolve(v).kind, ActionKind::KillProcess);
    }

    #[test]
    fn errno_tie_goes_to_earliest() {
        let v = vec![ResolvedAction::errno(13), ResolvedAction::errno(1)];
        assert_eq!(resolve(v), ResolvedAction::errno(13));
    }

    #[test]
    fn decoding() {
        assert_eq!(ResolvedAction::from_raw(0x7fff_0000).kind, ActionKind::Allow);
        assert_eq!(ResolvedAction::from_raw(0x0005_0001).errno_code(), Some(1));
        assert_eq!(ResolvedAction::from_raw(0).kind, ActionKind::KillThread);
        assert_eq!(ResolvedAction::from_raw(0x8000_0000).kind, ActionKind::KillProcess);
        // TRACE and USER_NOTIF are not supported
        assert_eq!(ResolvedAction::from_raw(0x7ff0_0000).kind, ActionKind::KillProcess);
        assert_eq!(ResolvedAction::from_raw(0x7fc0_0000).kind, ActionKind::KillProcess);
    }
}
