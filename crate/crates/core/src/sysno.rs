// SPDX-License-Identifier: Apache-2.0

//! x86_64 syscall numbers used by the bundled policies and scenarios.

pub const READ: i32 = 0;
pub const WRITE: i32 = 1;
pub const OPEN: i32 = 2;
pub const CLOSE: i32 = 3;
pub const MPROTECT: i32 = 10;
pub const MREMAP: i32 = 25;
pub const MADVISE: i32 = 28;
pub const GETPID: i32 = 39;
pub const SOCKET: i32 = 41;
pub const CONNECT: i32 = 42;
pub const EXECVE: i32 = 59;
pub const FTRUNCATE: i32 = 77;
pub const RENAME: i32 = 82;
pub const PTRACE: i32 = 101;
pub const GETPPID: i32 = 110;
pub const IO_SUBMIT: i32 = 209;
pub const WAITID: i32 = 247;
pub const KEYCTL: i32 = 250;
pub const INOTIFY_ADD_WATCH: i32 = 254;
pub const OPENAT: i32 = 257;

/// Largest syscall number the policy generators consider.
pub const MAX_NR: i32 = 450;

/// Unused number reserved for the phase-switch marker.
pub const PHASE_MARKER: i32 = 511;

/// `keyctl` operation that joins (or creates) a session keyring.
pub const KEYCTL_JOIN_SESSION_KEYRING: u64 = 1;

const NAMES: &[(i32, &str)] = &[
    (READ, "read"),
    (WRITE, "write"),
    (OPEN, "open"),
    (CLOSE, "close"),
    (MPROTECT, "mprotect"),
    (MREMAP, "mremap"),
    (MADVISE, "madvise"),
    (GETPID, "getpid"),
    (SOCKET, "socket"),
    (CONNECT, "connect"),
    (EXECVE, "execve"),
    (FTRUNCATE, "ftruncate"),
    (RENAME, "rename"),
    (PTRACE, "ptrace"),
    (GETPPID, "getppid"),
    (IO_SUBMIT, "io_submit"),
    (WAITID, "waitid"),
    (KEYCTL, "keyctl"),
    (INOTIFY_ADD_WATCH, "inotify_add_watch"),
    (OPENAT, "openat"),
    (PHASE_MARKER, "phase_marker"),
];

pub fn name(nr: i32) -> Option<&'static str> {
    NAMES.iter().find(|(n, _)| *n == nr).map(|(_, s)| *s)
}

pub fn from_name(s: &str) -> Option<i32> {
    NAMES.iter().find(|(_, n)| *n == s).map(|(nr, _)| *nr)
}
