//! Acceptance suite. Runs without the libtest harness so that every
//! criterion reports exactly one PASS/FAIL line, whatever the capture mode.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use sfvm::profile::{self, attack_surface, parse_profiles};
use sfvm::scenario::{Drive, Scenario};
use sfvm_core::action::{resolve, ActionKind, ResolvedAction};
use sfvm_core::asm::assemble_bundle;
use sfvm_core::context::SyscallContext;
use sfvm_core::engine::{Creds, Engine, EngineConfig, EnterOutcome, InstallFlag};
use sfvm_core::policy::{self, ArgRule, DracoCheck, DracoSpec, ListStyle, PolicyOptions};
use sfvm_core::program::ProgramBundle;
use sfvm_core::sim::{self, CapName, EventKind, LogEntry, Payload, Region, ScheduleMode, TraceEvent};
use sfvm_core::snapshot::SnapshotMode;
use sfvm_core::sysno;
use sfvm_core::verifier::{verify, VerifierConfig};
use sfvm_core::vm::Sandbox;
use sfvm_core::Tid;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 9] = [
        ("attack-surface table", c1_attack_surface),
        ("scenario suite", c2_scenarios),
        ("argument snapshot", c3_tocttou),
        ("precedence laws", c4_precedence),
        ("verifier soundness", c5_verifier),
        ("lookup step model", c6_steps),
        ("validation cache", c7_draco),
        ("phase tightening", c8_temporal),
        ("checkpoint/restore", c9_checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {} PASS {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn c1_attack_surface() -> Outcome {
    // published unions and one-decimal reductions
    let expected = [
        ("HTTPD", 107, 33.6),
        ("NGINX", 109, 52.3),
        ("Lighttpd", 99, 53.5),
        ("Memcached", 101, 55.4),
        ("Redis", 93, 54.8),
        ("Bind", 135, 44.4),
    ];
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_sfvm"))
        .args(["report", "attack-surface", "--json"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(out.status.success(), || format!("exit {:?}", out.status.code()))?;
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let json = json["attack_surface"].clone();
    let rows = json["rows"].as_array().ok_or("no rows")?;
    ensure(rows.len() == expected.len(), || format!("{} rows", rows.len()))?;
    for (row, (name, union, red)) in rows.iter().zip(expected) {
        ensure(row["application"] == name, || format!("row {row} is not {name}"))?;
        ensure(row["union"] == union, || format!("{name}: union {}", row["union"]))?;
        let got = row["reduction_pct"].as_f64().ok_or("reduction missing")?;
        ensure((got - red).abs() <= 0.05, || format!("{name}: reduction {got:.3} vs {red}"))?;
        // the reduction is what the set sizes say it is
        let init = row["init"].as_f64().unwrap();
        ensure((got - 100.0 * (union as f64 - init) / union as f64).abs() < 1e-9, || {
            format!("{name}: reduction inconsistent with sizes")
        })?;
    }
    // library path agrees with the CLI
    let table = attack_surface(&parse_profiles(profile::BUNDLED).map_err(|e| e.to_string())?);
    ensure(serde_json::to_value(&table).unwrap() == json, || "library and CLI differ".into())?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("6 rows match, CLI took {} ms", elapsed.as_millis()))
}

// 2 ------------------------------------------------------------------------

fn multinomial(counts: &[usize]) -> u128 {
    let mut total = 0u128;
    let mut acc = 1u128;
    for &c in counts {
        for k in 1..=c as u128 {
            total += 1;
            acc = acc * total / k;
        }
    }
    acc
}

fn c2_scenarios() -> Outcome {
    let t = Instant::now();
    let all = Scenario::all_bundled().map_err(|e| format!("{e:#}"))?;
    ensure(all.len() == 7, || format!("{} bundled scenarios", all.len()))?;
    let cfg = EngineConfig::default();
    let mut explored = 0;
    for s in &all {
        let (res, _) = s.run(&cfg).map_err(|e| format!("{}: {e:#}", s.spec.name))?;
        if !res.passed {
            let bad: Vec<_> = res.checks.iter().chain(&res.control).filter(|c| !c.passed).collect();
            return Err(format!("{} failed: {bad:?}", s.spec.name));
        }
        if let Drive::Explore { watch, .. } = &s.spec.drive {
            explored += 1;
            ensure(res.overlapping == 0, || format!("{}: {} overlapping", s.spec.name, res.overlapping))?;
            let split = s.events.iter().position(TraceEvent::is_workload).unwrap();
            let rest = &s.events[split..];
            ensure(rest.len() <= 14, || format!("{}: {} concurrent steps", s.spec.name, rest.len()))?;
            let mut per_task: BTreeMap<Tid, usize> = BTreeMap::new();
            for e in rest {
                *per_task.entry(e.owner()).or_default() += 1;
            }
            ensure(per_task.len() == 2, || format!("{}: {} tasks", s.spec.name, per_task.len()))?;
            // unfiltered, nothing blocks: every interleaving must be visited
            let drop = s.spec.control.as_ref().map(|c| c.drop_filters.clone()).unwrap_or_default();
            let (events, filters) = s.without(&drop);
            let watch: Vec<(i32, i32)> = watch
                .iter()
                .map(|(a, b)| (a.resolve().unwrap(), b.resolve().unwrap()))
                .collect();
            let x = sim::explore(&events, Engine::new(cfg), filters, &watch, 14).map_err(|e| e.to_string())?;
            let counts: Vec<usize> = per_task.values().copied().collect();
            ensure(x.schedules.len() as u128 == multinomial(&counts), || {
                format!("{}: {} schedules, expected {}", s.spec.name, x.schedules.len(), multinomial(&counts))
            })?;
            ensure(x.overlapping() >= 1, || format!("{}: control shows no overlap", s.spec.name))?;
        }
    }
    let elapsed = t.elapsed();
    ensure(explored == 3, || format!("{explored} explored scenarios"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("7 scenarios pass incl. controls, {} ms", elapsed.as_millis()))
}

// 3 ------------------------------------------------------------------------

const TOCTOU: &str = "section seccomp-sleepable toctou
map buf array 4 8 2
ld_ctx r6, 4, 0
jeq r6, 110, ppid
jeq r6, 2, open
ja allow
ppid: mov r1, 110
mov r2, 999
call wait_syscall
ja allow
open: mov r1, @buf
mov r2, 0
call map_lookup_elem
jeq r0, 0, allow
mov r7, r0
mov r1, @buf
mov r2, 1
call map_lookup_elem
jeq r0, 0, allow
mov r8, r0
mov r1, r7
mov r2, 8
ld_ctx r3, 8, 16
call safe_read_user
jne r0, 0, efault
mov r1, 2
mov r2, 110
call wait_syscall
mov r1, r8
mov r2, 8
ld_ctx r3, 8, 16
call safe_read_user
jne r0, 0, efault
ld_map r4, r7, 0
ld_map r5, r8, 0
jne r4, r5, changed
and r4, 0xffffffff
jeq r4, 0x6374652f, etc
allow: ld_imm64 r0, 0x7fff0000
exit
changed: ld_imm64 r0, 0x5004d
exit
etc: ld_imm64 r0, 0x50001
exit
efault: ld_imm64 r0, 0x5000e
exit
";

const BASE: u64 = 0x1000;
const PATHS: [&str; 4] = ["/etc/passwd", "/etc/shadow", "/tmp/scratch", "/home/user/x"];

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[(rng.next_u64() % xs.len() as u64) as usize]
}

fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    rng.next_u64() % n
}

fn nul(s: &str) -> Vec<u8> {
    let mut b = s.as_bytes().to_vec();
    b.push(0);
    b
}

fn toctou_trace(rng: &mut ChaCha8Rng) -> (Vec<TraceEvent>, Vec<u8>) {
    let init = nul(pick(rng, &PATHS));
    let mut ev = vec![
        TraceEvent::new(
            1,
            EventKind::Spawn {
                parent: None,
                uid: Some(1000),
                gid: None,
                caps: None,
                regions: vec![Region {
                    addr: BASE,
                    len: 0x1000,
                    init: Payload::bytes(&init),
                    writable: true,
                }],
            },
        ),
        TraceEvent::new(1, EventKind::SetNnp),
        TraceEvent::new(
            1,
            EventKind::Install {
                filter: "toctou".into(),
                flags: InstallFlag::Extended,
            },
        ),
        TraceEvent::new(2, EventKind::SpawnThread { leader: Tid(1) }),
        TraceEvent::new(3, EventKind::SpawnThread { leader: Tid(1) }),
    ];
    for _ in 0..1 + below(rng, 3) {
        ev.push(TraceEvent::enter(1, sysno::OPEN, &[BASE, 0, 0, 0, 0, 0]));
        ev.push(TraceEvent::exit(1, sysno::OPEN));
    }
    for _ in 0..3 + below(rng, 6) {
        let (addr, bytes) = match below(rng, 3) {
            0 => (BASE, nul(pick(rng, &PATHS))),
            1 => (BASE + below(rng, 4), vec![*pick(rng, b"/etcmpxh")]),
            _ => (BASE + 0x800, vec![below(rng, 256) as u8]),
        };
        ev.push(TraceEvent::new(
            2,
            EventKind::MemWrite {
                addr,
                payload: Payload::bytes(&bytes),
            },
        ));
    }
    for _ in 0..1 + below(rng, 3) {
        ev.push(TraceEvent::enter(3, sysno::GETPPID, &[]));
        ev.push(TraceEvent::exit(3, sysno::GETPPID));
    }
    (ev, init)
}

#[derive(Default)]
struct RaceStats {
    opens: usize,
    blocked: usize,
    raced_writes: usize,
    stalls: u32,
}

/// Replays the log against a shadow of the path buffer and checks every
/// open's verdict against the bytes present when it entered.
fn check_toctou(log: &sim::DecisionLog, init: &[u8], stats: &mut RaceStats) -> Result<(), String> {
    ensure(log.errors().count() == 0, || format!("errors: {:?}", log.errors().collect::<Vec<_>>()))?;
    ensure(log.deadlocks.is_empty(), || "deadlock".into())?;
    let mut shadow = vec![0u8; 0x1000];
    shadow[..init.len()].copy_from_slice(init);
    let mut pending: Option<ResolvedAction> = None;
    for e in &log.entries {
        match e {
            LogEntry::Write {
                addr,
                bytes,
                status: sfvm_core::memory::WriteStatus::Ok,
                ..
            } => {
                let off = (*addr - BASE) as usize;
                shadow[off..off + bytes.len()].copy_from_slice(bytes);
                if pending.is_some() && off < 8 {
                    stats.raced_writes += 1;
                }
            }
            LogEntry::Blocked { tid: Tid(1), nr: 2, .. } => {
                if pending.is_none() {
                    stats.blocked += 1;
                    pending = Some(expected_open(&shadow));
                }
            }
            LogEntry::Decision { decision, .. } if decision.tid == Tid(1) && decision.nr == 2 => {
                let want = pending.take().unwrap_or_else(|| expected_open(&shadow));
                stats.opens += 1;
                ensure(decision.action == want, || {
                    format!("open decided {} but entry-time bytes say {want}", decision.action)
                })?;
            }
            _ => {}
        }
    }
    stats.stalls += log.stalls;
    Ok(())
}

fn expected_open(shadow: &[u8]) -> ResolvedAction {
    if &shadow[..4] == b"/etc" {
        ResolvedAction::errno(1)
    } else {
        ResolvedAction::ALLOW
    }
}

fn c3_tocttou() -> Outcome {
    let bundle = assemble_bundle(TOCTOU).map_err(|e| e.to_string())?;
    let filters: BTreeMap<String, ProgramBundle> = [("toctou".to_string(), bundle)].into();
    let mut rng = ChaCha8Rng::seed_from_u64(0x70c70);
    let mut report = Vec::new();
    let traces: Vec<_> = (0..500).map(|_| toctou_trace(&mut rng)).collect();
    for mode in [SnapshotMode::Copy, SnapshotMode::WriteProtect] {
        let mut stats = RaceStats::default();
        for (i, (events, init)) in traces.iter().enumerate() {
            let engine = Engine::new(EngineConfig {
                snapshot_mode: mode,
                ..EngineConfig::default()
            });
            let log = sim::run(events, engine, filters.clone(), &ScheduleMode::Seeded { seed: i as u64 })
                .map_err(|e| format!("{mode:?} trace {i}: {e}"))?;
            check_toctou(&log, init, &mut stats).map_err(|e| format!("{mode:?} trace {i}: {e}"))?;
        }
        ensure(stats.blocked > 0, || format!("{mode:?}: no open ever waited"))?;
        report.push(format!(
            "{mode:?}: {} opens, {} waited, {} raced writes, {} stalls",
            stats.opens, stats.blocked, stats.raced_writes, stats.stalls
        ));
    }
    Ok(format!("500 traces x 2 modes; {}", report.join("; ")))
}

// 4 ------------------------------------------------------------------------

fn rank(raw: u32) -> u8 {
    match raw & 0xffff_0000 {
        0x7fff_0000 => 0,
        0x7ffc_0000 => 1,
        0x0005_0000 => 2,
        0x0003_0000 => 3,
        0x0000_0000 => 4,
        _ => 5,
    }
}

/// Highest rank wins; among equals the first vote wins.
fn oracle(votes: &[u32]) -> Option<(u8, u32)> {
    let mut best: Option<(u8, u32)> = None;
    for &v in votes {
        let r = rank(v);
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, v));
        }
    }
    best
}

fn raw_action() -> impl Strategy<Value = u32> {
    prop_oneof![
        4 => (prop::sample::select(vec![0x7fff_0000u32, 0x7ffc_0000, 0x0005_0000, 0x0003_0000, 0, 0x8000_0000]), 0u32..0x1_0000)
            .prop_map(|(base, data)| base | data),
        1 => any::<u32>(),
    ]
}

fn check_resolution(votes: &[u32], got: ResolvedAction) -> Result<(), TestCaseError> {
    match oracle(votes) {
        None => prop_assert_eq!(got, ResolvedAction::ALLOW),
        Some((r, raw)) => {
            prop_assert_eq!(got.kind.precedence(), r);
            if r == 5 && raw & 0xffff_0000 != 0x8000_0000 {
                // unknown action bits
                prop_assert_eq!(got, ResolvedAction::of(ActionKind::KillProcess));
            } else {
                prop_assert_eq!(got.raw, raw);
            }
        }
    }
    Ok(())
}

static DECIDED: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
fn decide(chain: &[u32]) -> ResolvedAction {
    DECIDED.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let mut e = Engine::new(EngineConfig::default());
    e.spawn_init(Tid(1), Creds::user(1000)).unwrap();
    e.set_no_new_privs(Tid(1)).unwrap();
    for raw in chain {
        let b = assemble_bundle(&format!("ld_imm64 r0, {raw:#x}\nexit")).unwrap();
        let h = e.load_program(Tid(1), b).unwrap();
        e.install_filter(Tid(1), h.prog, InstallFlag::Extended).unwrap();
    }
    match e.syscall_enter(Tid(1), SyscallContext::new(sysno::GETPID, [0; 6])).unwrap() {
        EnterOutcome::Decided(d) => d.action,
        EnterOutcome::Blocked(r) => panic!("blocked: {r:?}"),
    }
}

fn c4_precedence() -> Outcome {
    let cases = 10_000;
    // a runner counts successes across calls, so each property gets its own
    let runner = || {
        TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        })
    };
    let votes = || prop::collection::vec(raw_action(), 0..8);
    let decode = |v: &[u32]| v.iter().map(|r| ResolvedAction::from_raw(*r)).collect::<Vec<_>>();

    runner()
        .run(&votes(), |v| check_resolution(&v, resolve(decode(&v))))
        .map_err(|e| format!("max precedence: {e}"))?;

    runner()
        .run(&votes().prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())), |(v, p)| {
            let a = resolve(decode(&v));
            let b = resolve(decode(&p));
            prop_assert_eq!(a.kind, b.kind);
            let top: BTreeSet<u32> = decode(&v).iter().filter(|x| x.kind == a.kind).map(|x| x.raw).collect();
            if top.len() == 1 {
                prop_assert_eq!(a.raw, b.raw);
            }
            Ok(())
        })
        .map_err(|e| format!("permutation: {e}"))?;

    runner()
        .run(&(votes(), raw_action(), any::<prop::sample::Index>()), |(v, extra, at)| {
            let before = resolve(decode(&v));
            let mut w = v.clone();
            w.insert(at.index(v.len() + 1), extra);
            prop_assert!(resolve(decode(&w)).kind >= before.kind);
            Ok(())
        })
        .map_err(|e| format!("monotonicity: {e}"))?;

    let chains = prop::collection::vec(raw_action(), 0..5);
    runner()
        .run(&(chains, raw_action()), |(chain, extra)| {
            let got = decide(&chain);
            check_resolution(&chain, got)?;
            let mut more = chain.clone();
            more.push(extra);
            let after = decide(&more);
            check_resolution(&more, after)?;
            prop_assert!(after.kind >= got.kind);
            Ok(())
        })
        .map_err(|e| format!("engine chain: {e}"))?;
    Ok(format!("4 properties x {cases} cases, {} engine runs", DECIDED.load(std::sync::atomic::Ordering::Relaxed)))
}

// 5 ------------------------------------------------------------------------

const ALU: [&str; 9] = ["mov", "add", "sub", "mul", "and", "or", "xor", "lsh", "rsh"];
const JMP: [&str; 7] = ["jeq", "jne", "jgt", "jge", "jlt", "jle", "jset"];
const FIELDS: [(u8, u16); 9] = [(4, 0), (4, 4), (8, 8), (8, 16), (8, 24), (8, 32), (8, 40), (8, 48), (8, 56)];

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn n(&mut self, k: u64) -> u64 {
        below(&mut self.rng, k)
    }

    fn reg(&mut self) -> u64 {
        // r0..r9, sometimes one that was never written
        self.n(10)
    }

    fn imm(&mut self) -> i64 {
        match self.n(4) {
            0 => self.n(16) as i64,
            1 => self.rng.next_u64() as i64,
            2 => -(self.n(1000) as i64),
            _ => self.n(1 << 20) as i64,
        }
    }

    fn operand(&mut self) -> String {
        if self.n(2) == 0 {
            format!("r{}", self.reg())
        } else {
            self.imm().to_string()
        }
    }

    fn field(&mut self) -> (u8, u16) {
        *pick(&mut self.rng, &FIELDS)
    }

    /// One item: a short instruction group. Jump targets are item indices.
    fn item(&mut self, idx: usize, total: usize) -> (Vec<String>, Option<usize>) {
        let fwd = |g: &mut Gen| idx + 1 + g.n((total - idx) as u64) as usize;
        match self.n(12) {
            0..=2 => {
                let op = *pick(&mut self.rng, &ALU);
                (vec![format!("{op} r{}, {}", self.reg(), self.operand())], None)
            }
            3 => (vec![format!("ld_imm64 r{}, {}", self.reg(), self.imm())], None),
            4 | 5 => {
                let (w, off) = self.field();
                (vec![format!("ld_ctx r{}, {w}, {off}", self.reg())], None)
            }
            6 | 7 => {
                let t = fwd(self);
                let j = *pick(&mut self.rng, &JMP);
                (vec![format!("{j} r{}, {}, L{t}", self.reg(), self.operand())], Some(t))
            }
            8 => {
                let d = self.reg();
                let off = *pick(&mut self.rng, &[0i64, 8, 8, 16, -8]);
                let t = fwd(self);
                let check = if self.n(8) == 0 { String::new() } else { format!("jeq r0, 0, L{t}\n") };
                let lines = format!(
                    "mov r1, @{}\nmov r2, {}\ncall map_lookup_elem\n{check}ld_map r{d}, r0, {off}\nst_map r0, r{}, {off}",
                    if self.n(2) == 0 { "a" } else { "h" },
                    self.operand(),
                    self.reg(),
                );
                (lines.lines().map(String::from).collect(), Some(t))
            }
            9 => {
                let lines = format!(
                    "mov r1, @{}\nmov r2, {}\nmov r3, {}\nmov r4, 0\ncall map_update_elem",
                    if self.n(2) == 0 { "a" } else { "h" },
                    self.operand(),
                    self.operand()
                );
                (lines.lines().map(String::from).collect(), None)
            }
            10 => {
                let c = 6 + self.n(3);
                let lines = format!(
                    "mov r{c}, 0\nB{idx}: add r{c}, 1\nld_ctx r{}, 8, 16\njlt r{c}, {}, B{idx}",
                    self.reg(),
                    1 + self.n(20)
                );
                (lines.lines().map(String::from).collect(), None)
            }
            _ => {
                let h = *pick(&mut self.rng, &["ktime_get_ns", "map_delete_elem", "map_lookup_elem"]);
                let lines = format!("mov r1, @h\nmov r2, {}\ncall {h}", self.operand());
                (lines.lines().map(String::from).collect(), None)
            }
        }
    }

    /// Returns the program body and the position of its final exit group.
    fn program(&mut self) -> (Vec<String>, usize) {
        let total = 4 + self.n(30) as usize;
        let mut items = Vec::new();
        let mut targets = BTreeSet::new();
        for i in 0..total {
            let (lines, t) = self.item(i, total);
            items.push(lines);
            targets.extend(t);
        }
        let ret = match self.n(3) {
            0 => format!("mov r0, r{}", self.reg()),
            _ => format!("ld_imm64 r0, {:#x}", self.rng.next_u32()),
        };
        items.push(vec![ret, "exit".into()]);
        let mut out = vec!["map a array 4 16 4".to_string(), "map h hash 8 8 8".to_string()];
        let mut exit_line = 0;
        for (i, lines) in items.into_iter().enumerate() {
            if i == total {
                exit_line = out.len();
            }
            for (k, l) in lines.into_iter().enumerate() {
                if k == 0 && targets.contains(&i) {
                    out.push(format!("L{i}: {l}"));
                } else {
                    out.push(l);
                }
            }
        }
        (out, exit_line)
    }
}

const OOB: [(u8, i64); 8] = [(8, 64), (4, 64), (8, 60), (8, 4), (4, 8), (4, 20), (2, 0), (8, -8)];

fn c5_verifier() -> Outcome {
    let cfg = VerifierConfig::default();
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(5),
    };
    let mut ctx_rng = ChaCha8Rng::seed_from_u64(55);
    let (mut attempts, mut accepted, mut runs, mut injected) = (0u64, 0, 0u64, 0);
    while accepted < 1000 {
        attempts += 1;
        ensure(attempts < 2_000_000, || format!("only {accepted} accepted programs"))?;
        let (lines, exit_line) = gen.program();
        let src = lines.join("\n");
        let mut bundle = assemble_bundle(&src).map_err(|e| format!("{e}\n{src}"))?;
        if !verify(&mut bundle.programs[0], &cfg).accepted {
            continue;
        }
        accepted += 1;
        let mut sb = Sandbox::new();
        let prog = sb.load(bundle).map_err(|e| e.to_string())?;
        for _ in 0..1000 {
            let mut args = [0u64; 6];
            for a in &mut args {
                *a = match below(&mut ctx_rng, 3) {
                    0 => below(&mut ctx_rng, 16),
                    _ => ctx_rng.next_u64(),
                };
            }
            let ctx = SyscallContext::new(below(&mut ctx_rng, 512) as i32, args)
                .with_calling_address(ctx_rng.next_u64());
            let o = sb.run(prog, &ctx);
            runs += 1;
            ensure(o.faulted.is_none(), || format!("fault {:?} on {ctx:?}\n{src}", o.faulted))?;
        }
        // the same program with one out-of-bounds context read
        let (w, off) = *pick(&mut gen.rng, &OOB);
        let bad = format!("ld_ctx r{}, {w}, {off}", gen.reg());
        let mut mutated = lines.clone();
        let at = if gen.n(2) == 0 { 2 } else { exit_line };
        if mutated[at].contains(':') && at == exit_line {
            // keep the label on the first line of the group
            let (label, rest) = mutated[at].split_once(": ").unwrap();
            mutated[at] = format!("{label}: {bad}\n{rest}");
        } else {
            mutated.insert(at, bad);
        }
        let msrc = mutated.join("\n");
        let mut m = assemble_bundle(&msrc).map_err(|e| format!("{e}\n{msrc}"))?;
        injected += 1;
        ensure(!verify(&mut m.programs[0], &cfg).accepted, || format!("accepted OOB read:\n{msrc}"))?;
    }
    Ok(format!(
        "{accepted} accepted of {attempts} generated, {runs} runs without fault, {injected} OOB mutants rejected"
    ))
}

// 6 ------------------------------------------------------------------------

fn list_steps(style: ListStyle, allow: bool, n: usize) -> Result<u64, String> {
    let set: BTreeSet<i32> = (0..n as i32).collect();
    let opts = PolicyOptions::default();
    let b = if allow {
        policy::gen_allowlist(&set, style, &opts)
    } else {
        policy::gen_denylist(&set, style, &opts)
    }
    .map_err(|e| e.to_string())?;
    let mut sb = Sandbox::new();
    let prog = sb.load(b).map_err(|e| e.to_string())?;
    // an unlisted syscall walks the whole list
    let o = sb.run(prog, &SyscallContext::new(sysno::MAX_NR - 1, [0; 6]));
    ensure(o.faulted.is_none(), || format!("fault {:?}", o.faulted))?;
    let want = if allow { ActionKind::Errno } else { ActionKind::Allow };
    ensure(ResolvedAction::from_raw(o.raw_action).kind == want, || "wrong verdict".into())?;
    Ok(o.steps_executed)
}

fn c6_steps() -> Outcome {
    let sizes = [16, 64, 256];
    let mut detail = Vec::new();
    for allow in [true, false] {
        let lin: Vec<u64> = sizes.iter().map(|&n| list_steps(ListStyle::Linear, allow, n)).collect::<Result<_, _>>()?;
        let hash: Vec<u64> = sizes.iter().map(|&n| list_steps(ListStyle::Hashmap, allow, n)).collect::<Result<_, _>>()?;
        let kind = if allow { "allowlist" } else { "denylist" };
        ensure(lin.windows(2).all(|w| w[0] < w[1]), || format!("{kind} linear not increasing: {lin:?}"))?;
        ensure(lin[2] as f64 >= 3.0 * lin[0] as f64, || format!("{kind} linear ratio too small: {lin:?}"))?;
        let spread = hash.iter().max().unwrap() - hash.iter().min().unwrap();
        ensure(spread <= 5, || format!("{kind} hashmap spread {spread}: {hash:?}"))?;
        detail.push(format!("{kind} linear {lin:?} hashmap {hash:?}"));
    }
    Ok(detail.join("; "))
}

// 7 ------------------------------------------------------------------------

/// Argument rules on all five recorded arguments, each a 16-value set whose
/// commonly used members come last, so validating a call costs far more than
/// comparing it against the cached record.
fn draco_spec() -> DracoSpec {
    let set = |tail: &[u64]| -> Vec<u64> {
        let mut v: Vec<u64> = (0..16 - tail.len() as u64).map(|i| 0x1_0000 + i).collect();
        v.extend_from_slice(tail);
        v
    };
    let io = vec![set(&[3, 1]), set(&[6, 64]), set(&[0]), set(&[0]), set(&[0])];
    let open = vec![
        set(&[(-100i64) as u64]),
        set(&[0x1000]),
        set(&[0x80000, 0]),
        set(&[0]),
        set(&[0]),
    ];
    let rules = |sets: &[Vec<u64>]| -> Vec<ArgRule> {
        sets.iter()
            .enumerate()
            .map(|(arg, allowed)| ArgRule {
                arg,
                allowed: allowed.clone(),
            })
            .collect()
    };
    DracoSpec {
        checks: vec![
            DracoCheck {
                nr: sysno::READ,
                rules: rules(&io),
            },
            DracoCheck {
                nr: sysno::WRITE,
                rules: rules(&io),
            },
            DracoCheck {
                nr: sysno::OPENAT,
                rules: rules(&open),
            },
        ],
    }
}

fn draco_trace() -> (Vec<TraceEvent>, f64) {
    let pool: [(i32, [u64; 6]); 8] = [
        (sysno::READ, [3, 64, 0, 0, 0, 0]),
        (sysno::READ, [1, 64, 0, 0, 0, 0]),
        (sysno::WRITE, [1, 64, 0, 0, 0, 0]),
        (sysno::WRITE, [1, 6, 0, 0, 0, 0]),
        (sysno::OPENAT, [(-100i64) as u64, 0x1000, 0, 0, 0, 0]),
        (sysno::OPENAT, [(-100i64) as u64, 0x1000, 0x80000, 0, 0, 0]),
        // denied: fd 11 is not in the allowed set
        (sysno::WRITE, [11, 64, 0, 0, 0, 0]),
        (sysno::GETPID, [0; 6]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ev = vec![
        TraceEvent::new(
            1,
            EventKind::Spawn {
                parent: None,
                uid: Some(1000),
                gid: None,
                caps: None,
                regions: vec![],
            },
        ),
        TraceEvent::new(1, EventKind::SetNnp),
        TraceEvent::new(
            1,
            EventKind::Install {
                filter: "draco".into(),
                flags: InstallFlag::Extended,
            },
        ),
    ];
    let mut seen = BTreeSet::new();
    let (mut calls, mut repeats) = (0, 0);
    let mut last = 0usize;
    for _ in 0..400 {
        // bursts: mostly the same call again, as a server loop would
        if below(&mut rng, 4) == 0 {
            last = below(&mut rng, pool.len() as u64) as usize;
        }
        let (nr, args) = pool[last];
        calls += 1;
        if !seen.insert((nr, args)) {
            repeats += 1;
        }
        ev.push(TraceEvent::enter(1, nr, &args));
        ev.push(TraceEvent::exit(1, nr));
    }
    (ev, repeats as f64 / calls as f64)
}

fn c7_draco() -> Outcome {
    let spec = draco_spec();
    let (events, repeat_share) = draco_trace();
    ensure(repeat_share >= 0.8, || format!("only {:.0}% repeats", repeat_share * 100.0))?;
    let opts = PolicyOptions::default();
    let mut logs = Vec::new();
    for cached in [false, true] {
        let b = policy::gen_draco(&spec, cached, &opts).map_err(|e| e.to_string())?;
        let filters: BTreeMap<String, ProgramBundle> = [("draco".to_string(), b)].into();
        let log = sim::run(&events, Engine::new(EngineConfig::default()), filters, &ScheduleMode::TraceOrder)
            .map_err(|e| e.to_string())?;
        ensure(log.errors().count() == 0, || "errors in run".into())?;
        logs.push(log);
    }
    let (plain, cached) = (&logs[0], &logs[1]);
    ensure(plain.verdicts() == cached.verdicts(), || "verdicts differ".into())?;
    ensure(plain.schedule == cached.schedule, || "schedules differ".into())?;
    let strip = |l: &sim::DecisionLog| {
        l.entries
            .iter()
            .map(|e| match e {
                LogEntry::Decision { step, decision } => format!("{step} {} {} {}", decision.tid, decision.nr, decision.action),
                other => format!("{other:?}"),
            })
            .collect::<Vec<_>>()
    };
    ensure(strip(plain) == strip(cached), || "logs differ beyond step counts".into())?;
    let denied = plain.decisions().filter(|d| d.action.kind == ActionKind::Errno).count();
    ensure(denied > 0, || "trace never hits a denial".into())?;
    let (a, b) = (plain.total_steps(), cached.total_steps());
    let saved = 1.0 - b as f64 / a as f64;
    ensure(saved >= 0.2, || format!("steps {a} -> {b}, only {:.1}% saved", saved * 100.0))?;
    Ok(format!(
        "{:.0}% repeats, {} decisions ({denied} denied) equal, steps {a} -> {b} ({:.1}% fewer)",
        repeat_share * 100.0,
        plain.decisions().count(),
        saved * 100.0
    ))
}

// 8 ------------------------------------------------------------------------

fn allowed_set(sb: &mut Sandbox, prog: sfvm_core::ProgId) -> Result<BTreeSet<i32>, String> {
    let mut out = BTreeSet::new();
    for nr in 0..sysno::MAX_NR {
        let o = sb.run(prog, &SyscallContext::new(nr, [0; 6]));
        ensure(o.faulted.is_none(), || format!("fault on {nr}"))?;
        if ResolvedAction::from_raw(o.raw_action).kind.executes_syscall() {
            out.insert(nr);
        }
    }
    Ok(out)
}

fn c8_temporal() -> Outcome {
    let profiles = parse_profiles(profile::BUNDLED).map_err(|e| e.to_string())?;
    let opts = PolicyOptions::default();
    let mut detail = Vec::new();
    for p in &profiles {
        let mut sb = Sandbox::new();
        let prog = sb.load(policy::gen_temporal(p, &opts).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let phase0 = allowed_set(&mut sb, prog)?;
        ensure(phase0 == p.s_init, || format!("{}: phase 0 allows {} calls", p.name, phase0.len()))?;

        let union: BTreeSet<i32> = p.s_init.union(&p.s_serv).copied().collect();
        let mut base = Sandbox::new();
        let bprog = base
            .load(policy::gen_allowlist(&union, ListStyle::Linear, &opts).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let baseline = allowed_set(&mut base, bprog)?;
        ensure(baseline == union, || format!("{}: baseline differs from the union", p.name))?;
        let extra: BTreeSet<i32> = baseline.difference(&phase0).copied().collect();
        let serv_only: BTreeSet<i32> = p.s_serv.difference(&p.s_init).copied().collect();
        ensure(extra == serv_only, || format!("{}: baseline surplus is not the serving-only set", p.name))?;

        // after the marker the serving set applies
        sb.run(prog, &SyscallContext::new(p.phase_marker_nr, [0; 6]));
        let phase1 = allowed_set(&mut sb, prog)?;
        ensure(phase1 == p.s_serv, || format!("{}: phase 1 allows {} calls", p.name, phase1.len()))?;
        detail.push(format!("{} +{}", p.name, extra.len()));
    }
    Ok(format!("phase 0 == init set for all; baseline surplus {}", detail.join(", ")))
}

// 9 ------------------------------------------------------------------------

const ADMIN: u32 = 99;

fn admin() -> TraceEvent {
    TraceEvent::new(
        ADMIN,
        EventKind::Spawn {
            parent: None,
            uid: Some(0),
            gid: None,
            caps: Some(vec![CapName::SysAdmin]),
            regions: vec![],
        },
    )
}

fn spawned(events: &[TraceEvent]) -> Vec<Tid> {
    events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Spawn { .. } | EventKind::SpawnThread { .. }) && e.tid != Tid(ADMIN))
        .map(|e| e.tid)
        .collect()
}

fn shifted(entries: &[LogEntry], after: u64, by: u64) -> Vec<LogEntry> {
    entries
        .iter()
        .filter_map(|e| {
            let mut e = e.clone();
            let step = match &mut e {
                LogEntry::Decision { step, .. }
                | LogEntry::Blocked { step, .. }
                | LogEntry::Exit { step, .. }
                | LogEntry::Write { step, .. }
                | LogEntry::Error { step, .. } => step,
            };
            if *step <= after + by {
                return None;
            }
            *step -= by;
            Some(e)
        })
        .collect()
}

fn c9_checkpoint() -> Outcome {
    let all = Scenario::all_bundled().map_err(|e| format!("{e:#}"))?;
    let mut cuts = 0;
    for s in &all {
        let cfg = s.engine_config(&EngineConfig::default());
        let mut base = vec![admin()];
        base.extend(s.events.iter().cloned());
        let first = base.iter().position(TraceEvent::is_workload).unwrap_or(base.len());
        let reference = sim::run(&base, Engine::new(cfg), s.filters.clone(), &ScheduleMode::TraceOrder)
            .map_err(|e| format!("{}: {e}", s.spec.name))?;
        // every cut from just before the workload to just before the end
        for cut in first..base.len() {
            let targets = spawned(&base[..cut]);
            let mut ev = base[..cut].to_vec();
            ev.push(TraceEvent::new(
                ADMIN,
                EventKind::Checkpoint {
                    targets,
                    name: "c".into(),
                },
            ));
            ev.push(TraceEvent::new(
                ADMIN,
                EventKind::Restore {
                    name: "c".into(),
                    replace: true,
                },
            ));
            ev.extend(base[cut..].iter().cloned());
            let log = sim::run(&ev, Engine::new(cfg), s.filters.clone(), &ScheduleMode::TraceOrder)
                .map_err(|e| format!("{} cut {cut}: {e}", s.spec.name))?;
            let at = log
                .schedule
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == Tid(ADMIN))
                .nth(1)
                .map(|(i, _)| i as u64)
                .ok_or("checkpoint never ran")?;
            ensure(log.errors().count() == reference.errors().count(), || {
                format!("{} cut {cut}: {:?}", s.spec.name, log.errors().collect::<Vec<_>>())
            })?;
            let want = shifted(&reference.entries, at, 0);
            let got = shifted(&log.entries, at, 2);
            ensure(want == got, || format!("{} cut {cut}: suffix differs", s.spec.name))?;
            ensure(!want.is_empty() || cut + 1 == base.len(), || format!("{} cut {cut}: empty suffix", s.spec.name))?;
            cuts += 1;
        }
    }
    Ok(format!("{} scenarios, {cuts} cut points, suffixes identical", all.len()))
}
