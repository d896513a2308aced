//! Command-line behaviour: exit codes, output formats and report files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfvm::report::SCHEMA;
use sfvm_core::asm::assemble_bundle;
use sfvm_core::policy::serialization_value;
use sfvm_core::sim::{DecisionLog, LogEntry};
use sfvm_core::sysno::{INOTIFY_ADD_WATCH, RENAME};

fn sfvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfvm")).args(args).output().expect("spawn sfvm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Fresh scratch directory per test.
fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("sfvm-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn schema_check(report: &str) {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let instance: serde_json::Value = serde_json::from_str(report).unwrap();
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

const ALLOW_ALL: &str = "ld_imm64 r0, 0x7fff0000\nexit\n";

const TRACE: &str = r#"{"ev":"spawn","tid":1,"uid":1000}
{"ev":"set_nnp","tid":1}
{"ev":"install","tid":1,"filter":"deny_exec"}
{"ev":"syscall_enter","tid":1,"nr":"getpid"}
{"ev":"syscall_exit","tid":1,"nr":"getpid"}
{"ev":"syscall_enter","tid":1,"nr":"execve"}
{"ev":"syscall_exit","tid":1,"nr":"execve"}
"#;

#[test]
fn asm_disasm_round_trip() {
    let d = scratch("asm");
    let src = write(
        &d,
        "f.s",
        "map m array 4 8 1\nsection seccomp main\nld_ctx r2, 4, 0\njeq r2, 59, deny\nld_imm64 r0, 0x7fff0000\nexit\n\
         deny: ld_imm64 r0, 0x50001\nexit\n",
    );
    let bin = d.join("f.sfvm");
    let o = sfvm(&["asm", &src, "-o", bin.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = sfvm(&["disasm", bin.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let again = assemble_bundle(&stdout(&o)).unwrap();
    let orig = assemble_bundle(&std::fs::read_to_string(&src).unwrap()).unwrap();
    assert_eq!(again.programs[0].instructions, orig.programs[0].instructions);
    assert_eq!(again.maps(), orig.maps());
}

#[test]
fn verify_exit_codes() {
    let d = scratch("verify");
    let good = write(&d, "good.s", ALLOW_ALL);
    let bad = write(&d, "bad.s", "ld_ctx r0, 8, 64\nexit\n");
    let bad_spec = write(&d, "bad.json", r#"{"generator":"draco","checks":[{"nr":"read","rules":[{"arg":5,"allowed":[0]}]}]}"#);
    assert_eq!(code(&sfvm(&["verify", &good])), 0);
    let o = sfvm(&["verify", &bad, "--json"]);
    assert_eq!(code(&o), 1);
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(json["main"]["accepted"], false, "{json}");
    assert_eq!(code(&sfvm(&["verify", &bad_spec])), 1);
    assert_eq!(code(&sfvm(&["verify", d.join("missing.s").to_str().unwrap()])), 2);
}

#[test]
fn run_prints_decision_log_and_valid_report() {
    let d = scratch("run");
    let trace = write(&d, "t.jsonl", TRACE);
    let filter = write(&d, "deny_exec.json", r#"{"generator":"denylist","syscalls":["execve"]}"#);
    let report = d.join("r.json");
    let o = sfvm(&["run", "--trace", &trace, "--filter", &filter, "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log: DecisionLog = serde_json::from_str(&stdout(&o)).unwrap();
    let v: Vec<String> = log.verdicts().iter().map(|(_, nr, a)| format!("{nr}:{a}")).collect();
    assert_eq!(v, ["39:ALLOW", "59:ERRNO(1)"]);
    schema_check(&std::fs::read_to_string(&report).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let d = scratch("usage");
    let trace = write(&d, "t.jsonl", TRACE);
    assert_eq!(code(&sfvm(&["explore", "--trace", &trace, "--max-steps", "20"])), 2);
    assert_eq!(code(&sfvm(&["scenario", "no-such-scenario"])), 2);
    assert_eq!(code(&sfvm(&["run", "--trace", d.join("nope.jsonl").to_str().unwrap()])), 2);
    assert_eq!(code(&sfvm(&["run", "--trace", &trace, "--schedule", "sometimes"])), 2);
    let broken = write(&d, "broken.jsonl", "{\"ev\":\"spawn\",\"tid\":1}\n{\"ev\":\"syscall_exit\",\"tid\":1,\"nr\":3}\n");
    let o = sfvm(&["run", "--trace", &broken]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn scenario_reports_are_reproducible() {
    let d = scratch("scenario");
    let (a, b) = (d.join("a.json"), d.join("b.json"));
    for p in [&a, &b] {
        let o = sfvm(&["scenario", "--all", "--report", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
    }
    let (ra, rb) = (std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    assert_eq!(ra, rb);
    schema_check(&ra);
}

#[test]
fn attack_surface_report_validates() {
    let d = scratch("surface");
    let report = d.join("r.json");
    let o = sfvm(&["report", "attack-surface", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("HTTPD"));
    schema_check(&std::fs::read_to_string(&report).unwrap());

    let idle = write(&d, "p.json", r#"{"applications":[{"name":"idle","init":4,"serv":0,"comm":0}]}"#);
    let o = sfvm(&["report", "attack-surface", "--profiles", &idle]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn explore_report_validates() {
    let d = scratch("explore");
    let trace = write(
        &d,
        "t.jsonl",
        "{\"ev\":\"spawn\",\"tid\":1,\"uid\":1000}\n{\"ev\":\"spawn\",\"tid\":2,\"parent\":1}\n\
         {\"ev\":\"syscall_enter\",\"tid\":1,\"nr\":\"mremap\"}\n{\"ev\":\"syscall_exit\",\"tid\":1,\"nr\":\"mremap\"}\n\
         {\"ev\":\"syscall_enter\",\"tid\":2,\"nr\":\"ftruncate\"}\n{\"ev\":\"syscall_exit\",\"tid\":2,\"nr\":\"ftruncate\"}\n",
    );
    let report = d.join("r.json");
    let o = sfvm(&["explore", "--trace", &trace, "--watch", "mremap,ftruncate", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(json["schedules"], 6);
    assert_eq!(json["overlapping"], 4);
    schema_check(&std::fs::read_to_string(&report).unwrap());
}

#[test]
fn privileged_only_blocks_unprivileged_install() {
    let d = scratch("priv");
    let trace = write(&d, "t.jsonl", TRACE);
    let filter = write(&d, "deny_exec.s", "ld_ctx r2, 4, 0\njeq r2, 59, deny\nld_imm64 r0, 0x7fff0000\nexit\ndeny: ld_imm64 r0, 0x50001\nexit\n");
    let run = |privileged_only: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_sfvm"));
        c.args(["run", "--trace", &trace, "--filter", &filter]);
        if privileged_only {
            c.env("SFVM_PRIVILEGED_ONLY", "1");
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0);
        serde_json::from_str::<DecisionLog>(&stdout(&o)).unwrap()
    };
    let open = run(false);
    assert_eq!(open.errors().count(), 0);
    assert_eq!(open.verdicts()[1].2.to_string(), "ERRNO(1)");
    let locked = run(true);
    let install_failed = locked
        .errors()
        .any(|e| matches!(e, LogEntry::Error { event, .. } if event == "install" || event == "load"));
    assert!(install_failed, "{:?}", locked.entries);
    assert!(locked.verdicts().iter().all(|(_, _, a)| a.to_string() == "ALLOW"));
}

#[test]
fn runtime_pair_is_enforced() {
    let d = scratch("pairs");
    let filter = write(&d, "serialize.json", r#"{"generator":"serialization","pairs":[["mremap","ftruncate"]],"spare":2}"#);
    let workload = "{\"ev\":\"spawn\",\"tid\":2,\"parent\":1}\n\
         {\"ev\":\"syscall_enter\",\"tid\":1,\"nr\":\"rename\"}\n{\"ev\":\"syscall_exit\",\"tid\":1,\"nr\":\"rename\"}\n\
         {\"ev\":\"syscall_enter\",\"tid\":2,\"nr\":\"inotify_add_watch\"}\n{\"ev\":\"syscall_exit\",\"tid\":2,\"nr\":\"inotify_add_watch\"}\n";
    let setup = "{\"ev\":\"spawn\",\"tid\":1,\"uid\":1000}\n{\"ev\":\"set_nnp\",\"tid\":1}\n\
                 {\"ev\":\"install\",\"tid\":1,\"filter\":\"serialize\"}\n\
                 {\"ev\":\"spawn\",\"tid\":9,\"uid\":0,\"caps\":[\"CAP_SYS_ADMIN\"]}\n";
    // live policy updates need root
    let updates = |tid: u32| format!(
        "{{\"ev\":\"map_update\",\"tid\":{tid},\"filter\":\"serialize\",\"map\":\"pairs\",\"key\":{RENAME},\"value\":{}}}\n\
         {{\"ev\":\"map_update\",\"tid\":{tid},\"filter\":\"serialize\",\"map\":\"pairs\",\"key\":{INOTIFY_ADD_WATCH},\"value\":{}}}\n",
        serialization_value(&[INOTIFY_ADD_WATCH]).unwrap(),
        serialization_value(&[RENAME]).unwrap(),
    );
    let explore = |trace: &str| {
        let o = sfvm(&["explore", "--trace", trace, "--filter", &filter, "--watch", "rename,inotify_add_watch"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()
    };
    let without = explore(&write(&d, "a.jsonl", &format!("{setup}{workload}")));
    assert!(without["overlapping"].as_u64().unwrap() > 0, "{without}");
    let denied = write(&d, "c.jsonl", &format!("{setup}{}{workload}", updates(1)));
    let o = sfvm(&["run", "--trace", &denied, "--filter", &filter]);
    let log: DecisionLog = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(log.errors().count(), 2);
    let with = explore(&write(&d, "b.jsonl", &format!("{setup}{}{workload}", updates(9))));
    assert_eq!(with["overlapping"], 0, "{with}");
    assert_eq!(with["deadlocked"], 0);
}
