use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sfvm::descriptors::load_descriptors;
use sfvm::filter::{load_filter, parse_filter};
use sfvm::profile::{attack_surface, load_profiles, parse_profiles, BUNDLED as BUNDLED_PROFILES};
use sfvm::report::{ExploreReport, Report, RunMetrics, RunReport};
use sfvm::scenario::{Scenario, BUNDLED as BUNDLED_SCENARIOS};
use sfvm::trace::load_trace;
use sfvm_core::asm::{assemble_bundle, disassemble_bundle};
use sfvm_core::engine::{Engine, EngineConfig};
use sfvm_core::format::encode_bundle;
use sfvm_core::program::ProgramBundle;
use sfvm_core::sim::{self, Nr, ScheduleMode, SimError, DEFAULT_MAX_STEPS};
use sfvm_core::snapshot::SnapshotMode;
use sfvm_core::verifier::{verify, VerifierConfig};
use sfvm_core::Tid;

#[derive(Parser)]
#[command(name = "sfvm", version, about = "Extended seccomp filter toolchain and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Snap {
    Copy,
    WriteProtect,
}

#[derive(clap::Args)]
struct EngineArgs {
    /// How argument memory is protected while filters inspect it.
    #[arg(long, value_enum, default_value = "copy")]
    snapshot_mode: Snap,
    /// Argument descriptor file replacing the builtin table.
    #[arg(long)]
    descriptors: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble source into an SFVM binary.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a filter as assembly.
    Disasm { input: PathBuf },
    /// Run the verifier; exit 1 if any program is rejected.
    Verify {
        program: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a trace once and print its decision log.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "filter")]
        filters: Vec<PathBuf>,
        /// `trace`, `seed:<n>` or `tids:<t1>,<t2>,...`
        #[arg(long, default_value = "trace")]
        schedule: String,
        /// Syscall pair to watch for overlap, e.g. `mremap,ftruncate`.
        #[arg(long)]
        watch: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Enumerate every interleaving of a trace's workload.
    Explore {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "filter")]
        filters: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
        #[arg(long)]
        watch: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Run bundled or on-disk attack scenarios; exit 1 if any fails.
    Scenario {
        name: Option<String>,
        #[arg(long, conflicts_with = "name")]
        all: bool,
        /// Scenario directory to use instead of the bundled set.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        list: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tabular reports.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum ReportKind {
    /// Union size and initialization-phase reduction per application.
    AttackSurface {
        /// Profile file; the bundled six-application file when omitted.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Usage problems: bad files, bad flags, refused bounds.
#[derive(Debug)]
struct Usage(anyhow::Error);

/// The command ran but the policy or scenario did not hold.
#[derive(Debug)]
struct Failed(String);

enum Exit {
    Ok,
    Failed(Failed),
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Usage> {
    r.map_err(Usage)
}

fn engine_config(args: &EngineArgs) -> Result<Engine> {
    let mut cfg = base_config();
    cfg.snapshot_mode = match args.snapshot_mode {
        Snap::Copy => SnapshotMode::Copy,
        Snap::WriteProtect => SnapshotMode::WriteProtect,
    };
    let mut engine = Engine::new(cfg);
    if let Some(p) = &args.descriptors {
        engine.set_descriptors(load_descriptors(p)?);
    }
    Ok(engine)
}

fn base_config() -> EngineConfig {
    EngineConfig {
        privileged_only: std::env::var("SFVM_PRIVILEGED_ONLY").is_ok_and(|v| v == "1"),
        ..EngineConfig::default()
    }
}

fn load_filters(paths: &[PathBuf]) -> Result<BTreeMap<String, ProgramBundle>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let (name, b) = load_filter(p)?;
        if out.insert(name.clone(), b).is_some() {
            bail!("two filters named `{name}`");
        }
    }
    Ok(out)
}

fn parse_schedule(s: &str) -> Result<ScheduleMode> {
    if s == "trace" {
        return Ok(ScheduleMode::TraceOrder);
    }
    if let Some(seed) = s.strip_prefix("seed:") {
        return Ok(ScheduleMode::Seeded {
            seed: seed.parse().with_context(|| format!("bad seed `{seed}`"))?,
        });
    }
    if let Some(list) = s.strip_prefix("tids:") {
        let tids = list
            .split(',')
            .map(|t| t.trim().parse().map(Tid).with_context(|| format!("bad tid `{t}`")))
            .collect::<Result<_>>()?;
        return Ok(ScheduleMode::Explicit { tids });
    }
    bail!("schedule must be `trace`, `seed:<n>` or `tids:<list>`, got `{s}`")
}

fn parse_watch(list: &[String]) -> Result<Vec<(i32, i32)>> {
    let one = |s: &str| -> Result<i32> {
        let s = s.trim();
        let n = match s.parse::<i32>() {
            Ok(n) => Nr::Num(n),
            Err(_) => Nr::Name(s.to_string()),
        };
        sfvm::filter::nr(&n)
    };
    list.iter()
        .map(|w| {
            let (a, b) = w.split_once(',').ok_or_else(|| anyhow!("watch needs `a,b`, got `{w}`"))?;
            Ok((one(a)?, one(b)?))
        })
        .collect()
}

fn write_report(path: &Option<PathBuf>, report: &Report) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_asm(input: &Path, output: &Path) -> std::result::Result<Exit, Usage> {
    let text = usage(std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display())))?;
    let bundle = usage(assemble_bundle(&text).map_err(|e| anyhow!("{}: {e}", input.display())))?;
    usage(std::fs::write(output, encode_bundle(&bundle)).with_context(|| format!("writing {}", output.display())))?;
    let n: usize = bundle.programs.iter().map(|p| p.instructions.len()).sum();
    println!("{}: {} program(s), {n} instructions", output.display(), bundle.programs.len());
    Ok(Exit::Ok)
}

fn cmd_disasm(input: &Path) -> std::result::Result<Exit, Usage> {
    let (_, bundle) = usage(load_filter(input))?;
    print!("{}", disassemble_bundle(&bundle));
    Ok(Exit::Ok)
}

fn cmd_verify(program: &Path, json: bool) -> std::result::Result<Exit, Usage> {
    let bytes = usage(std::fs::read(program).with_context(|| format!("reading {}", program.display())))?;
    let is_json = program.extension().is_some_and(|e| e == "json");
    // a generator spec is verified as part of building it
    let mut bundle = if is_json {
        let text = usage(String::from_utf8(bytes).context("spec is not UTF-8"))?;
        let spec: sfvm::filter::FilterSpec = usage(serde_json::from_str(&text).context("malformed generator spec"))?;
        match spec.build() {
            Ok(b) => b,
            Err(e) => {
                println!("rejected: {e:#}");
                return Ok(Exit::Failed(Failed(format!("{}: rejected", program.display()))));
            }
        }
    } else {
        usage(parse_filter(&bytes, false).with_context(|| display(program)))?
    };
    let cfg = VerifierConfig::default();
    let mut reports = Vec::new();
    for p in bundle.programs.iter_mut() {
        reports.push((p.name.clone(), verify(p, &cfg)));
    }
    if json {
        let out: BTreeMap<&str, _> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        println!("{}", serde_json::to_string_pretty(&out).expect("reports serialize"));
    } else {
        for (name, r) in &reports {
            if r.accepted {
                println!("{name}: accepted ({} abstract steps)", r.steps);
            } else {
                match r.offending_instruction {
                    Some(i) => println!("{name}: rejected at instruction {i}: {}", r.reason),
                    None => println!("{name}: rejected: {}", r.reason),
                }
            }
        }
    }
    if reports.iter().all(|(_, r)| r.accepted) {
        Ok(Exit::Ok)
    } else {
        Ok(Exit::Failed(Failed(format!("{}: rejected", program.display()))))
    }
}

fn sim_usage(e: SimError) -> Usage {
    Usage(anyhow!(e))
}

fn cmd_run(
    trace: &Path,
    filters: &[PathBuf],
    schedule: &str,
    watch: &[String],
    report: &Option<PathBuf>,
    engine: &EngineArgs,
) -> std::result::Result<Exit, Usage> {
    let events = usage(load_trace(trace).map_err(anyhow::Error::from))?;
    let bundles = usage(load_filters(filters))?;
    let mode = usage(parse_schedule(schedule))?;
    let watch = usage(parse_watch(watch))?;
    let mut sim = sfvm_core::sim::Simulator::new(usage(engine_config(engine))?, bundles.clone());
    for (a, b) in watch {
        sim.watch_pair(a, b);
    }
    sim.enqueue(&events);
    sim.run(&mode).map_err(sim_usage)?;
    let log = sim.log;
    println!("{}", serde_json::to_string_pretty(&log).expect("log serializes"));
    let metrics = RunMetrics::of(&log);
    let deadlocked = metrics.deadlocks > 0;
    let r = Report {
        runs: vec![RunReport {
            trace: display(trace),
            filters: bundles.keys().cloned().collect(),
            schedule: mode,
            metrics,
            log,
        }],
        ..Report::default()
    };
    usage(write_report(report, &r))?;
    if deadlocked {
        return Ok(Exit::Failed(Failed("run ended in deadlock".into())));
    }
    Ok(Exit::Ok)
}

fn cmd_explore(
    trace: &Path,
    filters: &[PathBuf],
    max_steps: usize,
    watch: &[String],
    report: &Option<PathBuf>,
    engine: &EngineArgs,
) -> std::result::Result<Exit, Usage> {
    if max_steps > DEFAULT_MAX_STEPS {
        return Err(Usage(anyhow!(
            "refusing --max-steps {max_steps}: exhaustive exploration is bounded at {DEFAULT_MAX_STEPS} steps"
        )));
    }
    let events = usage(load_trace(trace).map_err(anyhow::Error::from))?;
    let bundles = usage(load_filters(filters))?;
    let watch = usage(parse_watch(watch))?;
    let x = sim::explore(&events, usage(engine_config(engine))?, bundles.clone(), &watch, max_steps)
        .map_err(sim_usage)?;
    let er = ExploreReport::of(display(trace), bundles.keys().cloned().collect(), max_steps, &x);
    println!("{}", serde_json::to_string_pretty(&er).expect("report serializes"));
    let r = Report {
        explorations: vec![er],
        ..Report::default()
    };
    usage(write_report(report, &r))?;
    Ok(Exit::Ok)
}

fn cmd_scenario(
    name: &Option<String>,
    all: bool,
    dir: &Option<PathBuf>,
    list: bool,
    report: &Option<PathBuf>,
) -> std::result::Result<Exit, Usage> {
    let names: Vec<String> = match dir {
        Some(d) => {
            let mut v = Vec::new();
            for e in usage(std::fs::read_dir(d).with_context(|| format!("reading {}", d.display())))? {
                let p = usage(e.map_err(anyhow::Error::from))?.path();
                if p.extension().is_some_and(|x| x == "json") {
                    v.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
                }
            }
            v.sort();
            v
        }
        None => BUNDLED_SCENARIOS.iter().map(|(n, _, _)| n.to_string()).collect(),
    };
    if list {
        for n in &names {
            println!("{n}");
        }
        return Ok(Exit::Ok);
    }
    let selected: Vec<String> = match (name, all) {
        (_, true) => names,
        (Some(n), false) => vec![n.clone()],
        (None, false) => return Err(Usage(anyhow!("give a scenario name, --all or --list"))),
    };
    let cfg = base_config();
    let mut r = Report::default();
    for n in &selected {
        let s = usage(match dir {
            Some(d) => Scenario::from_file(&d.join(format!("{n}.json"))),
            None => Scenario::bundled(n),
        })?;
        let (result, _) = usage(s.run(&cfg).with_context(|| format!("scenario {n}")))?;
        println!("{} {:<16} {}", if result.passed { "PASS" } else { "FAIL" }, result.name, result.pattern);
        for c in result.checks.iter().chain(&result.control) {
            println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.check, c.detail);
        }
        r.scenarios.push(result);
    }
    usage(write_report(report, &r))?;
    let failed: Vec<&str> = r.scenarios.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    if failed.is_empty() {
        Ok(Exit::Ok)
    } else {
        Ok(Exit::Failed(Failed(format!("failed: {}", failed.join(", ")))))
    }
}

fn cmd_attack_surface(profiles: &Option<PathBuf>, json: bool, report: &Option<PathBuf>) -> std::result::Result<Exit, Usage> {
    let p = usage(match profiles {
        Some(path) => load_profiles(path),
        None => parse_profiles(BUNDLED_PROFILES),
    })?;
    let table = attack_surface(&p);
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    let r = Report {
        attack_surface: Some(table.clone()),
        ..Report::default()
    };
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", table.render());
    }
    usage(write_report(report, &r))?;
    Ok(Exit::Ok)
}

fn dispatch(cli: Cli) -> std::result::Result<Exit, Usage> {
    match &cli.cmd {
        Cmd::Asm { input, output } => cmd_asm(input, output),
        Cmd::Disasm { input } => cmd_disasm(input),
        Cmd::Verify { program, json } => cmd_verify(program, *json),
        Cmd::Run {
            trace,
            filters,
            schedule,
            watch,
            report,
            engine,
        } => cmd_run(trace, filters, schedule, watch, report, engine),
        Cmd::Explore {
            trace,
            filters,
            max_steps,
            watch,
            report,
            engine,
        } => cmd_explore(trace, filters, *max_steps, watch, report, engine),
        Cmd::Scenario {
            name,
            all,
            dir,
            list,
            report,
        } => cmd_scenario(name, *all, dir, *list, report),
        Cmd::Report {
            kind: ReportKind::AttackSurface { profiles, json, report },
        } => cmd_attack_surface(profiles, *json, report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Exit::Ok) => ExitCode::SUCCESS,
        Ok(Exit::Failed(Failed(msg))) => {
            eprintln!("sfvm: {msg}");
            ExitCode::from(1)
        }
        Err(Usage(e)) => {
            eprintln!("sfvm: {e:#}");
            ExitCode::from(2)
        }
    }
}
