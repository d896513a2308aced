//! Declarative attack scenarios: a trace, the filters it installs, how to
//! drive it, and predicates over the outcome.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sfvm_core::action::{ActionKind, ResolvedAction};
use sfvm_core::engine::{Engine, EngineConfig};
use sfvm_core::program::ProgramBundle;
use sfvm_core::sim::{self, DecisionLog, EventKind, Exploration, Nr, ScheduleMode, TraceEvent, DEFAULT_MAX_STEPS};
use sfvm_core::snapshot::SnapshotMode;
use sfvm_core::Tid;

use crate::filter::{nr, FilterSpec};
use crate::trace::parse_trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Vulnerability pattern, e.g. "repeated system calls".
    pub pattern: String,
    /// Trace file, relative to the scenario file.
    pub trace: String,
    pub filters: BTreeMap<String, FilterSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_mode: Option<SnapshotMode>,
    pub drive: Drive,
    pub expect: Vec<Predicate>,
    /// Re-run without some filters; its predicates must hold too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Control>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drive {
    /// One run under a schedule (trace order by default).
    Run {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<ScheduleMode>,
    },
    /// Every interleaving, watching the given syscall pairs for overlap.
    Explore {
        #[serde(default = "default_max_steps")]
        max_steps: usize,
        watch: Vec<(Nr, Nr)>,
    },
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control {
    /// Filters removed, together with the events that load or install them.
    pub drop_filters: Vec<String>,
    pub expect: Vec<Predicate>,
}

/// Expected verdict for one decided syscall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Log,
    Errno,
    Trap,
    KillThread,
    KillProcess,
    /// Anything that keeps the syscall from running.
    Denied,
}

impl Verdict {
    pub fn matches(self, a: ResolvedAction) -> bool {
        match self {
            Verdict::Allow => a.kind == ActionKind::Allow,
            Verdict::Log => a.kind == ActionKind::Log,
            Verdict::Errno => a.kind == ActionKind::Errno,
            Verdict::Trap => a.kind == ActionKind::Trap,
            Verdict::KillThread => a.kind == ActionKind::KillThread,
            Verdict::KillProcess => a.kind == ActionKind::KillProcess,
            Verdict::Denied => !a.kind.executes_syscall(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// The decisions for `nr` on `tid`, in order, are exactly `expect`.
    Verdicts { tid: Tid, nr: Nr, expect: Vec<Verdict> },
    /// Bounds on the number of explored schedules with an overlap.
    OverlappingSchedules {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<usize>,
    },
    NoDeadlock,
    NoErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Run(DecisionLog),
    Explore(Exploration),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

fn check_result(check: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        check: check.into(),
        passed,
        detail,
    }
}

impl Predicate {
    pub fn evaluate(&self, outcome: &Outcome) -> CheckResult {
        match (self, outcome) {
            (Predicate::Verdicts { tid, nr: n, expect }, Outcome::Run(log)) => {
                let Some(n) = n.resolve() else {
                    return check_result("verdicts", false, format!("unknown syscall {n:?}"));
                };
                let got: Vec<ResolvedAction> =
                    log.decisions().filter(|d| d.tid == *tid && d.nr == n).map(|d| d.action).collect();
                let ok = got.len() == expect.len() && expect.iter().zip(&got).all(|(v, a)| v.matches(*a));
                let shown: Vec<String> = got.iter().map(|a| format!("{:?}({:#x})", a.kind, a.raw)).collect();
                check_result(
                    "verdicts",
                    ok,
                    format!("task {tid} nr {n}: expected {expect:?}, got [{}]", shown.join(", ")),
                )
            }
            (Predicate::OverlappingSchedules { min, max }, Outcome::Explore(x)) => {
                let n = x.overlapping();
                let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
                check_result(
                    "overlapping_schedules",
                    ok,
                    format!("{n} of {} schedules overlap (min {min:?}, max {max:?})", x.schedules.len()),
                )
            }
            (Predicate::OverlappingSchedules { min, max }, Outcome::Run(log)) => {
                let n = usize::from(!log.overlaps.is_empty());
                let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
                check_result("overlapping_schedules", ok, format!("{} overlaps in the run", log.overlaps.len()))
            }
            (Predicate::NoDeadlock, Outcome::Run(log)) => {
                check_result("no_deadlock", log.deadlocks.is_empty(), format!("{} deadlocks", log.deadlocks.len()))
            }
            (Predicate::NoDeadlock, Outcome::Explore(x)) => check_result(
                "no_deadlock",
                x.deadlocked() == 0,
                format!("{} of {} schedules deadlock", x.deadlocked(), x.schedules.len()),
            ),
            (Predicate::NoErrors, Outcome::Run(log)) => {
                let errs: Vec<String> = log.errors().map(|e| format!("{e:?}")).collect();
                check_result("no_errors", errs.is_empty(), errs.join("; "))
            }
            (p, _) => check_result(
                "unsupported",
                false,
                format!("{p:?} cannot be checked in this drive mode"),
            ),
        }
    }
}

/// A scenario with its trace loaded and filters built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub events: Vec<TraceEvent>,
    pub filters: BTreeMap<String, ProgramBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub pattern: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub control: Vec<CheckResult>,
    pub decisions: usize,
    pub schedules: usize,
    pub overlapping: usize,
    pub deadlocked: usize,
}

impl Scenario {
    pub fn new(spec: ScenarioSpec, trace_text: &str) -> Result<Scenario> {
        let events = parse_trace(trace_text).with_context(|| format!("{}: trace {}", spec.name, spec.trace))?;
        let mut filters = BTreeMap::new();
        for (name, f) in &spec.filters {
            let b = f.build().with_context(|| format!("{}: filter {name}", spec.name))?;
            filters.insert(name.clone(), b);
        }
        Ok(Scenario { spec, events, filters })
    }

    pub fn from_file(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec: ScenarioSpec = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
        let trace_path = path.parent().unwrap_or(Path::new(".")).join(&spec.trace);
        let trace = std::fs::read_to_string(&trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
        Scenario::new(spec, &trace)
    }

    pub fn bundled(name: &str) -> Result<Scenario> {
        let (_, spec, trace) = BUNDLED
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| anyhow!("unknown scenario `{name}`"))?;
        let spec: ScenarioSpec = serde_json::from_str(spec).with_context(|| format!("bundled scenario {name}"))?;
        Scenario::new(spec, trace)
    }

    pub fn all_bundled() -> Result<Vec<Scenario>> {
        BUNDLED.iter().map(|(n, _, _)| Scenario::bundled(n)).collect()
    }

    pub fn engine_config(&self, base: &EngineConfig) -> EngineConfig {
        let mut cfg = *base;
        if let Some(m) = self.spec.snapshot_mode {
            cfg.snapshot_mode = m;
        }
        cfg
    }

    /// The trace and filters with `drop` removed.
    pub fn without(&self, drop: &[String]) -> (Vec<TraceEvent>, BTreeMap<String, ProgramBundle>) {
        let events = self
            .events
            .iter()
            .filter(|e| match &e.kind {
                EventKind::Load { filter } | EventKind::Install { filter, .. } => !drop.contains(filter),
                _ => true,
            })
            .cloned()
            .collect();
        let filters = self
            .filters
            .iter()
            .filter(|(n, _)| !drop.contains(n))
            .map(|(n, b)| (n.clone(), b.clone()))
            .collect();
        (events, filters)
    }

    fn drive(
        &self,
        events: &[TraceEvent],
        filters: BTreeMap<String, ProgramBundle>,
        cfg: &EngineConfig,
    ) -> Result<Outcome> {
        let engine = Engine::new(self.engine_config(cfg));
        match &self.spec.drive {
            Drive::Run { schedule } => {
                let mode = schedule.clone().unwrap_or(ScheduleMode::TraceOrder);
                Ok(Outcome::Run(sim::run(events, engine, filters, &mode)?))
            }
            Drive::Explore { max_steps, watch } => {
                if *max_steps > DEFAULT_MAX_STEPS {
                    bail!("max_steps {max_steps} exceeds the exploration bound of {DEFAULT_MAX_STEPS}");
                }
                let watch = watch
                    .iter()
                    .map(|(a, b)| Ok((nr(a)?, nr(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Outcome::Explore(sim::explore(events, engine, filters, &watch, *max_steps)?))
            }
        }
    }

    /// Drives the scenario and evaluates its predicates.
    pub fn run(&self, cfg: &EngineConfig) -> Result<(ScenarioResult, Outcome)> {
        let outcome = self.drive(&self.events, self.filters.clone(), cfg)?;
        let checks: Vec<CheckResult> = self.spec.expect.iter().map(|p| p.evaluate(&outcome)).collect();
        let control = match &self.spec.control {
            Some(c) => {
                let (events, filters) = self.without(&c.drop_filters);
                let o = self.drive(&events, filters, cfg)?;
                c.expect.iter().map(|p| p.evaluate(&o)).collect()
            }
            None => Vec::new(),
        };
        let (decisions, schedules, overlapping, deadlocked) = match &outcome {
            Outcome::Run(log) => (
                log.decisions().count(),
                1,
                usize::from(!log.overlaps.is_empty()),
                usize::from(!log.deadlocks.is_empty()),
            ),
            Outcome::Explore(x) => (0, x.schedules.len(), x.overlapping(), x.deadlocked()),
        };
        let passed = !checks.is_empty() && checks.iter().chain(&control).all(|c| c.passed);
        Ok((
            ScenarioResult {
                name: self.spec.name.clone(),
                pattern: self.spec.pattern.clone(),
                passed,
                checks,
                control,
                decisions,
                schedules,
                overlapping,
                deadlocked,
            },
            outcome,
        ))
    }
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$((
            $name,
            include_str!(concat!("../scenarios/", $name, ".json")),
            include_str!(concat!("../scenarios/", $name, ".jsonl")),
        )),*]
    };
}

/// Scenarios shipped in `scenarios/`: name, spec JSON, trace.
pub const BUNDLED: &[(&str, &str, &str)] = bundled!(
    "cve-2016-0728",
    "cve-2019-11487",
    "cve-2017-5123",
    "busybox-9071",
    "cve-2018-18281",
    "cve-2016-5195",
    "cve-2017-7533",
);
