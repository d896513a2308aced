//! Machine-readable run reports. Field names are part of the interface;
//! `schemas/report.schema.json` describes them.

use serde::{Deserialize, Serialize};
use sfvm_core::sim::{DecisionLog, Exploration, ScheduleMode};

use crate::profile::SurfaceTable;
use crate::scenario::ScenarioResult;

pub const FORMAT: &str = "sfvm-report";
pub const VERSION: u32 = 1;

/// The report schema shipped in `schemas/`.
pub const SCHEMA: &str = include_str!("../schemas/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub runs: Vec<RunReport>,
    pub explorations: Vec<ExploreReport>,
    pub attack_surface: Option<SurfaceTable>,
    pub scenarios: Vec<ScenarioResult>,
}

impl Default for Report {
    fn default() -> Self {
        Report {
            format: FORMAT.into(),
            version: VERSION,
            runs: Vec::new(),
            explorations: Vec::new(),
            attack_surface: None,
            scenarios: Vec::new(),
        }
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub decisions: usize,
    pub allowed: usize,
    pub denied: usize,
    pub steps_total: u64,
    pub stalls: u32,
    pub deadlocks: usize,
    pub overlaps: usize,
    pub errors: usize,
    pub dropped_events: u32,
}

impl RunMetrics {
    pub fn of(log: &DecisionLog) -> Self {
        let allowed = log.decisions().filter(|d| d.action.kind.executes_syscall()).count();
        let decisions = log.decisions().count();
        RunMetrics {
            decisions,
            allowed,
            denied: decisions - allowed,
            steps_total: log.total_steps(),
            stalls: log.stalls,
            deadlocks: log.deadlocks.len(),
            overlaps: log.overlaps.len(),
            errors: log.errors().count(),
            dropped_events: log.dropped_events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub trace: String,
    pub filters: Vec<String>,
    pub schedule: ScheduleMode,
    pub metrics: RunMetrics,
    pub log: DecisionLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub trace: String,
    pub filters: Vec<String>,
    pub max_steps: usize,
    pub setup_events: usize,
    pub concurrent_steps: usize,
    pub schedules: usize,
    pub distinct_logs: usize,
    pub overlapping: usize,
    pub deadlocked: usize,
}

impl ExploreReport {
    pub fn of(trace: String, filters: Vec<String>, max_steps: usize, x: &Exploration) -> Self {
        let digests: std::collections::BTreeSet<u64> = x.schedules.iter().map(|s| s.digest).collect();
        ExploreReport {
            trace,
            filters,
            max_steps,
            setup_events: x.setup_events,
            concurrent_steps: x.concurrent_steps,
            schedules: x.schedules.len(),
            distinct_logs: digests.len(),
            overlapping: x.overlapping(),
            deadlocked: x.deadlocked(),
        }
    }
}
