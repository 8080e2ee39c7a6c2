//! Task-set files and schedule-trace export.
//!
//! Task sets are plain TOML:
//!
//! ```toml
//! [[task]]
//! name = "control"
//! exec_ms = 14.5
//! period_ms = 80
//! # deadline_ms defaults to the period, blocking_ms to 0
//! # critical_sections = [{ offset_ms = 1, len_ms = 2, resource = "bus" }]
//! ```
//!
//! Schedule traces export as CSV with columns `task,job,start,end,state`
//! (times in decimal milliseconds).

use super::sim::ScheduleTrace;
use super::{AnalysisError, CriticalSection, TaskSet, TaskSpec};
use crate::time::{ms_to_us, us_to_ms_string};
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Deserialize)]
struct TaskFile {
    #[serde(default)]
    task: Vec<TaskEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    name: String,
    exec_ms: f64,
    period_ms: f64,
    deadline_ms: Option<f64>,
    #[serde(default)]
    blocking_ms: f64,
    #[serde(default)]
    critical_sections: Vec<SectionEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionEntry {
    offset_ms: f64,
    len_ms: f64,
    resource: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TaskFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("{path}: task {task}: {source}")]
    Time {
        path: String,
        task: String,
        #[source]
        source: crate::time::TimeError,
    },
    #[error("{path}: {source}")]
    Analysis {
        path: String,
        #[source]
        source: AnalysisError,
    },
}

/// Loads a task set from a TOML file. TOML errors carry line/column.
pub fn load_taskset(path: &Path) -> Result<TaskSet, TaskFileError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| TaskFileError::Io { path: display.clone(), source })?;
    parse_taskset(&text, &display)
}

pub fn parse_taskset(text: &str, origin: &str) -> Result<TaskSet, TaskFileError> {
    let file: TaskFile = toml::from_str(text)
        .map_err(|source| TaskFileError::Toml { path: origin.into(), source: Box::new(source) })?;
    let mut tasks = Vec::new();
    for entry in file.task {
        let to_us = |v: f64| {
            ms_to_us(v).map_err(|source| TaskFileError::Time {
                path: origin.into(),
                task: entry.name.clone(),
                source,
            })
        };
        let period_us = to_us(entry.period_ms)?;
        let mut t = TaskSpec::new(entry.name.clone(), to_us(entry.exec_ms)?, period_us);
        t.deadline_us = match entry.deadline_ms {
            Some(d) => to_us(d)?,
            None => period_us,
        };
        t.blocking_us = to_us(entry.blocking_ms)?;
        for s in &entry.critical_sections {
            t.critical_sections.push(CriticalSection {
                offset_us: to_us(s.offset_ms)?,
                len_us: to_us(s.len_ms)?,
                resource: s.resource.clone(),
            });
        }
        tasks.push(t);
    }
    TaskSet::new(tasks).map_err(|source| TaskFileError::Analysis { path: origin.into(), source })
}

/// Renders a schedule trace as `task,job,start,end,state` CSV, using task
/// names from the set and decimal-millisecond times.
pub fn trace_to_csv(ts: &TaskSet, trace: &ScheduleTrace) -> String {
    let mut out = String::from("task,job,start,end,state\n");
    for iv in &trace.intervals {
        let name = ts
            .tasks()
            .get(iv.task)
            .map(|t| t.name.as_str())
            .unwrap_or("?");
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            name,
            iv.job,
            us_to_ms_string(iv.start_us),
            us_to_ms_string(iv.end_us),
            iv.state.as_str()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::sim::{simulate_schedule, Policy, SimOptions};

    #[test]
    fn parses_and_defaults() {
        let text = r#"
[[task]]
name = "a"
exec_ms = 14.5
period_ms = 80

[[task]]
name = "b"
exec_ms = 42.4
period_ms = 200
blocking_ms = 1.5
"#;
        let ts = parse_taskset(text, "test").unwrap();
        assert_eq!(ts.tasks()[0].exec_us, 14_500);
        assert_eq!(ts.tasks()[0].deadline_us, 80_000);
        assert_eq!(ts.tasks()[1].blocking_us, 1_500);
    }

    #[test]
    fn toml_errors_carry_position() {
        let err = parse_taskset("[[task]]\nname = 3\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.toml"), "{msg}");
    }

    #[test]
    fn csv_export_shape() {
        let ts = parse_taskset(
            "[[task]]\nname = \"a\"\nexec_ms = 1\nperiod_ms = 4\n",
            "t",
        )
        .unwrap();
        let trace = simulate_schedule(
            &ts,
            Policy::FixedPriorityRm,
            SimOptions::over(8_000).recording(),
        )
        .unwrap();
        let csv = trace_to_csv(&ts, &trace);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("task,job,start,end,state"));
        assert_eq!(lines.next(), Some("a,0,0,1,run"));
    }
}
