//! Run metrics: per-task timing statistics (execution-time and period
//! mean/jitter, the columns of the scheduling-table experiment), control
//! activation accounting, and quadratic state cost.

use crate::time::{us_to_ms_f64, Micros};
use crate::trace::{DeliveryEventKind, TraceBundle};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub profile: String,
    pub nominal_period_ms: f64,
    pub activations: usize,
    pub exec_mean_ms: f64,
    /// Max deviation of a measured execution time from the mean.
    pub exec_jitter_ms: f64,
    pub period_mean_ms: f64,
    /// Max |measured period - nominal period|.
    pub period_jitter_ms: f64,
    pub misses: usize,
}

/// Statistics over the `Notify` deliveries of one periodic task. The
/// measured execution time is wall time from start to end, so preemption
/// by higher-priority dispatchers shows up here exactly as it does in a
/// stopwatch measurement.
///
/// A starved task needs care: when the run ends with an activation long
/// overdue (the gap since the last start exceeds the period), that
/// censored gap is itself a lower bound on the next period sample and is
/// folded into the jitter, so a task that stops running reads as
/// maximally late rather than as perfectly quiet.
pub fn task_metrics(
    trace: &TraceBundle,
    profile: &str,
    nominal_period_ms: f64,
    horizon_us: Micros,
) -> TaskMetrics {
    let mut starts: Vec<Micros> = Vec::new();
    let mut execs: Vec<f64> = Vec::new();
    let mut misses = 0;
    for r in &trace.delivery {
        if r.profile != profile || r.msg_type != "Notify" || r.tag.is_some() {
            continue;
        }
        match r.event {
            DeliveryEventKind::Deliver => {
                if let (Some(s), Some(e)) = (r.start_us, r.end_us) {
                    starts.push(s);
                    execs.push(us_to_ms_f64(e - s));
                }
            }
            DeliveryEventKind::DeadlineMiss => misses += 1,
            _ => {}
        }
    }
    starts.sort_unstable();
    let periods: Vec<f64> =
        starts.windows(2).map(|w| us_to_ms_f64(w[1] - w[0])).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let exec_mean_ms = mean(&execs);
    let period_mean_ms = mean(&periods);
    let mut period_jitter_ms = periods
        .iter()
        .map(|p| (p - nominal_period_ms).abs())
        .fold(0.0, f64::max);
    // Censored tail: the gap from the last start (or from the first
    // nominal release, if the task never started) to the horizon.
    let tail_from = starts.last().copied().unwrap_or_else(|| {
        crate::time::ms_to_us(nominal_period_ms).unwrap_or(0)
    });
    if horizon_us > tail_from {
        let gap_ms = us_to_ms_f64(horizon_us - tail_from);
        if gap_ms > nominal_period_ms {
            period_jitter_ms = period_jitter_ms.max(gap_ms - nominal_period_ms);
        }
    }
    TaskMetrics {
        profile: profile.to_string(),
        nominal_period_ms,
        activations: starts.len(),
        exec_mean_ms,
        exec_jitter_ms: execs
            .iter()
            .map(|e| (e - exec_mean_ms).abs())
            .fold(0.0, f64::max),
        period_mean_ms,
        period_jitter_ms,
        misses,
    }
}

/// Table of (mean, jitter) x (execution time, period) per task.
pub fn metrics_table(rows: &[TaskMetrics]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>12} {:>12} {:>8} {:>8}",
        "task", "exec_mean", "exec_jitter", "period_mean", "period_jitter", "acts", "misses"
    );
    for m in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>8} {:>8}",
            m.profile,
            m.exec_mean_ms,
            m.exec_jitter_ms,
            m.period_mean_ms,
            m.period_jitter_ms,
            m.activations,
            m.misses
        );
    }
    out
}

/// Integral of `x'x * h` over plant samples within a window.
pub fn quadratic_cost(trace: &TraceBundle, from_us: Micros, to_us: Micros, h_s: f64) -> f64 {
    trace
        .plant
        .iter()
        .filter(|r| r.t_us >= from_us && r.t_us < to_us)
        .map(|r| r.state.iter().map(|x| x * x).sum::<f64>() * h_s)
        .sum()
}

/// Cost per second over a window.
pub fn cost_rate(trace: &TraceBundle, from_us: Micros, to_us: Micros, h_s: f64) -> f64 {
    if to_us <= from_us {
        return 0.0;
    }
    quadratic_cost(trace, from_us, to_us, h_s) / ((to_us - from_us) as f64 / 1e6)
}

/// Largest infinity-norm the plant reached.
pub fn peak_state_norm(trace: &TraceBundle) -> f64 {
    trace
        .plant
        .iter()
        .map(|r| r.state.iter().map(|x| x.abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// First divergence fault, if the plant left its bound.
pub fn divergence_at(trace: &TraceBundle) -> Option<Micros> {
    trace
        .faults
        .iter()
        .find(|f| f.source.starts_with("plant:") && f.detail.contains("divergence bound"))
        .map(|f| f.at_us)
}

/// Control activations seen, as (activation, estimated) pairs in
/// processing order.
pub fn control_activations(trace: &TraceBundle) -> Vec<(u64, bool)> {
    trace.control.iter().map(|c| (c.activation, c.estimated)).collect()
}

/// Checks that activations `1..=n` were each processed exactly once;
/// returns the missing and duplicated indices.
pub fn activation_audit(trace: &TraceBundle, upto: u64) -> (Vec<u64>, Vec<u64>) {
    let mut counts = std::collections::BTreeMap::new();
    for c in &trace.control {
        *counts.entry(c.activation).or_insert(0u32) += 1;
    }
    let missing: Vec<u64> = (1..=upto).filter(|k| !counts.contains_key(k)).collect();
    let duplicated: Vec<u64> =
        counts.iter().filter(|(_, &n)| n > 1).map(|(&k, _)| k).collect();
    (missing, duplicated)
}

/// Per-sender exactly-once audit over the audit rows: duplicates are
/// (sender, seq) pairs seen more than once.
pub fn audit_duplicates(trace: &TraceBundle) -> Vec<(String, u64)> {
    let mut seen = std::collections::BTreeMap::new();
    for a in &trace.audit {
        *seen.entry((a.sender.clone(), a.seq)).or_insert(0u32) += 1;
    }
    seen.into_iter().filter(|(_, n)| *n > 1).map(|(k, _)| k).collect()
}
