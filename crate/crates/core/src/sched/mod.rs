//! Schedulability analysis for periodic task sets.
//!
//! Utilization-based tests (rate-monotonic least upper bound, the EDF
//! necessary-and-sufficient bound, and the blocking-aware rate-monotonic
//! bound under priority inheritance), iterative response-time analysis,
//! and a discrete-event single-processor scheduling simulator that serves
//! as an independent oracle for all of them.
//!
//! Time is integer microseconds throughout and utilization sums are exact
//! rationals, so boundary cases (a task set at exactly U = 1) classify
//! correctly instead of depending on floating-point luck.

pub mod sim;
pub mod taskfile;

use crate::time::Micros;
use num::rational::BigRational;
use num::{BigInt, FromPrimitive, ToPrimitive, Zero};

/// One periodic task: execution time `C`, period `T`, relative deadline
/// `D` (defaults to the period), worst-case blocking `B`, and the critical
/// sections it executes on shared resources.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub exec_us: Micros,
    pub period_us: Micros,
    pub deadline_us: Micros,
    pub blocking_us: Micros,
    pub critical_sections: Vec<CriticalSection>,
}

/// A critical section within a job, expressed in execution progress:
/// the job holds `resource` from progress `offset_us` for `len_us`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSection {
    pub offset_us: Micros,
    pub len_us: Micros,
    pub resource: String,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, exec_us: Micros, period_us: Micros) -> Self {
        TaskSpec {
            name: name.into(),
            exec_us,
            period_us,
            deadline_us: period_us,
            blocking_us: 0,
            critical_sections: Vec::new(),
        }
    }

    pub fn with_deadline(mut self, deadline_us: Micros) -> Self {
        self.deadline_us = deadline_us;
        self
    }

    pub fn with_blocking(mut self, blocking_us: Micros) -> Self {
        self.blocking_us = blocking_us;
        self
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.exec_us == 0 || self.exec_us > self.deadline_us || self.deadline_us > self.period_us
        {
            return Err(AnalysisError::InvalidTask {
                task: self.name.clone(),
                reason: format!(
                    "require 0 < C <= D <= T, got C={} D={} T={}",
                    self.exec_us, self.deadline_us, self.period_us
                ),
            });
        }
        let mut sections: Vec<_> = self.critical_sections.clone();
        sections.sort_by_key(|s| s.offset_us);
        let mut prev_end = 0;
        for s in &sections {
            if s.len_us == 0 || s.offset_us + s.len_us > self.exec_us {
                return Err(AnalysisError::InvalidTask {
                    task: self.name.clone(),
                    reason: format!(
                        "critical section [{}, {}) lies outside [0, C={})",
                        s.offset_us,
                        s.offset_us + s.len_us,
                        self.exec_us
                    ),
                });
            }
            if s.offset_us < prev_end {
                // Overlapping sections would nest locks; priority
                // inheritance alone cannot prevent the resulting deadlock.
                return Err(AnalysisError::InvalidTask {
                    task: self.name.clone(),
                    reason: "critical sections overlap (nesting is not supported)".into(),
                });
            }
            prev_end = s.offset_us + s.len_us;
        }
        Ok(())
    }
}

/// A periodic task set kept in rate-monotonic order (ascending period,
/// ties broken by insertion order). Index 0 is the highest priority.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(mut tasks: Vec<TaskSpec>) -> Result<Self, AnalysisError> {
        if tasks.is_empty() {
            return Err(AnalysisError::EmptyTaskSet);
        }
        let mut names = std::collections::HashSet::new();
        for t in &tasks {
            t.validate()?;
            if !names.insert(t.name.clone()) {
                return Err(AnalysisError::InvalidTask {
                    task: t.name.clone(),
                    reason: "duplicate task name".into(),
                });
            }
        }
        tasks.sort_by_key(|t| t.period_us);
        Ok(TaskSet { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn require_implicit_deadlines(&self, analysis: &'static str) -> Result<(), AnalysisError> {
        for t in &self.tasks {
            if t.deadline_us != t.period_us {
                return Err(AnalysisError::AssumptionViolated {
                    analysis,
                    reason: format!("task {} has D != T", t.name),
                });
            }
        }
        Ok(())
    }

    /// Least common multiple of the periods, if it fits in the time type.
    pub fn hyperperiod_us(&self) -> Result<Micros, AnalysisError> {
        let mut acc: u128 = 1;
        for t in &self.tasks {
            let g = gcd(acc, t.period_us as u128);
            acc = acc / g * t.period_us as u128;
            if acc > u64::MAX as u128 {
                return Err(AnalysisError::HyperperiodOverflow);
            }
        }
        Ok(acc as u64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("task set must be non-empty")]
    EmptyTaskSet,
    #[error("invalid task {task}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("{analysis} assumption violated: {reason}")]
    AssumptionViolated { analysis: &'static str, reason: String },
    #[error("hyperperiod does not fit the 64-bit time base")]
    HyperperiodOverflow,
    #[error("n must be at least 1")]
    ZeroTasks,
}

/// Exact processor utilization factor, U = sum of C_i / T_i.
pub fn utilization_exact(ts: &TaskSet) -> BigRational {
    let mut u = BigRational::zero();
    for t in ts.tasks() {
        u += BigRational::new(
            BigInt::from_u64(t.exec_us).unwrap(),
            BigInt::from_u64(t.period_us).unwrap(),
        );
    }
    u
}

/// Processor utilization factor reported as a float.
pub fn utilization(ts: &TaskSet) -> f64 {
    utilization_exact(ts).to_f64().unwrap_or(f64::NAN)
}

/// Least upper utilization bound of rate-monotonic scheduling for `n`
/// tasks: `n (2^(1/n) - 1)`. Decreases toward `ln 2` as `n` grows.
pub fn rm_lub(n: usize) -> Result<f64, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::ZeroTasks);
    }
    let n = n as f64;
    // exp_m1 keeps precision for large n where 2^(1/n) is barely above 1.
    Ok(n * f64::exp_m1(std::f64::consts::LN_2 / n))
}

/// Verdict of a sufficient-only schedulability test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Utilization is at or below the bound; the set is schedulable.
    Guaranteed,
    /// Above the bound: the test says nothing either way.
    Inconclusive,
}

/// Rate-monotonic utilization test against the least upper bound.
///
/// Sufficient only: `Guaranteed` means schedulable, `Inconclusive` means
/// the bound cannot tell (never "unschedulable"). The boundary U equal to
/// the bound counts as guaranteed. Requires implicit deadlines (D = T).
pub fn rm_schedulable_lub(ts: &TaskSet) -> Result<Verdict, AnalysisError> {
    ts.require_implicit_deadlines("rate-monotonic utilization bound")?;
    let u = utilization(ts);
    let bound = rm_lub(ts.len())?;
    Ok(if u <= bound { Verdict::Guaranteed } else { Verdict::Inconclusive })
}

/// EDF schedulability for implicit-deadline periodic tasks: exactly
/// U <= 1, evaluated in exact arithmetic so the boundary is included.
pub fn edf_schedulable(ts: &TaskSet) -> Result<bool, AnalysisError> {
    ts.require_implicit_deadlines("EDF utilization bound")?;
    Ok(utilization_exact(ts) <= BigRational::from_integer(BigInt::from(1)))
}

/// Rate-monotonic bound extended for blocking under priority inheritance:
/// for every i, sum_{k<=i} C_k/T_k + B_i/T_i <= i (2^(1/i) - 1).
pub fn rm_pip_schedulable(ts: &TaskSet) -> Result<Verdict, AnalysisError> {
    ts.require_implicit_deadlines("rate-monotonic PIP bound")?;
    let mut prefix = 0.0f64;
    for (i, t) in ts.tasks().iter().enumerate() {
        prefix += t.exec_us as f64 / t.period_us as f64;
        let demand = prefix + t.blocking_us as f64 / t.period_us as f64;
        if demand > rm_lub(i + 1)? {
            return Ok(Verdict::Inconclusive);
        }
    }
    Ok(Verdict::Guaranteed)
}

/// Result of response-time analysis for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseTime {
    /// Fixed point of the recurrence, at or below the deadline.
    Converged(Micros),
    /// The iteration exceeded the deadline; the task is unschedulable
    /// under this priority assignment.
    Divergent,
}

/// Iterative response-time analysis for fixed-priority (rate-monotonic
/// order) scheduling with constrained deadlines (D <= T).
///
/// For each task i: R = C_i + B_i + sum_{j higher} ceil(R / T_j) * C_j,
/// iterated from R = C_i until it stabilizes or exceeds D_i.
pub fn response_time_analysis(ts: &TaskSet) -> Vec<ResponseTime> {
    let tasks = ts.tasks();
    let mut out = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let mut r = t.exec_us;
        let result = loop {
            let mut next = t.exec_us + t.blocking_us;
            for hp in &tasks[..i] {
                next += r.div_ceil(hp.period_us) * hp.exec_us;
            }
            if next > t.deadline_us {
                break ResponseTime::Divergent;
            }
            if next == r {
                break ResponseTime::Converged(r);
            }
            r = next;
        };
        out.push(result);
    }
    out
}
