//! Discrete-event single-processor scheduling simulator.
//!
//! Serves as the independent oracle for the analytical tests in the parent
//! module: exact preemptive fixed-priority or EDF execution of a job set,
//! with single-level critical sections and optional priority inheritance.
//! Time is integer microseconds and the simulation is fully deterministic.

use super::{AnalysisError, CriticalSection, TaskSet};
use crate::time::Micros;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Fixed priorities in rate-monotonic order (task index 0 highest).
    FixedPriorityRm,
    /// Dynamic priority by absolute deadline, earliest first.
    Edf,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub pip: bool,
    pub horizon_us: Micros,
    /// Record run/blocked/preempted intervals. Off for long oracle runs
    /// where only misses and response times matter.
    pub record_intervals: bool,
    /// Stop as soon as the first deadline miss is recorded.
    pub stop_at_first_miss: bool,
}

impl SimOptions {
    pub fn over(horizon_us: Micros) -> Self {
        SimOptions { pip: false, horizon_us, record_intervals: false, stop_at_first_miss: false }
    }

    pub fn with_pip(mut self, pip: bool) -> Self {
        self.pip = pip;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_intervals = true;
        self
    }

    pub fn stopping_at_first_miss(mut self) -> Self {
        self.stop_at_first_miss = true;
        self
    }
}

/// One job to simulate. `deadline_us` is absolute; `None` means no
/// deadline (under EDF such jobs run after every deadlined job).
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub task: usize,
    pub job: u64,
    pub release_us: Micros,
    pub exec_us: Micros,
    pub deadline_us: Option<Micros>,
    pub sections: Vec<CriticalSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Run,
    Blocked,
    Preempted,
}

impl RunState {
    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Run => "run",
            RunState::Blocked => "blocked",
            RunState::Preempted => "preempted",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceInterval {
    pub task: usize,
    pub job: u64,
    pub start_us: Micros,
    pub end_us: Micros,
    pub state: RunState,
}

#[derive(Debug, Clone, Copy)]
pub struct DeadlineMiss {
    pub task: usize,
    pub job: u64,
    pub deadline_us: Micros,
    /// Completion time if the job finished late, `None` if still
    /// unfinished at the horizon.
    pub completion_us: Option<Micros>,
}

#[derive(Debug, Clone, Copy)]
pub struct JobStats {
    pub task: usize,
    pub job: u64,
    pub release_us: Micros,
    pub start_us: Option<Micros>,
    pub finish_us: Option<Micros>,
    pub blocked_us: Micros,
}

impl JobStats {
    pub fn response_us(&self) -> Option<Micros> {
        self.finish_us.map(|f| f - self.release_us)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScheduleTrace {
    pub intervals: Vec<TraceInterval>,
    pub misses: Vec<DeadlineMiss>,
    pub jobs: Vec<JobStats>,
}

impl ScheduleTrace {
    /// Worst observed response time of a task over finished jobs.
    pub fn worst_response_us(&self, task: usize) -> Option<Micros> {
        self.jobs
            .iter()
            .filter(|j| j.task == task)
            .filter_map(JobStats::response_us)
            .max()
    }

    /// Worst per-job blocking duration of a task.
    pub fn worst_blocking_us(&self, task: usize) -> Micros {
        self.jobs.iter().filter(|j| j.task == task).map(|j| j.blocked_us).max().unwrap_or(0)
    }
}

// Lexicographic priority key; smaller is more urgent.
type Key = (Micros, usize, u64);

struct Active {
    spec: JobSpec,
    idx: usize,
    progress: Micros,
    started: Option<Micros>,
    finished: Option<Micros>,
    blocked_on: Option<usize>, // resource id
    blocked_since: Micros,
    blocked_total: Micros,
    holding: Option<(usize, Micros)>, // (resource id, section end progress)
}

impl Active {
    fn base_key(&self, policy: Policy) -> Key {
        match policy {
            Policy::FixedPriorityRm => (self.spec.task as Micros, self.spec.task, self.spec.job),
            Policy::Edf => (
                self.spec.deadline_us.unwrap_or(Micros::MAX),
                self.spec.task,
                self.spec.job,
            ),
        }
    }

    fn done(&self) -> bool {
        self.finished.is_some()
    }
}

fn validate_sections(exec_us: Micros, sections: &[CriticalSection]) -> Result<Vec<CriticalSection>, AnalysisError> {
    let mut s: Vec<_> = sections.to_vec();
    s.sort_by_key(|c| c.offset_us);
    let mut prev_end = 0;
    for c in &s {
        if c.len_us == 0 || c.offset_us + c.len_us > exec_us || c.offset_us < prev_end {
            return Err(AnalysisError::InvalidTask {
                task: "job".into(),
                reason: "critical sections must be non-empty, non-overlapping, and within [0, C)".into(),
            });
        }
        prev_end = c.offset_us + c.len_us;
    }
    Ok(s)
}

/// Simulates an explicit job set. Jobs must be pre-sorted or not; releases
/// are handled in time order regardless.
pub fn simulate_jobs(
    jobs: Vec<JobSpec>,
    policy: Policy,
    opts: SimOptions,
) -> Result<ScheduleTrace, AnalysisError> {
    let mut pending: Vec<JobSpec> = jobs;
    for j in &mut pending {
        j.sections = validate_sections(j.exec_us, &j.sections)?;
    }
    pending.sort_by_key(|j| (j.release_us, j.task, j.job));

    let mut resources: HashMap<String, usize> = HashMap::new();
    let resource_id = |resources: &mut HashMap<String, usize>, name: &str| {
        let next = resources.len();
        *resources.entry(name.to_string()).or_insert(next)
    };

    let mut trace = ScheduleTrace::default();
    let mut active: Vec<Active> = Vec::new();
    let mut next_pending = 0usize;
    let mut holders: HashMap<usize, usize> = HashMap::new(); // resource -> active idx
    let mut now: Micros = 0;

    'outer: loop {
        // Admit releases due now.
        while next_pending < pending.len() && pending[next_pending].release_us <= now {
            let spec = pending[next_pending].clone();
            next_pending += 1;
            let idx = active.len();
            active.push(Active {
                spec,
                idx,
                progress: 0,
                started: None,
                finished: None,
                blocked_on: None,
                blocked_since: 0,
                blocked_total: 0,
                holding: None,
            });
        }

        // Effective priorities: with PIP a holder inherits the best key
        // among jobs blocked on its resource.
        let mut eff: Vec<Key> = active.iter().map(|a| a.base_key(policy)).collect();
        if opts.pip {
            for a in &active {
                if let (Some(res), false) = (a.blocked_on, a.done()) {
                    if let Some(&h) = holders.get(&res) {
                        if eff[a.idx] < eff[h] {
                            eff[h] = eff[a.idx];
                        }
                    }
                }
            }
        }

        // Runner: best effective key among ready jobs.
        let runner = active
            .iter()
            .filter(|a| !a.done() && a.blocked_on.is_none())
            .min_by_key(|a| eff[a.idx])
            .map(|a| a.idx);

        let next_release = pending.get(next_pending).map(|j| j.release_us);

        let Some(r) = runner else {
            // Idle: jump to the next release or finish.
            match next_release {
                Some(t) if t < opts.horizon_us => {
                    now = t;
                    continue;
                }
                _ => break,
            }
        };

        // Lock attempt or release exactly at the current progress point.
        {
            let a = &mut active[r];
            if let Some((res, end)) = a.holding {
                if a.progress >= end {
                    a.holding = None;
                    holders.remove(&res);
                    let t = now;
                    for w in active.iter_mut() {
                        if w.blocked_on == Some(res) {
                            w.blocked_on = None;
                            w.blocked_total += t - w.blocked_since;
                            if opts.record_intervals {
                                trace.intervals.push(TraceInterval {
                                    task: w.spec.task,
                                    job: w.spec.job,
                                    start_us: w.blocked_since,
                                    end_us: t,
                                    state: RunState::Blocked,
                                });
                            }
                        }
                    }
                    continue; // re-evaluate priorities after the release
                }
            } else if let Some(cs) = a
                .spec
                .sections
                .iter()
                .find(|c| c.offset_us == a.progress)
                .cloned()
            {
                let res = resource_id(&mut resources, &cs.resource);
                match holders.get(&res) {
                    None => {
                        holders.insert(res, r);
                        a.holding = Some((res, cs.offset_us + cs.len_us));
                    }
                    Some(_) => {
                        a.blocked_on = Some(res);
                        a.blocked_since = now;
                        continue; // someone else gets the processor
                    }
                }
            }
        }

        // How long may the runner execute before the next decision point?
        let a = &active[r];
        let mut milestone = a.spec.exec_us; // completion
        if let Some((_, end)) = a.holding {
            milestone = milestone.min(end);
        }
        for cs in &a.spec.sections {
            if cs.offset_us > a.progress {
                milestone = milestone.min(cs.offset_us);
                break;
            }
        }
        let mut dt = milestone - a.progress;
        if let Some(t) = next_release {
            if t > now {
                dt = dt.min(t - now);
            }
        }
        if now + dt > opts.horizon_us {
            dt = opts.horizon_us - now;
            if dt == 0 {
                break;
            }
        }

        if opts.record_intervals {
            trace.intervals.push(TraceInterval {
                task: a.spec.task,
                job: a.spec.job,
                start_us: now,
                end_us: now + dt,
                state: RunState::Run,
            });
            for o in &active {
                if o.idx != r && !o.done() && o.blocked_on.is_none() && o.progress > 0 {
                    trace.intervals.push(TraceInterval {
                        task: o.spec.task,
                        job: o.spec.job,
                        start_us: now,
                        end_us: now + dt,
                        state: RunState::Preempted,
                    });
                }
            }
        }

        let a = &mut active[r];
        if a.started.is_none() {
            a.started = Some(now);
        }
        a.progress += dt;
        now += dt;

        if a.progress == a.spec.exec_us {
            // Trailing critical section releases exactly at completion.
            if let Some((res, end)) = a.holding {
                if a.progress >= end {
                    a.holding = None;
                    holders.remove(&res);
                    let t = now;
                    for w in active.iter_mut() {
                        if w.blocked_on == Some(res) {
                            w.blocked_on = None;
                            w.blocked_total += t - w.blocked_since;
                        }
                    }
                }
            }
            let a = &mut active[r];
            a.finished = Some(now);
            if let Some(d) = a.spec.deadline_us {
                if now > d {
                    trace.misses.push(DeadlineMiss {
                        task: a.spec.task,
                        job: a.spec.job,
                        deadline_us: d,
                        completion_us: Some(now),
                    });
                    if opts.stop_at_first_miss {
                        break 'outer;
                    }
                }
            }
        }

        if now >= opts.horizon_us {
            break;
        }
    }

    // Unfinished jobs whose deadline fell within the horizon have missed.
    for a in &active {
        if !a.done() {
            if let Some(d) = a.spec.deadline_us {
                if d <= opts.horizon_us {
                    trace.misses.push(DeadlineMiss {
                        task: a.spec.task,
                        job: a.spec.job,
                        deadline_us: d,
                        completion_us: None,
                    });
                }
            }
        }
    }
    for a in active {
        trace.jobs.push(JobStats {
            task: a.spec.task,
            job: a.spec.job,
            release_us: a.spec.release_us,
            start_us: a.started,
            finish_us: a.finished,
            blocked_us: a.blocked_total,
        });
    }
    Ok(trace)
}

/// Simulates a periodic task set with synchronous release (all first jobs
/// at t = 0, the critical instant) up to `opts.horizon_us`.
pub fn simulate_schedule(
    ts: &TaskSet,
    policy: Policy,
    opts: SimOptions,
) -> Result<ScheduleTrace, AnalysisError> {
    let mut jobs = Vec::new();
    for (i, t) in ts.tasks().iter().enumerate() {
        let mut k = 0u64;
        loop {
            let release = k * t.period_us;
            if release >= opts.horizon_us {
                break;
            }
            jobs.push(JobSpec {
                task: i,
                job: k,
                release_us: release,
                exec_us: t.exec_us,
                deadline_us: Some(release + t.deadline_us),
                sections: t.critical_sections.clone(),
            });
            k += 1;
        }
    }
    simulate_jobs(jobs, policy, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::{response_time_analysis, ResponseTime, TaskSpec, TaskSet};
    use crate::time::ms_to_us;

    fn ms(v: f64) -> Micros {
        ms_to_us(v).unwrap()
    }

    fn cs(offset: f64, len: f64, r: &str) -> CriticalSection {
        CriticalSection { offset_us: ms(offset), len_us: ms(len), resource: r.into() }
    }

    /// The canonical three-job priority-inversion scenario: J1 (highest)
    /// needs the resource held by J3 (lowest) while J2 (middle) hogs the
    /// processor.
    fn inversion_jobs() -> Vec<JobSpec> {
        vec![
            JobSpec {
                task: 0,
                job: 0,
                release_us: ms(2.0),
                exec_us: ms(2.0),
                deadline_us: None,
                sections: vec![cs(0.0, 1.0, "R")],
            },
            JobSpec {
                task: 1,
                job: 0,
                release_us: ms(2.0),
                exec_us: ms(4.0),
                deadline_us: None,
                sections: vec![],
            },
            JobSpec {
                task: 2,
                job: 0,
                release_us: 0,
                exec_us: ms(4.0),
                deadline_us: None,
                sections: vec![cs(1.0, 2.0, "R")],
            },
        ]
    }

    #[test]
    fn priority_inversion_without_pip_blocks_for_five_ms() {
        let trace = simulate_jobs(
            inversion_jobs(),
            Policy::FixedPriorityRm,
            SimOptions::over(ms(20.0)).recording(),
        )
        .unwrap();
        assert_eq!(trace.worst_blocking_us(0), ms(5.0));
        // J1 finishes at t = 9: blocked 2..7, runs 7..9.
        let j1 = trace.jobs.iter().find(|j| j.task == 0).unwrap();
        assert_eq!(j1.finish_us, Some(ms(9.0)));
    }

    #[test]
    fn priority_inheritance_bounds_blocking_to_one_ms() {
        let trace = simulate_jobs(
            inversion_jobs(),
            Policy::FixedPriorityRm,
            SimOptions::over(ms(20.0)).with_pip(true).recording(),
        )
        .unwrap();
        assert_eq!(trace.worst_blocking_us(0), ms(1.0));
        let j1 = trace.jobs.iter().find(|j| j.task == 0).unwrap();
        assert_eq!(j1.finish_us, Some(ms(5.0)));
        // J2 now finishes after J1 and after J3's inherited section.
        let j2 = trace.jobs.iter().find(|j| j.task == 1).unwrap();
        assert_eq!(j2.finish_us, Some(ms(9.0)));
    }

    #[test]
    fn worst_responses_match_rta_over_hyperperiod() {
        let ts = TaskSet::new(vec![
            TaskSpec::new("a", ms(1.0), ms(4.0)),
            TaskSpec::new("b", ms(2.0), ms(6.0)),
        ])
        .unwrap();
        let horizon = ts.hyperperiod_us().unwrap();
        let trace =
            simulate_schedule(&ts, Policy::FixedPriorityRm, SimOptions::over(horizon)).unwrap();
        assert!(trace.misses.is_empty());
        let rta = response_time_analysis(&ts);
        for (i, r) in rta.iter().enumerate() {
            let ResponseTime::Converged(r) = r else { panic!("expected convergence") };
            assert_eq!(trace.worst_response_us(i), Some(*r));
        }
    }

    #[test]
    fn divergent_task_misses_in_simulation() {
        let ts = TaskSet::new(vec![
            TaskSpec::new("a", ms(2.0), ms(4.0)),
            TaskSpec::new("b", ms(3.0), ms(6.0)),
        ])
        .unwrap();
        let horizon = ts.hyperperiod_us().unwrap();
        let trace =
            simulate_schedule(&ts, Policy::FixedPriorityRm, SimOptions::over(horizon)).unwrap();
        assert!(trace.misses.iter().any(|m| m.task == 1));
    }

    #[test]
    fn edf_schedules_full_utilization() {
        let ts = TaskSet::new(vec![
            TaskSpec::new("a", ms(2.0), ms(4.0)),
            TaskSpec::new("b", ms(2.0), ms(4.0)),
        ])
        .unwrap();
        let horizon = ts.hyperperiod_us().unwrap();
        let trace = simulate_schedule(&ts, Policy::Edf, SimOptions::over(horizon)).unwrap();
        assert!(trace.misses.is_empty());
    }

    #[test]
    fn edf_over_unity_misses() {
        let ts = TaskSet::new(vec![
            TaskSpec::new("a", ms(3.0), ms(4.0)),
            TaskSpec::new("b", ms(2.0), ms(6.0)),
        ])
        .unwrap();
        let horizon = ts.hyperperiod_us().unwrap();
        let trace = simulate_schedule(&ts, Policy::Edf, SimOptions::over(horizon).stopping_at_first_miss())
            .unwrap();
        assert!(!trace.misses.is_empty());
    }

    #[test]
    fn job_without_deadline_runs_last_under_edf() {
        let jobs = vec![
            JobSpec { task: 0, job: 0, release_us: 0, exec_us: ms(1.0), deadline_us: None, sections: vec![] },
            JobSpec { task: 1, job: 0, release_us: 0, exec_us: ms(1.0), deadline_us: Some(ms(50.0)), sections: vec![] },
        ];
        let trace = simulate_jobs(jobs, Policy::Edf, SimOptions::over(ms(10.0))).unwrap();
        let no_deadline = trace.jobs.iter().find(|j| j.task == 0).unwrap();
        let deadlined = trace.jobs.iter().find(|j| j.task == 1).unwrap();
        assert!(no_deadline.finish_us.unwrap() > deadlined.finish_us.unwrap());
    }
}
