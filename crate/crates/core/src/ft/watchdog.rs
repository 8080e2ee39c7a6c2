//! Interaction fault detection: a watchdog over request/response pairs.
//!
//! Crash and timing faults of a *peer* cannot be detected inside the
//! peer's own shell; they show up as interactions that never complete.
//! The watchdog tracks outstanding requests and raises exactly one timing
//! fault per request that outlives its deadline. A response arriving
//! after the fault was raised is recorded as late rather than undoing the
//! fault.

use super::{FaultEvent, FaultKind};
use indexmap::IndexMap;

/// One watched interaction pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct WatchdogSpec {
    pub request_type: String,
    pub response_type: String,
    pub deadline_ms: u64,
    /// Source label attached to raised fault events.
    pub source: String,
}

impl WatchdogSpec {
    pub fn new(
        request_type: impl Into<String>,
        response_type: impl Into<String>,
        deadline_ms: u64,
        source: impl Into<String>,
    ) -> Result<Self, WatchdogError> {
        if deadline_ms == 0 {
            return Err(WatchdogError::ZeroDeadline);
        }
        Ok(WatchdogSpec {
            request_type: request_type.into(),
            response_type: response_type.into(),
            deadline_ms,
            source: source.into(),
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WatchdogError {
    #[error("watchdog deadline must be positive")]
    ZeroDeadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseStatus {
    OnTime,
    /// The matching request had already been reported as a timing fault.
    Late,
    /// No matching outstanding request.
    Unmatched,
}

#[derive(Debug)]
pub struct Watchdog {
    spec: WatchdogSpec,
    pending: IndexMap<u64, u64>, // request id -> sent_at_ms
    reported: IndexMap<u64, u64>, // request id -> deadline it missed
}

impl Watchdog {
    pub fn new(spec: WatchdogSpec) -> Self {
        Watchdog { spec, pending: IndexMap::new(), reported: IndexMap::new() }
    }

    pub fn spec(&self) -> &WatchdogSpec {
        &self.spec
    }

    pub fn on_request(&mut self, id: u64, now_ms: u64) {
        self.pending.insert(id, now_ms);
    }

    pub fn on_response(&mut self, id: u64, _now_ms: u64) -> ResponseStatus {
        if self.pending.shift_remove(&id).is_some() {
            return ResponseStatus::OnTime;
        }
        if self.reported.shift_remove(&id).is_some() {
            return ResponseStatus::Late;
        }
        ResponseStatus::Unmatched
    }

    /// Raises a timing fault for every outstanding request older than the
    /// deadline, exactly once per request.
    pub fn check(&mut self, now_ms: u64) -> Vec<FaultEvent> {
        let mut out = Vec::new();
        let expired: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, &sent)| now_ms > sent + self.spec.deadline_ms)
            .map(|(&id, _)| id)
            .collect();
        for id in expired {
            let sent = self.pending.shift_remove(&id).expect("just selected");
            let expected_by = sent + self.spec.deadline_ms;
            self.reported.insert(id, expected_by);
            let mut e = FaultEvent::new(
                FaultKind::Timing,
                self.spec.source.clone(),
                format!(
                    "{} #{id} unanswered by {} past deadline {} ms",
                    self.spec.request_type, self.spec.response_type, self.spec.deadline_ms
                ),
                now_ms,
            );
            e.expected_by_ms = Some(expected_by);
            out.push(e);
        }
        out
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dog() -> Watchdog {
        Watchdog::new(WatchdogSpec::new("SensorRequest", "SensorReply", 50, "ifd").unwrap())
    }

    #[test]
    fn not_yet_expired_is_quiet() {
        let mut w = dog();
        w.on_request(1, 0);
        assert!(w.check(49).is_empty());
        assert!(w.check(50).is_empty(), "deadline instant itself is not late");
    }

    #[test]
    fn expired_request_raises_exactly_one_fault() {
        let mut w = dog();
        w.on_request(1, 0);
        let faults = w.check(51);
        assert_eq!(faults.len(), 1);
        assert_eq!(faults[0].kind, FaultKind::Timing);
        assert_eq!(faults[0].expected_by_ms, Some(50));
        assert!(w.check(60).is_empty(), "no duplicate fault");
        assert!(w.check(1000).is_empty());
    }

    #[test]
    fn answered_request_never_faults() {
        let mut w = dog();
        w.on_request(1, 0);
        assert_eq!(w.on_response(1, 40), ResponseStatus::OnTime);
        assert!(w.check(60).is_empty());
    }

    #[test]
    fn late_response_is_recorded_not_retracted() {
        let mut w = dog();
        w.on_request(1, 0);
        assert_eq!(w.check(60).len(), 1);
        assert_eq!(w.on_response(1, 70), ResponseStatus::Late);
        assert_eq!(w.on_response(2, 70), ResponseStatus::Unmatched);
    }

    #[test]
    fn each_expired_request_faults_once() {
        let mut w = dog();
        for id in 0..5 {
            w.on_request(id, id * 10);
        }
        w.on_response(2, 20);
        let faults = w.check(200);
        assert_eq!(faults.len(), 4);
    }

    #[test]
    fn zero_deadline_rejected() {
        assert_eq!(
            WatchdogSpec::new("a", "b", 0, "s").unwrap_err(),
            WatchdogError::ZeroDeadline
        );
    }
}
