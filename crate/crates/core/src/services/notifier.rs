//! Time-triggered message service.
//!
//! The runtime is event-driven: a component only executes when a message
//! arrives. Periodic activity therefore comes from notification schedules:
//! the notifier emits a `Notify` message per elapsed activation, stamped
//! with the *nominal* activation time `phase + k * period` rather than the
//! emission time, so downstream consumers see jitter-free timestamps. A
//! stalled notifier catches up with exactly one late notification per
//! missed activation and never emits early.

use crate::message::{Content, Message, QosSpec, Reliability, Value};

/// A periodic (or one-shot, via `count`) notification request.
#[derive(Debug, Clone, PartialEq)]
pub struct NotificationSchedule {
    pub target_profile: String,
    pub period_ms: u64,
    pub phase_ms: u64,
    pub qos: QosSpec,
    /// Number of notifications to emit; `None` = unbounded.
    pub count: Option<u64>,
    /// Opaque tag copied into the notification content, letting one
    /// component distinguish its schedules.
    pub tag: Option<String>,
    /// Next activation index (the k-th notification fires at
    /// `phase + k * period`); starts at 1.
    next_k: u64,
    emitted: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NotifierError {
    #[error("period must be positive")]
    ZeroPeriod,
}

impl NotificationSchedule {
    pub fn new(
        target_profile: impl Into<String>,
        period_ms: u64,
        phase_ms: u64,
        qos: QosSpec,
    ) -> Result<Self, NotifierError> {
        if period_ms == 0 {
            return Err(NotifierError::ZeroPeriod);
        }
        Ok(NotificationSchedule {
            target_profile: target_profile.into(),
            period_ms,
            phase_ms,
            qos,
            count: None,
            tag: None,
            next_k: 1,
            emitted: 0,
        })
    }

    pub fn with_count(mut self, count: u64) -> Self {
        self.count = Some(count);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    /// Resumes a schedule mid-stream: the next notification is activation
    /// index `k` (used after migration so no activation repeats or skips).
    pub fn starting_at(mut self, k: u64) -> Self {
        self.next_k = k.max(1);
        self
    }

    fn exhausted(&self) -> bool {
        matches!(self.count, Some(c) if self.emitted >= c)
    }

    fn next_due_ms(&self) -> Option<u64> {
        if self.exhausted() {
            None
        } else {
            Some(self.phase_ms + self.next_k * self.period_ms)
        }
    }

    /// Emits one notification per activation that has elapsed by `now_ms`.
    pub fn due(&mut self, now_ms: u64) -> Vec<Message> {
        let mut out = Vec::new();
        while !self.exhausted() {
            let nominal = self.phase_ms + self.next_k * self.period_ms;
            if nominal > now_ms {
                break;
            }
            let mut content = Content::new();
            content.set("k", Value::text(self.next_k.to_string())).expect("valid key");
            if let Some(tag) = &self.tag {
                content.set("tag", Value::text(tag.clone())).expect("valid key");
            }
            out.push(
                Message::new(
                    "Notify",
                    Reliability::BestEffort,
                    self.target_profile.clone(),
                    content,
                    nominal,
                    Some(self.qos),
                )
                .expect("notification message is always valid"),
            );
            self.next_k += 1;
            self.emitted += 1;
        }
        out
    }
}

/// The per-node notifier: a set of schedules plus the next-deadline query
/// the runtime uses to arm its timer.
#[derive(Debug, Default)]
pub struct Notifier {
    schedules: Vec<NotificationSchedule>,
}

impl Notifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, schedule: NotificationSchedule) {
        self.schedules.push(schedule);
    }

    pub fn next_due_ms(&self) -> Option<u64> {
        self.schedules.iter().filter_map(|s| s.next_due_ms()).min()
    }

    /// Collects all notifications due by `now_ms`, in schedule order, and
    /// drops exhausted schedules.
    pub fn due(&mut self, now_ms: u64) -> Vec<Message> {
        let mut out = Vec::new();
        for s in &mut self.schedules {
            out.extend(s.due(now_ms));
        }
        self.schedules.retain(|s| !s.exhausted());
        out
    }

    pub fn is_empty(&self) -> bool {
        self.schedules.is_empty()
    }

    /// Drops schedules targeting a profile; returns how many were removed
    /// (used when the target is destroyed).
    pub fn remove_target(&mut self, profile: &str) -> usize {
        let before = self.schedules.len();
        self.schedules.retain(|s| s.target_profile != profile);
        before - self.schedules.len()
    }
}
