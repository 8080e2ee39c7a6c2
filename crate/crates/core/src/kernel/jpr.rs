//! Job placement rules: QoS-to-queue-position mappings.

use super::{KernelError, ThreadSchedulingRule};
use crate::message::Message;
use crate::time::Micros;

/// Position within a dispatcher's queue; smaller keys are dequeued first.
/// `Last` is the "no deadline" class under EDF, after any keyed job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QueueKey {
    At(Micros),
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub dispatcher_id: u32,
    pub key: QueueKey,
}

/// A total, deterministic map from a message (and its enqueue time) to a
/// queue position. Totality is deliberate: QoS the rule does not
/// recognize degrades to a defined default instead of vanishing.
pub trait PlacementRule: Send {
    fn place(&self, message: &Message, enqueue_us: Micros) -> Placement;

    /// Construction-time validation against the thread scheduling rule.
    fn check(&self, tsr: &ThreadSchedulingRule) -> Result<(), KernelError>;
}

/// Rate-monotonic placement: a period-to-dispatcher table.
///
/// Messages whose QoS period appears in the table go to the mapped
/// dispatcher in FIFO order (the enqueue time serves as the queue key).
/// Messages without QoS, or with an unmapped period, go to the
/// lowest-priority dispatcher, also FIFO.
#[derive(Debug, Clone)]
pub struct RmPlacement {
    by_period_ms: Vec<(u64, u32)>,
    default_dispatcher: u32,
}

impl RmPlacement {
    pub fn new(
        by_period_ms: Vec<(u64, u32)>,
        tsr: &ThreadSchedulingRule,
    ) -> Result<Self, KernelError> {
        let rule = RmPlacement {
            by_period_ms,
            default_dispatcher: tsr.lowest_priority_id(),
        };
        rule.check(tsr)?;
        Ok(rule)
    }

    pub fn mappings(&self) -> &[(u64, u32)] {
        &self.by_period_ms
    }
}

impl PlacementRule for RmPlacement {
    fn place(&self, message: &Message, enqueue_us: Micros) -> Placement {
        let dispatcher_id = message
            .qos()
            .and_then(|q| q.period_ms)
            .and_then(|p| {
                self.by_period_ms.iter().find(|(period, _)| *period == p).map(|(_, d)| *d)
            })
            .unwrap_or(self.default_dispatcher);
        Placement { dispatcher_id, key: QueueKey::At(enqueue_us) }
    }

    fn check(&self, tsr: &ThreadSchedulingRule) -> Result<(), KernelError> {
        for (period, d) in &self.by_period_ms {
            let prio = tsr.priority_of(*d).ok_or(KernelError::UnknownDispatcher(*d))?;
            for (other_period, other_d) in &self.by_period_ms {
                let other_prio =
                    tsr.priority_of(*other_d).ok_or(KernelError::UnknownDispatcher(*other_d))?;
                // Shorter period must never sit at lower priority.
                if period < other_period && prio < other_prio {
                    return Err(KernelError::RmOrderViolation {
                        shorter: *period,
                        longer: *other_period,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Non-preemptive EDF placement: every job goes to one dispatcher, keyed
/// by absolute deadline (message timestamp plus relative deadline). Jobs
/// without a deadline run after every deadlined job; ties are FIFO.
#[derive(Debug, Clone, Copy)]
pub struct EdfPlacement {
    pub dispatcher_id: u32,
}

impl EdfPlacement {
    pub fn new(dispatcher_id: u32, tsr: &ThreadSchedulingRule) -> Result<Self, KernelError> {
        let rule = EdfPlacement { dispatcher_id };
        rule.check(tsr)?;
        Ok(rule)
    }
}

impl PlacementRule for EdfPlacement {
    fn place(&self, message: &Message, _enqueue_us: Micros) -> Placement {
        let key = match message.qos().and_then(|q| q.deadline_ms) {
            Some(d) => QueueKey::At((message.timestamp_ms() + d) * 1000),
            None => QueueKey::Last,
        };
        Placement { dispatcher_id: self.dispatcher_id, key }
    }

    fn check(&self, tsr: &ThreadSchedulingRule) -> Result<(), KernelError> {
        tsr.priority_of(self.dispatcher_id)
            .map(|_| ())
            .ok_or(KernelError::UnknownDispatcher(self.dispatcher_id))
    }
}
