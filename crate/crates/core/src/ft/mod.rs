//! Software fault tolerance: redundant component shells, voters,
//! acceptance tests, watchdog-based interaction fault detection, and the
//! estimator/buffering helpers that give control loops local temporal
//! autonomy through transient failures.

pub mod ftshell;
pub mod lta;
pub mod vote;
pub mod watchdog;

pub use ftshell::{FtComponent, FtConfig, FtPolicy};
pub use lta::{BufferPop, ControlBuffer, EstimatorState};
pub use vote::{vote, VoteError, VoteResult, Voter};
pub use watchdog::{Watchdog, WatchdogSpec};

use crate::message::{Content, Message, Reliability, Value};
use indexmap::IndexMap;

/// Fault taxonomy used across detectors. Byzantine behavior has no
/// detector here; the kinds below are the ones the shell and watchdog can
/// actually observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Design,
    Crash,
    Timing,
    Omission,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::Design => "design",
            FaultKind::Crash => "crash",
            FaultKind::Timing => "timing",
            FaultKind::Omission => "omission",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "design" => Some(FaultKind::Design),
            "crash" => Some(FaultKind::Crash),
            "timing" => Some(FaultKind::Timing),
            "omission" => Some(FaultKind::Omission),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub source: String,
    pub detail: String,
    pub detected_at_ms: u64,
    /// For timing faults: when the response had been expected.
    pub expected_by_ms: Option<u64>,
}

impl FaultEvent {
    pub fn new(kind: FaultKind, source: impl Into<String>, detail: impl Into<String>, at: u64) -> Self {
        FaultEvent {
            kind,
            source: source.into(),
            detail: detail.into(),
            detected_at_ms: at,
            expected_by_ms: None,
        }
    }

    /// Renders the event as a message to a fault-log profile so detectors
    /// can report through the ordinary delivery path.
    pub fn to_message(&self, fault_profile: &str) -> Message {
        let mut c = Content::new();
        c.set("kind", Value::text(self.kind.as_str())).unwrap();
        c.set("source", Value::text(self.source.clone())).unwrap();
        c.set("detail", Value::text(self.detail.clone())).unwrap();
        if let Some(d) = self.expected_by_ms {
            c.set("expected_by", Value::text(d.to_string())).unwrap();
        }
        Message::new(
            "FaultEvent",
            Reliability::BestEffort,
            fault_profile,
            c,
            self.detected_at_ms,
            None,
        )
        .expect("fault event message is always valid")
    }

    pub fn from_message(m: &Message) -> Option<FaultEvent> {
        Some(FaultEvent {
            kind: FaultKind::parse(m.content().text("kind")?)?,
            source: m.content().text("source")?.to_string(),
            detail: m.content().text("detail").unwrap_or_default().to_string(),
            detected_at_ms: m.timestamp_ms(),
            expected_by_ms: m.content().u64("expected_by"),
        })
    }
}

/// Range and smoothness bounds an output must satisfy to be accepted.
#[derive(Debug, Clone, Default)]
pub struct AcceptanceSpec {
    /// Per-key closed range bounds.
    pub ranges: IndexMap<String, (f64, f64)>,
    /// Per-key bound on |value - previous value|.
    pub step_bounds: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AcceptanceResult {
    Pass,
    Fail(AcceptanceFailure),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AcceptanceFailure {
    /// A checked key is missing from the output.
    Omission { key: String },
    Range { key: String, value: f64, lo: f64, hi: f64 },
    Smoothness { key: String, value: f64, previous: f64, bound: f64 },
}

impl std::fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AcceptanceFailure::Omission { key } => write!(f, "missing output key {key:?}"),
            AcceptanceFailure::Range { key, value, lo, hi } => {
                write!(f, "{key} = {value} outside [{lo}, {hi}]")
            }
            AcceptanceFailure::Smoothness { key, value, previous, bound } => {
                write!(f, "{key} jumped from {previous} to {value} (bound {bound})")
            }
        }
    }
}

/// Checks an output (numeric key/value pairs) against the acceptance
/// spec, optionally comparing with the previously accepted output.
pub fn acceptance_check(
    output: &IndexMap<String, f64>,
    spec: &AcceptanceSpec,
    previous: Option<&IndexMap<String, f64>>,
) -> AcceptanceResult {
    for (key, &(lo, hi)) in &spec.ranges {
        let Some(&value) = output.get(key) else {
            return AcceptanceResult::Fail(AcceptanceFailure::Omission { key: key.clone() });
        };
        if !(lo..=hi).contains(&value) || value.is_nan() {
            return AcceptanceResult::Fail(AcceptanceFailure::Range { key: key.clone(), value, lo, hi });
        }
    }
    for (key, &bound) in &spec.step_bounds {
        let Some(&value) = output.get(key) else {
            return AcceptanceResult::Fail(AcceptanceFailure::Omission { key: key.clone() });
        };
        if let Some(&previous) = previous.and_then(|p| p.get(key)) {
            if (value - previous).abs() > bound {
                return AcceptanceResult::Fail(AcceptanceFailure::Smoothness {
                    key: key.clone(),
                    value,
                    previous,
                    bound,
                });
            }
        }
    }
    AcceptanceResult::Pass
}

/// Extracts the numeric entries of a message's content, the view voters
/// and acceptance tests operate on.
pub fn numeric_content(m: &Message) -> IndexMap<String, f64> {
    let mut out = IndexMap::new();
    for (k, v) in m.content().iter() {
        if let Some(x) = v.as_f64() {
            out.insert(k.clone(), x);
        }
    }
    out
}
