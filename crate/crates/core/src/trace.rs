//! Run traces: what happened, when, to which job.
//!
//! A [`TraceBundle`] accumulates rows in memory during a run and writes a
//! directory of CSV files afterwards. The delivery trace uses the
//! documented column set `event,job_id,msg_type,dispatcher,enqueue_ms,
//! start_ms,end_ms`; richer per-row context (profiles, nodes) stays in
//! memory for metric computation. All times are decimal milliseconds
//! rendered from integer microseconds, so identical runs produce
//! byte-identical files.

use crate::time::{us_to_ms_string, Micros};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// One row of the kernel delivery trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRow {
    pub event: DeliveryEventKind,
    pub job_id: u64,
    pub msg_type: String,
    pub dispatcher: Option<u32>,
    pub enqueue_us: Option<Micros>,
    pub start_us: Option<Micros>,
    pub end_us: Option<Micros>,
    // In-memory context, not part of the CSV columns.
    pub node: String,
    pub profile: String,
    /// Notification tag, when the message carried one.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryEventKind {
    Deliver,
    Undeliverable,
    Forward,
    DeadlineMiss,
    Upgrade,
    MigrateBegin,
    MigrateComplete,
    MigrateAbort,
    Rebind,
    Fault,
    ClockWarn,
}

impl DeliveryEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryEventKind::Deliver => "deliver",
            DeliveryEventKind::Undeliverable => "undeliverable",
            DeliveryEventKind::Forward => "forward",
            DeliveryEventKind::DeadlineMiss => "miss",
            DeliveryEventKind::Upgrade => "upgrade",
            DeliveryEventKind::MigrateBegin => "migrate_begin",
            DeliveryEventKind::MigrateComplete => "migrate_complete",
            DeliveryEventKind::MigrateAbort => "migrate_abort",
            DeliveryEventKind::Rebind => "rebind",
            DeliveryEventKind::Fault => "fault",
            DeliveryEventKind::ClockWarn => "clock_warn",
        }
    }
}

/// Plant state sample at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantRow {
    pub node: String,
    pub t_us: Micros,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

/// One control activation as the controller saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRow {
    pub node: String,
    pub activation: u64,
    pub nominal_us: Micros,
    pub computed_us: Micros,
    /// Whether the sensor reading arrived or the estimator covered.
    pub estimated: bool,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultRow {
    pub at_us: Micros,
    pub node: String,
    pub kind: String,
    pub source: String,
    pub detail: String,
}

/// Sequence-number audit of delivered messages (exactly-once checks).
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub at_us: Micros,
    pub node: String,
    pub msg_type: String,
    pub sender: String,
    pub seq: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TraceBundle {
    pub delivery: Vec<DeliveryRow>,
    pub plant: Vec<PlantRow>,
    pub control: Vec<ControlRow>,
    pub faults: Vec<FaultRow>,
    pub audit: Vec<AuditRow>,
    /// Human-readable metrics summary, filled in by the experiment runner.
    pub summary: String,
}

fn opt_ms(v: Option<Micros>) -> String {
    v.map(us_to_ms_string).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl TraceBundle {
    pub fn delivery_csv(&self) -> String {
        let mut out = String::from("event,job_id,msg_type,dispatcher,enqueue_ms,start_ms,end_ms\n");
        for r in &self.delivery {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.event.as_str(),
                r.job_id,
                csv_field(&r.msg_type),
                r.dispatcher.map(|d| d.to_string()).unwrap_or_default(),
                opt_ms(r.enqueue_us),
                opt_ms(r.start_us),
                opt_ms(r.end_us),
            );
        }
        out
    }

    pub fn plant_csv(&self) -> String {
        let dim = self.plant.first().map(|r| (r.state.len(), r.input.len())).unwrap_or((0, 0));
        let mut out = String::from("node,time_ms");
        for i in 0..dim.0 {
            let _ = write!(out, ",x{i}");
        }
        for i in 0..dim.1 {
            let _ = write!(out, ",u{i}");
        }
        out.push('\n');
        for r in &self.plant {
            let _ = write!(out, "{},{}", csv_field(&r.node), us_to_ms_string(r.t_us));
            for v in &r.state {
                let _ = write!(out, ",{v}");
            }
            for v in &r.input {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn control_csv(&self) -> String {
        let mut out = String::from("node,activation,nominal_ms,computed_ms,estimated,u\n");
        for r in &self.control {
            let u = r.u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&r.node),
                r.activation,
                us_to_ms_string(r.nominal_us),
                us_to_ms_string(r.computed_us),
                r.estimated as u8,
                csv_field(&u),
            );
        }
        out
    }

    pub fn faults_csv(&self) -> String {
        let mut out = String::from("time_ms,node,kind,source,detail\n");
        for r in &self.faults {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                us_to_ms_string(r.at_us),
                csv_field(&r.node),
                csv_field(&r.kind),
                csv_field(&r.source),
                csv_field(&r.detail),
            );
        }
        out
    }

    pub fn audit_csv(&self) -> String {
        let mut out = String::from("time_ms,node,msg_type,sender,seq\n");
        for r in &self.audit {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                us_to_ms_string(r.at_us),
                csv_field(&r.node),
                csv_field(&r.msg_type),
                csv_field(&r.sender),
                r.seq,
            );
        }
        out
    }

    /// Writes the bundle as a directory of CSVs plus the summary.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("delivery.csv"), self.delivery_csv())?;
        std::fs::write(dir.join("plant.csv"), self.plant_csv())?;
        std::fs::write(dir.join("control.csv"), self.control_csv())?;
        std::fs::write(dir.join("faults.csv"), self.faults_csv())?;
        std::fs::write(dir.join("audit.csv"), self.audit_csv())?;
        std::fs::write(dir.join("summary.txt"), &self.summary)?;
        Ok(())
    }

    /// Concatenation of every rendered file, for whole-bundle equality
    /// checks in determinism tests.
    pub fn render_all(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.delivery_csv());
        out.push_str(&self.plant_csv());
        out.push_str(&self.control_csv());
        out.push_str(&self.faults_csv());
        out.push_str(&self.audit_csv());
        out.push_str(&self.summary);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_csv_has_documented_columns() {
        let mut t = TraceBundle::default();
        t.delivery.push(DeliveryRow {
            event: DeliveryEventKind::Deliver,
            job_id: 3,
            msg_type: "Notify".into(),
            dispatcher: Some(1),
            enqueue_us: Some(15_000),
            start_us: Some(15_000),
            end_us: Some(29_500),
            node: "a".into(),
            profile: "ctrl".into(),
            tag: None,
        });
        let csv = t.delivery_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("event,job_id,msg_type,dispatcher,enqueue_ms,start_ms,end_ms"));
        assert_eq!(lines.next(), Some("deliver,3,Notify,1,15,15,29.5"));
    }

    #[test]
    fn fields_with_commas_are_quoted() {
        let mut t = TraceBundle::default();
        t.faults.push(FaultRow {
            at_us: 1000,
            node: "a".into(),
            kind: "design".into(),
            source: "m".into(),
            detail: "u = 2, outside [-1, 1]".into(),
        });
        assert!(t.faults_csv().contains("\"u = 2, outside [-1, 1]\""));
    }
}
