//! Two-way clock offset and skew estimation.
//!
//! Nodes exchange Ping/Response messages; each exchange yields a sample
//! `(t1, t2, t3, t4)` (local send, peer receive, peer send, local
//! receive). The per-sample offset estimate is `((t2-t1) + (t3-t4)) / 2`,
//! which cancels symmetric path delay exactly; with asymmetric delay the
//! estimate is off by at most half the asymmetry. The model keeps a ring
//! of recent samples: the reported offset is the window median (robust to
//! delay spikes), anchored at the peer-time midpoint of the median sample,
//! and skew is the least-squares slope of the offset estimates against
//! local time.

use std::collections::VecDeque;

pub const DEFAULT_WINDOW: usize = 16;

/// One completed Ping/Response exchange, all values in milliseconds
/// (fractional precision allowed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PingSample {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClockError {
    #[error("sample violates t4 >= t1")]
    LocalTimeReversed,
    #[error("sample violates t3 >= t2")]
    PeerTimeReversed,
}

impl PingSample {
    pub fn validate(&self) -> Result<(), ClockError> {
        if self.t4 < self.t1 {
            return Err(ClockError::LocalTimeReversed);
        }
        if self.t3 < self.t2 {
            return Err(ClockError::PeerTimeReversed);
        }
        Ok(())
    }

    /// Offset estimate of the peer clock relative to the local clock.
    pub fn offset_estimate(&self) -> f64 {
        ((self.t2 - self.t1) + (self.t3 - self.t4)) / 2.0
    }

    /// Round-trip delay excluding peer processing time.
    pub fn round_trip(&self) -> f64 {
        (self.t4 - self.t1) - (self.t3 - self.t2)
    }

    fn local_mid(&self) -> f64 {
        (self.t1 + self.t4) / 2.0
    }

    fn peer_mid(&self) -> f64 {
        (self.t2 + self.t3) / 2.0
    }
}

/// Per-peer clock translation model.
#[derive(Debug, Clone)]
pub struct ClockModel {
    pub peer_node_id: String,
    /// Median offset over the window (peer minus local), ms.
    pub offset_ms: f64,
    /// Estimated relative clock rate difference, parts per million.
    pub skew_ppm: f64,
    /// Peer-time reference the offset is anchored at.
    pub reference_peer_ms: f64,
    /// Local time of the most recent sample.
    pub last_update_ms: f64,
    window: usize,
    samples: VecDeque<PingSample>,
}

impl ClockModel {
    pub fn new(peer_node_id: impl Into<String>) -> Self {
        Self::with_window(peer_node_id, DEFAULT_WINDOW)
    }

    pub fn with_window(peer_node_id: impl Into<String>, window: usize) -> Self {
        ClockModel {
            peer_node_id: peer_node_id.into(),
            offset_ms: 0.0,
            skew_ppm: 0.0,
            reference_peer_ms: 0.0,
            last_update_ms: 0.0,
            window: window.max(1),
            samples: VecDeque::new(),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn has_samples(&self) -> bool {
        !self.samples.is_empty()
    }

    /// Folds a new exchange into the model and recomputes offset and skew.
    pub fn record_ping_sample(&mut self, s: PingSample) -> Result<(), ClockError> {
        s.validate()?;
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(s);
        self.last_update_ms = s.t4;

        // Median offset, anchored at the sample that owns the median value.
        let mut by_offset: Vec<&PingSample> = self.samples.iter().collect();
        by_offset.sort_by(|a, b| {
            a.offset_estimate()
                .partial_cmp(&b.offset_estimate())
                .unwrap()
                .then(a.local_mid().partial_cmp(&b.local_mid()).unwrap())
        });
        let median = by_offset[(by_offset.len() - 1) / 2];
        self.offset_ms = median.offset_estimate();
        self.reference_peer_ms = median.peer_mid();

        // Skew: least-squares slope of offset estimates vs local mid-time.
        let n = self.samples.len() as f64;
        if self.samples.len() >= 2 {
            let mean_t: f64 = self.samples.iter().map(|s| s.local_mid()).sum::<f64>() / n;
            let mean_o: f64 = self.samples.iter().map(|s| s.offset_estimate()).sum::<f64>() / n;
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for s in &self.samples {
                let dt = s.local_mid() - mean_t;
                sxx += dt * dt;
                sxy += dt * (s.offset_estimate() - mean_o);
            }
            self.skew_ppm = if sxx > 0.0 { sxy / sxx * 1e6 } else { 0.0 };
        } else {
            self.skew_ppm = 0.0;
        }
        Ok(())
    }

    /// Translates a remote timestamp into the local clock:
    /// `local = remote - offset - skew * (remote - reference)`.
    ///
    /// Strictly monotone in the input for |skew| well below 10^6 ppm.
    /// With no samples this is the identity; callers surface a warning.
    pub fn translate(&self, ts_remote_ms: f64) -> f64 {
        if self.samples.is_empty() {
            return ts_remote_ms;
        }
        ts_remote_ms
            - self.offset_ms
            - self.skew_ppm * 1e-6 * (ts_remote_ms - self.reference_peer_ms)
    }
}
