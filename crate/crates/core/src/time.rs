//! Time base helpers.
//!
//! The simulator and the analysis library keep time as integer
//! microseconds so that every value expressible in the decimal-millisecond
//! config files (e.g. an execution time of `14.5` ms) stays exact.
//! Wire-level message timestamps remain integer milliseconds.

/// Microseconds since the start of the owning clock.
pub type Micros = u64;

/// Converts a decimal-millisecond value to integer microseconds.
///
/// Rejects negative, non-finite, and sub-microsecond inputs so config
/// mistakes surface at load time instead of as silent truncation.
pub fn ms_to_us(ms: f64) -> Result<Micros, TimeError> {
    if !ms.is_finite() || ms < 0.0 {
        return Err(TimeError::OutOfRange(ms));
    }
    let us = ms * 1000.0;
    let rounded = us.round();
    if (us - rounded).abs() > 1e-6 {
        return Err(TimeError::SubMicrosecond(ms));
    }
    if rounded > u64::MAX as f64 {
        return Err(TimeError::OutOfRange(ms));
    }
    Ok(rounded as u64)
}

/// Formats microseconds as decimal milliseconds without trailing zeros.
///
/// Used by every CSV writer; the output is a pure function of the integer
/// input, which keeps trace files byte-identical across runs.
pub fn us_to_ms_string(us: Micros) -> String {
    let whole = us / 1000;
    let frac = us % 1000;
    if frac == 0 {
        format!("{whole}")
    } else if frac.is_multiple_of(100) {
        format!("{whole}.{}", frac / 100)
    } else if frac.is_multiple_of(10) {
        format!("{whole}.{:02}", frac / 10)
    } else {
        format!("{whole}.{frac:03}")
    }
}

/// Microseconds as a floating-point millisecond count.
pub fn us_to_ms_f64(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TimeError {
    #[error("millisecond value {0} is negative or out of range")]
    OutOfRange(f64),
    #[error("millisecond value {0} has sub-microsecond precision")]
    SubMicrosecond(f64),
}

/// A simulated node-local clock: an affine map of global simulation time.
///
/// `local = world + offset + skew_ppm * world / 1e6`. Real deployments get
/// offset and skew from the hardware; the simulator injects them so the
/// clock-synchronization service has something to estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineClock {
    pub offset_us: i64,
    pub skew_ppm: f64,
}

impl Default for AffineClock {
    fn default() -> Self {
        AffineClock { offset_us: 0, skew_ppm: 0.0 }
    }
}

impl AffineClock {
    pub fn local_us(&self, world_us: Micros) -> i64 {
        let drift = (world_us as f64 * self.skew_ppm / 1e6).round() as i64;
        world_us as i64 + self.offset_us + drift
    }

    /// Local time in integer milliseconds (what gets stamped on messages).
    pub fn local_ms(&self, world_us: Micros) -> u64 {
        (self.local_us(world_us).max(0) as u64) / 1000
    }

    /// Local time in fractional milliseconds (ping exchange precision).
    pub fn local_ms_f64(&self, world_us: Micros) -> f64 {
        self.local_us(world_us) as f64 / 1000.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ms_to_us_exact_decimals() {
        assert_eq!(ms_to_us(14.5).unwrap(), 14_500);
        assert_eq!(ms_to_us(0.0).unwrap(), 0);
        assert_eq!(ms_to_us(80.0).unwrap(), 80_000);
        assert_eq!(ms_to_us(0.001).unwrap(), 1);
    }

    #[test]
    fn ms_to_us_rejects_bad_values() {
        assert!(ms_to_us(-1.0).is_err());
        assert!(ms_to_us(f64::NAN).is_err());
        assert!(ms_to_us(0.0001).is_err());
    }

    #[test]
    fn ms_string_is_minimal() {
        assert_eq!(us_to_ms_string(80_000), "80");
        assert_eq!(us_to_ms_string(14_500), "14.5");
        assert_eq!(us_to_ms_string(14_520), "14.52");
        assert_eq!(us_to_ms_string(14_523), "14.523");
        assert_eq!(us_to_ms_string(0), "0");
    }

    #[test]
    fn affine_clock_applies_offset_and_skew() {
        let c = AffineClock { offset_us: 50_000, skew_ppm: 100.0 };
        // At world t = 1e9 us, drift = 100 ppm * 1e9 us = 1e5 us.
        assert_eq!(c.local_us(1_000_000_000), 1_000_000_000 + 50_000 + 100_000);
    }
}
