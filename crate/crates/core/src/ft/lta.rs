//! Local temporal autonomy helpers.
//!
//! Two design patterns let a control loop ride out transient failures of
//! its peers: a collocated state estimator makes sensor or network
//! dropouts transparent to the controller, and an actuator-side buffer of
//! en-bloc future control values makes controller or network dropouts
//! transparent to the actuator.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LtaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("block activation indices must be contiguous")]
    NonContiguousBlock,
}

/// Plant-model-based state estimator with direct substitution.
///
/// When a measurement arrives it is taken verbatim (full-state sensing);
/// when it does not, the estimate advances open loop through the model:
/// `x_next = A x + B u_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    estimate: Vec<f64>,
    last_input: Vec<f64>,
}

impl EstimatorState {
    pub fn new(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        initial: Vec<f64>,
    ) -> Result<Self, LtaError> {
        let n = a.len();
        if n == 0 || a.iter().any(|row| row.len() != n) {
            return Err(LtaError::Dimension("A must be square and non-empty".into()));
        }
        if b.len() != n {
            return Err(LtaError::Dimension("B must have as many rows as A".into()));
        }
        let m = b[0].len();
        if m == 0 || b.iter().any(|row| row.len() != m) {
            return Err(LtaError::Dimension("B rows must share one width".into()));
        }
        if initial.len() != n {
            return Err(LtaError::Dimension("initial state must match A".into()));
        }
        Ok(EstimatorState { a, b, estimate: initial, last_input: vec![0.0; m] })
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].len()
    }

    /// Advances the estimate by one sample period.
    pub fn step(
        &mut self,
        measurement: Option<&[f64]>,
        u_prev: &[f64],
    ) -> Result<&[f64], LtaError> {
        if u_prev.len() != self.input_dim() {
            return Err(LtaError::Dimension(format!(
                "input has dimension {}, expected {}",
                u_prev.len(),
                self.input_dim()
            )));
        }
        match measurement {
            Some(x) => {
                if x.len() != self.state_dim() {
                    return Err(LtaError::Dimension(format!(
                        "measurement has dimension {}, expected {}",
                        x.len(),
                        self.state_dim()
                    )));
                }
                self.estimate.copy_from_slice(x);
            }
            None => {
                let n = self.state_dim();
                let mut next = vec![0.0; n];
                for (i, row) in self.a.iter().enumerate() {
                    let mut acc = 0.0;
                    for (j, a_ij) in row.iter().enumerate() {
                        acc += a_ij * self.estimate[j];
                    }
                    for (j, b_ij) in self.b[i].iter().enumerate() {
                        acc += b_ij * u_prev[j];
                    }
                    next[i] = acc;
                }
                self.estimate = next;
            }
        }
        self.last_input = u_prev.to_vec();
        Ok(&self.estimate)
    }

    pub fn last_input(&self) -> &[f64] {
        &self.last_input
    }

    /// Overwrites the estimate (memento restoration path).
    pub fn set_estimate(&mut self, x: Vec<f64>) -> Result<(), LtaError> {
        if x.len() != self.state_dim() {
            return Err(LtaError::Dimension("estimate dimension".into()));
        }
        self.estimate = x;
        Ok(())
    }
}

/// Result of asking the buffer for an activation's control value.
#[derive(Debug, Clone, PartialEq)]
pub enum BufferPop {
    Value(Vec<f64>),
    /// No block covers this activation; the caller applies hold-last.
    Stale,
}

/// Actuator-side buffer of future control values, delivered en bloc.
///
/// A newer block overwrites older values for shared activation indices.
/// Pops consume in activation order; asking for an index no block covers
/// is detectable as `Stale` rather than silently reusing old data.
#[derive(Debug, Clone)]
pub struct ControlBuffer {
    depth: usize,
    values: std::collections::BTreeMap<u64, Vec<f64>>,
}

impl ControlBuffer {
    pub fn new(depth: usize) -> Self {
        ControlBuffer { depth: depth.max(1), values: std::collections::BTreeMap::new() }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Accepts a block of `(activation, value)` pairs with contiguous
    /// indices, then prunes to the newest `depth` entries.
    pub fn push_block(&mut self, block: &[(u64, Vec<f64>)]) -> Result<(), LtaError> {
        for pair in block.windows(2) {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(LtaError::NonContiguousBlock);
            }
        }
        for (k, v) in block {
            self.values.insert(*k, v.clone());
        }
        while self.values.len() > self.depth {
            let oldest = *self.values.keys().next().expect("non-empty");
            self.values.remove(&oldest);
        }
        Ok(())
    }

    /// Takes the value for an activation, discarding anything older.
    pub fn pop(&mut self, activation: u64) -> BufferPop {
        let stale: Vec<u64> = self.values.range(..activation).map(|(&k, _)| k).collect();
        for k in stale {
            self.values.remove(&k);
        }
        match self.values.remove(&activation) {
            Some(v) => BufferPop::Value(v),
            None => BufferPop::Stale,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
