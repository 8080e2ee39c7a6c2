//! Discrete linear plant model and the numerics around it.
//!
//! The physical rig is replaced by `x_next = A x + B u + w` with `w`
//! componentwise uniform in the noise bound. Gains ship precomputed in
//! the plant config; stability (closed-loop spectral radius below one)
//! is verified at load time rather than trusted.

use crate::config::PlantConfig;
use crate::message::{Content, Value};
use rand::Rng;
use rand::RngCore;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub h_ms: f64,
    pub x0: Vec<f64>,
    pub noise_bound: f64,
    pub state_bound: f64,
}

impl PlantModel {
    pub fn from_config(cfg: &PlantConfig) -> Self {
        PlantModel {
            a: cfg.a.clone(),
            b: cfg.b.clone(),
            h_ms: cfg.h_ms,
            x0: cfg.x0.clone(),
            noise_bound: cfg.noise_bound,
            state_bound: cfg.state_bound,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.first().map(Vec::len).unwrap_or(0)
    }
}

pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, x)| a * x).sum()).collect()
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// One plant step: `x_next = A x + B u + w`, `w ~ U(-noise, noise)` per
/// component. Returns the next state and whether it left the divergence
/// bound.
pub fn plant_step(
    p: &PlantModel,
    x: &[f64],
    u: &[f64],
    rng: &mut dyn RngCore,
) -> (Vec<f64>, bool) {
    let mut next = vec_add(&mat_vec(&p.a, x), &mat_vec(&p.b, u));
    if p.noise_bound > 0.0 {
        for v in &mut next {
            *v += rng.random_range(-p.noise_bound..=p.noise_bound);
        }
    }
    let diverged = inf_norm(&next) > p.state_bound;
    (next, diverged)
}

/// `A - B K`: the closed loop under `u = -K x`.
pub fn closed_loop(a: &[Vec<f64>], b: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = k.len();
    let mut out = a.to_vec();
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            for l in 0..m {
                *v -= b[i][l] * k[l][j];
            }
        }
    }
    out
}

/// Spectral radius estimate via the growth rate of repeated application.
///
/// For a matrix with spectral radius rho, `|M^n v|` grows like `rho^n`
/// for generic `v`; measuring growth over a long window is robust against
/// complex eigenvalue oscillation. Accuracy ~1e-3, plenty for a
/// stability gate.
pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n == 0 {
        return 0.0;
    }
    // Deterministic pseudo-random start vector to avoid unlucky
    // orthogonality with the dominant eigenspace.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 2654435761) % 97) as f64 / 97.0).collect();
    let mut log_growth = 0.0;
    let warmup = 200;
    let measure = 2000;
    for step in 0..(warmup + measure) {
        v = mat_vec(m, &v);
        let norm = inf_norm(&v);
        if norm == 0.0 {
            return 0.0;
        }
        if step >= warmup {
            log_growth += norm.ln();
        }
        for x in &mut v {
            *x /= norm;
        }
    }
    (log_growth / measure as f64).exp()
}

pub fn closed_loop_spectral_radius(a: &[Vec<f64>], b: &[Vec<f64>], k: &[Vec<f64>]) -> f64 {
    spectral_radius(&closed_loop(a, b, k))
}

/// Quadratic state cost of a noise-free closed-loop rollout from `x0`:
/// `sum x'x * h`. Used to rank gains at config load time.
pub fn rollout_cost(a: &[Vec<f64>], b: &[Vec<f64>], k: &[Vec<f64>], x0: &[f64], h_s: f64, steps: usize) -> f64 {
    let cl = closed_loop(a, b, k);
    let mut x = x0.to_vec();
    let mut cost = 0.0;
    for _ in 0..steps {
        cost += x.iter().map(|v| v * v).sum::<f64>() * h_s;
        x = mat_vec(&cl, &x);
    }
    cost
}

// --- matrix/vector <-> message content helpers -------------------------

pub fn vector_value(v: &[f64]) -> Value {
    Value::text(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
}

pub fn vector_from_value(v: &Value) -> Option<Vec<f64>> {
    let s = v.as_text()?;
    s.split(';').map(|p| p.parse().ok()).collect()
}

pub fn matrix_value(m: &[Vec<f64>]) -> Value {
    let mut c = Content::new();
    for (i, row) in m.iter().enumerate() {
        c.set(format!("r{i}"), vector_value(row)).expect("valid key");
    }
    Value::Map(c)
}

pub fn matrix_from_value(v: &Value) -> Option<Vec<Vec<f64>>> {
    let m = v.as_map()?;
    let mut out = Vec::with_capacity(m.len());
    for i in 0.. {
        match m.get(&format!("r{i}")) {
            Some(row) => out.push(vector_from_value(row)?),
            None => break,
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}
