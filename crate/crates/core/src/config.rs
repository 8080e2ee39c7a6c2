//! Configuration file formats (TOML).
//!
//! Three documented file kinds: kernel/node configuration (dispatchers,
//! placement rule, time source, peers), plant models with their
//! precomputed feedback gains, and channel models for the simulated
//! serial link. Task-set files live in [`crate::sched::taskfile`].

use crate::kernel::{
    DispatcherSpec, EdfPlacement, PlacementRule, RmPlacement, ThreadSchedulingRule,
};
use crate::time::ms_to_us;
use crate::world::LinkModel;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    toml::from_str(text)
        .map_err(|source| ConfigError::Toml { path: origin.into(), source: Box::new(source) })
}

// ---------------------------------------------------------------------------
// Kernel / node configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub node: NodeSection,
    #[serde(default)]
    pub dispatcher: Vec<DispatcherSection>,
    pub jpr: JprSection,
    #[serde(default)]
    pub peer: Vec<PeerSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub id: String,
    #[serde(default)]
    pub listen: Option<String>,
    #[serde(default = "default_time")]
    pub time: String,
    #[serde(default)]
    pub ping_period_ms: Option<u64>,
}

fn default_time() -> String {
    "real".into()
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatcherSection {
    pub id: u32,
    pub priority: i32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JprSection {
    /// "rm" or "edf".
    pub kind: String,
    /// RM: period (ms) to dispatcher id.
    #[serde(default)]
    pub periods: Vec<PeriodMap>,
    /// EDF: the single dispatcher everything queues at.
    #[serde(default)]
    pub dispatcher: Option<u32>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodMap {
    pub period_ms: u64,
    pub dispatcher: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSection {
    pub id: String,
    pub addr: String,
}

impl KernelConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: KernelConfig = parse(&read(path)?, &path.display().to_string())?;
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: KernelConfig = parse(text, origin)?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        if self.dispatcher.is_empty() {
            return Err(ConfigError::Invalid {
                path: origin.into(),
                reason: "at least one [[dispatcher]] required".into(),
            });
        }
        match self.jpr.kind.as_str() {
            "rm" | "edf" => Ok(()),
            other => Err(ConfigError::Invalid {
                path: origin.into(),
                reason: format!("jpr.kind must be \"rm\" or \"edf\", got {other:?}"),
            }),
        }
    }

    pub fn tsr(&self) -> Result<ThreadSchedulingRule, ConfigError> {
        ThreadSchedulingRule::new(
            self.dispatcher.iter().map(|d| DispatcherSpec { id: d.id, priority: d.priority }).collect(),
        )
        .map_err(|e| ConfigError::Invalid { path: "kernel config".into(), reason: e.to_string() })
    }

    pub fn placement_rule(&self) -> Result<Box<dyn PlacementRule>, ConfigError> {
        let tsr = self.tsr()?;
        let boxed: Box<dyn PlacementRule> = match self.jpr.kind.as_str() {
            "rm" => Box::new(
                RmPlacement::new(
                    self.jpr.periods.iter().map(|p| (p.period_ms, p.dispatcher)).collect(),
                    &tsr,
                )
                .map_err(|e| ConfigError::Invalid {
                    path: "kernel config".into(),
                    reason: e.to_string(),
                })?,
            ),
            _ => Box::new(
                EdfPlacement::new(
                    self.jpr.dispatcher.unwrap_or_else(|| tsr.dispatchers[0].id),
                    &tsr,
                )
                .map_err(|e| ConfigError::Invalid {
                    path: "kernel config".into(),
                    reason: e.to_string(),
                })?,
            ),
        };
        Ok(boxed)
    }
}

// ---------------------------------------------------------------------------
// Plant and channel configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub name: String,
    pub h_ms: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub noise_bound: f64,
    pub state_bound: f64,
    /// Sanity envelope for "state stayed bounded" checks.
    pub envelope: f64,
    pub gain: Vec<GainConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub label: String,
    pub k: Vec<Vec<f64>>,
}

impl PlantConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: PlantConfig = parse(&read(path)?, &path.display().to_string())?;
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: PlantConfig = parse(text, origin)?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn gain(&self, label: &str) -> Option<&GainConfig> {
        self.gain.iter().find(|g| g.label == label)
    }

    /// Dimension checks plus the closed-loop stability guarantee: every
    /// shipped gain must give spectral radius below one, verified here so
    /// a bad gain fails at load time rather than as a diverging run.
    pub fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::Invalid { path: origin.into(), reason };
        let n = self.a.len();
        if n == 0 || self.a.iter().any(|r| r.len() != n) {
            return Err(bad("A must be square".into()));
        }
        if self.b.len() != n || self.b.is_empty() {
            return Err(bad("B must have as many rows as A".into()));
        }
        let m = self.b[0].len();
        if self.b.iter().any(|r| r.len() != m) {
            return Err(bad("B rows must share one width".into()));
        }
        if self.x0.len() != n {
            return Err(bad("x0 dimension must match A".into()));
        }
        if ms_to_us(self.h_ms).is_err() || self.h_ms <= 0.0 {
            return Err(bad("h_ms must be positive".into()));
        }
        if self.gain.is_empty() {
            return Err(bad("at least one gain required".into()));
        }
        for g in &self.gain {
            if g.k.len() != m || g.k.iter().any(|r| r.len() != n) {
                return Err(bad(format!("gain {} must be {m}x{n}", g.label)));
            }
            let rho = crate::harness::plant::closed_loop_spectral_radius(&self.a, &self.b, &g.k);
            if rho >= 1.0 {
                return Err(bad(format!(
                    "gain {} does not stabilize the plant (spectral radius {rho:.4})",
                    g.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub delay_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub duplicates: bool,
}

impl ChannelConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: ChannelConfig = parse(&read(path)?, &path.display().to_string())?;
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ChannelConfig = parse(text, origin)?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(ConfigError::Invalid {
                path: origin.into(),
                reason: format!("loss probability {} outside [0, 1]", self.loss),
            });
        }
        if ms_to_us(self.delay_ms).is_err() || ms_to_us(self.jitter_ms).is_err() {
            return Err(ConfigError::Invalid {
                path: origin.into(),
                reason: "delay/jitter must be non-negative millisecond values".into(),
            });
        }
        Ok(())
    }

    pub fn link_model(&self) -> LinkModel {
        let mut l = LinkModel::new(
            ms_to_us(self.delay_ms).expect("validated"),
            ms_to_us(self.jitter_ms).expect("validated"),
            self.loss,
        );
        if self.duplicates {
            l.duplicate = 0.01;
        }
        l
    }
}
