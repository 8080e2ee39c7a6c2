//! Fault-tolerant component: redundant modules behind one shell slot.
//!
//! An [`FtComponent`] wraps an ordered list of module implementations
//! (the first is the primary, the rest are replicas) and implements the
//! ordinary component interface, so it drops into a shell unchanged. The
//! fault-management policy decides how the modules are coordinated:
//!
//! * **Recovery block** — checkpoint the primary's memento, run one
//!   module, test its output against the acceptance spec; on failure
//!   restore the checkpoint and try the next module. If an alternate
//!   passes, it becomes the primary. If all fail, the block fails: no
//!   output is emitted and a design fault is reported.
//! * **N-version** — run every module on the message, extract the
//!   numeric output vectors, and vote. Modules disagreeing with the voted
//!   value beyond epsilon are reported as faults; a module crash excludes
//!   it from the vote.
//!
//! Fault reports leave the shell as ordinary messages addressed to a
//! fault-log profile, so they ride the same delivery path as everything
//! else and land in the trace.

use super::vote::{vote, VoteResult, Voter};
use super::{acceptance_check, numeric_content, AcceptanceResult, AcceptanceSpec, FaultEvent, FaultKind};
use crate::component::{Component, ComponentError, Ctx, Memento};
use crate::message::{Content, Message, Value};
use indexmap::IndexMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtPolicy {
    RecoveryBlock,
    NVersion,
}

#[derive(Debug, Clone)]
pub struct FtConfig {
    pub policy: FtPolicy,
    pub acceptance: Option<AcceptanceSpec>,
    pub voter: Option<Voter>,
    pub epsilon: f64,
    /// Per-module voting weights; missing entries default to 1.
    pub weights: Vec<f64>,
    /// Profile that receives fault-event messages.
    pub fault_profile: String,
}

impl FtConfig {
    pub fn recovery_block(acceptance: AcceptanceSpec, fault_profile: impl Into<String>) -> Self {
        FtConfig {
            policy: FtPolicy::RecoveryBlock,
            acceptance: Some(acceptance),
            voter: None,
            epsilon: 0.0,
            weights: Vec::new(),
            fault_profile: fault_profile.into(),
        }
    }

    pub fn n_version(voter: Voter, epsilon: f64, fault_profile: impl Into<String>) -> Self {
        FtConfig {
            policy: FtPolicy::NVersion,
            acceptance: None,
            voter: Some(voter),
            epsilon,
            weights: Vec::new(),
            fault_profile: fault_profile.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FtConfigError {
    #[error("recovery block requires an acceptance spec")]
    MissingAcceptance,
    #[error("n-version requires at least two modules and a voter")]
    NotEnoughModules,
}

pub struct FtComponent {
    kinds: Vec<String>,
    modules: Vec<Box<dyn Component>>,
    config: FtConfig,
    primary: usize,
    previous_accepted: Option<IndexMap<String, f64>>,
}

impl std::fmt::Debug for FtComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FtComponent")
            .field("policy", &self.config.policy)
            .field("kinds", &self.kinds)
            .field("primary", &self.primary)
            .finish()
    }
}

impl FtComponent {
    pub fn new(
        modules: Vec<(String, Box<dyn Component>)>,
        config: FtConfig,
    ) -> Result<Self, FtConfigError> {
        match config.policy {
            FtPolicy::RecoveryBlock => {
                if config.acceptance.is_none() || modules.is_empty() {
                    return Err(FtConfigError::MissingAcceptance);
                }
            }
            FtPolicy::NVersion => {
                if modules.len() < 2 || config.voter.is_none() {
                    return Err(FtConfigError::NotEnoughModules);
                }
            }
        }
        let (kinds, modules) = modules.into_iter().unzip();
        Ok(FtComponent { kinds, modules, config, primary: 0, previous_accepted: None })
    }

    pub fn primary_index(&self) -> usize {
        self.primary
    }

    pub fn module_memento(&self, index: usize) -> Memento {
        self.modules[index].memento()
    }

    fn fault(&self, kind: FaultKind, source: &str, detail: String, ctx: &Ctx) -> Message {
        FaultEvent::new(kind, source, detail, ctx.now_ms).to_message(&self.config.fault_profile)
    }

    fn process_recovery_block(
        &mut self,
        msg: &Message,
        ctx: &mut Ctx,
    ) -> Result<Vec<Message>, ComponentError> {
        let spec = self.config.acceptance.clone().expect("validated");
        let checkpoint = self.modules[self.primary].memento();
        let mut faults: Vec<Message> = Vec::new();

        let mut order: Vec<usize> = Vec::with_capacity(self.modules.len());
        order.push(self.primary);
        order.extend((0..self.modules.len()).filter(|&k| k != self.primary));

        for k in order {
            if k != self.primary {
                // Replicas start each attempt from the checkpointed state
                // when their schema allows it.
                let _ = self.modules[k].restore(&checkpoint);
            }
            let attempt = self.modules[k].process_message(msg, ctx);
            let failure = match attempt {
                Err(e) => Some((FaultKind::Crash, format!("module crashed: {e}"))),
                Ok(outputs) => {
                    let values = outputs
                        .first()
                        .map(numeric_content)
                        .unwrap_or_default();
                    match acceptance_check(&values, &spec, self.previous_accepted.as_ref()) {
                        AcceptanceResult::Pass => {
                            self.previous_accepted = Some(values);
                            if k != self.primary {
                                // Default fault-handler action: the
                                // accepted alternate becomes the primary.
                                self.primary = k;
                            }
                            let mut out = outputs;
                            out.extend(faults);
                            return Ok(out);
                        }
                        AcceptanceResult::Fail(reason) => {
                            Some((FaultKind::Design, reason.to_string()))
                        }
                    }
                }
            };
            if let Some((kind, detail)) = failure {
                faults.push(self.fault(kind, &self.kinds[k], detail, ctx));
                // Undo any erroneous state the failed attempt left behind.
                let _ = self.modules[k].restore(&checkpoint);
                if k != self.primary {
                    // Keep the primary at its checkpoint too.
                    let _ = self.modules[self.primary].restore(&checkpoint);
                }
            }
        }
        faults.push(self.fault(
            FaultKind::Design,
            "recovery-block",
            "all modules failed acceptance; block failure".into(),
            ctx,
        ));
        Ok(faults)
    }

    fn process_n_version(
        &mut self,
        msg: &Message,
        ctx: &mut Ctx,
    ) -> Result<Vec<Message>, ComponentError> {
        let voter = self.config.voter.expect("validated");
        let mut faults: Vec<Message> = Vec::new();
        let mut runs: Vec<(usize, Vec<Message>)> = Vec::new();
        for k in 0..self.modules.len() {
            match self.modules[k].process_message(msg, ctx) {
                Ok(outputs) if outputs.is_empty() => {
                    faults.push(self.fault(
                        FaultKind::Omission,
                        &self.kinds[k],
                        "module produced no output".into(),
                        ctx,
                    ));
                }
                Ok(outputs) => runs.push((k, outputs)),
                Err(e) => {
                    faults.push(self.fault(
                        FaultKind::Crash,
                        &self.kinds[k],
                        format!("module crashed: {e}"),
                        ctx,
                    ));
                }
            }
        }
        let Some((_, template)) = runs.first() else {
            faults.push(self.fault(
                FaultKind::Design,
                "n-version",
                "no module produced a votable output".into(),
                ctx,
            ));
            return Ok(faults);
        };
        // Key order fixed by the first surviving module's output.
        let keys: Vec<String> = numeric_content(&template[0]).keys().cloned().collect();
        let mut ballots: Vec<(usize, Vec<f64>)> = Vec::new();
        for (k, outputs) in &runs {
            let values = numeric_content(&outputs[0]);
            match keys.iter().map(|key| values.get(key).copied()).collect::<Option<Vec<f64>>>() {
                Some(vector) => ballots.push((*k, vector)),
                None => faults.push(self.fault(
                    FaultKind::Omission,
                    &self.kinds[*k],
                    "output lacks voted keys".into(),
                    ctx,
                )),
            }
        }
        let weighted: Vec<(Vec<f64>, f64)> = ballots
            .iter()
            .map(|(k, v)| (v.clone(), self.config.weights.get(*k).copied().unwrap_or(1.0)))
            .collect();
        let outcome = vote(voter, &weighted, self.config.epsilon)
            .map_err(|e| ComponentError::Failed(format!("vote failed: {e}")))?;
        match outcome {
            VoteResult::NoConsensus => {
                faults.push(self.fault(
                    FaultKind::Design,
                    "n-version",
                    "voter reached no consensus".into(),
                    ctx,
                ));
                Ok(faults)
            }
            VoteResult::Value { value, dissenters } => {
                for d in dissenters {
                    let (k, _) = ballots[d];
                    faults.push(self.fault(
                        FaultKind::Design,
                        &self.kinds[k],
                        "output deviates from voted value beyond epsilon".into(),
                        ctx,
                    ));
                }
                // Prefer a module whose output equals the voted value
                // (clustering voters return a representative). Otherwise
                // synthesize from the template with voted values written in.
                let winner =
                    ballots.iter().find(|(_, v)| *v == value).map(|(k, _)| *k);
                let mut out = match winner {
                    Some(k) => runs.iter().find(|(i, _)| *i == k).expect("ran").1.clone(),
                    None => {
                        let mut synthesized = template.clone();
                        let mut content = synthesized[0].content().clone();
                        for (key, v) in keys.iter().zip(&value) {
                            content.set(key.clone(), Value::text(format_f64(*v)))?;
                        }
                        synthesized[0] = Message::new(
                            synthesized[0].msg_type(),
                            synthesized[0].reliability(),
                            synthesized[0].profile(),
                            content,
                            synthesized[0].timestamp_ms(),
                            synthesized[0].qos().copied(),
                        )?;
                        synthesized
                    }
                };
                out.extend(faults);
                Ok(out)
            }
        }
    }
}

fn format_f64(v: f64) -> String {
    // Shortest round-trip representation; stable across runs.
    format!("{v}")
}

impl Component for FtComponent {
    fn initialize(&mut self, config: &Content, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        let mut out = Vec::new();
        for m in &mut self.modules {
            out.extend(m.initialize(config, ctx)?);
        }
        Ok(out)
    }

    fn process_message(&mut self, msg: &Message, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        match self.config.policy {
            FtPolicy::RecoveryBlock => self.process_recovery_block(msg, ctx),
            FtPolicy::NVersion => self.process_n_version(msg, ctx),
        }
    }

    fn memento(&self) -> Memento {
        let mut state = Content::new();
        state.set("primary", Value::text(self.primary.to_string())).unwrap();
        for (k, m) in self.modules.iter().enumerate() {
            state.set(format!("m{k}"), Value::Map(m.memento().to_content())).unwrap();
        }
        Memento::new("ft/v1", 1, state)
    }

    fn restore(&mut self, memento: &Memento) -> Result<(), ComponentError> {
        memento.expect_schema("ft/v1")?;
        self.primary = memento
            .state
            .u64("primary")
            .ok_or_else(|| ComponentError::MementoContents("missing primary".into()))?
            as usize;
        if self.primary >= self.modules.len() {
            return Err(ComponentError::MementoContents("primary index out of range".into()));
        }
        for (k, m) in self.modules.iter_mut().enumerate() {
            if let Some(Value::Map(c)) = memento.state.get(&format!("m{k}")) {
                m.restore(&Memento::from_content(c)?)?;
            }
        }
        Ok(())
    }

    fn destroy(&mut self) {
        for m in &mut self.modules {
            m.destroy();
        }
    }

    fn execution_cost_us(&self, msg: &Message) -> u64 {
        self.modules[self.primary].execution_cost_us(msg)
    }
}

/// Deployment-config form of an FT shell. A component config that
/// carries `ft_policy` deploys a redundant composite instead of a single
/// module:
///
/// ```toml
/// # inside a deploy request's config map
/// ft_policy = "recovery_block"        # or "n_version"
/// ft_modules = "controller-v2;controller-v1"   # first is the primary
/// ft_epsilon = "0.05"
/// ft_voter = "majority"               # n_version only
/// ft_weights = "1;1"                  # optional
/// # acceptance = { u = "-1;1", ... }  # per-key "lo;hi" ranges
/// # acceptance_step = { u = "0.2" }   # per-key step bounds
/// ```
pub fn ft_deploy_spec(
    config: &Content,
    fault_profile: &str,
) -> Result<Option<(Vec<String>, FtConfig)>, ComponentError> {
    let Some(policy) = config.text("ft_policy") else {
        return Ok(None);
    };
    let policy = match policy {
        "recovery_block" => FtPolicy::RecoveryBlock,
        "n_version" => FtPolicy::NVersion,
        other => {
            return Err(ComponentError::Config(format!("unknown ft_policy {other:?}")))
        }
    };
    let modules: Vec<String> = config
        .text("ft_modules")
        .unwrap_or_default()
        .split(';')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if modules.is_empty() {
        return Err(ComponentError::Config("ft_modules must list at least one kind".into()));
    }
    let epsilon = config.f64("ft_epsilon").unwrap_or(0.0);
    let voter = match config.text("ft_voter") {
        Some(name) => Some(
            Voter::parse(name)
                .ok_or_else(|| ComponentError::Config(format!("unknown ft_voter {name:?}")))?,
        ),
        None => None,
    };
    let weights: Vec<f64> = config
        .text("ft_weights")
        .map(|s| s.split(';').filter_map(|p| p.parse().ok()).collect())
        .unwrap_or_default();
    let mut acceptance = None;
    if let Some(Value::Map(ranges)) = config.get("acceptance") {
        let mut spec = AcceptanceSpec::default();
        for (key, v) in ranges.iter() {
            let text = v
                .as_text()
                .ok_or_else(|| ComponentError::Config(format!("acceptance.{key} must be \"lo;hi\"")))?;
            let parts: Vec<f64> = text.split(';').filter_map(|p| p.parse().ok()).collect();
            if parts.len() != 2 {
                return Err(ComponentError::Config(format!("acceptance.{key} must be \"lo;hi\"")));
            }
            spec.ranges.insert(key.clone(), (parts[0], parts[1]));
        }
        if let Some(Value::Map(steps)) = config.get("acceptance_step") {
            for (key, v) in steps.iter() {
                if let Some(bound) = v.as_f64() {
                    spec.step_bounds.insert(key.clone(), bound);
                }
            }
        }
        acceptance = Some(spec);
    }
    let ft = FtConfig {
        policy,
        acceptance,
        voter,
        epsilon,
        weights,
        fault_profile: fault_profile.to_string(),
    };
    Ok(Some((modules, ft)))
}
