//! The application components of the pendulum control system.
//!
//! * [`Controller`] — periodic state-feedback controller. On each
//!   notification it requests the joint state, and on the reply (or on a
//!   timeout, covered by its estimator) computes `u = -K x_hat` plus a
//!   block of predicted future values, sent en bloc to the actuator
//!   proxy. Its memento externalizes the estimator state and activation
//!   counters, which is what upgrade and migration carry over.
//! * [`DspProxy`] — runs collocated with the plant, answering sensor
//!   requests with the current state, buffering control blocks, and
//!   stepping the plant model every sample period with hold-last-value
//!   on buffer underrun.
//! * [`StressTask`] — burns a configured slice of processor time per
//!   activation.
//! * [`Worker`] — a bare periodic load with a configured execution cost
//!   (the tasks of the rate-monotonic table experiment).

use crate::component::{Component, ComponentError, Ctx, Memento};
use crate::ft::{EstimatorState, ControlBuffer, BufferPop, FaultEvent, FaultKind};
use crate::harness::plant::{
    matrix_from_value, matrix_value, mat_vec, plant_step, vector_from_value, vector_value,
    PlantModel,
};
use crate::kernel::ServiceKind;
use crate::message::{Content, Message, QosSpec, Reliability, Value};

fn text_field(c: &Content, key: &str) -> Result<String, ComponentError> {
    c.text(key)
        .map(str::to_string)
        .ok_or_else(|| ComponentError::Config(format!("missing {key}")))
}

fn matrix_field(c: &Content, key: &str) -> Result<Vec<Vec<f64>>, ComponentError> {
    c.get(key)
        .and_then(matrix_from_value)
        .ok_or_else(|| ComponentError::Config(format!("missing or malformed matrix {key}")))
}

fn vector_field(c: &Content, key: &str) -> Result<Vec<f64>, ComponentError> {
    c.get(key)
        .and_then(vector_from_value)
        .ok_or_else(|| ComponentError::Config(format!("missing or malformed vector {key}")))
}

fn f64_field(c: &Content, key: &str, default: f64) -> f64 {
    c.f64(key).unwrap_or(default)
}

/// Serializes a plant model into component config content.
pub fn plant_config_content(p: &PlantModel) -> Content {
    let mut c = Content::new();
    c.set("a", matrix_value(&p.a)).unwrap();
    c.set("b", matrix_value(&p.b)).unwrap();
    c.set("x0", vector_value(&p.x0)).unwrap();
    c.set("h_ms", Value::text(p.h_ms.to_string())).unwrap();
    c.set("noise_bound", Value::text(p.noise_bound.to_string())).unwrap();
    c.set("state_bound", Value::text(p.state_bound.to_string())).unwrap();
    c
}

fn plant_from_content(c: &Content) -> Result<PlantModel, ComponentError> {
    Ok(PlantModel {
        a: matrix_field(c, "a")?,
        b: matrix_field(c, "b")?,
        x0: vector_field(c, "x0")?,
        h_ms: f64_field(c, "h_ms", 15.0),
        noise_bound: f64_field(c, "noise_bound", 0.0),
        state_bound: f64_field(c, "state_bound", 1e9),
    })
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

const CONTROLLER_SCHEMA: &str = "pendulum-controller/v1";

pub struct Controller {
    profile: String,
    sensor_profile: String,
    gain_label: String,
    k: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    estimator: EstimatorState,
    period_ms: u64,
    timeout_ms: u64,
    block_depth: usize,
    cost_us: u64,
    pending: Option<u64>,
    last_activation: u64,
    last_u: Vec<f64>,
    audit_seq: u64,
}

impl Controller {
    pub fn empty() -> Box<dyn Component> {
        Box::new(Controller {
            profile: String::new(),
            sensor_profile: String::new(),
            gain_label: String::new(),
            k: Vec::new(),
            a: Vec::new(),
            b: Vec::new(),
            estimator: EstimatorState::new(vec![vec![1.0]], vec![vec![0.0]], vec![0.0])
                .expect("placeholder"),
            period_ms: 15,
            timeout_ms: 8,
            block_depth: 1,
            cost_us: 300,
            pending: None,
            last_activation: 0,
            last_u: Vec::new(),
            audit_seq: 0,
        })
    }

    fn audit(&mut self, c: &mut Content) {
        c.set("audit_src", Value::text(format!("controller:{}", self.profile))).unwrap();
        c.set("audit_seq", Value::text(self.audit_seq.to_string())).unwrap();
        self.audit_seq += 1;
    }

    /// `u = -K x_hat` now, plus closed-loop predictions for the next
    /// `block_depth` activations, shipped en bloc. The first entry is
    /// consumed by the very next plant tick, so the lookahead entries are
    /// what carry the actuator through `block_depth` lost messages.
    fn compute_and_emit(
        &mut self,
        activation: u64,
        estimated: bool,
        ctx: &mut Ctx,
    ) -> Result<Vec<Message>, ComponentError> {
        let mut out = Vec::new();
        let mut x = self.estimator.estimate().to_vec();
        let mut block: Vec<Vec<f64>> = Vec::with_capacity(self.block_depth + 1);
        for _ in 0..=self.block_depth {
            let u: Vec<f64> = mat_vec(&self.k, &x).iter().map(|v| -v).collect();
            // Predict the next state under the value just committed.
            let bu = mat_vec(&self.b, &u);
            x = mat_vec(&self.a, &x).iter().zip(&bu).map(|(a, b)| a + b).collect();
            block.push(u);
        }
        self.last_u = block[0].clone();
        self.last_activation = activation;

        let mut c = Content::new();
        c.set("start", Value::text(activation.to_string()))?;
        c.set("reply_to", Value::text(self.profile.clone()))?;
        for (j, u) in block.iter().enumerate() {
            c.set(format!("u{j}"), vector_value(u))?;
        }
        self.audit(&mut c);
        out.push(Message::new(
            "ControlBlock",
            Reliability::BestEffort,
            self.sensor_profile.clone(),
            c,
            ctx.now_ms,
            Some(QosSpec::periodic(self.period_ms)),
        )?);

        // Telemetry for the run trace.
        let mut t = Content::new();
        t.set("activation", Value::text(activation.to_string()))?;
        t.set("nominal_ms", Value::text((activation * self.period_ms).to_string()))?;
        t.set("estimated", Value::text(if estimated { "1" } else { "0" }))?;
        t.set("u", vector_value(&self.last_u))?;
        out.push(Message::new(
            "ControlRecord",
            Reliability::BestEffort,
            ServiceKind::FaultLog.profile_on(ctx.node_id),
            t,
            ctx.now_ms,
            None,
        )?);
        Ok(out)
    }

    fn on_tick(&mut self, activation: u64, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        let mut out = Vec::new();
        if let Some(stale) = self.pending.take() {
            // The timeout notification never reached us (it was racing a
            // migration); cover the activation with the estimator now so
            // no control emission is lost.
            self.estimator.step(None, &self.last_u.clone()).map_err(|e| {
                ComponentError::Failed(format!("estimator: {e}"))
            })?;
            out.extend(self.compute_and_emit(stale, true, ctx)?);
            out.push(
                FaultEvent::new(
                    FaultKind::Omission,
                    format!("controller:{}", self.profile),
                    format!("activation {stale} covered without a timeout tick"),
                    ctx.now_ms,
                )
                .to_message(&ServiceKind::FaultLog.profile_on(ctx.node_id)),
            );
        }
        self.pending = Some(activation);

        let mut c = Content::new();
        c.set("activation", Value::text(activation.to_string()))?;
        c.set("reply_to", Value::text(self.profile.clone()))?;
        self.audit(&mut c);
        out.push(Message::new(
            "SensorRequest",
            Reliability::BestEffort,
            self.sensor_profile.clone(),
            c,
            ctx.now_ms,
            Some(QosSpec::periodic(self.period_ms)),
        )?);

        // One-shot timeout so a lost reply cannot stall the loop.
        let fire_at = ctx.now_ms + self.timeout_ms;
        let mut s = Content::new();
        s.set("target", Value::text(self.profile.clone()))?;
        s.set("period_ms", Value::text(self.timeout_ms.to_string()))?;
        s.set("phase_ms", Value::text((fire_at - self.timeout_ms).to_string()))?;
        s.set("qos_period_ms", Value::text(self.period_ms.to_string()))?;
        s.set("count", Value::text("1"))?;
        s.set("tag", Value::text(format!("timeout:{activation}")))?;
        // The scheduling request carries the loop's QoS so it rides the
        // control-priority dispatcher instead of the default queue.
        out.push(Message::new(
            "Schedule",
            Reliability::BestEffort,
            ServiceKind::Notifier.profile_on(ctx.node_id),
            s,
            ctx.now_ms,
            Some(QosSpec::periodic(self.period_ms)),
        )?);
        Ok(out)
    }

    fn on_sensor_reply(
        &mut self,
        msg: &Message,
        ctx: &mut Ctx,
    ) -> Result<Vec<Message>, ComponentError> {
        let activation = msg.content().u64("activation").unwrap_or(0);
        if self.pending != Some(activation) {
            return Ok(vec![]); // stale or duplicate reply
        }
        self.pending = None;
        let x = vector_field(msg.content(), "x")?;
        let last_u = self.last_u.clone();
        self.estimator
            .step(Some(&x), &last_u)
            .map_err(|e| ComponentError::Failed(format!("estimator: {e}")))?;
        self.compute_and_emit(activation, false, ctx)
    }

    fn on_timeout(&mut self, activation: u64, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        if self.pending != Some(activation) {
            return Ok(vec![]); // reply already arrived
        }
        self.pending = None;
        let last_u = self.last_u.clone();
        self.estimator
            .step(None, &last_u)
            .map_err(|e| ComponentError::Failed(format!("estimator: {e}")))?;
        let mut out = self.compute_and_emit(activation, true, ctx)?;
        out.push(
            FaultEvent::new(
                FaultKind::Omission,
                format!("controller:{}", self.profile),
                format!("no sensor reply for activation {activation} within {} ms", self.timeout_ms),
                ctx.now_ms,
            )
            .to_message(&ServiceKind::FaultLog.profile_on(ctx.node_id)),
        );
        Ok(out)
    }
}

impl Component for Controller {
    fn initialize(&mut self, config: &Content, _ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        self.profile = text_field(config, "profile")?;
        self.sensor_profile = text_field(config, "sensor_profile")?;
        self.gain_label = text_field(config, "gain_label")?;
        self.k = matrix_field(config, "k")?;
        self.a = matrix_field(config, "a")?;
        self.b = matrix_field(config, "b")?;
        let x0 = vector_field(config, "x0")?;
        self.estimator = EstimatorState::new(self.a.clone(), self.b.clone(), x0)
            .map_err(|e| ComponentError::Config(e.to_string()))?;
        self.period_ms = config.u64("period_ms").unwrap_or(15);
        self.timeout_ms = config.u64("timeout_ms").unwrap_or(8);
        self.block_depth = config.u64("block_depth").unwrap_or(1) as usize;
        self.cost_us = config.u64("cost_us").unwrap_or(300);
        self.last_u = vec![0.0; self.b.first().map(Vec::len).unwrap_or(1)];
        Ok(vec![])
    }

    fn process_message(&mut self, msg: &Message, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        match msg.msg_type() {
            "Notify" => match msg.content().text("tag") {
                Some(tag) if tag.starts_with("timeout:") => {
                    let activation = tag["timeout:".len()..].parse().unwrap_or(0);
                    self.on_timeout(activation, ctx)
                }
                _ => {
                    let activation = msg.content().u64("k").unwrap_or(0);
                    self.on_tick(activation, ctx)
                }
            },
            "SensorReply" => self.on_sensor_reply(msg, ctx),
            _ => Ok(vec![]),
        }
    }

    fn memento(&self) -> Memento {
        let mut state = Content::new();
        state.set("gain_label", Value::text(self.gain_label.clone())).unwrap();
        state.set("last_activation", Value::text(self.last_activation.to_string())).unwrap();
        state.set("audit_seq", Value::text(self.audit_seq.to_string())).unwrap();
        state.set("estimate", vector_value(self.estimator.estimate())).unwrap();
        state.set("last_u", vector_value(&self.last_u)).unwrap();
        if let Some(p) = self.pending {
            state.set("pending", Value::text(p.to_string())).unwrap();
        }
        Memento::new(CONTROLLER_SCHEMA, 1, state)
    }

    fn restore(&mut self, memento: &Memento) -> Result<(), ComponentError> {
        memento.expect_schema(CONTROLLER_SCHEMA)?;
        let s = &memento.state;
        self.last_activation = s.u64("last_activation").unwrap_or(0);
        self.audit_seq = s.u64("audit_seq").unwrap_or(0);
        self.pending = s.u64("pending");
        if let Some(x) = s.get("estimate").and_then(vector_from_value) {
            self.estimator
                .set_estimate(x)
                .map_err(|e| ComponentError::MementoContents(e.to_string()))?;
        }
        if let Some(u) = s.get("last_u").and_then(vector_from_value) {
            self.last_u = u;
        }
        Ok(())
    }

    fn execution_cost_us(&self, _msg: &Message) -> u64 {
        self.cost_us
    }
}

// ---------------------------------------------------------------------------
// DSP proxy (actuator + sensor front end, collocated with the plant)
// ---------------------------------------------------------------------------

const DSP_SCHEMA: &str = "dsp-proxy/v1";

pub struct DspProxy {
    plant: PlantModel,
    x: Vec<f64>,
    buffer: ControlBuffer,
    held_u: Vec<f64>,
    tick: u64,
    diverged: bool,
    stale_pops: u64,
    cost_us: u64,
    audit_seq: u64,
    profile: String,
}

impl DspProxy {
    pub fn empty() -> Box<dyn Component> {
        Box::new(DspProxy {
            plant: PlantModel {
                a: vec![vec![1.0]],
                b: vec![vec![0.0]],
                h_ms: 15.0,
                x0: vec![0.0],
                noise_bound: 0.0,
                state_bound: 1e9,
            },
            x: vec![0.0],
            buffer: ControlBuffer::new(1),
            held_u: vec![0.0],
            tick: 0,
            diverged: false,
            stale_pops: 0,
            cost_us: 100,
            audit_seq: 0,
            profile: String::new(),
        })
    }

    fn on_tick(&mut self, k: u64, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        if self.diverged {
            return Ok(vec![]);
        }
        self.tick = k;
        // The control computed for activation k-1 drives the step into
        // tick k; underrun holds the last applied value.
        if k > 0 {
            match self.buffer.pop(k - 1) {
                BufferPop::Value(u) => self.held_u = u,
                BufferPop::Stale => self.stale_pops += 1,
            }
        }
        let (next, diverged) = plant_step(&self.plant, &self.x, &self.held_u, ctx.rng);
        self.x = next;

        let mut out = Vec::new();
        let mut t = Content::new();
        t.set("x", vector_value(&self.x))?;
        t.set("u", vector_value(&self.held_u))?;
        out.push(Message::new(
            "PlantState",
            Reliability::BestEffort,
            ServiceKind::FaultLog.profile_on(ctx.node_id),
            t,
            ctx.now_ms,
            None,
        )?);
        if diverged {
            self.diverged = true;
            out.push(
                FaultEvent::new(
                    FaultKind::Design,
                    format!("plant:{}", self.profile),
                    format!("state left the divergence bound at tick {k}"),
                    ctx.now_ms,
                )
                .to_message(&ServiceKind::FaultLog.profile_on(ctx.node_id)),
            );
        }
        Ok(out)
    }
}

impl Component for DspProxy {
    fn initialize(&mut self, config: &Content, _ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        self.plant = plant_from_content(config)?;
        self.x = self.plant.x0.clone();
        self.held_u = vec![0.0; self.plant.input_dim().max(1)];
        self.buffer = ControlBuffer::new(config.u64("buffer_depth").unwrap_or(8) as usize);
        self.cost_us = config.u64("cost_us").unwrap_or(100);
        self.profile = config.text("profile").unwrap_or("dsp-proxy").to_string();
        Ok(vec![])
    }

    fn process_message(&mut self, msg: &Message, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        match msg.msg_type() {
            "Notify" => {
                let k = msg.content().u64("k").unwrap_or(0);
                self.on_tick(k, ctx)
            }
            "SensorRequest" => {
                let activation = msg.content().u64("activation").unwrap_or(0);
                let reply_to = text_field(msg.content(), "reply_to")?;
                let mut c = Content::new();
                c.set("activation", Value::text(activation.to_string()))?;
                c.set("x", vector_value(&self.x))?;
                c.set("audit_src", Value::text(format!("dsp:{}", self.profile)))?;
                c.set("audit_seq", Value::text(self.audit_seq.to_string()))?;
                self.audit_seq += 1;
                Ok(vec![Message::new(
                    "SensorReply",
                    Reliability::BestEffort,
                    reply_to,
                    c,
                    ctx.now_ms,
                    msg.qos().copied(),
                )?])
            }
            "ControlBlock" => {
                let start = msg.content().u64("start").unwrap_or(0);
                let mut block = Vec::new();
                for j in 0.. {
                    match msg.content().get(&format!("u{j}")).and_then(vector_from_value) {
                        Some(u) => block.push((start + j as u64, u)),
                        None => break,
                    }
                }
                if !block.is_empty() {
                    self.buffer
                        .push_block(&block)
                        .map_err(|e| ComponentError::Failed(e.to_string()))?;
                }
                Ok(vec![])
            }
            _ => Ok(vec![]),
        }
    }

    fn memento(&self) -> Memento {
        let mut state = Content::new();
        state.set("tick", Value::text(self.tick.to_string())).unwrap();
        state.set("x", vector_value(&self.x)).unwrap();
        state.set("held_u", vector_value(&self.held_u)).unwrap();
        Memento::new(DSP_SCHEMA, 1, state)
    }

    fn restore(&mut self, memento: &Memento) -> Result<(), ComponentError> {
        memento.expect_schema(DSP_SCHEMA)?;
        self.tick = memento.state.u64("tick").unwrap_or(0);
        if let Some(x) = memento.state.get("x").and_then(vector_from_value) {
            self.x = x;
        }
        if let Some(u) = memento.state.get("held_u").and_then(vector_from_value) {
            self.held_u = u;
        }
        Ok(())
    }

    fn execution_cost_us(&self, _msg: &Message) -> u64 {
        self.cost_us
    }
}

// ---------------------------------------------------------------------------
// Synthetic load components
// ---------------------------------------------------------------------------

/// Burns a fixed slice of processor time per activation.
pub struct StressTask {
    burn_us: u64,
}

impl StressTask {
    pub fn empty() -> Box<dyn Component> {
        Box::new(StressTask { burn_us: 1_000_000 })
    }
}

impl Component for StressTask {
    fn initialize(&mut self, config: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        self.burn_us = config.u64("burn_us").unwrap_or(1_000_000);
        Ok(vec![])
    }
    fn process_message(&mut self, _: &Message, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        Ok(vec![])
    }
    fn memento(&self) -> Memento {
        Memento::new("stress/v1", 1, Content::new())
    }
    fn restore(&mut self, m: &Memento) -> Result<(), ComponentError> {
        m.expect_schema("stress/v1")
    }
    fn execution_cost_us(&self, _: &Message) -> u64 {
        self.burn_us
    }
}

/// Bare periodic load with a configured execution cost.
pub struct Worker {
    cost_us: u64,
}

impl Worker {
    pub fn empty() -> Box<dyn Component> {
        Box::new(Worker { cost_us: 0 })
    }
}

impl Component for Worker {
    fn initialize(&mut self, config: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        self.cost_us = config.u64("cost_us").unwrap_or(0);
        Ok(vec![])
    }
    fn process_message(&mut self, _: &Message, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
        Ok(vec![])
    }
    fn memento(&self) -> Memento {
        Memento::new("worker/v1", 1, Content::new())
    }
    fn restore(&mut self, m: &Memento) -> Result<(), ComponentError> {
        m.expect_schema("worker/v1")
    }
    fn execution_cost_us(&self, _: &Message) -> u64 {
        self.cost_us
    }
}

/// Registers every harness component kind at a node.
pub fn register_harness_factories(world: &mut crate::world::World, node: &str) {
    let _ = world.register_factory(node, "pendulum-controller", Controller::empty);
    let _ = world.register_factory(node, "dsp-proxy", DspProxy::empty);
    let _ = world.register_factory(node, "stress", StressTask::empty);
    let _ = world.register_factory(node, "worker", Worker::empty);
    let _ = world.register_factory(node, "sink", sink_factory);
}

/// Accepts anything, emits nothing; the admin requester's report target.
pub fn sink_factory() -> Box<dyn Component> {
    struct Sink;
    impl Component for Sink {
        fn initialize(&mut self, _: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            Ok(vec![])
        }
        fn process_message(&mut self, _: &Message, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            Ok(vec![])
        }
        fn memento(&self) -> Memento {
            Memento::new("sink/v1", 1, Content::new())
        }
        fn restore(&mut self, m: &Memento) -> Result<(), ComponentError> {
            m.expect_schema("sink/v1")
        }
    }
    Box::new(Sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::plant::matrix_value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ctrl_config() -> Content {
        let mut c = Content::new();
        c.set("profile", Value::text("ctrl")).unwrap();
        c.set("sensor_profile", Value::text("dsp")).unwrap();
        c.set("gain_label", Value::text("K")).unwrap();
        // K = [1, 0.5] over a two-state integrator model.
        c.set("k", matrix_value(&[vec![1.0, 0.5]])).unwrap();
        c.set("a", matrix_value(&[vec![1.0, 0.015], vec![0.0, 1.0]])).unwrap();
        c.set("b", matrix_value(&[vec![0.0], vec![0.015]])).unwrap();
        c.set("x0", vector_value(&[0.0, 0.0])).unwrap();
        c.set("period_ms", Value::text("15")).unwrap();
        c.set("block_depth", Value::text("2")).unwrap();
        c
    }

    fn notify(k: u64) -> Message {
        let mut c = Content::new();
        c.set("k", Value::text(k.to_string())).unwrap();
        Message::new("Notify", Reliability::BestEffort, "ctrl", c, k * 15, None).unwrap()
    }

    fn reply(k: u64, x: &[f64]) -> Message {
        let mut c = Content::new();
        c.set("activation", Value::text(k.to_string())).unwrap();
        c.set("x", vector_value(x)).unwrap();
        Message::new("SensorReply", Reliability::BestEffort, "ctrl", c, k * 15 + 5, None).unwrap()
    }

    #[test]
    fn controller_computes_negative_state_feedback() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ctx = Ctx { now_ms: 15, node_id: "n", rng: &mut rng };
        let mut ctrl = Controller::empty();
        ctrl.initialize(&ctrl_config(), &mut ctx).unwrap();

        let out = ctrl.process_message(&notify(1), &mut ctx).unwrap();
        assert!(out.iter().any(|m| m.msg_type() == "SensorRequest"));
        assert!(out.iter().any(|m| m.msg_type() == "Schedule"), "timeout scheduled");

        let out = ctrl.process_message(&reply(1, &[0.1, 0.0]), &mut ctx).unwrap();
        let block = out.iter().find(|m| m.msg_type() == "ControlBlock").unwrap();
        // u = -K x = -(1*0.1 + 0.5*0) = -0.1 (dot product).
        let u0 = block.content().get("u0").and_then(vector_from_value).unwrap();
        assert!((u0[0] + 0.1).abs() < 1e-12, "u0 = {u0:?}");
        // Lookahead entries exist: depth 2 means three values en bloc.
        assert!(block.content().get("u2").is_some());
        assert!(block.content().get("u3").is_none());
    }

    #[test]
    fn controller_zero_state_means_zero_control() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ctx = Ctx { now_ms: 15, node_id: "n", rng: &mut rng };
        let mut ctrl = Controller::empty();
        ctrl.initialize(&ctrl_config(), &mut ctx).unwrap();
        ctrl.process_message(&notify(1), &mut ctx).unwrap();
        let out = ctrl.process_message(&reply(1, &[0.0, 0.0]), &mut ctx).unwrap();
        let block = out.iter().find(|m| m.msg_type() == "ControlBlock").unwrap();
        let u0 = block.content().get("u0").and_then(vector_from_value).unwrap();
        assert_eq!(u0, vec![0.0]);
    }

    #[test]
    fn controller_timeout_uses_estimator_and_reports_omission() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ctx = Ctx { now_ms: 15, node_id: "n", rng: &mut rng };
        let mut ctrl = Controller::empty();
        ctrl.initialize(&ctrl_config(), &mut ctx).unwrap();
        // Seed the estimator with a real measurement first.
        ctrl.process_message(&notify(1), &mut ctx).unwrap();
        ctrl.process_message(&reply(1, &[0.1, 0.0]), &mut ctx).unwrap();
        // Next activation: no reply, the timeout notification fires.
        ctrl.process_message(&notify(2), &mut ctx).unwrap();
        let mut c = Content::new();
        c.set("k", Value::text("1")).unwrap();
        c.set("tag", Value::text("timeout:2")).unwrap();
        let timeout =
            Message::new("Notify", Reliability::BestEffort, "ctrl", c, 38, None).unwrap();
        let out = ctrl.process_message(&timeout, &mut ctx).unwrap();
        assert!(out.iter().any(|m| m.msg_type() == "ControlBlock"), "estimator covered");
        assert!(out.iter().any(|m| m.msg_type() == "FaultEvent"), "omission reported");
        // A late reply for the covered activation is ignored.
        let out = ctrl.process_message(&reply(2, &[0.2, 0.0]), &mut ctx).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn dsp_proxy_answers_holds_and_dedups() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ctx = Ctx { now_ms: 0, node_id: "n", rng: &mut rng };
        let mut dsp = DspProxy::empty();
        let mut cfg = plant_config_content(&PlantModel {
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            b: vec![vec![1.0], vec![0.0]],
            h_ms: 15.0,
            x0: vec![0.5, 0.0],
            noise_bound: 0.0,
            state_bound: 10.0,
        });
        cfg.set("profile", Value::text("dsp")).unwrap();
        dsp.initialize(&cfg, &mut ctx).unwrap();

        // Sensor request is answered with the current state.
        let mut c = Content::new();
        c.set("activation", Value::text("1")).unwrap();
        c.set("reply_to", Value::text("ctrl")).unwrap();
        let req = Message::new("SensorRequest", Reliability::BestEffort, "dsp", c, 15, None).unwrap();
        let out = dsp.process_message(&req, &mut ctx).unwrap();
        let rep = out.iter().find(|m| m.msg_type() == "SensorReply").unwrap();
        assert_eq!(rep.content().get("x").and_then(vector_from_value).unwrap(), vec![0.5, 0.0]);

        // Control block buffers; a later overlapping block wins.
        let mut c = Content::new();
        c.set("start", Value::text("1")).unwrap();
        c.set("u0", vector_value(&[1.0])).unwrap();
        c.set("u1", vector_value(&[1.0])).unwrap();
        let b1 = Message::new("ControlBlock", Reliability::BestEffort, "dsp", c, 15, None).unwrap();
        dsp.process_message(&b1, &mut ctx).unwrap();
        let mut c = Content::new();
        c.set("start", Value::text("1")).unwrap();
        c.set("u0", vector_value(&[2.0])).unwrap();
        let b2 = Message::new("ControlBlock", Reliability::BestEffort, "dsp", c, 16, None).unwrap();
        dsp.process_message(&b2, &mut ctx).unwrap();

        // Tick 2 applies the value for activation 1: the newer block's 2.0.
        let mut c = Content::new();
        c.set("k", Value::text("2")).unwrap();
        let tick = Message::new("Notify", Reliability::BestEffort, "dsp", c, 30, None).unwrap();
        let out = dsp.process_message(&tick, &mut ctx).unwrap();
        let plant = out.iter().find(|m| m.msg_type() == "PlantState").unwrap();
        let x = plant.content().get("x").and_then(vector_from_value).unwrap();
        assert_eq!(x, vec![2.5, 0.0], "x = x + B*u with u = 2");

        // Tick 3 consumes the first block's lookahead entry (activation
        // 2, value 1.0): buffered autonomy, not hold-last.
        let mut c = Content::new();
        c.set("k", Value::text("3")).unwrap();
        let tick = Message::new("Notify", Reliability::BestEffort, "dsp", c, 45, None).unwrap();
        let out = dsp.process_message(&tick, &mut ctx).unwrap();
        let plant = out.iter().find(|m| m.msg_type() == "PlantState").unwrap();
        let x = plant.content().get("x").and_then(vector_from_value).unwrap();
        assert_eq!(x, vec![3.5, 0.0]);

        // Tick 4 finds nothing buffered: hold-last keeps applying 1.0.
        let mut c = Content::new();
        c.set("k", Value::text("4")).unwrap();
        let tick = Message::new("Notify", Reliability::BestEffort, "dsp", c, 60, None).unwrap();
        let out = dsp.process_message(&tick, &mut ctx).unwrap();
        let plant = out.iter().find(|m| m.msg_type() == "PlantState").unwrap();
        let x = plant.content().get("x").and_then(vector_from_value).unwrap();
        assert_eq!(x, vec![4.5, 0.0]);
    }

    #[test]
    fn stress_and_worker_cost_model() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut ctx = Ctx { now_ms: 0, node_id: "n", rng: &mut rng };
        let mut stress = StressTask::empty();
        stress.initialize(&Content::new(), &mut ctx).unwrap();
        let m = Message::new("Notify", Reliability::BestEffort, "s", Content::new(), 0, None).unwrap();
        assert_eq!(stress.execution_cost_us(&m), 1_000_000);

        let mut worker = Worker::empty();
        let mut cfg = Content::new();
        cfg.set("cost_us", Value::text("14500")).unwrap();
        worker.initialize(&cfg, &mut ctx).unwrap();
        assert_eq!(worker.execution_cost_us(&m), 14_500);
    }
}
