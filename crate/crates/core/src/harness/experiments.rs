//! Scripted experiments on the simulated control system.
//!
//! Each experiment builds a world from plant/channel configs, runs it on
//! the virtual clock under a seed, and reduces the trace to the few
//! numbers its claim is about. Identical inputs give byte-identical
//! bundles.

use crate::config::{ChannelConfig, PlantConfig};
use crate::harness::components::{plant_config_content, register_harness_factories};
use crate::harness::metrics::{
    activation_audit, audit_duplicates, cost_rate, divergence_at, metrics_table, peak_state_norm,
    task_metrics, TaskMetrics,
};
use crate::harness::plant::{matrix_value, rollout_cost, PlantModel};
use crate::kernel::{RmPlacement, ServiceKind, ThreadSchedulingRule};
use crate::message::{Content, Message, QosSpec, Reliability, Value};
use crate::sched::sim::{simulate_jobs, JobSpec, Policy, ScheduleTrace, SimOptions};
use crate::sched::CriticalSection;
use crate::services::notifier::NotificationSchedule;
use crate::time::{ms_to_us, Micros};
use crate::trace::{DeliveryEventKind, TraceBundle};
use crate::world::{ScriptAction, World, WorldError};
use std::fmt::Write as _;

pub const CONTROL_PERIOD_MS: u64 = 15;
const CONTROLLER_PROFILE: &str = "pendulum-controller";
const DSP_PROFILE: &str = "dsp-proxy";
const ADMIN_CONSOLE: &str = "admin-console";

pub fn default_cartpole() -> PlantConfig {
    PlantConfig::from_str(include_str!("../../configs/cartpole.toml"), "configs/cartpole.toml")
        .expect("shipped plant config is valid")
}

pub fn default_pendubot() -> PlantConfig {
    PlantConfig::from_str(include_str!("../../configs/pendubot.toml"), "configs/pendubot.toml")
        .expect("shipped plant config is valid")
}

pub fn serial_channel() -> ChannelConfig {
    ChannelConfig::from_str(
        include_str!("../../configs/channel-serial.toml"),
        "configs/channel-serial.toml",
    )
    .expect("shipped channel config is valid")
}

pub fn lan_channel() -> ChannelConfig {
    ChannelConfig::from_str(
        include_str!("../../configs/channel-lan.toml"),
        "configs/channel-lan.toml",
    )
    .expect("shipped channel config is valid")
}

fn rm_node(
    world: &mut World,
    id: &str,
    dispatchers: u32,
    periods: Vec<(u64, u32)>,
) -> Result<(), WorldError> {
    let tsr = ThreadSchedulingRule::descending(dispatchers);
    let rule = RmPlacement::new(periods, &tsr)?;
    world.add_node(id, tsr, Box::new(rule), Default::default())
}

fn controller_config(plant: &PlantConfig, gain_label: &str, block_depth: u64) -> Content {
    let gain = plant.gain(gain_label).expect("gain label exists");
    let model = PlantModel::from_config(plant);
    let mut c = plant_config_content(&model);
    c.set("profile", Value::text(CONTROLLER_PROFILE)).unwrap();
    c.set("sensor_profile", Value::text(DSP_PROFILE)).unwrap();
    c.set("gain_label", Value::text(gain_label.to_string())).unwrap();
    c.set("k", matrix_value(&gain.k)).unwrap();
    c.set("period_ms", Value::text(CONTROL_PERIOD_MS.to_string())).unwrap();
    c.set("block_depth", Value::text(block_depth.to_string())).unwrap();
    c
}

fn dsp_config(plant: &PlantConfig, buffer_depth: u64) -> Content {
    let model = PlantModel::from_config(plant);
    let mut c = plant_config_content(&model);
    c.set("profile", Value::text(DSP_PROFILE)).unwrap();
    c.set("buffer_depth", Value::text(buffer_depth.to_string())).unwrap();
    c
}

fn control_schedule(qos_deadline: bool) -> NotificationSchedule {
    let qos = QosSpec {
        period_ms: Some(CONTROL_PERIOD_MS),
        deadline_ms: qos_deadline.then_some(CONTROL_PERIOD_MS),
        ..Default::default()
    };
    NotificationSchedule::new(CONTROLLER_PROFILE, CONTROL_PERIOD_MS, 0, qos).expect("valid")
}

fn tick_schedule() -> NotificationSchedule {
    NotificationSchedule::new(DSP_PROFILE, CONTROL_PERIOD_MS, 0, QosSpec::periodic(CONTROL_PERIOD_MS))
        .expect("valid")
}

// ---------------------------------------------------------------------------
// Scheduling-table experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RmTableCase {
    pub mid_exec_ms: f64,
    pub tasks: Vec<TaskMetrics>,
}

#[derive(Debug)]
pub struct RmTableOutcome {
    pub cases: Vec<RmTableCase>,
    pub summary: String,
    pub last_trace: TraceBundle,
}

/// Three periodic tasks (80/200/350 ms) under the rate-monotonic
/// placement rule, sweeping the middle task's execution time across four
/// cases. The short task's timing should not care; the long task's
/// should degrade monotonically.
pub fn rm_table(seed: u64, duration_ms: u64) -> Result<RmTableOutcome, WorldError> {
    let sweep_ms = [40.0, 85.0, 130.0, 175.0];
    let mut cases = Vec::new();
    let mut summary = String::new();
    let mut last_trace = TraceBundle::default();
    for (case, mid) in sweep_ms.iter().enumerate() {
        let mut w = World::new(seed);
        rm_node(&mut w, "rt", 3, vec![(80, 1), (200, 2), (350, 3)])?;
        register_harness_factories(&mut w, "rt");
        for (profile, period, cost_ms) in [
            ("task80", 80u64, 14.5f64),
            ("task200", 200, *mid),
            ("task350", 350, 49.0),
        ] {
            let mut cfg = Content::new();
            cfg.set("cost_us", Value::text(ms_to_us(cost_ms).unwrap().to_string())).unwrap();
            w.deploy("rt", profile, "worker", cfg)?;
            w.add_schedule(
                "rt",
                NotificationSchedule::new(profile, period, 0, QosSpec::periodic(period))
                    .expect("valid"),
            )?;
        }
        w.run_until(ms_to_us(duration_ms as f64).unwrap());
        let horizon = ms_to_us(duration_ms as f64).unwrap();
        let tasks: Vec<TaskMetrics> = [("task80", 80.0), ("task200", 200.0), ("task350", 350.0)]
            .iter()
            .map(|(p, t)| task_metrics(&w.trace, p, *t, horizon))
            .collect();
        let _ = writeln!(summary, "case {} (200 ms task exec = {mid} ms)", case + 1);
        summary.push_str(&metrics_table(&tasks));
        summary.push('\n');
        cases.push(RmTableCase { mid_exec_ms: *mid, tasks });
        w.trace.summary = summary.clone();
        last_trace = w.trace;
    }
    Ok(RmTableOutcome { cases, summary, last_trace })
}

// ---------------------------------------------------------------------------
// Control-loop worlds
// ---------------------------------------------------------------------------

struct ControlWorld {
    world: World,
    plant: PlantConfig,
}

/// Two nodes: "pc" hosts the controller; "dsp" hosts the plant proxy.
/// The serial channel is the link between them.
fn control_world(
    plant: &PlantConfig,
    channel: &ChannelConfig,
    gain_label: &str,
    block_depth: u64,
    seed: u64,
    single_dispatcher_pc: bool,
) -> Result<ControlWorld, WorldError> {
    let mut w = World::new(seed);
    if single_dispatcher_pc {
        rm_node(&mut w, "pc", 1, vec![])?;
    } else {
        rm_node(&mut w, "pc", 2, vec![(CONTROL_PERIOD_MS, 1), (5000, 2)])?;
    }
    rm_node(&mut w, "dsp", 1, vec![])?;
    w.connect("pc", "dsp", channel.link_model(), channel.link_model())?;
    register_harness_factories(&mut w, "pc");
    register_harness_factories(&mut w, "dsp");
    w.deploy("dsp", DSP_PROFILE, "dsp-proxy", dsp_config(plant, block_depth.max(8)))?;
    w.deploy("pc", CONTROLLER_PROFILE, "pendulum-controller", controller_config(plant, gain_label, block_depth))?;
    w.add_schedule("dsp", tick_schedule())?;
    w.add_schedule("pc", control_schedule(true))?;
    Ok(ControlWorld { world: w, plant: plant.clone() })
}

#[derive(Debug)]
pub struct StressOutcome {
    pub control: TaskMetrics,
    pub diverged: Option<Micros>,
    pub peak_state: f64,
    pub envelope: f64,
    pub summary: String,
    pub trace: TraceBundle,
}

/// Periodic control with a concurrent stress task (5 s period, 1 s of
/// processor burn). At lower priority the stress is invisible to the
/// loop; in the equal-priority negative control it stalls the single
/// dispatcher and the control task misses deadlines.
pub fn stress(
    plant: &PlantConfig,
    channel: &ChannelConfig,
    seed: u64,
    duration_ms: u64,
    negative_control: bool,
) -> Result<StressOutcome, WorldError> {
    let cw = control_world(plant, channel, "K2", 1, seed, negative_control)?;
    let mut w = cw.world;
    let mut cfg = Content::new();
    cfg.set("burn_us", Value::text("1000000")).unwrap();
    w.deploy("pc", "stress-task", "stress", cfg)?;
    // First activation at t = 20 s.
    let stress_schedule =
        NotificationSchedule::new("stress-task", 5000, 15_000, QosSpec::periodic(5000))
            .expect("valid");
    w.add_schedule("pc", stress_schedule)?;
    w.run_until(ms_to_us(duration_ms as f64).unwrap());

    let control = task_metrics(
        &w.trace,
        CONTROLLER_PROFILE,
        CONTROL_PERIOD_MS as f64,
        ms_to_us(duration_ms as f64).unwrap(),
    );
    let diverged = divergence_at(&w.trace);
    let peak_state = peak_state_norm(&w.trace);
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "stress experiment ({}), duration {duration_ms} ms",
        if negative_control { "negative control: equal priority" } else { "stress at lower priority" }
    );
    summary.push_str(&metrics_table(std::slice::from_ref(&control)));
    let _ = writeln!(summary, "peak |x|inf = {peak_state:.4} (envelope {})", cw.plant.envelope);
    if let Some(t) = diverged {
        let _ = writeln!(summary, "DIVERGED at {} ms", t / 1000);
    }
    w.trace.summary = summary.clone();
    Ok(StressOutcome {
        control,
        diverged,
        peak_state,
        envelope: cw.plant.envelope,
        summary,
        trace: w.trace,
    })
}

#[derive(Debug)]
pub struct UpgradeOutcome {
    pub pre_cost_rate: f64,
    pub post_cost_rate: f64,
    pub missing_activations: Vec<u64>,
    pub nominal_cost_old: f64,
    pub nominal_cost_new: f64,
    pub upgraded_at: Option<Micros>,
    pub diverged: Option<Micros>,
    pub peak_state: f64,
    pub envelope: f64,
    pub summary: String,
    pub trace: TraceBundle,
}

/// Runtime controller replacement at `swap_ms`: the baseline gain runs
/// first, then an admin request swaps in the better gain mid-flight with
/// the memento carrying the estimator state across.
pub fn upgrade(
    plant: &PlantConfig,
    channel: &ChannelConfig,
    seed: u64,
    duration_ms: u64,
    swap_ms: u64,
) -> Result<UpgradeOutcome, WorldError> {
    // The "better controller" claim is checked numerically up front: the
    // new gain must give a lower quadratic cost on the nominal model.
    let h_s = plant.h_ms / 1000.0;
    let old = plant.gain("K1").expect("K1 shipped");
    let new = plant.gain("K2").expect("K2 shipped");
    let nominal_cost_old = rollout_cost(&plant.a, &plant.b, &old.k, &plant.x0, h_s, 2000);
    let nominal_cost_new = rollout_cost(&plant.a, &plant.b, &new.k, &plant.x0, h_s, 2000);

    let cw = control_world(plant, channel, "K1", 1, seed, false)?;
    let mut w = cw.world;
    rm_node(&mut w, "admin", 1, vec![])?;
    w.connect("admin", "pc", lan_channel().link_model(), lan_channel().link_model())?;
    register_harness_factories(&mut w, "admin");
    w.deploy("admin", ADMIN_CONSOLE, "sink", Content::new())?;

    let mut body = Content::new();
    body.set("profile", Value::text(CONTROLLER_PROFILE)).unwrap();
    body.set("kind", Value::text("pendulum-controller")).unwrap();
    body.set("reply_to", Value::text(ADMIN_CONSOLE)).unwrap();
    let mut overlay = Content::new();
    overlay.set("gain_label", Value::text("K2")).unwrap();
    overlay.set("k", matrix_value(&new.k)).unwrap();
    body.set("config", Value::Map(overlay)).unwrap();
    let request = Message::new(
        "Upgrade",
        Reliability::Reliable,
        ServiceKind::Lifecycle.profile_on("pc"),
        body,
        swap_ms,
        None,
    )
    .expect("valid upgrade request");
    w.schedule_script(
        ms_to_us(swap_ms as f64).unwrap(),
        ScriptAction::Submit { node: "admin".into(), message: request },
    );
    w.run_until(ms_to_us(duration_ms as f64).unwrap());

    let upgraded_at = w
        .trace
        .delivery
        .iter()
        .find(|r| r.event == DeliveryEventKind::Upgrade)
        .and_then(|r| r.end_us);
    let swap_us = ms_to_us(swap_ms as f64).unwrap();
    let pre_cost_rate = cost_rate(&w.trace, ms_to_us(10_000.0).unwrap(), swap_us, h_s);
    let post_cost_rate = cost_rate(
        &w.trace,
        swap_us + ms_to_us(5_000.0).unwrap(),
        ms_to_us(duration_ms as f64).unwrap() - ms_to_us(5_000.0).unwrap(),
        h_s,
    );
    let diverged = divergence_at(&w.trace);
    let peak_state = peak_state_norm(&w.trace);
    let (missing_activations, _) = activation_audit(&w.trace, duration_ms / CONTROL_PERIOD_MS - 2);
    let mut summary = String::new();
    let _ = writeln!(summary, "upgrade experiment: K1 -> K2 at {swap_ms} ms");
    let _ = writeln!(summary, "activations missing across the swap: {}", missing_activations.len());
    let _ = writeln!(summary, "nominal rollout cost: K1 = {nominal_cost_old:.6}, K2 = {nominal_cost_new:.6}");
    let _ = writeln!(summary, "measured cost rate: pre = {pre_cost_rate:.8}, post = {post_cost_rate:.8}");
    let _ = writeln!(summary, "peak |x|inf = {peak_state:.4} (envelope {})", cw.plant.envelope);
    w.trace.summary = summary.clone();
    Ok(UpgradeOutcome {
        pre_cost_rate,
        post_cost_rate,
        missing_activations,
        nominal_cost_old,
        nominal_cost_new,
        upgraded_at,
        diverged,
        peak_state,
        envelope: cw.plant.envelope,
        summary,
        trace: w.trace,
    })
}

#[derive(Debug)]
pub struct MigrateOutcome {
    pub missing_activations: Vec<u64>,
    pub duplicated_activations: Vec<u64>,
    pub audit_duplicates: Vec<(String, u64)>,
    pub rebind_us: Option<Micros>,
    pub migrated_at: Option<Micros>,
    pub diverged: Option<Micros>,
    pub peak_state: f64,
    pub envelope: f64,
    pub expected_activations: u64,
    pub summary: String,
    pub trace: TraceBundle,
}

/// Runtime controller migration at `move_ms`, from the remote computer to
/// the plant-attached one, while the loop keeps running.
pub fn migrate(
    plant: &PlantConfig,
    channel: &ChannelConfig,
    seed: u64,
    duration_ms: u64,
    move_ms: u64,
) -> Result<MigrateOutcome, WorldError> {
    let mut w = World::new(seed);
    rm_node(&mut w, "pc-remote", 2, vec![(CONTROL_PERIOD_MS, 1), (5000, 2)])?;
    rm_node(&mut w, "pc-plant", 2, vec![(CONTROL_PERIOD_MS, 1), (5000, 2)])?;
    rm_node(&mut w, "dsp", 1, vec![])?;
    rm_node(&mut w, "admin", 1, vec![])?;
    // Serial hop to the plant-attached computer, a longer combined path
    // from the remote one, and clean LAN hops between computers.
    w.connect("pc-plant", "dsp", channel.link_model(), channel.link_model())?;
    let mut far = channel.link_model();
    far.delay_us += 1000;
    w.connect("pc-remote", "dsp", far.clone(), far)?;
    w.connect("pc-remote", "pc-plant", lan_channel().link_model(), lan_channel().link_model())?;
    w.connect("admin", "pc-remote", lan_channel().link_model(), lan_channel().link_model())?;
    for n in ["pc-remote", "pc-plant", "dsp", "admin"] {
        register_harness_factories(&mut w, n);
    }
    w.deploy("dsp", DSP_PROFILE, "dsp-proxy", dsp_config(plant, 8))?;
    w.deploy("pc-remote", CONTROLLER_PROFILE, "pendulum-controller", controller_config(plant, "K2", 3))?;
    w.deploy("admin", ADMIN_CONSOLE, "sink", Content::new())?;
    w.add_schedule("dsp", tick_schedule())?;
    w.add_schedule("pc-remote", control_schedule(true))?;

    let mut body = Content::new();
    body.set("profile", Value::text(CONTROLLER_PROFILE)).unwrap();
    body.set("dest", Value::text("pc-plant")).unwrap();
    body.set("reply_to", Value::text(ADMIN_CONSOLE)).unwrap();
    let request = Message::new(
        "Migrate",
        Reliability::Reliable,
        ServiceKind::Lifecycle.profile_on("pc-remote"),
        body,
        move_ms,
        None,
    )
    .expect("valid migrate request");
    w.schedule_script(
        ms_to_us(move_ms as f64).unwrap(),
        ScriptAction::Submit { node: "admin".into(), message: request },
    );
    w.run_until(ms_to_us(duration_ms as f64).unwrap());

    let begin = w
        .trace
        .delivery
        .iter()
        .find(|r| r.event == DeliveryEventKind::MigrateBegin)
        .and_then(|r| r.end_us);
    let complete = w
        .trace
        .delivery
        .iter()
        .find(|r| r.event == DeliveryEventKind::MigrateComplete)
        .and_then(|r| r.end_us);
    let rebind_us = match (begin, complete) {
        (Some(b), Some(c)) => Some(c - b),
        _ => None,
    };
    // Activations with a full round trip before the horizon.
    let expected_activations = duration_ms / CONTROL_PERIOD_MS - 2;
    let (missing, duplicated) = activation_audit(&w.trace, expected_activations);
    let dups = audit_duplicates(&w.trace);
    let diverged = divergence_at(&w.trace);
    let peak_state = peak_state_norm(&w.trace);
    let mut summary = String::new();
    let _ = writeln!(summary, "migration experiment: pc-remote -> pc-plant at {move_ms} ms");
    let _ = writeln!(
        summary,
        "activations expected 1..={expected_activations}: missing {}, duplicated {}",
        missing.len(),
        duplicated.len()
    );
    let _ = writeln!(summary, "per-sender duplicate deliveries: {}", dups.len());
    match rebind_us {
        Some(r) => {
            let _ = writeln!(summary, "rebind completed {} us after migration began", r);
        }
        None => {
            let _ = writeln!(summary, "rebind did not complete");
        }
    }
    let _ = writeln!(summary, "peak |x|inf = {peak_state:.4} (envelope {})", plant.envelope);
    w.trace.summary = summary.clone();
    Ok(MigrateOutcome {
        missing_activations: missing,
        duplicated_activations: duplicated,
        audit_duplicates: dups,
        rebind_us,
        migrated_at: complete,
        diverged,
        peak_state,
        envelope: plant.envelope,
        expected_activations,
        summary,
        trace: w.trace,
    })
}

#[derive(Debug)]
pub struct LtaOutcome {
    pub applied_inputs_equal: bool,
    pub states_equal: bool,
    pub first_difference_at: Option<Micros>,
    pub outage_steps: u64,
    pub block_depth: u64,
    pub estimated_activations: u64,
    pub summary: String,
    pub trace: TraceBundle,
}

/// Local-temporal-autonomy check: a zero-noise run with a k-step
/// communication outage must produce exactly the actuator input sequence
/// of the outage-free run, because the estimator covers the controller's
/// inputs and the en-bloc buffer covers the actuator's.
pub fn lta_outage(
    plant: &PlantConfig,
    seed: u64,
    duration_ms: u64,
    outage_start_ms: u64,
    outage_steps: u64,
    block_depth: u64,
) -> Result<LtaOutcome, WorldError> {
    let mut quiet = plant.clone();
    quiet.noise_bound = 0.0;
    let clean_channel = ChannelConfig { delay_ms: 2.0, jitter_ms: 0.0, loss: 0.0, duplicates: false };

    let run = |with_outage: bool| -> Result<TraceBundle, WorldError> {
        let cw = control_world(&quiet, &clean_channel, "K2", block_depth, seed, false)?;
        let mut w = cw.world;
        if with_outage {
            let from = ms_to_us(outage_start_ms as f64).unwrap();
            let until = from + outage_steps * CONTROL_PERIOD_MS * 1000;
            w.schedule_script(
                0,
                ScriptAction::LinkOutage { a: "pc".into(), b: "dsp".into(), from_us: from, until_us: until },
            );
        }
        w.run_until(ms_to_us(duration_ms as f64).unwrap());
        Ok(w.trace)
    };

    let clean = run(false)?;
    let mut outage = run(true)?;

    let inputs = |t: &TraceBundle| -> Vec<(Micros, Vec<f64>)> {
        t.plant.iter().map(|r| (r.t_us, r.input.clone())).collect()
    };
    let a = inputs(&clean);
    let b = inputs(&outage);
    let applied_inputs_equal = a == b;
    let states_equal = clean.plant.iter().map(|r| &r.state).eq(outage.plant.iter().map(|r| &r.state));
    let first_difference_at = a
        .iter()
        .zip(&b)
        .find(|(x, y)| x != y)
        .map(|(x, _)| x.0)
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len()) as Micros));
    let estimated_activations =
        outage.control.iter().filter(|c| c.estimated).count() as u64;
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "temporal-autonomy outage check: {outage_steps} lost periods, block depth {block_depth}"
    );
    let _ = writeln!(summary, "actuator inputs identical to outage-free run: {applied_inputs_equal}");
    let _ = writeln!(summary, "plant trajectories identical: {states_equal}");
    let _ = writeln!(summary, "activations covered by the estimator: {estimated_activations}");
    outage.summary = summary.clone();
    Ok(LtaOutcome {
        applied_inputs_equal,
        states_equal,
        first_difference_at,
        outage_steps,
        block_depth,
        estimated_activations,
        summary,
        trace: outage,
    })
}

// ---------------------------------------------------------------------------
// Priority-inversion scenario (runs on the scheduling oracle)
// ---------------------------------------------------------------------------

/// The canonical three-job inversion scenario: the lowest-priority job
/// holds a resource the highest-priority one needs while a middle job
/// hogs the processor. Returns the schedule trace and the high-priority
/// job's total blocking time in milliseconds.
pub fn inversion(pip: bool) -> (ScheduleTrace, f64) {
    let ms = |v: f64| ms_to_us(v).unwrap();
    let cs = |offset: f64, len: f64| CriticalSection {
        offset_us: ms(offset),
        len_us: ms(len),
        resource: "R".into(),
    };
    let jobs = vec![
        JobSpec { task: 0, job: 0, release_us: ms(2.0), exec_us: ms(2.0), deadline_us: None, sections: vec![cs(0.0, 1.0)] },
        JobSpec { task: 1, job: 0, release_us: ms(2.0), exec_us: ms(4.0), deadline_us: None, sections: vec![] },
        JobSpec { task: 2, job: 0, release_us: 0, exec_us: ms(4.0), deadline_us: None, sections: vec![cs(1.0, 2.0)] },
    ];
    let trace = simulate_jobs(
        jobs,
        Policy::FixedPriorityRm,
        SimOptions::over(ms(30.0)).with_pip(pip).recording(),
    )
    .expect("canonical scenario is valid");
    let blocked = trace.worst_blocking_us(0) as f64 / 1000.0;
    (trace, blocked)
}

// ---------------------------------------------------------------------------
// Scripted experiments from files
// ---------------------------------------------------------------------------

/// A scripted run, loadable from TOML:
///
/// ```toml
/// duration_ms = 60000
/// seed = 42
/// controller_node = "pc-remote"   # or "pc-plant"
/// gain = "K1"
/// block_depth = 3
///
/// [[event]]
/// at_ms = 20000
/// kind = "start_stress"           # burn_us / period_ms optional
///
/// [[event]]
/// at_ms = 30000
/// kind = "request_upgrade"
/// gain = "K2"
///
/// [[event]]
/// at_ms = 40000
/// kind = "request_migrate"
/// dest = "pc-plant"
///
/// [[event]]
/// at_ms = 50000
/// kind = "inject_sensor_outage"
/// duration_ms = 45
/// ```
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptConfig {
    pub duration_ms: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_controller_node")]
    pub controller_node: String,
    #[serde(default = "default_gain")]
    pub gain: String,
    #[serde(default = "default_block_depth")]
    pub block_depth: u64,
    #[serde(default)]
    pub event: Vec<ScriptEvent>,
}

fn default_seed() -> u64 {
    42
}
fn default_controller_node() -> String {
    "pc-plant".into()
}
fn default_gain() -> String {
    "K1".into()
}
fn default_block_depth() -> u64 {
    3
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub at_ms: u64,
    pub kind: String,
    #[serde(default)]
    pub gain: Option<String>,
    #[serde(default)]
    pub dest: Option<String>,
    #[serde(default)]
    pub duration_ms: Option<u64>,
    #[serde(default)]
    pub burn_us: Option<u64>,
    #[serde(default)]
    pub period_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
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
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

impl ScriptConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text, &path.display().to_string())
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self, ScriptError> {
        let cfg: ScriptConfig = toml::from_str(text)
            .map_err(|source| ScriptError::Toml { path: origin.into(), source: Box::new(source) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ScriptError> {
        if !matches!(self.controller_node.as_str(), "pc-plant" | "pc-remote") {
            return Err(ScriptError::Invalid(format!(
                "controller_node must be \"pc-plant\" or \"pc-remote\", got {:?}",
                self.controller_node
            )));
        }
        for e in &self.event {
            if e.at_ms >= self.duration_ms {
                return Err(ScriptError::Invalid(format!(
                    "event at {} ms lies outside the {} ms duration",
                    e.at_ms, self.duration_ms
                )));
            }
            match e.kind.as_str() {
                "start_stress" | "inject_sensor_outage" => {}
                "request_upgrade" => {
                    if e.gain.is_none() {
                        return Err(ScriptError::Invalid("request_upgrade needs gain".into()));
                    }
                }
                "request_migrate" => {
                    if e.dest.is_none() {
                        return Err(ScriptError::Invalid("request_migrate needs dest".into()));
                    }
                }
                other => {
                    return Err(ScriptError::Invalid(format!("unknown event kind {other:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ScriptOutcome {
    pub diverged: Option<Micros>,
    pub peak_state: f64,
    pub envelope: f64,
    pub missing_activations: Vec<u64>,
    pub summary: String,
    pub trace: TraceBundle,
}

/// Runs a scripted experiment on the full four-node topology: the
/// plant-attached computer, a remote computer, the DSP side of the serial
/// link, and an admin node issuing the scripted requests.
pub fn run_script(
    plant: &PlantConfig,
    channel: &ChannelConfig,
    script: &ScriptConfig,
) -> Result<ScriptOutcome, ScriptError> {
    let mut w = World::new(script.seed);
    rm_node(&mut w, "pc-remote", 2, vec![(CONTROL_PERIOD_MS, 1), (5000, 2)])?;
    rm_node(&mut w, "pc-plant", 2, vec![(CONTROL_PERIOD_MS, 1), (5000, 2)])?;
    rm_node(&mut w, "dsp", 1, vec![])?;
    rm_node(&mut w, "admin", 1, vec![])?;
    w.connect("pc-plant", "dsp", channel.link_model(), channel.link_model())?;
    let mut far = channel.link_model();
    far.delay_us += 1000;
    w.connect("pc-remote", "dsp", far.clone(), far)?;
    w.connect("pc-remote", "pc-plant", lan_channel().link_model(), lan_channel().link_model())?;
    w.connect("admin", "pc-remote", lan_channel().link_model(), lan_channel().link_model())?;
    w.connect("admin", "pc-plant", lan_channel().link_model(), lan_channel().link_model())?;
    for n in ["pc-remote", "pc-plant", "dsp", "admin"] {
        register_harness_factories(&mut w, n);
    }
    w.deploy("dsp", DSP_PROFILE, "dsp-proxy", dsp_config(plant, script.block_depth.max(8)))?;
    if plant.gain(&script.gain).is_none() {
        return Err(ScriptError::Invalid(format!("gain {:?} not in the plant config", script.gain)));
    }
    w.deploy(
        &script.controller_node,
        CONTROLLER_PROFILE,
        "pendulum-controller",
        controller_config(plant, &script.gain, script.block_depth),
    )?;
    w.deploy("admin", ADMIN_CONSOLE, "sink", Content::new())?;
    w.add_schedule("dsp", tick_schedule())?;
    w.add_schedule(&script.controller_node, control_schedule(true))?;

    let mut stress_deployed = false;
    for e in &script.event {
        let at_us = ms_to_us(e.at_ms as f64).unwrap();
        match e.kind.as_str() {
            "start_stress" => {
                if !stress_deployed {
                    let mut cfg = Content::new();
                    cfg.set(
                        "burn_us",
                        Value::text(e.burn_us.unwrap_or(1_000_000).to_string()),
                    )
                    .unwrap();
                    w.deploy(&script.controller_node, "stress-task", "stress", cfg)?;
                    stress_deployed = true;
                }
                let period = e.period_ms.unwrap_or(5000);
                let schedule = NotificationSchedule::new(
                    "stress-task",
                    period,
                    e.at_ms.saturating_sub(period),
                    QosSpec::periodic(period),
                )
                .map_err(|err| ScriptError::Invalid(err.to_string()))?;
                w.schedule_script(
                    at_us,
                    ScriptAction::AddSchedule { node: script.controller_node.clone(), schedule },
                );
            }
            "request_upgrade" => {
                let label = e.gain.clone().expect("validated");
                let gain = plant
                    .gain(&label)
                    .ok_or_else(|| ScriptError::Invalid(format!("gain {label:?} not in the plant config")))?;
                let mut body = Content::new();
                body.set("profile", Value::text(CONTROLLER_PROFILE)).unwrap();
                body.set("kind", Value::text("pendulum-controller")).unwrap();
                body.set("reply_to", Value::text(ADMIN_CONSOLE)).unwrap();
                let mut overlay = Content::new();
                overlay.set("gain_label", Value::text(label)).unwrap();
                overlay.set("k", matrix_value(&gain.k)).unwrap();
                body.set("config", Value::Map(overlay)).unwrap();
                let m = Message::new(
                    "Upgrade",
                    Reliability::Reliable,
                    ServiceKind::Lifecycle.profile_on(&script.controller_node),
                    body,
                    e.at_ms,
                    None,
                )
                .expect("valid upgrade request");
                w.schedule_script(at_us, ScriptAction::Submit { node: "admin".into(), message: m });
            }
            "request_migrate" => {
                let dest = e.dest.clone().expect("validated");
                let mut body = Content::new();
                body.set("profile", Value::text(CONTROLLER_PROFILE)).unwrap();
                body.set("dest", Value::text(dest)).unwrap();
                body.set("reply_to", Value::text(ADMIN_CONSOLE)).unwrap();
                let m = Message::new(
                    "Migrate",
                    Reliability::Reliable,
                    ServiceKind::Lifecycle.profile_on(&script.controller_node),
                    body,
                    e.at_ms,
                    None,
                )
                .expect("valid migrate request");
                w.schedule_script(at_us, ScriptAction::Submit { node: "admin".into(), message: m });
            }
            "inject_sensor_outage" => {
                let until = at_us + ms_to_us(e.duration_ms.unwrap_or(45) as f64).unwrap();
                for pc in ["pc-plant", "pc-remote"] {
                    w.schedule_script(
                        at_us,
                        ScriptAction::LinkOutage {
                            a: pc.into(),
                            b: "dsp".into(),
                            from_us: at_us,
                            until_us: until,
                        },
                    );
                }
            }
            _ => unreachable!("validated"),
        }
    }

    w.run_until(ms_to_us(script.duration_ms as f64).unwrap());

    let diverged = divergence_at(&w.trace);
    let peak_state = peak_state_norm(&w.trace);
    let expected = script.duration_ms / CONTROL_PERIOD_MS - 2;
    let (missing, _) = activation_audit(&w.trace, expected);
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "scripted run: {} events over {} ms (controller on {})",
        script.event.len(),
        script.duration_ms,
        script.controller_node
    );
    let control = task_metrics(
        &w.trace,
        CONTROLLER_PROFILE,
        CONTROL_PERIOD_MS as f64,
        ms_to_us(script.duration_ms as f64).unwrap(),
    );
    summary.push_str(&metrics_table(std::slice::from_ref(&control)));
    let _ = writeln!(summary, "activations missing: {}", missing.len());
    let _ = writeln!(summary, "peak |x|inf = {peak_state:.4} (envelope {})", plant.envelope);
    if let Some(t) = diverged {
        let _ = writeln!(summary, "DIVERGED at {} ms", t / 1000);
    }
    w.trace.summary = summary.clone();
    Ok(ScriptOutcome {
        diverged,
        peak_state,
        envelope: plant.envelope,
        missing_activations: missing,
        summary,
        trace: w.trace,
    })
}
