//! Deterministic multi-node simulation world.
//!
//! Every simulated node owns a kernel (dispatcher queues plus a model of
//! one processor), the standard services, and a local clock that is an
//! affine function of the global virtual time. Nodes exchange frames over
//! links with configurable delay, jitter, loss, duplication, and scripted
//! outage windows. The world advances a single discrete-event loop:
//! timers (notifier ticks, link arrivals, retransmissions, script events)
//! interleave with per-node job completions, with all ties broken by
//! fixed, documented rules, so a run is a pure function of its
//! configuration and seed.
//!
//! Builtin service components (network messenger, network time, notifier,
//! profile registry, lifecycle, fault log) occupy ordinary queue slots;
//! their handlers live here because they mutate kernel and node state
//! that user components never touch.

use crate::component::{
    create_component, Ctx, Delivery, FactoryRegistry, MigrationPackage, Shell, UpgradeOutcome,
};
use crate::ft::{FaultEvent, FaultKind};
use crate::kernel::{
    ComponentAddress, Job, Kernel, PlacementRule, ServiceKind, SlotRef, Submitted,
    ThreadSchedulingRule,
};
use crate::message::{Content, Message, Reliability, Value};
use crate::services::clock::{ClockModel, PingSample};
use crate::services::link::{LinkEndpoint, RetryConfig};
use crate::services::notifier::{NotificationSchedule, Notifier};
use crate::services::registry::Binding;
use crate::time::{AffineClock, Micros};
use crate::trace::{
    AuditRow, ControlRow, DeliveryEventKind, DeliveryRow, FaultRow, PlantRow, TraceBundle,
};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Directional link properties. Delay is `delay_us` plus uniform jitter;
/// loss and duplication are Bernoulli per frame; outage windows drop
/// everything.
#[derive(Debug, Clone)]
pub struct LinkModel {
    pub delay_us: Micros,
    pub jitter_us: Micros,
    pub loss: f64,
    pub duplicate: f64,
    outages: Vec<(Micros, Micros)>,
}

impl LinkModel {
    pub fn ideal() -> Self {
        LinkModel { delay_us: 1000, jitter_us: 0, loss: 0.0, duplicate: 0.0, outages: Vec::new() }
    }

    pub fn new(delay_us: Micros, jitter_us: Micros, loss: f64) -> Self {
        LinkModel { delay_us, jitter_us, loss, duplicate: 0.0, outages: Vec::new() }
    }

    fn in_outage(&self, now: Micros) -> bool {
        self.outages.iter().any(|&(s, e)| now >= s && now < e)
    }
}

#[derive(Debug, Clone)]
enum TimerAction {
    NotifierPoll { node: String },
    LinkArrive { from: String, to: String, bytes: Vec<u8> },
    RetransmitPoll { node: String, peer: String },
    Script(usize),
}

#[derive(Debug)]
struct TimerEntry {
    at_us: Micros,
    seq: u64,
    action: TimerAction,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.at_us, self.seq) == (other.at_us, other.seq)
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at_us, self.seq).cmp(&(other.at_us, other.seq))
    }
}

/// Deferred world actions for experiment scripts.
#[derive(Debug, Clone)]
pub enum ScriptAction {
    /// Submit a message at a node (admin requests, probes).
    Submit { node: String, message: Message },
    /// Register a notification schedule at a node.
    AddSchedule { node: String, schedule: NotificationSchedule },
    /// Drop all frames in both directions between two nodes for a window.
    LinkOutage { a: String, b: String, from_us: Micros, until_us: Micros },
}

/// An in-flight migration, tracked at the source node.
#[derive(Debug)]
struct MigrationSource {
    addr: ComponentAddress,
    reply_to: Option<String>,
    started_us: Micros,
}

pub struct Node {
    pub kernel: Kernel,
    pub notifier: Notifier,
    pub factories: FactoryRegistry,
    pub local_clock: AffineClock,
    endpoints: IndexMap<String, LinkEndpoint>,
    clocks: IndexMap<String, ClockModel>,
    clock_warned: Vec<String>,
    migrations: IndexMap<String, MigrationSource>,
    retry: RetryConfig,
}

impl Node {
    fn endpoint(&mut self, peer: &str) -> &mut LinkEndpoint {
        let retry = self.retry;
        self.endpoints.entry(peer.to_string()).or_insert_with(|| LinkEndpoint::new(retry))
    }

    pub fn peers(&self) -> Vec<String> {
        self.endpoints.keys().cloned().collect()
    }

    pub fn clock_model(&self, peer: &str) -> Option<&ClockModel> {
        self.clocks.get(peer)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldStats {
    pub submissions: u64,
    pub delivered: u64,
    pub undeliverable: u64,
    pub forwarded: u64,
    pub frames_sent: u64,
    pub frames_lost: u64,
    pub crashes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),
    #[error(transparent)]
    Lifecycle(#[from] crate::component::LifecycleError),
}

pub struct World {
    now_us: Micros,
    timer_seq: u64,
    timers: BinaryHeap<Reverse<TimerEntry>>,
    nodes: IndexMap<String, Node>,
    links: IndexMap<(String, String), LinkModel>,
    scripts: Vec<ScriptAction>,
    rng: ChaCha12Rng,
    pub trace: TraceBundle,
    pub stats: WorldStats,
}

impl World {
    pub fn new(seed: u64) -> Self {
        World {
            now_us: 0,
            timer_seq: 0,
            timers: BinaryHeap::new(),
            nodes: IndexMap::new(),
            links: IndexMap::new(),
            scripts: Vec::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
            trace: TraceBundle::default(),
            stats: WorldStats::default(),
        }
    }

    pub fn now_us(&self) -> Micros {
        self.now_us
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.get_mut(id)
    }

    pub fn add_node(
        &mut self,
        id: impl Into<String>,
        tsr: ThreadSchedulingRule,
        rule: Box<dyn PlacementRule>,
        local_clock: AffineClock,
    ) -> Result<(), WorldError> {
        let id = id.into();
        let kernel = Kernel::new(id.clone(), tsr, rule)?;
        self.nodes.insert(
            id,
            Node {
                kernel,
                notifier: Notifier::new(),
                factories: FactoryRegistry::new(),
                local_clock,
                endpoints: IndexMap::new(),
                clocks: IndexMap::new(),
                clock_warned: Vec::new(),
                migrations: IndexMap::new(),
                retry: RetryConfig::default(),
            },
        );
        Ok(())
    }

    /// Connects two nodes with per-direction link models and binds each
    /// other's service profiles so cross-node service messages resolve.
    pub fn connect(
        &mut self,
        a: &str,
        b: &str,
        a_to_b: LinkModel,
        b_to_a: LinkModel,
    ) -> Result<(), WorldError> {
        for id in [a, b] {
            if !self.nodes.contains_key(id) {
                return Err(WorldError::UnknownNode(id.to_string()));
            }
        }
        self.links.insert((a.to_string(), b.to_string()), a_to_b);
        self.links.insert((b.to_string(), a.to_string()), b_to_a);
        for (me, peer) in [(a, b), (b, a)] {
            let node = self.nodes.get_mut(me).expect("checked");
            node.endpoint(peer);
            for kind in ServiceKind::ALL {
                node.kernel
                    .registry_mut()
                    .rebind(&kind.profile_on(peer), Binding::Remote { node_id: peer.to_string() });
            }
        }
        Ok(())
    }

    pub fn register_factory<F>(&mut self, node: &str, kind: &str, f: F) -> Result<(), WorldError>
    where
        F: Fn() -> Box<dyn crate::component::Component> + Send + Sync + 'static,
    {
        self.nodes
            .get_mut(node)
            .ok_or_else(|| WorldError::UnknownNode(node.to_string()))?
            .factories
            .register(kind, f);
        Ok(())
    }

    /// Build-time deployment: instantiate a component and make its profile
    /// resolvable from every node (static deployment knowledge).
    pub fn deploy(
        &mut self,
        node_id: &str,
        profile: &str,
        kind: &str,
        config: Content,
    ) -> Result<ComponentAddress, WorldError> {
        let World { nodes, rng, .. } = self;
        let node =
            nodes.get_mut(node_id).ok_or_else(|| WorldError::UnknownNode(node_id.to_string()))?;
        let mut ctx = Ctx { now_ms: node.local_clock.local_ms(0), node_id, rng };
        let (component, init) = create_component(&node.factories, kind, &config, &mut ctx)?;
        let shell = Shell::new(profile, kind, config, component);
        let addr = node.kernel.register_component(shell)?;
        for msg in init {
            self.route(node_id.to_string(), msg);
        }
        let owner = node_id.to_string();
        for (id, node) in self.nodes.iter_mut() {
            if *id != owner {
                node.kernel
                    .registry_mut()
                    .rebind(profile, Binding::Remote { node_id: owner.clone() });
            }
        }
        Ok(addr)
    }

    pub fn add_schedule(&mut self, node: &str, schedule: NotificationSchedule) -> Result<(), WorldError> {
        let n = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| WorldError::UnknownNode(node.to_string()))?;
        n.notifier.add(schedule);
        self.arm_notifier(node);
        Ok(())
    }

    /// Enables periodic clock-sync pings from a node to all its peers.
    pub fn enable_ping(&mut self, node: &str, period_ms: u64) -> Result<(), WorldError> {
        let profile = ServiceKind::NetworkTime.profile_on(node);
        let schedule = NotificationSchedule::new(profile, period_ms, 0, Default::default())
            .expect("positive period")
            .with_tag("ping");
        self.add_schedule(node, schedule)
    }

    pub fn schedule_script(&mut self, at_us: Micros, action: ScriptAction) {
        let idx = self.scripts.len();
        self.scripts.push(action);
        self.push_timer(at_us, TimerAction::Script(idx));
    }

    fn push_timer(&mut self, at_us: Micros, action: TimerAction) {
        let seq = self.timer_seq;
        self.timer_seq += 1;
        self.timers.push(Reverse(TimerEntry { at_us, seq, action }));
    }

    fn arm_notifier(&mut self, node_id: &str) {
        let node = &self.nodes[node_id];
        if let Some(due_ms) = node.notifier.next_due_ms() {
            let at = world_time_for_local_ms(&node.local_clock, due_ms);
            self.push_timer(at, TimerAction::NotifierPoll { node: node_id.to_string() });
        }
    }

    /// Submits a message at a node, counting stats and tracing failures.
    pub fn route(&mut self, node_id: String, message: Message) {
        let now = self.now_us;
        let node = match self.nodes.get_mut(&node_id) {
            Some(n) => n,
            None => return,
        };
        let profile = message.profile().to_string();
        let msg_type = message.msg_type().to_string();
        match node.kernel.submit(message, now) {
            Ok(Submitted::Local { .. } | Submitted::ViaMessenger { .. }) => {
                self.stats.submissions += 1;
            }
            Err(_) => {
                self.stats.undeliverable += 1;
                self.trace.delivery.push(DeliveryRow {
                    event: DeliveryEventKind::Undeliverable,
                    job_id: 0,
                    msg_type,
                    dispatcher: None,
                    enqueue_us: Some(now),
                    start_us: None,
                    end_us: Some(now),
                    node: node_id,
                    profile,
                    tag: None,
                });
            }
        }
    }

    /// Runs the event loop until the virtual horizon. Returns early only
    /// if a registered stop condition fires (divergence detection hooks
    /// into the fault log).
    pub fn run_until(&mut self, horizon_us: Micros) {
        loop {
            // Candidate completion: the earliest busy node, in node order.
            let mut completion: Option<(Micros, usize)> = None;
            for (i, node) in self.nodes.values_mut().enumerate() {
                if let Some((_, at)) = node.kernel.dispatch(self.now_us, job_cost) {
                    if completion.is_none_or(|(t, _)| at < t) {
                        completion = Some((at, i));
                    }
                }
            }
            let timer_at = self.timers.peek().map(|Reverse(t)| t.at_us);

            // Timers fire before completions at the same instant.
            let next = match (timer_at, completion) {
                (None, None) => None,
                (Some(t), None) => Some((t, true)),
                (None, Some((c, _))) => Some((c, false)),
                (Some(t), Some((c, _))) => Some(if t <= c { (t, true) } else { (c, false) }),
            };
            let Some((at, is_timer)) = next else {
                self.now_us = horizon_us;
                return;
            };
            if at > horizon_us {
                self.now_us = horizon_us;
                for node in self.nodes.values_mut() {
                    node.kernel.sync(horizon_us);
                }
                return;
            }
            // A timer armed with an already-elapsed deadline (work that
            // was stuck behind a long job) fires now; time never rewinds.
            self.now_us = self.now_us.max(at);
            if is_timer {
                let Reverse(entry) = self.timers.pop().expect("peeked");
                self.handle_timer(entry.action);
            } else {
                let (_, idx) = completion.expect("chosen");
                self.handle_completion(idx);
            }
        }
    }

    /// Runs until no work remains (quiescence) or the horizon.
    pub fn run_to_idle(&mut self, horizon_us: Micros) {
        self.run_until(horizon_us);
    }

    fn handle_timer(&mut self, action: TimerAction) {
        match action {
            TimerAction::NotifierPoll { node } => {
                let Some(n) = self.nodes.get_mut(&node) else { return };
                let local_ms = n.local_clock.local_ms(self.now_us);
                let due = n.notifier.due(local_ms);
                for msg in due {
                    self.route(node.clone(), msg);
                }
                self.arm_notifier(&node);
            }
            TimerAction::LinkArrive { from, to, bytes } => self.link_arrive(&from, &to, &bytes),
            TimerAction::RetransmitPoll { node, peer } => {
                let Some(n) = self.nodes.get_mut(&node) else { return };
                let frames = n.endpoint(&peer).poll_retransmits(self.now_us);
                let frames: Vec<Vec<u8>> = frames.into_iter().map(|f| f.bytes).collect();
                for bytes in frames {
                    self.transmit(&node, &peer, bytes);
                }
                self.arm_retransmit(&node, &peer);
            }
            TimerAction::Script(idx) => match self.scripts[idx].clone() {
                ScriptAction::Submit { node, message } => self.route(node, message),
                ScriptAction::AddSchedule { node, schedule } => {
                    let _ = self.add_schedule(&node, schedule);
                }
                ScriptAction::LinkOutage { a, b, from_us, until_us } => {
                    for key in [(a.clone(), b.clone()), (b, a)] {
                        if let Some(link) = self.links.get_mut(&key) {
                            link.outages.push((from_us, until_us));
                        }
                    }
                }
            },
        }
    }

    fn arm_retransmit(&mut self, node: &str, peer: &str) {
        let Some(n) = self.nodes.get_mut(node) else { return };
        if let Some(at) = n.endpoint(peer).next_timeout_us() {
            self.push_timer(
                at,
                TimerAction::RetransmitPoll { node: node.to_string(), peer: peer.to_string() },
            );
        }
    }

    /// Applies the link model and schedules frame arrival(s) at the peer.
    fn transmit(&mut self, from: &str, to: &str, bytes: Vec<u8>) {
        self.stats.frames_sent += 1;
        let Some(link) = self.links.get(&(from.to_string(), to.to_string())) else {
            self.stats.frames_lost += 1;
            return;
        };
        if link.in_outage(self.now_us) || self.rng.random_range(0.0..1.0) < link.loss {
            self.stats.frames_lost += 1;
            return;
        }
        let jitter = if link.jitter_us > 0 { self.rng.random_range(0..=link.jitter_us) } else { 0 };
        let arrive = self.now_us + link.delay_us + jitter;
        let dup = link.duplicate > 0.0 && self.rng.random_range(0.0..1.0) < link.duplicate;
        self.push_timer(
            arrive,
            TimerAction::LinkArrive { from: from.to_string(), to: to.to_string(), bytes: bytes.clone() },
        );
        if dup {
            self.push_timer(
                arrive + 1,
                TimerAction::LinkArrive { from: from.to_string(), to: to.to_string(), bytes },
            );
        }
    }

    fn link_arrive(&mut self, from: &str, to: &str, bytes: &[u8]) {
        let now = self.now_us;
        let Some(node) = self.nodes.get_mut(to) else { return };
        let result = node.endpoint(from).on_frame(bytes, now);
        let input = match result {
            Ok(i) => i,
            Err(e) => {
                self.trace.faults.push(FaultRow {
                    at_us: now,
                    node: to.to_string(),
                    kind: "frame".into(),
                    source: from.to_string(),
                    detail: e.to_string(),
                });
                return;
            }
        };
        let acks: Vec<Vec<u8>> = input.acks.into_iter().map(|f| f.bytes).collect();
        let mut deliveries = Vec::new();
        for msg in input.delivered {
            // Clock translation: the arriving timestamp is in the peer's
            // clock; rewrite it into ours when a model exists.
            let node = self.nodes.get_mut(to).expect("exists");
            let msg = match node.clocks.get(from) {
                Some(cm) if cm.has_samples() => {
                    let translated = cm.translate(msg.timestamp_ms() as f64);
                    msg.with_timestamp(translated.round().max(0.0) as u64)
                }
                _ => {
                    if !node.clock_warned.iter().any(|p| p == from) && !node.clocks.is_empty() {
                        node.clock_warned.push(from.to_string());
                        self.trace.delivery.push(DeliveryRow {
                            event: DeliveryEventKind::ClockWarn,
                            job_id: 0,
                            msg_type: msg.msg_type().to_string(),
                            dispatcher: None,
                            enqueue_us: Some(now),
                            start_us: None,
                            end_us: Some(now),
                            node: to.to_string(),
                            profile: msg.profile().to_string(),
                    tag: None,
                });
                    }
                    msg
                }
            };
            deliveries.push(msg);
        }
        for bytes in acks {
            self.transmit(to, from, bytes);
        }
        for msg in deliveries {
            self.route(to.to_string(), msg);
        }
    }

    fn local_ctx_ms(&self, node_id: &str) -> u64 {
        self.nodes[node_id].local_clock.local_ms(self.now_us)
    }

    fn handle_completion(&mut self, node_index: usize) {
        let now = self.now_us;
        let node_id = self.nodes.get_index(node_index).expect("valid index").0.clone();
        let Some((run, slot)) = self.nodes[node_index].kernel.complete(now) else {
            return;
        };
        let job = run.job;
        let start = run.first_start_us;
        match slot {
            None => self.undeliverable_or_forward(&node_id, job, start),
            Some(SlotRef::Service(kind)) => self.handle_service(&node_id, kind, job),
            Some(SlotRef::User(shell)) => {
                let now_ms = self.local_ctx_ms(&node_id);
                let (delivery, profile) = {
                    let World { rng, .. } = self;
                    let mut ctx = Ctx { now_ms, node_id: node_id.as_ref(), rng };
                    let mut guard = shell.lock().expect("shell lock");
                    (guard.deliver(&job.message, &mut ctx), guard.profile().to_string())
                };
                match delivery {
                    Delivery::Processed(outputs) => {
                        self.stats.delivered += 1;
                        self.record_delivery(&node_id, &profile, &job, start, now);
                        self.record_audit(&node_id, &job.message);
                        self.check_deadline(&node_id, &profile, &job, now);
                        for m in outputs {
                            self.emit_from_component(&node_id, m);
                        }
                    }
                    Delivery::Buffered => {
                        self.stats.delivered += 1;
                        self.record_delivery(&node_id, &profile, &job, start, now);
                        self.check_deadline(&node_id, &profile, &job, now);
                    }
                    Delivery::Undeliverable => {
                        self.undeliverable_or_forward(&node_id, job, start);
                    }
                    Delivery::Failed(e) => {
                        self.stats.delivered += 1;
                        self.stats.crashes += 1;
                        self.record_delivery(&node_id, &profile, &job, start, now);
                        self.trace.faults.push(FaultRow {
                            at_us: now,
                            node: node_id.clone(),
                            kind: FaultKind::Crash.as_str().into(),
                            source: profile,
                            detail: e.to_string(),
                        });
                    }
                }
            }
        }
    }

    /// Emissions from user components: fault events and harness telemetry
    /// peel off into the trace; everything else goes through the kernel.
    fn emit_from_component(&mut self, node_id: &str, m: Message) {
        if m.profile().starts_with("FaultLog@") {
            self.log_sink(node_id, &m);
            return;
        }
        self.route(node_id.to_string(), m);
    }

    fn log_sink(&mut self, node_id: &str, m: &Message) {
        let now = self.now_us;
        match m.msg_type() {
            "FaultEvent" => {
                if let Some(e) = FaultEvent::from_message(m) {
                    self.trace.faults.push(FaultRow {
                        at_us: now,
                        node: node_id.to_string(),
                        kind: e.kind.as_str().into(),
                        source: e.source,
                        detail: e.detail,
                    });
                    self.trace.delivery.push(DeliveryRow {
                        event: DeliveryEventKind::Fault,
                        job_id: 0,
                        msg_type: m.content().text("kind").unwrap_or("?").to_string(),
                        dispatcher: None,
                        enqueue_us: Some(now),
                        start_us: None,
                        end_us: Some(now),
                        node: node_id.to_string(),
                        profile: m.content().text("source").unwrap_or("?").to_string(),
                    tag: None,
                });
                }
            }
            "PlantState" => {
                let state = vector_from(m.content().get("x"));
                let input = vector_from(m.content().get("u"));
                self.trace.plant.push(PlantRow { node: node_id.to_string(), t_us: now, state, input });
            }
            "ControlRecord" => {
                self.trace.control.push(ControlRow {
                    node: node_id.to_string(),
                    activation: m.content().u64("activation").unwrap_or(0),
                    nominal_us: m.content().u64("nominal_ms").unwrap_or(0) * 1000,
                    computed_us: now,
                    estimated: m.content().text("estimated") == Some("1"),
                    u: vector_from(m.content().get("u")),
                });
            }
            _ => {}
        }
    }

    fn record_delivery(
        &mut self,
        node_id: &str,
        profile: &str,
        job: &Job,
        start: Option<Micros>,
        end: Micros,
    ) {
        self.trace.delivery.push(DeliveryRow {
            event: DeliveryEventKind::Deliver,
            job_id: job.id,
            msg_type: job.message.msg_type().to_string(),
            dispatcher: dispatcher_of(&self.nodes[node_id].kernel, job),
            enqueue_us: Some(job.enqueue_us),
            start_us: start,
            end_us: Some(end),
            node: node_id.to_string(),
            profile: profile.to_string(),
            tag: job.message.content().text("tag").map(str::to_string),
        });
    }

    fn record_audit(&mut self, node_id: &str, m: &Message) {
        if let (Some(sender), Some(seq)) =
            (m.content().text("audit_src"), m.content().u64("audit_seq"))
        {
            self.trace.audit.push(AuditRow {
                at_us: self.now_us,
                node: node_id.to_string(),
                msg_type: m.msg_type().to_string(),
                sender: sender.to_string(),
                seq,
            });
        }
    }

    fn check_deadline(&mut self, node_id: &str, profile: &str, job: &Job, end: Micros) {
        if let Some(d) = job.message.qos().and_then(|q| q.deadline_ms) {
            if end > job.enqueue_us + d * 1000 {
                self.trace.delivery.push(DeliveryRow {
                    event: DeliveryEventKind::DeadlineMiss,
                    job_id: job.id,
                    msg_type: job.message.msg_type().to_string(),
                    dispatcher: dispatcher_of(&self.nodes[node_id].kernel, job),
                    enqueue_us: Some(job.enqueue_us),
                    start_us: None,
                    end_us: Some(end),
                    node: node_id.to_string(),
                    profile: profile.to_string(),
                    tag: None,
                });
            }
        }
    }

    /// The recipient is gone. If the profile meanwhile resolves remotely
    /// (migration rebind), forward; otherwise record an undeliverable.
    fn undeliverable_or_forward(&mut self, node_id: &str, job: Job, start: Option<Micros>) {
        let now = self.now_us;
        let rebound = matches!(
            self.nodes[node_id].kernel.resolve(job.message.profile()),
            Ok(Binding::Remote { .. })
        );
        if rebound {
            self.stats.forwarded += 1;
            self.trace.delivery.push(DeliveryRow {
                event: DeliveryEventKind::Forward,
                job_id: job.id,
                msg_type: job.message.msg_type().to_string(),
                dispatcher: None,
                enqueue_us: Some(job.enqueue_us),
                start_us: start,
                end_us: Some(now),
                node: node_id.to_string(),
                profile: job.message.profile().to_string(),
                    tag: None,
                });
            self.route(node_id.to_string(), job.message);
        } else {
            self.stats.undeliverable += 1;
            self.trace.delivery.push(DeliveryRow {
                event: DeliveryEventKind::Undeliverable,
                job_id: job.id,
                msg_type: job.message.msg_type().to_string(),
                dispatcher: None,
                enqueue_us: Some(job.enqueue_us),
                start_us: start,
                end_us: Some(now),
                node: node_id.to_string(),
                profile: job.message.profile().to_string(),
                    tag: None,
                });
        }
    }

    // --- builtin service handlers --------------------------------------

    fn handle_service(&mut self, node_id: &str, kind: ServiceKind, job: Job) {
        match kind {
            ServiceKind::NetworkMessenger => self.svc_messenger(node_id, job),
            ServiceKind::NetworkTime => self.svc_network_time(node_id, job),
            ServiceKind::Notifier => self.svc_notifier(node_id, job),
            ServiceKind::ProfileRegistry => self.svc_registry(node_id, job),
            ServiceKind::Lifecycle => self.svc_lifecycle(node_id, job),
            ServiceKind::FaultLog => self.log_sink(node_id, &job.message.clone()),
        }
    }

    fn svc_messenger(&mut self, node_id: &str, job: Job) {
        let m = job.message;
        // Late binding: resolve again at transmit time so rebinds that
        // happened while the job sat in the queue take effect.
        let target = match self.nodes[node_id].kernel.resolve(m.profile()) {
            Ok(Binding::Remote { node_id: peer }) => peer.clone(),
            Ok(Binding::Local(_)) => {
                // Rebound to local while queued: deliver here after all.
                self.route(node_id.to_string(), m);
                return;
            }
            Err(_) => {
                self.stats.undeliverable += 1;
                self.trace.delivery.push(DeliveryRow {
                    event: DeliveryEventKind::Undeliverable,
                    job_id: job.id,
                    msg_type: m.msg_type().to_string(),
                    dispatcher: None,
                    enqueue_us: Some(job.enqueue_us),
                    start_us: None,
                    end_us: Some(self.now_us),
                    node: node_id.to_string(),
                    profile: m.profile().to_string(),
                    tag: None,
                });
                return;
            }
        };
        let now = self.now_us;
        let node = self.nodes.get_mut(node_id).expect("exists");
        let sent = node.endpoint(&target).send(&m, now);
        match sent {
            Ok(frame) => {
                self.transmit(node_id, &target, frame.bytes);
                if m.reliability() == Reliability::Reliable {
                    self.arm_retransmit(node_id, &target);
                }
            }
            Err(e) => {
                self.trace.faults.push(FaultRow {
                    at_us: now,
                    node: node_id.to_string(),
                    kind: "frame".into(),
                    source: m.profile().to_string(),
                    detail: e.to_string(),
                });
            }
        }
    }

    fn svc_network_time(&mut self, node_id: &str, job: Job) {
        let m = &job.message;
        let now_local = self.nodes[node_id].local_clock.local_ms_f64(self.now_us);
        match m.msg_type() {
            // Periodic trigger: ping every peer.
            "Notify" if m.content().text("tag") == Some("ping") => {
                let peers = self.nodes[node_id].peers();
                for peer in peers {
                    let mut c = Content::new();
                    c.set("t1", Value::text(format!("{now_local}"))).unwrap();
                    c.set("src", Value::text(node_id.to_string())).unwrap();
                    let ping = Message::new(
                        "Ping",
                        Reliability::BestEffort,
                        ServiceKind::NetworkTime.profile_on(&peer),
                        c,
                        now_local.max(0.0) as u64,
                        None,
                    )
                    .expect("valid ping");
                    self.route(node_id.to_string(), ping);
                }
            }
            "Ping" => {
                let Some(src) = m.content().text("src").map(String::from) else { return };
                let t1 = m.content().text("t1").unwrap_or("0").to_string();
                let mut c = Content::new();
                c.set("t1", Value::text(t1)).unwrap();
                c.set("t2", Value::text(format!("{now_local}"))).unwrap();
                c.set("t3", Value::text(format!("{now_local}"))).unwrap();
                c.set("src", Value::text(node_id.to_string())).unwrap();
                let response = Message::new(
                    "Response",
                    Reliability::BestEffort,
                    ServiceKind::NetworkTime.profile_on(&src),
                    c,
                    now_local.max(0.0) as u64,
                    None,
                )
                .expect("valid response");
                self.route(node_id.to_string(), response);
            }
            "Response" => {
                let Some(peer) = m.content().text("src").map(String::from) else { return };
                let parse = |k: &str| m.content().text(k).and_then(|s| s.parse::<f64>().ok());
                let (Some(t1), Some(t2), Some(t3)) = (parse("t1"), parse("t2"), parse("t3"))
                else {
                    return;
                };
                let sample = PingSample { t1, t2, t3, t4: now_local };
                let node = self.nodes.get_mut(node_id).expect("exists");
                let cm = node
                    .clocks
                    .entry(peer.clone())
                    .or_insert_with(|| ClockModel::new(peer.clone()));
                let _ = cm.record_ping_sample(sample);
            }
            _ => {}
        }
    }

    fn svc_notifier(&mut self, node_id: &str, job: Job) {
        let m = &job.message;
        if m.msg_type() != "Schedule" {
            return;
        }
        let c = m.content();
        let (Some(target), Some(period)) = (c.text("target"), c.u64("period_ms")) else {
            return;
        };
        let Ok(mut schedule) = NotificationSchedule::new(
            target,
            period,
            c.u64("phase_ms").unwrap_or(0),
            crate::message::QosSpec {
                crit: c.u64("crit"),
                period_ms: c.u64("qos_period_ms").or(Some(period)),
                deadline_ms: c.u64("deadline_ms"),
                wcet_ms: c.u64("wcet_ms"),
            },
        ) else {
            return;
        };
        if let Some(count) = c.u64("count") {
            schedule = schedule.with_count(count);
        }
        if let Some(tag) = c.text("tag") {
            schedule = schedule.with_tag(tag);
        }
        if let Some(k) = c.u64("start_k") {
            schedule = schedule.starting_at(k);
        }
        let _ = self.add_schedule(node_id, schedule);
    }

    fn svc_registry(&mut self, node_id: &str, job: Job) {
        let m = &job.message;
        if m.msg_type() != "Rebind" {
            return;
        }
        let (Some(profile), Some(owner)) = (m.content().text("profile"), m.content().text("node"))
        else {
            return;
        };
        let node = self.nodes.get_mut(node_id).expect("exists");
        if owner != node_id {
            // Never shadow a live local component with a remote binding
            // unless it is genuinely elsewhere now.
            node.kernel
                .registry_mut()
                .rebind(profile, Binding::Remote { node_id: owner.to_string() });
            self.trace.delivery.push(DeliveryRow {
                event: DeliveryEventKind::Rebind,
                job_id: job.id,
                msg_type: "Rebind".into(),
                dispatcher: None,
                enqueue_us: Some(job.enqueue_us),
                start_us: None,
                end_us: Some(self.now_us),
                node: node_id.to_string(),
                profile: profile.to_string(),
                    tag: None,
                });
        }
    }

    fn svc_lifecycle(&mut self, node_id: &str, job: Job) {
        match job.message.msg_type() {
            "Deploy" => self.lc_deploy(node_id, &job),
            "Upgrade" => self.lc_upgrade(node_id, &job),
            "Migrate" => self.lc_migrate(node_id, &job),
            "MigrateArrive" => self.lc_migrate_arrive(node_id, &job),
            "MigrateDone" => self.lc_migrate_done(node_id, &job),
            "MigrateFail" => self.lc_migrate_fail(node_id, &job),
            _ => {}
        }
    }

    fn reply_report(&mut self, node_id: &str, reply_to: Option<String>, msg_type: &str, body: Content) {
        let Some(profile) = reply_to else { return };
        let now_ms = self.local_ctx_ms(node_id);
        if let Ok(m) =
            Message::new(msg_type, Reliability::Reliable, profile, body, now_ms, None)
        {
            self.route(node_id.to_string(), m);
        }
    }

    fn lc_deploy(&mut self, node_id: &str, job: &Job) {
        let c = job.message.content();
        let reply_to = c.text("reply_to").map(String::from);
        let (Some(profile), Some(kind)) = (c.text("profile"), c.text("kind")) else {
            return;
        };
        let (profile, kind) = (profile.to_string(), kind.to_string());
        let config = match c.get("config") {
            Some(Value::Map(m)) => m.clone(),
            _ => Content::new(),
        };
        let now_ms = self.local_ctx_ms(node_id);
        let result = {
            let World { nodes, rng, .. } = self;
            let node = nodes.get_mut(node_id).expect("exists");
            let mut ctx = Ctx { now_ms, node_id, rng };
            create_component(&node.factories, &kind, &config, &mut ctx).and_then(|(comp, init)| {
                let shell = Shell::new(&profile, &kind, config.clone(), comp);
                node.kernel
                    .register_component(shell)
                    .map(|addr| (addr, init))
                    .map_err(|e| crate::component::LifecycleError::Rejected(
                        crate::component::ComponentError::Config(e.to_string()),
                    ))
            })
        };
        match result {
            Ok((_, init)) => {
                for m in init {
                    self.emit_from_component(node_id, m);
                }
                self.broadcast_rebind(node_id, &profile);
                let mut body = Content::new();
                body.set("profile", Value::text(profile)).unwrap();
                body.set("outcome", Value::text("deployed")).unwrap();
                self.reply_report(node_id, reply_to, "DeployReport", body);
            }
            Err(e) => {
                let mut body = Content::new();
                body.set("profile", Value::text(profile)).unwrap();
                body.set("outcome", Value::text("error")).unwrap();
                body.set("detail", Value::text(e.to_string())).unwrap();
                self.reply_report(node_id, reply_to, "DeployReport", body);
            }
        }
    }

    fn lc_upgrade(&mut self, node_id: &str, job: &Job) {
        let c = job.message.content();
        let reply_to = c.text("reply_to").map(String::from);
        let (Some(profile), Some(kind)) = (c.text("profile"), c.text("kind")) else {
            return;
        };
        let (profile, kind) = (profile.to_string(), kind.to_string());
        let overlay = match c.get("config") {
            Some(Value::Map(m)) => Some(m.clone()),
            _ => None,
        };
        let now_ms = self.local_ctx_ms(node_id);
        let result = {
            let World { nodes, rng, .. } = self;
            let node = nodes.get_mut(node_id).expect("exists");
            match node.kernel.shell_by_profile(&profile) {
                None => Err("profile not local".to_string()),
                Some((_, shell)) => {
                    let mut ctx = Ctx { now_ms, node_id, rng };
                    shell
                        .lock()
                        .expect("shell lock")
                        .upgrade(&kind, &node.factories, overlay.as_ref(), &mut ctx)
                        .map_err(|e| e.to_string())
                }
            }
        };
        match result {
            Ok((report, emitted)) => {
                for m in emitted {
                    self.emit_from_component(node_id, m);
                }
                self.trace.delivery.push(DeliveryRow {
                    event: DeliveryEventKind::Upgrade,
                    job_id: job.id,
                    msg_type: "Upgrade".into(),
                    dispatcher: None,
                    enqueue_us: Some(job.enqueue_us),
                    start_us: None,
                    end_us: Some(self.now_us),
                    node: node_id.to_string(),
                    profile: profile.clone(),
                    tag: None,
                });
                let mut body = Content::new();
                body.set("profile", Value::text(report.profile)).unwrap();
                body.set("old_kind", Value::text(report.old_kind)).unwrap();
                body.set("new_kind", Value::text(report.new_kind)).unwrap();
                body.set("buffered", Value::text(report.buffered.to_string())).unwrap();
                body.set("pause_us", Value::text(report.pause_us.to_string())).unwrap();
                body.set(
                    "outcome",
                    Value::text(match report.outcome {
                        UpgradeOutcome::Replaced => "replaced".to_string(),
                        UpgradeOutcome::Aborted { reason } => format!("aborted: {reason}"),
                    }),
                )
                .unwrap();
                self.reply_report(node_id, reply_to, "UpgradeReport", body);
            }
            Err(e) => {
                let mut body = Content::new();
                body.set("profile", Value::text(profile)).unwrap();
                body.set("outcome", Value::text(format!("error: {e}"))).unwrap();
                self.reply_report(node_id, reply_to, "UpgradeReport", body);
            }
        }
    }

    fn broadcast_rebind(&mut self, owner: &str, profile: &str) {
        let peers = self.nodes[owner].peers();
        let now_ms = self.local_ctx_ms(owner);
        for peer in peers {
            let mut c = Content::new();
            c.set("profile", Value::text(profile.to_string())).unwrap();
            c.set("node", Value::text(owner.to_string())).unwrap();
            let m = Message::new(
                "Rebind",
                Reliability::Reliable,
                ServiceKind::ProfileRegistry.profile_on(&peer),
                c,
                now_ms,
                None,
            )
            .expect("valid rebind");
            self.route(owner.to_string(), m);
        }
    }

    fn lc_migrate(&mut self, node_id: &str, job: &Job) {
        let c = job.message.content();
        let reply_to = c.text("reply_to").map(String::from);
        let (Some(profile), Some(dest)) = (c.text("profile"), c.text("dest")) else {
            return;
        };
        let (profile, dest) = (profile.to_string(), dest.to_string());
        let fail = |world: &mut World, reason: String| {
            let mut body = Content::new();
            body.set("profile", Value::text(profile.clone())).unwrap();
            body.set("outcome", Value::text(format!("error: {reason}"))).unwrap();
            world.reply_report(node_id, reply_to.clone(), "MigrateReport", body);
        };
        if self.nodes[node_id].migrations.contains_key(&profile) {
            return fail(self, "migration already in progress".into());
        }
        if !self.nodes.contains_key(&dest) || dest == node_id {
            return fail(self, format!("bad destination {dest:?}"));
        }
        let pkg = {
            let node = self.nodes.get_mut(node_id).expect("exists");
            match node.kernel.shell_by_profile(&profile) {
                None => return fail(self, "profile not local".into()),
                Some((addr, shell)) => {
                    match shell.lock().expect("shell lock").begin_migration() {
                        Ok(pkg) => {
                            node.migrations.insert(
                                profile.clone(),
                                MigrationSource {
                                    addr,
                                    reply_to: reply_to.clone(),
                                    started_us: self.now_us,
                                },
                            );
                            pkg
                        }
                        Err(e) => return fail(self, e.to_string()),
                    }
                }
            }
        };
        self.trace.delivery.push(DeliveryRow {
            event: DeliveryEventKind::MigrateBegin,
            job_id: job.id,
            msg_type: "Migrate".into(),
            dispatcher: None,
            enqueue_us: Some(job.enqueue_us),
            start_us: None,
            end_us: Some(self.now_us),
            node: node_id.to_string(),
            profile: profile.clone(),
                    tag: None,
                });
        let mut c = pkg.to_content();
        c.set("src", Value::text(node_id.to_string())).unwrap();
        let now_ms = self.local_ctx_ms(node_id);
        let m = Message::new(
            "MigrateArrive",
            Reliability::Reliable,
            ServiceKind::Lifecycle.profile_on(&dest),
            c,
            now_ms,
            None,
        )
        .expect("valid migrate message");
        self.route(node_id.to_string(), m);
    }

    fn lc_migrate_arrive(&mut self, node_id: &str, job: &Job) {
        let Some(src) = job.message.content().text("src").map(String::from) else { return };
        let reply_err = |world: &mut World, profile: &str, reason: String| {
            let mut c = Content::new();
            c.set("profile", Value::text(profile.to_string())).unwrap();
            c.set("reason", Value::text(reason)).unwrap();
            let now_ms = world.local_ctx_ms(node_id);
            let m = Message::new(
                "MigrateFail",
                Reliability::Reliable,
                ServiceKind::Lifecycle.profile_on(&src),
                c,
                now_ms,
                None,
            )
            .expect("valid migrate-fail");
            world.route(node_id.to_string(), m);
        };
        let pkg = match MigrationPackage::from_content(job.message.content()) {
            Ok(p) => p,
            Err(e) => return reply_err(self, "?", e.to_string()),
        };
        let profile = pkg.profile.clone();
        let now_ms = self.local_ctx_ms(node_id);
        let created = {
            let World { nodes, rng, .. } = self;
            let node = nodes.get_mut(node_id).expect("exists");
            if !node.factories.contains(&pkg.component_kind) {
                Err(format!("no factory for {:?}", pkg.component_kind))
            } else {
                let mut ctx = Ctx { now_ms, node_id, rng };
                create_component(&node.factories, &pkg.component_kind, &pkg.config, &mut ctx)
                    .map_err(|e| e.to_string())
                    .and_then(|(mut comp, init)| {
                        comp.restore(&pkg.memento).map_err(|e| e.to_string())?;
                        let shell =
                            Shell::new(&profile, &pkg.component_kind, pkg.config.clone(), comp);
                        node.kernel
                            .register_component(shell)
                            .map_err(|e| e.to_string())
                            .map(|addr| (addr, init))
                    })
            }
        };
        match created {
            Err(reason) => reply_err(self, &profile, reason),
            Ok((_, init)) => {
                for m in init {
                    self.emit_from_component(node_id, m);
                }
                self.broadcast_rebind(node_id, &profile);
                // Pending messages resume through the ordinary delivery
                // path, in package order (FIFO keys at one instant).
                for m in pkg.pending {
                    self.route(node_id.to_string(), m);
                }
                let mut c = Content::new();
                c.set("profile", Value::text(profile.clone())).unwrap();
                let m = Message::new(
                    "MigrateDone",
                    Reliability::Reliable,
                    ServiceKind::Lifecycle.profile_on(&src),
                    c,
                    now_ms,
                    None,
                )
                .expect("valid migrate-done");
                self.route(node_id.to_string(), m);
                self.trace.delivery.push(DeliveryRow {
                    event: DeliveryEventKind::MigrateComplete,
                    job_id: job.id,
                    msg_type: "MigrateArrive".into(),
                    dispatcher: None,
                    enqueue_us: Some(job.enqueue_us),
                    start_us: None,
                    end_us: Some(self.now_us),
                    node: node_id.to_string(),
                    profile,
                    tag: None,
                });
            }
        }
    }

    fn lc_migrate_done(&mut self, node_id: &str, job: &Job) {
        let Some(profile) = job.message.content().text("profile").map(String::from) else {
            return;
        };
        let Some(source) = self.nodes.get_mut(node_id).and_then(|n| n.migrations.shift_remove(&profile))
        else {
            return;
        };
        let leftovers = {
            let node = self.nodes.get_mut(node_id).expect("exists");
            let leftovers = match node.kernel.shell(&source.addr) {
                Some(shell) => shell.lock().expect("shell lock").finish_migration(),
                None => Vec::new(),
            };
            node.kernel.deregister_component(&source.addr);
            leftovers
        };
        // Forward everything that arrived during the handoff; the registry
        // already points at the destination.
        for m in leftovers {
            self.stats.forwarded += 1;
            self.route(node_id.to_string(), m);
        }
        let duration_us = self.now_us - source.started_us;
        let mut body = Content::new();
        body.set("profile", Value::text(profile.clone())).unwrap();
        body.set("outcome", Value::text("migrated")).unwrap();
        body.set("duration_us", Value::text(duration_us.to_string())).unwrap();
        self.reply_report(node_id, source.reply_to, "MigrateReport", body);
    }

    fn lc_migrate_fail(&mut self, node_id: &str, job: &Job) {
        let Some(profile) = job.message.content().text("profile").map(String::from) else {
            return;
        };
        let reason = job.message.content().text("reason").unwrap_or("unknown").to_string();
        let Some(source) = self.nodes.get_mut(node_id).and_then(|n| n.migrations.shift_remove(&profile))
        else {
            return;
        };
        let now_ms = self.local_ctx_ms(node_id);
        let outputs = {
            let World { nodes, rng, .. } = self;
            let node = nodes.get_mut(node_id).expect("exists");
            match node.kernel.shell(&source.addr) {
                Some(shell) => {
                    let mut ctx = Ctx { now_ms, node_id, rng };
                    shell.lock().expect("shell lock").abort_migration(&mut ctx)
                }
                None => Vec::new(),
            }
        };
        for m in outputs {
            self.emit_from_component(node_id, m);
        }
        self.trace.delivery.push(DeliveryRow {
            event: DeliveryEventKind::MigrateAbort,
            job_id: job.id,
            msg_type: "MigrateFail".into(),
            dispatcher: None,
            enqueue_us: Some(job.enqueue_us),
            start_us: None,
            end_us: Some(self.now_us),
            node: node_id.to_string(),
            profile: profile.clone(),
                    tag: None,
                });
        let mut body = Content::new();
        body.set("profile", Value::text(profile)).unwrap();
        body.set("outcome", Value::text(format!("aborted: {reason}"))).unwrap();
        self.reply_report(node_id, source.reply_to, "MigrateReport", body);
    }
}

fn job_cost(job: &Job, slot: &SlotRef) -> Micros {
    match slot {
        SlotRef::User(shell) => shell.lock().expect("shell lock").cost_us(&job.message),
        SlotRef::Service(_) => 0,
    }
}

fn dispatcher_of(kernel: &Kernel, job: &Job) -> Option<u32> {
    // The placement rule is deterministic, so re-asking it names the
    // dispatcher the job was queued at.
    Some(kernel.placement_rule().place(&job.message, job.enqueue_us).dispatcher_id)
}

fn vector_from(v: Option<&Value>) -> Vec<f64> {
    match v {
        Some(Value::Map(m)) => m.iter().filter_map(|(_, v)| v.as_f64()).collect(),
        Some(Value::Text(s)) => s.split(';').filter_map(|p| p.parse().ok()).collect(),
        _ => Vec::new(),
    }
}

/// Inverse of the affine local clock: the world instant at which the
/// node's clock shows `local_ms`.
fn world_time_for_local_ms(clock: &AffineClock, local_ms: u64) -> Micros {
    let local_us = local_ms as f64 * 1000.0;
    let world = (local_us - clock.offset_us as f64) / (1.0 + clock.skew_ppm / 1e6);
    world.max(0.0).ceil() as Micros
}
