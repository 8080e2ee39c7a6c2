//! Real-time node runtime: the same kernel and services driven by OS
//! threads and TCP links instead of the virtual clock.
//!
//! Each dispatcher runs on its own thread at a fixed priority (best
//! effort: `SCHED_FIFO` is requested and quietly skipped without the
//! privilege), popping jobs from its queue and delivering them. The
//! notifier runs on a timer thread; frames travel over TCP connections
//! with the same codec and acknowledgment protocol as the simulator, so
//! the two modes stay wire compatible. Peers are either statically
//! configured or learned from the hello frame of an inbound connection,
//! which is how the admin client reaches a node without being in its
//! config.

use crate::component::{create_component, Ctx, Delivery, FactoryRegistry, Shell, UpgradeOutcome};
use crate::config::KernelConfig;
use crate::kernel::{Kernel, ServiceKind, SlotRef, Submitted};
use crate::message::{Content, Message, Reliability, Value};
use crate::services::link::{LinkEndpoint, RetryConfig};
use crate::services::notifier::{NotificationSchedule, Notifier};
use crate::services::registry::Binding;
use indexmap::IndexMap;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Peer {
    stream: Option<TcpStream>,
    addr: Option<String>,
}

pub struct NodeShared {
    pub node_id: String,
    kernel: Mutex<Kernel>,
    notifier: Mutex<Notifier>,
    factories: FactoryRegistry,
    endpoints: Mutex<IndexMap<String, LinkEndpoint>>,
    peers: Mutex<IndexMap<String, Peer>>,
    clocks: Mutex<IndexMap<String, crate::services::clock::ClockModel>>,
    rng: Mutex<rand_chacha::ChaCha12Rng>,
    start: Instant,
    shutdown: AtomicBool,
    work_cv: Condvar,
    work_lock: Mutex<()>,
    log: bool,
}

impl NodeShared {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn wake(&self) {
        let _g = self.work_lock.lock().unwrap();
        self.work_cv.notify_all();
    }

    fn log(&self, line: &str) {
        if self.log {
            eprintln!("[{}] {line}", self.node_id);
        }
    }

    /// Submits a message locally, waking dispatchers.
    pub fn submit(&self, m: Message) {
        let outcome = { self.kernel.lock().unwrap().submit(m, self.now_us()) };
        match outcome {
            Ok(Submitted::Local { .. } | Submitted::ViaMessenger { .. }) => self.wake(),
            Err(e) => self.log(&format!("undeliverable: {e}")),
        }
    }

    fn send_frame_to(&self, peer_id: &str, bytes: &[u8]) {
        let mut peers = self.peers.lock().unwrap();
        let Some(peer) = peers.get_mut(peer_id) else {
            self.log(&format!("no route to peer {peer_id:?}"));
            return;
        };
        if peer.stream.is_none() {
            if let Some(addr) = peer.addr.clone() {
                match TcpStream::connect(&addr) {
                    Ok(stream) => {
                        stream.set_nodelay(true).ok();
                        // Introduce ourselves so the other side can route back.
                        let hello = hello_message(&self.node_id, peer_id);
                        let framed = {
                            let mut eps = self.endpoints.lock().unwrap();
                            let ep = eps
                                .entry(peer_id.to_string())
                                .or_insert_with(|| LinkEndpoint::new(RetryConfig::default()));
                            ep.send(&hello, self.now_us())
                        };
                        if let (Ok(f), Ok(mut writer), Ok(reader)) =
                            (framed, stream.try_clone(), stream.try_clone())
                        {
                            if writer.write_all(&f.bytes).is_ok() {
                                spawn_reader(self_arc(self), reader, Some(peer_id.to_string()));
                                peer.stream = Some(stream);
                            }
                        }
                    }
                    Err(e) => {
                        self.log(&format!("connect {peer_id:?} failed: {e}"));
                        return;
                    }
                }
            }
        }
        if let Some(stream) = peer.stream.as_mut() {
            if stream.write_all(bytes).is_err() {
                peer.stream = None;
            }
        }
    }
}

// A node thread needs an Arc back to shared state; threads capture the
// Arc directly, and the connect path re-wraps through this registry of
// live nodes so `&self` methods can spawn readers.
fn self_arc(shared: &NodeShared) -> Arc<NodeShared> {
    LIVE_NODES
        .lock()
        .unwrap()
        .iter()
        .find(|n| std::ptr::eq(n.as_ref(), shared))
        .cloned()
        .expect("node is registered while running")
}

static LIVE_NODES: Mutex<Vec<Arc<NodeShared>>> = Mutex::new(Vec::new());

fn hello_message(me: &str, peer: &str) -> Message {
    let mut c = Content::new();
    c.set("node", Value::text(me.to_string())).unwrap();
    Message::new("Hello", Reliability::BestEffort, ServiceKind::NetworkMessenger.profile_on(peer), c, 0, None)
        .expect("valid hello")
}

pub struct NodeHandle {
    pub shared: Arc<NodeShared>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl NodeHandle {
    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.wake();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let mut live = LIVE_NODES.lock().unwrap();
        live.retain(|n| !std::ptr::eq(n.as_ref(), self.shared.as_ref()));
    }

    pub fn local_addr(&self) -> Option<String> {
        self.shared.peers.lock().unwrap().get("#listen").and_then(|p| p.addr.clone())
    }
}

/// Boots a node from its kernel config: dispatcher threads, listener,
/// notifier, and retransmission timer. `factories` supplies the
/// deployable component kinds.
pub fn run_node(
    cfg: &KernelConfig,
    factories: FactoryRegistry,
    log: bool,
) -> Result<NodeHandle, NodeError> {
    if cfg.node.time == "sim" {
        return Err(NodeError::Config(
            "the simulated time source is single-process only; a networked node must run with time = \"real\" (scripted simulations live under the experiment command)".into(),
        ));
    }
    let tsr = cfg.tsr().map_err(|e| NodeError::Config(e.to_string()))?;
    let rule = cfg.placement_rule().map_err(|e| NodeError::Config(e.to_string()))?;
    let kernel = Kernel::new(cfg.node.id.clone(), tsr, rule)?;
    let shared = Arc::new(NodeShared {
        node_id: cfg.node.id.clone(),
        kernel: Mutex::new(kernel),
        notifier: Mutex::new(Notifier::new()),
        factories,
        endpoints: Mutex::new(IndexMap::new()),
        peers: Mutex::new(IndexMap::new()),
        clocks: Mutex::new(IndexMap::new()),
        rng: Mutex::new(rand_chacha::ChaCha12Rng::seed_from_u64(0)),
        start: Instant::now(),
        shutdown: AtomicBool::new(false),
        work_cv: Condvar::new(),
        work_lock: Mutex::new(()),
        log,
    });
    LIVE_NODES.lock().unwrap().push(shared.clone());

    {
        let mut peers = shared.peers.lock().unwrap();
        let mut kernel = shared.kernel.lock().unwrap();
        for p in &cfg.peer {
            peers.insert(p.id.clone(), Peer { stream: None, addr: Some(p.addr.clone()) });
            for kind in ServiceKind::ALL {
                kernel
                    .registry_mut()
                    .rebind(&kind.profile_on(&p.id), Binding::Remote { node_id: p.id.clone() });
            }
        }
    }

    let mut threads = Vec::new();

    // Listener.
    if let Some(listen) = cfg.node.listen.clone() {
        let listener = TcpListener::bind(&listen)?;
        let actual = listener.local_addr()?.to_string();
        shared
            .peers
            .lock()
            .unwrap()
            .insert("#listen".into(), Peer { stream: None, addr: Some(actual) });
        listener.set_nonblocking(true)?;
        let s = shared.clone();
        threads.push(std::thread::spawn(move || {
            while !s.shutdown.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nodelay(true).ok();
                        spawn_reader(s.clone(), stream, None);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(20));
                    }
                    Err(_) => break,
                }
            }
        }));
    }

    // Dispatcher threads, one per dispatcher, highest priority first.
    let dispatcher_ids = shared.kernel.lock().unwrap().dispatcher_ids();
    let n_dispatchers = dispatcher_ids.len();
    for (rank, id) in dispatcher_ids.into_iter().enumerate() {
        let s = shared.clone();
        threads.push(std::thread::spawn(move || {
            set_thread_priority((n_dispatchers - rank) as i32);
            dispatcher_loop(&s, id);
        }));
    }

    // Notifier timer.
    {
        let s = shared.clone();
        threads.push(std::thread::spawn(move || notifier_loop(&s)));
    }
    // Retransmissions.
    {
        let s = shared.clone();
        threads.push(std::thread::spawn(move || retransmit_loop(&s)));
    }
    // Clock-sync pings.
    if let Some(period) = cfg.node.ping_period_ms {
        let profile = ServiceKind::NetworkTime.profile_on(&cfg.node.id);
        let schedule = NotificationSchedule::new(profile, period, 0, Default::default())
            .map_err(|e| NodeError::Config(e.to_string()))?
            .with_tag("ping");
        shared.notifier.lock().unwrap().add(schedule);
    }

    Ok(NodeHandle { shared, threads })
}

/// Requests a real-time fixed priority for the current thread; falls back
/// silently when the platform refuses (unprivileged runs).
fn set_thread_priority(priority: i32) {
    unsafe {
        let param = libc::sched_param { sched_priority: priority };
        libc::pthread_setschedparam(libc::pthread_self(), libc::SCHED_FIFO, &param);
    }
}

fn dispatcher_loop(s: &NodeShared, dispatcher_id: u32) {
    while !s.shutdown.load(Ordering::SeqCst) {
        let job = { s.kernel.lock().unwrap().pop_next(dispatcher_id) };
        let Some(job) = job else {
            let g = s.work_lock.lock().unwrap();
            let _ = s.work_cv.wait_timeout(g, Duration::from_millis(50)).unwrap();
            continue;
        };
        let slot = { s.kernel.lock().unwrap().slot(&job.recipient) };
        match slot {
            None => s.log(&format!("job {} undeliverable (recipient gone)", job.id)),
            Some(SlotRef::User(shell)) => {
                let cost = { shell.lock().unwrap().cost_us(&job.message) };
                let delivery = {
                    let mut rng = s.rng.lock().unwrap();
                    let mut ctx = Ctx { now_ms: s.now_ms(), node_id: &s.node_id, rng: &mut *rng };
                    shell.lock().unwrap().deliver(&job.message, &mut ctx)
                };
                if cost > 0 {
                    std::thread::sleep(Duration::from_micros(cost));
                }
                match delivery {
                    Delivery::Processed(outputs) => {
                        for m in outputs {
                            if !m.profile().starts_with("FaultLog@") {
                                s.submit(m);
                            }
                        }
                    }
                    Delivery::Buffered | Delivery::Undeliverable => {}
                    Delivery::Failed(e) => s.log(&format!("component fault: {e}")),
                }
            }
            Some(SlotRef::Service(kind)) => handle_service(s, kind, job),
        }
    }
}

fn notifier_loop(s: &NodeShared) {
    while !s.shutdown.load(Ordering::SeqCst) {
        let now = s.now_ms();
        let (due, next) = {
            let mut n = s.notifier.lock().unwrap();
            (n.due(now), n.next_due_ms())
        };
        for m in due {
            s.submit(m);
        }
        let sleep_ms = next.map(|d| d.saturating_sub(s.now_ms()).clamp(1, 50)).unwrap_or(20);
        std::thread::sleep(Duration::from_millis(sleep_ms));
    }
}

fn retransmit_loop(s: &NodeShared) {
    while !s.shutdown.load(Ordering::SeqCst) {
        let now = s.now_us();
        let resends: Vec<(String, Vec<Vec<u8>>)> = {
            let mut eps = s.endpoints.lock().unwrap();
            eps.iter_mut()
                .map(|(peer, ep)| {
                    (peer.clone(), ep.poll_retransmits(now).into_iter().map(|f| f.bytes).collect())
                })
                .collect()
        };
        for (peer, frames) in resends {
            for bytes in frames {
                s.send_frame_to(&peer, &bytes);
            }
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn spawn_reader(s: Arc<NodeShared>, mut stream: TcpStream, mut peer_id: Option<String>) {
    std::thread::spawn(move || {
        stream.set_read_timeout(Some(Duration::from_millis(200))).ok();
        let mut buf: Vec<u8> = Vec::new();
        let mut chunk = [0u8; 4096];
        while !s.shutdown.load(Ordering::SeqCst) {
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    while let Some(frame) = take_frame(&mut buf) {
                        handle_frame(&s, &mut peer_id, &stream, &frame);
                    }
                }
                Err(ref e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(_) => break,
            }
        }
    });
}

fn take_frame(buf: &mut Vec<u8>) -> Option<Vec<u8>> {
    if buf.len() < 4 {
        return None;
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if buf.len() < 4 + len {
        return None;
    }
    let frame: Vec<u8> = buf[..4 + len].to_vec();
    buf.drain(..4 + len);
    Some(frame)
}

fn handle_frame(s: &Arc<NodeShared>, peer_id: &mut Option<String>, stream: &TcpStream, bytes: &[u8]) {
    // Peek at hello frames to learn who is on the other end.
    if peer_id.is_none() {
        if let Ok(m) = crate::services::link::decode_frame(bytes) {
            if m.msg_type() == "Hello" {
                if let Some(node) = m.content().text("node") {
                    *peer_id = Some(node.to_string());
                    let mut peers = s.peers.lock().unwrap();
                    let entry = peers
                        .entry(node.to_string())
                        .or_insert(Peer { stream: None, addr: None });
                    if entry.stream.is_none() {
                        entry.stream = stream.try_clone().ok();
                    }
                    // A dynamically learned peer is as routable as a
                    // configured one: bind its service profiles.
                    if node != s.node_id {
                        let mut kernel = s.kernel.lock().unwrap();
                        for kind in ServiceKind::ALL {
                            kernel.registry_mut().rebind(
                                &kind.profile_on(node),
                                Binding::Remote { node_id: node.to_string() },
                            );
                        }
                    }
                }
            }
        }
    }
    let Some(peer) = peer_id.clone() else { return };
    let now = s.now_us();
    let input = {
        let mut eps = s.endpoints.lock().unwrap();
        let ep = eps
            .entry(peer.clone())
            .or_insert_with(|| LinkEndpoint::new(RetryConfig::default()));
        ep.on_frame(bytes, now)
    };
    let Ok(input) = input else { return };
    for ack in input.acks {
        s.send_frame_to(&peer, &ack.bytes);
    }
    for m in input.delivered {
        if m.msg_type() == "Hello" {
            continue;
        }
        // Clock translation for messages from synchronized peers.
        let m = {
            let clocks = s.clocks.lock().unwrap();
            match clocks.get(&peer) {
                Some(cm) if cm.has_samples() => {
                    let t = cm.translate(m.timestamp_ms() as f64);
                    m.with_timestamp(t.round().max(0.0) as u64)
                }
                _ => m,
            }
        };
        s.submit(m);
    }
}

fn handle_service(s: &NodeShared, kind: ServiceKind, job: crate::kernel::Job) {
    let m = &job.message;
    match kind {
        ServiceKind::NetworkMessenger => {
            let target = {
                let kernel = s.kernel.lock().unwrap();
                match kernel.resolve(m.profile()) {
                    Ok(Binding::Remote { node_id }) => Some(node_id.clone()),
                    Ok(Binding::Local(_)) => None,
                    Err(_) => {
                        s.log(&format!("undeliverable {:?}", m.profile()));
                        return;
                    }
                }
            };
            match target {
                Some(peer) => {
                    let framed = {
                        let mut eps = s.endpoints.lock().unwrap();
                        let ep = eps
                            .entry(peer.clone())
                            .or_insert_with(|| LinkEndpoint::new(RetryConfig::default()));
                        ep.send(m, s.now_us())
                    };
                    match framed {
                        Ok(f) => s.send_frame_to(&peer, &f.bytes),
                        Err(e) => s.log(&format!("frame error: {e}")),
                    }
                }
                None => s.submit(m.clone()), // rebound local while queued
            }
        }
        ServiceKind::NetworkTime => handle_network_time(s, m),
        ServiceKind::Notifier => {
            if m.msg_type() == "Schedule" {
                if let Some(schedule) = schedule_from_content(m.content()) {
                    s.notifier.lock().unwrap().add(schedule);
                }
            }
        }
        ServiceKind::ProfileRegistry => {
            if m.msg_type() == "Rebind" {
                if let (Some(profile), Some(node)) =
                    (m.content().text("profile"), m.content().text("node"))
                {
                    if node != s.node_id {
                        s.kernel
                            .lock()
                            .unwrap()
                            .registry_mut()
                            .rebind(profile, Binding::Remote { node_id: node.to_string() });
                    }
                }
            }
        }
        ServiceKind::Lifecycle => handle_lifecycle(s, &job),
        ServiceKind::FaultLog => {
            s.log(&format!("fault-log: {}", crate::message::serialize(m)));
        }
    }
}

fn schedule_from_content(c: &Content) -> Option<NotificationSchedule> {
    let target = c.text("target")?;
    let period = c.u64("period_ms")?;
    let mut schedule = NotificationSchedule::new(
        target,
        period,
        c.u64("phase_ms").unwrap_or(0),
        crate::message::QosSpec {
            crit: c.u64("crit"),
            period_ms: c.u64("qos_period_ms").or(Some(period)),
            deadline_ms: c.u64("deadline_ms"),
            wcet_ms: c.u64("wcet_ms"),
        },
    )
    .ok()?;
    if let Some(count) = c.u64("count") {
        schedule = schedule.with_count(count);
    }
    if let Some(tag) = c.text("tag") {
        schedule = schedule.with_tag(tag);
    }
    if let Some(k) = c.u64("start_k") {
        schedule = schedule.starting_at(k);
    }
    Some(schedule)
}

fn handle_network_time(s: &NodeShared, m: &Message) {
    let now = s.now_ms() as f64;
    match m.msg_type() {
        "Notify" if m.content().text("tag") == Some("ping") => {
            let peers: Vec<String> = s.peers.lock().unwrap().keys().filter(|k| !k.starts_with('#')).cloned().collect();
            for peer in peers {
                let mut c = Content::new();
                c.set("t1", Value::text(format!("{now}"))).unwrap();
                c.set("src", Value::text(s.node_id.clone())).unwrap();
                if let Ok(ping) = Message::new(
                    "Ping",
                    Reliability::BestEffort,
                    ServiceKind::NetworkTime.profile_on(&peer),
                    c,
                    now as u64,
                    None,
                ) {
                    s.submit(ping);
                }
            }
        }
        "Ping" => {
            let Some(src) = m.content().text("src").map(String::from) else { return };
            let mut c = Content::new();
            c.set("t1", Value::text(m.content().text("t1").unwrap_or("0").to_string())).unwrap();
            c.set("t2", Value::text(format!("{now}"))).unwrap();
            c.set("t3", Value::text(format!("{now}"))).unwrap();
            c.set("src", Value::text(s.node_id.clone())).unwrap();
            if let Ok(response) = Message::new(
                "Response",
                Reliability::BestEffort,
                ServiceKind::NetworkTime.profile_on(&src),
                c,
                now as u64,
                None,
            ) {
                s.submit(response);
            }
        }
        "Response" => {
            let Some(peer) = m.content().text("src").map(String::from) else { return };
            let parse = |k: &str| m.content().text(k).and_then(|v| v.parse::<f64>().ok());
            if let (Some(t1), Some(t2), Some(t3)) = (parse("t1"), parse("t2"), parse("t3")) {
                let mut clocks = s.clocks.lock().unwrap();
                let cm = clocks
                    .entry(peer.clone())
                    .or_insert_with(|| crate::services::clock::ClockModel::new(peer));
                let _ = cm.record_ping_sample(crate::services::clock::PingSample {
                    t1,
                    t2,
                    t3,
                    t4: now,
                });
            }
        }
        _ => {}
    }
}

fn reply_to(s: &NodeShared, request: &Message, msg_type: &str, body: Content) {
    let Some(profile) = request.content().text("reply_to") else { return };
    if let Ok(m) = Message::new(msg_type, Reliability::Reliable, profile, body, s.now_ms(), None) {
        s.submit(m);
    }
}

fn handle_lifecycle(s: &NodeShared, job: &crate::kernel::Job) {
    let m = &job.message;
    let c = m.content();
    match m.msg_type() {
        "Deploy" => {
            let (Some(profile), Some(kind)) = (c.text("profile"), c.text("kind")) else { return };
            let config = match c.get("config") {
                Some(Value::Map(cm)) => cm.clone(),
                _ => Content::new(),
            };
            let result = {
                let mut rng = s.rng.lock().unwrap();
                let mut ctx = Ctx { now_ms: s.now_ms(), node_id: &s.node_id, rng: &mut *rng };
                create_component(&s.factories, kind, &config, &mut ctx)
            };
            let mut body = Content::new();
            body.set("profile", Value::text(profile.to_string())).unwrap();
            match result {
                Ok((comp, init)) => {
                    let shell = Shell::new(profile, kind, config, comp);
                    let registered = s.kernel.lock().unwrap().register_component(shell);
                    match registered {
                        Ok(_) => {
                            for msg in init {
                                s.submit(msg);
                            }
                            body.set("outcome", Value::text("deployed")).unwrap();
                        }
                        Err(e) => {
                            body.set("outcome", Value::text(format!("error: {e}"))).unwrap();
                        }
                    }
                }
                Err(e) => {
                    body.set("outcome", Value::text(format!("error: {e}"))).unwrap();
                }
            }
            reply_to(s, m, "DeployReport", body);
        }
        "Upgrade" => {
            let (Some(profile), Some(kind)) = (c.text("profile"), c.text("kind")) else { return };
            let overlay = match c.get("config") {
                Some(Value::Map(cm)) => Some(cm.clone()),
                _ => None,
            };
            let shell = { s.kernel.lock().unwrap().shell_by_profile(profile) };
            let mut body = Content::new();
            body.set("profile", Value::text(profile.to_string())).unwrap();
            match shell {
                None => {
                    body.set("outcome", Value::text("error: profile not local")).unwrap();
                }
                Some((_, shell)) => {
                    let started = Instant::now();
                    let result = {
                        let mut rng = s.rng.lock().unwrap();
                        let mut ctx = Ctx { now_ms: s.now_ms(), node_id: &s.node_id, rng: &mut *rng };
                        shell.lock().unwrap().upgrade(kind, &s.factories, overlay.as_ref(), &mut ctx)
                    };
                    match result {
                        Ok((report, emitted)) => {
                            for msg in emitted {
                                if !msg.profile().starts_with("FaultLog@") {
                                    s.submit(msg);
                                }
                            }
                            body.set("old_kind", Value::text(report.old_kind)).unwrap();
                            body.set("new_kind", Value::text(report.new_kind)).unwrap();
                            body.set("buffered", Value::text(report.buffered.to_string())).unwrap();
                            body.set(
                                "pause_us",
                                Value::text(started.elapsed().as_micros().to_string()),
                            )
                            .unwrap();
                            body.set(
                                "outcome",
                                Value::text(match report.outcome {
                                    UpgradeOutcome::Replaced => "replaced".to_string(),
                                    UpgradeOutcome::Aborted { reason } => format!("aborted: {reason}"),
                                }),
                            )
                            .unwrap();
                        }
                        Err(e) => {
                            body.set("outcome", Value::text(format!("error: {e}"))).unwrap();
                        }
                    }
                }
            }
            reply_to(s, m, "UpgradeReport", body);
        }
        "Migrate" => {
            let (Some(profile), Some(dest)) = (c.text("profile"), c.text("dest")) else { return };
            let shell = { s.kernel.lock().unwrap().shell_by_profile(profile) };
            match shell {
                None => {
                    let mut body = Content::new();
                    body.set("profile", Value::text(profile.to_string())).unwrap();
                    body.set("outcome", Value::text("error: profile not local")).unwrap();
                    reply_to(s, m, "MigrateReport", body);
                }
                Some((addr, shell)) => {
                    let pkg = shell.lock().unwrap().begin_migration();
                    match pkg {
                        Err(e) => {
                            let mut body = Content::new();
                            body.set("profile", Value::text(profile.to_string())).unwrap();
                            body.set("outcome", Value::text(format!("error: {e}"))).unwrap();
                            reply_to(s, m, "MigrateReport", body);
                        }
                        Ok(pkg) => {
                            let mut body = pkg.to_content();
                            body.set("src", Value::text(s.node_id.clone())).unwrap();
                            if let Some(r) = c.text("reply_to") {
                                body.set("reply_to", Value::text(r.to_string())).unwrap();
                            }
                            body.set("src_addr", Value::text(addr.local_id.to_string())).unwrap();
                            if let Ok(arrive) = Message::new(
                                "MigrateArrive",
                                Reliability::Reliable,
                                ServiceKind::Lifecycle.profile_on(dest),
                                body,
                                s.now_ms(),
                                None,
                            ) {
                                s.submit(arrive);
                            }
                        }
                    }
                }
            }
        }
        "MigrateArrive" => {
            let Some(src) = c.text("src").map(String::from) else { return };
            let pkg = match crate::component::MigrationPackage::from_content(c) {
                Ok(p) => p,
                Err(_) => return,
            };
            let created = {
                let mut rng = s.rng.lock().unwrap();
                let mut ctx = Ctx { now_ms: s.now_ms(), node_id: &s.node_id, rng: &mut *rng };
                create_component(&s.factories, &pkg.component_kind, &pkg.config, &mut ctx).and_then(
                    |(mut comp, init)| {
                        comp.restore(&pkg.memento)
                            .map_err(crate::component::LifecycleError::Rejected)?;
                        Ok((comp, init))
                    },
                )
            };
            match created {
                Err(e) => {
                    let mut body = Content::new();
                    body.set("profile", Value::text(pkg.profile.clone())).unwrap();
                    body.set("reason", Value::text(e.to_string())).unwrap();
                    if let Some(r) = c.text("reply_to") {
                        body.set("reply_to", Value::text(r.to_string())).unwrap();
                    }
                    if let Ok(fail) = Message::new(
                        "MigrateFail",
                        Reliability::Reliable,
                        ServiceKind::Lifecycle.profile_on(&src),
                        body,
                        s.now_ms(),
                        None,
                    ) {
                        s.submit(fail);
                    }
                }
                Ok((comp, init)) => {
                    let shell = Shell::new(&pkg.profile, &pkg.component_kind, pkg.config.clone(), comp);
                    let registered = { s.kernel.lock().unwrap().register_component(shell) };
                    if registered.is_err() {
                        return;
                    }
                    for msg in init {
                        s.submit(msg);
                    }
                    // Tell every peer, then the source, then release the
                    // buffered messages into the ordinary delivery path.
                    let peers: Vec<String> = s
                        .peers
                        .lock()
                        .unwrap()
                        .keys()
                        .filter(|k| !k.starts_with('#'))
                        .cloned()
                        .collect();
                    for peer in peers {
                        let mut rc = Content::new();
                        rc.set("profile", Value::text(pkg.profile.clone())).unwrap();
                        rc.set("node", Value::text(s.node_id.clone())).unwrap();
                        if let Ok(rebind) = Message::new(
                            "Rebind",
                            Reliability::Reliable,
                            ServiceKind::ProfileRegistry.profile_on(&peer),
                            rc,
                            s.now_ms(),
                            None,
                        ) {
                            s.submit(rebind);
                        }
                    }
                    for pending in pkg.pending {
                        s.submit(pending);
                    }
                    let mut done = Content::new();
                    done.set("profile", Value::text(pkg.profile.clone())).unwrap();
                    if let Some(r) = c.text("reply_to") {
                        done.set("reply_to", Value::text(r.to_string())).unwrap();
                    }
                    if let Ok(msg) = Message::new(
                        "MigrateDone",
                        Reliability::Reliable,
                        ServiceKind::Lifecycle.profile_on(&src),
                        done,
                        s.now_ms(),
                        None,
                    ) {
                        s.submit(msg);
                    }
                }
            }
        }
        "MigrateDone" => {
            let Some(profile) = c.text("profile") else { return };
            let found = { s.kernel.lock().unwrap().shell_by_profile(profile) };
            // The registry was already rebound by the broadcast; what is
            // left is tearing down the local shell and forwarding
            // stragglers.
            let leftovers = match found {
                Some((addr, shell)) => {
                    let left = shell.lock().unwrap().finish_migration();
                    s.kernel.lock().unwrap().deregister_component(&addr);
                    left
                }
                None => Vec::new(),
            };
            for msg in leftovers {
                s.submit(msg);
            }
            let mut body = Content::new();
            body.set("profile", Value::text(profile.to_string())).unwrap();
            body.set("outcome", Value::text("migrated")).unwrap();
            reply_to(s, m, "MigrateReport", body);
        }
        "MigrateFail" => {
            let Some(profile) = c.text("profile") else { return };
            let found = { s.kernel.lock().unwrap().shell_by_profile(profile) };
            if let Some((_, shell)) = found {
                let outputs = {
                    let mut rng = s.rng.lock().unwrap();
                    let mut ctx = Ctx { now_ms: s.now_ms(), node_id: &s.node_id, rng: &mut *rng };
                    shell.lock().unwrap().abort_migration(&mut ctx)
                };
                for msg in outputs {
                    s.submit(msg);
                }
            }
            let mut body = Content::new();
            body.set("profile", Value::text(profile.to_string())).unwrap();
            body.set(
                "outcome",
                Value::text(format!("aborted: {}", c.text("reason").unwrap_or("unknown"))),
            )
            .unwrap();
            reply_to(s, m, "MigrateReport", body);
        }
        _ => {}
    }
}

/// Waits in-process for a profile to appear locally (test helper).
pub fn wait_for_profile(s: &NodeShared, profile: &str, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if s.kernel.lock().unwrap().shell_by_profile(profile).is_some() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    false
}

impl NodeShared {
    /// Whether a profile currently resolves to a live local shell.
    pub fn kernel_has_profile(&self, profile: &str) -> bool {
        self.kernel.lock().unwrap().shell_by_profile(profile).is_some()
    }
}
