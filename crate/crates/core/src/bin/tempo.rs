use clap::{Parser, Subcommand, ValueEnum};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};
use tempo_core::component::FactoryRegistry;
use tempo_core::config::{ChannelConfig, KernelConfig, PlantConfig};
use tempo_core::harness::components as hc;
use tempo_core::harness::experiments as exp;
use tempo_core::harness::plant::matrix_value;
use tempo_core::kernel::ServiceKind;
use tempo_core::message::{Content, Message, Reliability, Value};
use tempo_core::sched::sim::{simulate_schedule, Policy, SimOptions};
use tempo_core::sched::taskfile::{load_taskset, trace_to_csv};
use tempo_core::sched::{
    edf_schedulable, response_time_analysis, rm_lub, rm_pip_schedulable, rm_schedulable_lub,
    utilization, ResponseTime, Verdict,
};
use tempo_core::services::link::{LinkEndpoint, RetryConfig};
use tempo_core::time::ms_to_us;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

/// Real-time message middleware for networked control systems.
#[derive(Parser)]
#[command(name = "tempo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a middleware node until interrupted.
    NodeRun {
        /// Kernel/node configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the node id from the config.
        #[arg(long)]
        node_id: Option<String>,
        /// Override the listen address (host:port).
        #[arg(long)]
        listen: Option<String>,
        /// Time source: "real" (default) or "sim".
        #[arg(long)]
        time: Option<String>,
        /// Log deliveries and faults to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Manage components on a running node.
    Admin {
        #[command(subcommand)]
        action: AdminAction,
    },
    /// Schedulability analyses over a task-set file.
    Analyze {
        /// Task-set file (TOML).
        taskset: PathBuf,
        #[arg(long, value_enum)]
        analysis: Analysis,
        /// Scheduling policy for `simulate`.
        #[arg(long, value_enum, default_value_t = PolicyArg::Rm)]
        policy: PolicyArg,
        /// Enable priority inheritance in `simulate`.
        #[arg(long)]
        pip: bool,
        /// Simulation horizon; default one hyperperiod.
        #[arg(long)]
        horizon_ms: Option<f64>,
        /// Where `simulate` writes its schedule trace CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named scripted experiment on the simulated clock.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        /// Output directory for the trace bundle.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Plant config; defaults to the shipped cart-pole.
        #[arg(long)]
        plant: Option<PathBuf>,
        /// Channel config; defaults to the shipped serial link.
        #[arg(long)]
        channel: Option<PathBuf>,
        /// Priority inheritance for `inversion`: run only this variant.
        #[arg(long)]
        pip: Option<bool>,
        /// Stress: run the equal-priority negative control instead.
        #[arg(long)]
        negative_control: bool,
        #[arg(long)]
        duration_ms: Option<u64>,
        /// Script file for the `script` experiment.
        #[arg(long)]
        script: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AdminAction {
    /// Instantiate a component kind under a profile.
    Deploy {
        profile: String,
        #[arg(long)]
        node: String,
        #[arg(long)]
        kind: String,
        /// Extra config entries as key=value.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Replace a running component, carrying its state over.
    Upgrade {
        profile: String,
        #[arg(long)]
        node: String,
        /// New component kind; defaults to the current kind.
        #[arg(long)]
        kind: Option<String>,
        /// Gain label from the plant config (controller upgrades).
        #[arg(long)]
        gain: Option<String>,
        /// Plant config supplying the gain matrices.
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Move a component to another node.
    Migrate {
        profile: String,
        #[arg(long)]
        node: String,
        /// Destination node id.
        #[arg(long)]
        dest: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Util,
    Rm,
    Edf,
    Rmpip,
    Rta,
    Simulate,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Rm,
    Edf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    RmTable,
    Stress,
    Upgrade,
    Migrate,
    Inversion,
    LtaOutage,
    /// Scripted run from a TOML file (see --script).
    Script,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::NodeRun { config, node_id, listen, time, verbose } => {
            cmd_node_run(config, node_id, listen, time, verbose)
        }
        Command::Admin { action } => cmd_admin(action),
        Command::Analyze { taskset, analysis, policy, pip, horizon_ms, out } => {
            cmd_analyze(taskset, analysis, policy, pip, horizon_ms, out)
        }
        Command::Experiment {
            name,
            out,
            seed,
            plant,
            channel,
            pip,
            negative_control,
            duration_ms,
            script,
        } => cmd_experiment(name, out, seed, plant, channel, pip, negative_control, duration_ms, script),
    }
}

fn config_err(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn runtime_err(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

fn standard_factories() -> FactoryRegistry {
    let mut f = FactoryRegistry::new();
    f.register("pendulum-controller", hc::Controller::empty);
    f.register("dsp-proxy", hc::DspProxy::empty);
    f.register("stress", hc::StressTask::empty);
    f.register("worker", hc::Worker::empty);
    f.register("sink", hc::sink_factory);
    f
}

fn cmd_node_run(
    config: PathBuf,
    node_id: Option<String>,
    listen: Option<String>,
    time: Option<String>,
    verbose: bool,
) -> ExitCode {
    let mut cfg = match KernelConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return config_err(e),
    };
    if let Some(id) = node_id {
        cfg.node.id = id;
    }
    if let Some(l) = listen {
        cfg.node.listen = Some(l);
    }
    if let Some(t) = time {
        cfg.node.time = t;
    }
    let handle = match tempo_core::node::run_node(&cfg, standard_factories(), verbose) {
        Ok(h) => h,
        Err(tempo_core::node::NodeError::Config(e)) => return config_err(e),
        Err(e) => return runtime_err(e),
    };
    if let Some(addr) = handle.local_addr() {
        println!("node {} listening on {addr}", cfg.node.id);
    } else {
        println!("node {} running (no listener)", cfg.node.id);
    }
    // Serve until interrupted.
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

/// A transient admin session: handshake as an ephemeral node, bind a
/// reply profile, send one request, wait for the report.
struct AdminSession {
    stream: TcpStream,
    endpoint: LinkEndpoint,
    node_id: String,
    peer_hint: String,
    reply_profile: String,
    buf: Vec<u8>,
}

impl AdminSession {
    fn connect(addr: &str) -> std::io::Result<AdminSession> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_millis(100)))?;
        let node_id = format!("admin-cli-{}", std::process::id());
        let reply_profile = format!("report@{node_id}");
        Ok(AdminSession {
            stream,
            endpoint: LinkEndpoint::new(RetryConfig::default()),
            node_id,
            peer_hint: String::new(),
            reply_profile,
            buf: Vec::new(),
        })
    }

    fn now_us(&self) -> u64 {
        // Monotonic-enough for retransmission bookkeeping.
        use std::sync::OnceLock;
        static START: OnceLock<Instant> = OnceLock::new();
        START.get_or_init(Instant::now).elapsed().as_micros() as u64
    }

    fn send(&mut self, m: &Message) -> std::io::Result<()> {
        let now = self.now_us();
        let frame = self
            .endpoint
            .send(m, now)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        self.stream.write_all(&frame.bytes)
    }

    fn hello_and_bind(&mut self, target_node: &str) -> std::io::Result<()> {
        self.peer_hint = target_node.to_string();
        let mut c = Content::new();
        c.set("node", Value::text(self.node_id.clone())).unwrap();
        let hello = Message::new(
            "Hello",
            Reliability::BestEffort,
            ServiceKind::NetworkMessenger.profile_on(target_node),
            c,
            0,
            None,
        )
        .unwrap();
        self.send(&hello)?;
        let mut c = Content::new();
        c.set("profile", Value::text(self.reply_profile.clone())).unwrap();
        c.set("node", Value::text(self.node_id.clone())).unwrap();
        let rebind = Message::new(
            "Rebind",
            Reliability::Reliable,
            ServiceKind::ProfileRegistry.profile_on(target_node),
            c,
            0,
            None,
        )
        .unwrap();
        self.send(&rebind)
    }

    /// Reads frames until a message of the given type arrives or the
    /// deadline passes.
    fn wait_for(&mut self, msg_type: &str, timeout: Duration) -> Option<Message> {
        let deadline = Instant::now() + timeout;
        let mut chunk = [0u8; 4096];
        while Instant::now() < deadline {
            let now = self.now_us();
            for frame in self.endpoint.poll_retransmits(now) {
                let _ = self.stream.write_all(&frame.bytes);
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return None,
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(ref e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut => {}
                Err(_) => return None,
            }
            while let Some(frame) = take_frame(&mut self.buf) {
                if let Ok(input) = self.endpoint.on_frame(&frame, now) {
                    for ack in input.acks {
                        let _ = self.stream.write_all(&ack.bytes);
                    }
                    for m in input.delivered {
                        if m.msg_type() == msg_type {
                            return Some(m);
                        }
                    }
                }
            }
        }
        None
    }
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

fn parse_kv(set: &[String]) -> Result<Content, String> {
    let mut c = Content::new();
    for item in set {
        let (k, v) = item.split_once('=').ok_or_else(|| format!("bad --set {item:?}"))?;
        c.set(k, Value::text(v.to_string())).map_err(|e| e.to_string())?;
    }
    Ok(c)
}

fn cmd_admin(action: AdminAction) -> ExitCode {
    let (node_addr, request, report_type) = match build_admin_request(action) {
        Ok(r) => r,
        Err(e) => return config_err(e),
    };
    // `--node host:port/node-id`: dial the host:port part.
    let dial = node_addr.split_once('/').map(|(a, _)| a).unwrap_or(&node_addr);
    let mut session = match AdminSession::connect(dial) {
        Ok(s) => s,
        Err(e) => return runtime_err(format!("cannot reach node at {dial}: {e}")),
    };
    // The target node id travels inside the request profile suffix.
    let target = request.profile().rsplit('@').next().unwrap_or_default().to_string();
    if let Err(e) = session.hello_and_bind(&target) {
        return runtime_err(e);
    }
    if let Err(e) = session.send(&request) {
        return runtime_err(e);
    }
    match session.wait_for(&report_type, Duration::from_secs(10)) {
        Some(report) => {
            let outcome = report.content().text("outcome").unwrap_or("?");
            println!("{report_type} for {:?}:", report.content().text("profile").unwrap_or("?"));
            for (k, v) in report.content().iter() {
                if let Some(text) = v.as_text() {
                    println!("  {k} = {text}");
                }
            }
            if outcome.starts_with("error") || outcome.starts_with("aborted") {
                ExitCode::from(EXIT_RUNTIME)
            } else {
                ExitCode::SUCCESS
            }
        }
        None => runtime_err("timed out waiting for the node's report"),
    }
}

fn build_admin_request(action: AdminAction) -> Result<(String, Message, String), String> {
    let reply_profile = format!("report@admin-cli-{}", std::process::id());
    match action {
        AdminAction::Deploy { profile, node, kind, set } => {
            let target = node_id_of(&node)?;
            let mut body = Content::new();
            body.set("profile", Value::text(profile)).unwrap();
            body.set("kind", Value::text(kind)).unwrap();
            body.set("reply_to", Value::text(reply_profile)).unwrap();
            let config = parse_kv(&set)?;
            if !config.is_empty() {
                body.set("config", Value::Map(config)).unwrap();
            }
            let m = Message::new(
                "Deploy",
                Reliability::Reliable,
                ServiceKind::Lifecycle.profile_on(&target),
                body,
                0,
                None,
            )
            .map_err(|e| e.to_string())?;
            Ok((node, m, "DeployReport".into()))
        }
        AdminAction::Upgrade { profile, node, kind, gain, plant, set } => {
            let target = node_id_of(&node)?;
            let mut overlay = parse_kv(&set)?;
            if let Some(label) = gain {
                let plant_path =
                    plant.ok_or_else(|| "--gain requires --plant for the gain matrices".to_string())?;
                let plant = PlantConfig::load(&plant_path).map_err(|e| e.to_string())?;
                let g = plant
                    .gain(&label)
                    .ok_or_else(|| format!("gain {label:?} not in {plant_path:?}"))?;
                overlay.set("gain_label", Value::text(label)).unwrap();
                overlay.set("k", matrix_value(&g.k)).unwrap();
            }
            let mut body = Content::new();
            body.set("profile", Value::text(profile)).unwrap();
            body.set("kind", Value::text(kind.unwrap_or_else(|| "pendulum-controller".into())))
                .unwrap();
            body.set("reply_to", Value::text(reply_profile)).unwrap();
            if !overlay.is_empty() {
                body.set("config", Value::Map(overlay)).unwrap();
            }
            let m = Message::new(
                "Upgrade",
                Reliability::Reliable,
                ServiceKind::Lifecycle.profile_on(&target),
                body,
                0,
                None,
            )
            .map_err(|e| e.to_string())?;
            Ok((node, m, "UpgradeReport".into()))
        }
        AdminAction::Migrate { profile, node, dest } => {
            let target = node_id_of(&node)?;
            let mut body = Content::new();
            body.set("profile", Value::text(profile)).unwrap();
            body.set("dest", Value::text(dest)).unwrap();
            body.set("reply_to", Value::text(reply_profile)).unwrap();
            let m = Message::new(
                "Migrate",
                Reliability::Reliable,
                ServiceKind::Lifecycle.profile_on(&target),
                body,
                0,
                None,
            )
            .map_err(|e| e.to_string())?;
            Ok((node, m, "MigrateReport".into()))
        }
    }
}

/// Admin targets are `host:port/node-id`; a bare `host:port` addresses a
/// node whose id we learn from the report.
fn node_id_of(node: &str) -> Result<String, String> {
    match node.split_once('/') {
        Some((_, id)) if !id.is_empty() => Ok(id.to_string()),
        _ => Err(format!(
            "--node must be host:port/node-id (got {node:?}); the suffix names the target node"
        )),
    }
}

fn cmd_analyze(
    taskset: PathBuf,
    analysis: Analysis,
    policy: PolicyArg,
    pip: bool,
    horizon_ms: Option<f64>,
    out: Option<PathBuf>,
) -> ExitCode {
    let ts = match load_taskset(&taskset) {
        Ok(t) => t,
        Err(e) => return config_err(e),
    };
    let verdict_str = |v: Verdict| match v {
        Verdict::Guaranteed => "guaranteed",
        Verdict::Inconclusive => "inconclusive (bound is sufficient only)",
    };
    match analysis {
        Analysis::Util => {
            println!("U = {}", utilization(&ts));
            match rm_lub(ts.len()) {
                Ok(b) => println!("rm_lub({}) = {b}", ts.len()),
                Err(e) => return config_err(e),
            }
        }
        Analysis::Rm => match rm_schedulable_lub(&ts) {
            Ok(v) => println!(
                "U = {} vs rm_lub({}) = {} -> {}",
                utilization(&ts),
                ts.len(),
                rm_lub(ts.len()).unwrap(),
                verdict_str(v)
            ),
            Err(e) => return config_err(e),
        },
        Analysis::Edf => match edf_schedulable(&ts) {
            Ok(ok) => println!(
                "U = {} -> {}",
                utilization(&ts),
                if ok { "schedulable under EDF" } else { "not schedulable under EDF" }
            ),
            Err(e) => return config_err(e),
        },
        Analysis::Rmpip => match rm_pip_schedulable(&ts) {
            Ok(v) => println!("blocking-aware rate-monotonic bound -> {}", verdict_str(v)),
            Err(e) => return config_err(e),
        },
        Analysis::Rta => {
            for (t, r) in ts.tasks().iter().zip(response_time_analysis(&ts)) {
                match r {
                    ResponseTime::Converged(us) =>

                        println!("{}: R = {} ms", t.name, tempo_core::time::us_to_ms_string(us)),
                    ResponseTime::Divergent => {
                        println!("{}: divergent (response exceeds the deadline)", t.name)
                    }
                }
            }
        }
        Analysis::Simulate => {
            let horizon = match horizon_ms {
                Some(ms) => match ms_to_us(ms) {
                    Ok(us) => us,
                    Err(e) => return config_err(e),
                },
                None => match ts.hyperperiod_us() {
                    Ok(h) => h,
                    Err(e) => return config_err(e),
                },
            };
            let policy = match policy {
                PolicyArg::Rm => Policy::FixedPriorityRm,
                PolicyArg::Edf => Policy::Edf,
            };
            let trace =
                match simulate_schedule(&ts, policy, SimOptions::over(horizon).with_pip(pip).recording()) {
                    Ok(t) => t,
                    Err(e) => return config_err(e),
                };
            println!("jobs: {}, deadline misses: {}", trace.jobs.len(), trace.misses.len());
            for (i, t) in ts.tasks().iter().enumerate() {
                if let Some(r) = trace.worst_response_us(i) {
                    println!(
                        "{}: worst response {} ms, worst blocking {} ms",
                        t.name,
                        tempo_core::time::us_to_ms_string(r),
                        tempo_core::time::us_to_ms_string(trace.worst_blocking_us(i))
                    );
                }
            }
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, trace_to_csv(&ts, &trace)) {
                    return runtime_err(e);
                }
                println!("trace written to {}", path.display());
            }
        }
    }
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
fn cmd_experiment(
    name: ExperimentName,
    out: PathBuf,
    seed: u64,
    plant: Option<PathBuf>,
    channel: Option<PathBuf>,
    pip: Option<bool>,
    negative_control: bool,
    duration_ms: Option<u64>,
    script: Option<PathBuf>,
) -> ExitCode {
    let plant = match plant {
        Some(p) => match PlantConfig::load(&p) {
            Ok(c) => c,
            Err(e) => return config_err(e),
        },
        None => exp::default_cartpole(),
    };
    let channel = match channel {
        Some(p) => match ChannelConfig::load(&p) {
            Ok(c) => c,
            Err(e) => return config_err(e),
        },
        None => exp::serial_channel(),
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        return runtime_err(e);
    }

    let write_bundle = |trace: &tempo_core::trace::TraceBundle| -> Result<(), std::io::Error> {
        trace.write_to(&out)
    };

    let finish = |summary: &str,
                  trace: &tempo_core::trace::TraceBundle,
                  diverged: Option<u64>|
     -> ExitCode {
        print!("{summary}");
        if let Err(e) = write_bundle(trace) {
            return runtime_err(e);
        }
        println!("trace bundle written to {}", out.display());
        match diverged {
            // Partial traces are on disk already; signal the failure.
            Some(_) => ExitCode::from(EXIT_DIVERGENCE),
            None => ExitCode::SUCCESS,
        }
    };

    match name {
        ExperimentName::RmTable => match exp::rm_table(seed, duration_ms.unwrap_or(30_000)) {
            Ok(o) => finish(&o.summary, &o.last_trace, None),
            Err(e) => runtime_err(e),
        },
        ExperimentName::Stress => {
            match exp::stress(&plant, &channel, seed, duration_ms.unwrap_or(60_000), negative_control)
            {
                Ok(o) => finish(&o.summary, &o.trace, o.diverged),
                Err(e) => runtime_err(e),
            }
        }
        ExperimentName::Upgrade => {
            match exp::upgrade(&plant, &channel, seed, duration_ms.unwrap_or(60_000), 30_000) {
                Ok(o) => finish(&o.summary, &o.trace, o.diverged),
                Err(e) => runtime_err(e),
            }
        }
        ExperimentName::Migrate => {
            match exp::migrate(&plant, &channel, seed, duration_ms.unwrap_or(60_000), 40_000) {
                Ok(o) => finish(&o.summary, &o.trace, o.diverged),
                Err(e) => runtime_err(e),
            }
        }
        ExperimentName::LtaOutage => {
            match exp::lta_outage(&plant, seed, duration_ms.unwrap_or(30_000), 10_005, 3, 5) {
                Ok(o) => {
                    let code = finish(&o.summary, &o.trace, None);
                    if !o.applied_inputs_equal {
                        return ExitCode::from(EXIT_RUNTIME);
                    }
                    code
                }
                Err(e) => runtime_err(e),
            }
        }
        ExperimentName::Script => {
            let Some(path) = script else {
                return config_err("the script experiment needs --script FILE");
            };
            let mut cfg = match exp::ScriptConfig::load(&path) {
                Ok(c) => c,
                Err(e) => return config_err(e),
            };
            cfg.seed = seed;
            if let Some(d) = duration_ms {
                cfg.duration_ms = d;
            }
            match exp::run_script(&plant, &channel, &cfg) {
                Ok(o) => finish(&o.summary, &o.trace, o.diverged),
                Err(e) => runtime_err(e),
            }
        }
        ExperimentName::Inversion => {
            let variants: Vec<bool> = match pip {
                Some(v) => vec![v],
                None => vec![false, true],
            };
            let mut summary = String::new();
            for pip in variants {
                let (trace, blocked_ms) = exp::inversion(pip);
                summary.push_str(&format!(
                    "priority inheritance {}: high-priority job blocked {blocked_ms} ms\n",
                    if pip { "on" } else { "off" }
                ));
                let ts = canonical_inversion_taskset();
                let csv = trace_to_csv(&ts, &trace);
                let file = out.join(format!("inversion-pip-{}.csv", if pip { "on" } else { "off" }));
                if let Err(e) = std::fs::write(&file, csv) {
                    return runtime_err(e);
                }
            }
            print!("{summary}");
            if let Err(e) = std::fs::write(out.join("summary.txt"), &summary) {
                return runtime_err(e);
            }
            println!("traces written to {}", out.display());
            ExitCode::SUCCESS
        }
    }
}

/// Task names for the inversion trace export (indices match the scenario).
fn canonical_inversion_taskset() -> tempo_core::sched::TaskSet {
    use tempo_core::sched::{TaskSet, TaskSpec};
    TaskSet::new(vec![
        TaskSpec::new("J1", 2_000, 100_000),
        TaskSpec::new("J2", 4_000, 200_000),
        TaskSpec::new("J3", 4_000, 300_000),
    ])
    .expect("valid")
}
