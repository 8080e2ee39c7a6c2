//! Component model: shells, mementos, upgrade, and migration.
//!
//! A component implements one uniform interface and never touches the
//! runtime directly: it receives messages and returns messages. The
//! [`Shell`] around it owns the life cycle. Because every component can
//! externalize its state as a [`Memento`] document, a shell can replace
//! the implementation at runtime (upgrade) or package the component up
//! and recreate it on another node (migration) without losing messages:
//! while paused or migrating, arriving messages are buffered in order and
//! flushed on resume.

use crate::message::{Content, Message, MessageError, Value};
use indexmap::IndexMap;
use rand::RngCore;
use std::collections::VecDeque;

/// Call context handed to component callbacks: the local clock, the
/// hosting node's identity (for addressing node-local services), and the
/// run's deterministic random stream.
pub struct Ctx<'a> {
    pub now_ms: u64,
    pub node_id: &'a str,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, thiserror::Error)]
pub enum ComponentError {
    #[error("component failure: {0}")]
    Failed(String),
    #[error("memento schema mismatch: component accepts {expected:?}, got {got:?}")]
    MementoSchema { expected: String, got: String },
    #[error("bad memento: {0}")]
    MementoContents(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Message(#[from] MessageError),
}

/// The uniform component interface.
///
/// `process_message` is the only way a component emits messages, and a
/// shell invokes it for at most one message at a time. `memento` must be
/// observably side-effect free; `restore(memento())` must leave behavior
/// unchanged. `execution_cost_us` declares how much processor time a
/// delivery consumes on the simulated clock (real deployments simply take
/// as long as they take).
pub trait Component: Send {
    fn initialize(&mut self, config: &Content, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError>;

    fn process_message(&mut self, msg: &Message, ctx: &mut Ctx)
        -> Result<Vec<Message>, ComponentError>;

    fn memento(&self) -> Memento;

    fn restore(&mut self, memento: &Memento) -> Result<(), ComponentError>;

    fn destroy(&mut self) {}

    fn execution_cost_us(&self, _msg: &Message) -> u64 {
        0
    }
}

/// Externalized component state: a versioned document in the same format
/// as message content, so it can travel inside a migration message and a
/// newer component version can migrate older state forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Memento {
    pub schema_id: String,
    pub version: u32,
    pub state: Content,
}

impl Memento {
    pub fn new(schema_id: impl Into<String>, version: u32, state: Content) -> Self {
        Memento { schema_id: schema_id.into(), version, state }
    }

    /// Checks the schema id, the usual first line of every `restore`.
    pub fn expect_schema(&self, schema_id: &str) -> Result<(), ComponentError> {
        if self.schema_id != schema_id {
            return Err(ComponentError::MementoSchema {
                expected: schema_id.to_string(),
                got: self.schema_id.clone(),
            });
        }
        Ok(())
    }

    pub fn to_content(&self) -> Content {
        let mut c = Content::new();
        c.set("schema", Value::text(self.schema_id.clone())).unwrap();
        c.set("version", Value::text(self.version.to_string())).unwrap();
        if !self.state.is_empty() {
            c.set("state", Value::Map(self.state.clone())).unwrap();
        }
        c
    }

    pub fn from_content(c: &Content) -> Result<Self, ComponentError> {
        let schema_id = c
            .text("schema")
            .ok_or_else(|| ComponentError::MementoContents("missing schema".into()))?
            .to_string();
        let version = c
            .u64("version")
            .ok_or_else(|| ComponentError::MementoContents("missing version".into()))?
            as u32;
        let state = match c.get("state") {
            Some(Value::Map(m)) => m.clone(),
            _ => Content::new(),
        };
        Ok(Memento { schema_id, version, state })
    }
}

/// Creates component instances by kind name. Both ends of a migration are
/// expected to have the factory registered; code does not travel.
#[derive(Default)]
pub struct FactoryRegistry {
    factories: IndexMap<String, Box<dyn Fn() -> Box<dyn Component> + Send + Sync>>,
}

impl FactoryRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: impl Into<String>, f: F)
    where
        F: Fn() -> Box<dyn Component> + Send + Sync + 'static,
    {
        self.factories.insert(kind.into(), Box::new(f));
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn create(&self, kind: &str) -> Result<Box<dyn Component>, LifecycleError> {
        self.factories
            .get(kind)
            .map(|f| f())
            .ok_or_else(|| LifecycleError::UnknownKind(kind.to_string()))
    }
}

impl std::fmt::Debug for FactoryRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactoryRegistry")
            .field("kinds", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShellState {
    Running,
    Paused,
    Migrating,
    Destroyed,
}

/// Result of handing a message to a shell.
#[derive(Debug)]
pub enum Delivery {
    /// The component ran; these are its emissions.
    Processed(Vec<Message>),
    /// Shell paused or migrating: buffered for later, in arrival order.
    Buffered,
    /// Shell destroyed; the caller decides whether to forward or drop.
    Undeliverable,
    /// The component crashed while processing (fault, not a lost message:
    /// the message was consumed by the failing execution).
    Failed(ComponentError),
}

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error("no factory registered for component kind {0:?}")]
    UnknownKind(String),
    #[error("operation requires a running shell (state {0:?})")]
    NotRunning(ShellState),
    #[error("component rejected state: {0}")]
    Rejected(#[from] ComponentError),
}

/// What happened during an upgrade.
#[derive(Debug, Clone, PartialEq)]
pub enum UpgradeOutcome {
    Replaced,
    /// The new component rejected the memento; the old one is back in
    /// place with its pre-upgrade state.
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpgradeReport {
    pub profile: String,
    pub old_kind: String,
    pub new_kind: String,
    pub outcome: UpgradeOutcome,
    /// How long deliveries were suspended, in simulated/real microseconds.
    pub pause_us: u64,
    /// Messages buffered while paused and flushed on resume.
    pub buffered: usize,
}

/// Everything needed to recreate a component elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPackage {
    pub profile: String,
    pub component_kind: String,
    pub config: Content,
    pub memento: Memento,
    pub pending: Vec<Message>,
}

impl MigrationPackage {
    pub fn to_content(&self) -> Content {
        let mut c = Content::new();
        c.set("profile", Value::text(self.profile.clone())).unwrap();
        c.set("kind", Value::text(self.component_kind.clone())).unwrap();
        if !self.config.is_empty() {
            c.set("config", Value::Map(self.config.clone())).unwrap();
        }
        c.set("memento", Value::Map(self.memento.to_content())).unwrap();
        if !self.pending.is_empty() {
            let mut p = Content::new();
            for (i, m) in self.pending.iter().enumerate() {
                p.set(format!("m{i}"), Value::text(crate::message::serialize(m))).unwrap();
            }
            c.set("pending", Value::Map(p)).unwrap();
        }
        c
    }

    pub fn from_content(c: &Content) -> Result<Self, ComponentError> {
        let profile = c
            .text("profile")
            .ok_or_else(|| ComponentError::MementoContents("package missing profile".into()))?
            .to_string();
        let component_kind = c
            .text("kind")
            .ok_or_else(|| ComponentError::MementoContents("package missing kind".into()))?
            .to_string();
        let config = match c.get("config") {
            Some(Value::Map(m)) => m.clone(),
            _ => Content::new(),
        };
        let memento = match c.get("memento") {
            Some(Value::Map(m)) => Memento::from_content(m)?,
            _ => return Err(ComponentError::MementoContents("package missing memento".into())),
        };
        let mut pending = Vec::new();
        if let Some(Value::Map(p)) = c.get("pending") {
            for (_, v) in p.iter() {
                let text = v
                    .as_text()
                    .ok_or_else(|| ComponentError::MementoContents("bad pending entry".into()))?;
                pending.push(crate::message::parse(text)?);
            }
        }
        Ok(MigrationPackage { profile, component_kind, config, memento, pending })
    }
}

/// The wrapper that owns a component instance and its life cycle.
///
/// A shell serializes all callback invocations: at most one message is
/// being processed at any instant, and lifecycle operations are mutually
/// exclusive with delivery.
pub struct Shell {
    profile: String,
    kind: String,
    config: Content,
    state: ShellState,
    component: Option<Box<dyn Component>>,
    inbox: VecDeque<Message>,
}

impl std::fmt::Debug for Shell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shell")
            .field("profile", &self.profile)
            .field("kind", &self.kind)
            .field("state", &self.state)
            .field("buffered", &self.inbox.len())
            .finish()
    }
}

impl Shell {
    /// Wraps an already-initialized component.
    pub fn new(
        profile: impl Into<String>,
        kind: impl Into<String>,
        config: Content,
        component: Box<dyn Component>,
    ) -> Self {
        Shell {
            profile: profile.into(),
            kind: kind.into(),
            config,
            state: ShellState::Running,
            component: Some(component),
            inbox: VecDeque::new(),
        }
    }

    pub fn profile(&self) -> &str {
        &self.profile
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn state(&self) -> ShellState {
        self.state
    }

    pub fn buffered(&self) -> usize {
        self.inbox.len()
    }

    /// Simulated processor cost of delivering `m` right now.
    pub fn cost_us(&self, m: &Message) -> u64 {
        match (&self.state, &self.component) {
            (ShellState::Running, Some(c)) => c.execution_cost_us(m),
            _ => 0,
        }
    }

    /// Channel through which the kernel hands a message to the component.
    pub fn deliver(&mut self, m: &Message, ctx: &mut Ctx) -> Delivery {
        match self.state {
            ShellState::Running => {
                let comp = self.component.as_mut().expect("running shell has a component");
                match comp.process_message(m, ctx) {
                    Ok(out) => Delivery::Processed(out),
                    Err(e) => Delivery::Failed(e),
                }
            }
            ShellState::Paused | ShellState::Migrating => {
                self.inbox.push_back(m.clone());
                Delivery::Buffered
            }
            ShellState::Destroyed => Delivery::Undeliverable,
        }
    }

    pub fn pause(&mut self) -> Result<(), LifecycleError> {
        if self.state != ShellState::Running {
            return Err(LifecycleError::NotRunning(self.state));
        }
        self.state = ShellState::Paused;
        Ok(())
    }

    /// Resumes delivery and processes everything buffered, in arrival
    /// order; returns the accumulated emissions.
    pub fn resume(&mut self, ctx: &mut Ctx) -> Vec<Message> {
        self.state = ShellState::Running;
        let mut out = Vec::new();
        while let Some(m) = self.inbox.pop_front() {
            if let Delivery::Processed(mut o) = self.deliver(&m, ctx) {
                out.append(&mut o);
            }
        }
        out
    }

    /// Snapshot of the component state without disturbing it.
    pub fn memento(&self) -> Option<Memento> {
        self.component.as_ref().map(|c| c.memento())
    }

    /// Runtime component replacement. On success the new component carries
    /// the old one's externalized state; on memento rejection the old
    /// component is restored with its own checkpoint and keeps running.
    /// Returns the report plus messages emitted while flushing the buffer.
    pub fn upgrade(
        &mut self,
        new_kind: &str,
        factories: &FactoryRegistry,
        config_overlay: Option<&Content>,
        ctx: &mut Ctx,
    ) -> Result<(UpgradeReport, Vec<Message>), LifecycleError> {
        self.pause()?;
        let old_kind = self.kind.clone();
        let mut old = self.component.take().expect("paused shell has a component");
        let checkpoint = old.memento();

        let mut config = self.config.clone();
        if let Some(overlay) = config_overlay {
            for (k, v) in overlay.iter() {
                config.set(k.clone(), v.clone()).map_err(ComponentError::from)?;
            }
        }

        let mut emitted = Vec::new();
        let attempt = create_component(factories, new_kind, &config, ctx).and_then(
            |(mut c, init_msgs)| {
                c.restore(&checkpoint).map_err(LifecycleError::Rejected)?;
                emitted.extend(init_msgs);
                Ok(c)
            },
        );
        let outcome = match attempt {
            Ok(new_component) => {
                old.destroy();
                self.component = Some(new_component);
                self.kind = new_kind.to_string();
                self.config = config;
                UpgradeOutcome::Replaced
            }
            Err(e) => {
                // Abort: the old component continues from its checkpoint.
                old.restore(&checkpoint).map_err(LifecycleError::Rejected)?;
                self.component = Some(old);
                UpgradeOutcome::Aborted { reason: e.to_string() }
            }
        };

        let buffered = self.inbox.len();
        emitted.extend(self.resume(ctx));
        let report = UpgradeReport {
            profile: self.profile.clone(),
            old_kind,
            new_kind: new_kind.to_string(),
            outcome,
            pause_us: 0, // the swap is atomic here; drivers that pause across
            // events overwrite this with the measured gap
            buffered,
        };
        Ok((report, emitted))
    }

    /// Freezes the shell and externalizes everything needed to recreate
    /// the component elsewhere. The instance stays alive until
    /// [`Shell::finish_migration`] so an aborted migration can resume.
    pub fn begin_migration(&mut self) -> Result<MigrationPackage, LifecycleError> {
        if self.state != ShellState::Running {
            return Err(LifecycleError::NotRunning(self.state));
        }
        self.state = ShellState::Migrating;
        let memento = self.component.as_ref().expect("live shell").memento();
        Ok(MigrationPackage {
            profile: self.profile.clone(),
            component_kind: self.kind.clone(),
            config: self.config.clone(),
            memento,
            pending: self.inbox.drain(..).collect(),
        })
    }

    /// Migration confirmed by the destination: destroy the instance and
    /// hand back whatever arrived since the package snapshot, for
    /// forwarding.
    pub fn finish_migration(&mut self) -> Vec<Message> {
        if let Some(mut c) = self.component.take() {
            c.destroy();
        }
        self.state = ShellState::Destroyed;
        self.inbox.drain(..).collect()
    }

    /// Migration aborted (e.g. destination lacked the factory): resume in
    /// place, flushing the buffer.
    pub fn abort_migration(&mut self, ctx: &mut Ctx) -> Vec<Message> {
        self.resume(ctx)
    }

    pub fn destroy(&mut self) {
        if let Some(mut c) = self.component.take() {
            c.destroy();
        }
        self.state = ShellState::Destroyed;
        self.inbox.clear();
    }
}

/// Creates and initializes a component from a registry. A config map
/// carrying `ft_policy` deploys a fault-tolerant composite whose module
/// kinds all come from the same registry.
pub fn create_component(
    factories: &FactoryRegistry,
    kind: &str,
    config: &Content,
    ctx: &mut Ctx,
) -> Result<(Box<dyn Component>, Vec<Message>), LifecycleError> {
    let fault_profile = format!("FaultLog@{}", ctx.node_id);
    match crate::ft::ftshell::ft_deploy_spec(config, &fault_profile)
        .map_err(LifecycleError::Rejected)?
    {
        Some((kinds, ft_config)) => {
            let mut modules = Vec::with_capacity(kinds.len());
            for k in kinds {
                let module = factories.create(&k)?;
                modules.push((k, module));
            }
            let mut composite = crate::ft::FtComponent::new(modules, ft_config)
                .map_err(|e| LifecycleError::Rejected(ComponentError::Config(e.to_string())))?;
            let emitted = composite.initialize(config, ctx).map_err(LifecycleError::Rejected)?;
            Ok((Box::new(composite), emitted))
        }
        None => {
            let mut c = factories.create(kind)?;
            let emitted = c.initialize(config, ctx).map_err(LifecycleError::Rejected)?;
            Ok((c, emitted))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::Reliability;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Replies to every message with an `Echo` carrying the same content,
    /// counting how many it has seen.
    struct Echo {
        seen: u64,
        reply_to: String,
    }

    impl Echo {
        fn boxed() -> Box<dyn Component> {
            Box::new(Echo { seen: 0, reply_to: "sink".into() })
        }
    }

    impl Component for Echo {
        fn initialize(&mut self, config: &Content, _ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            if let Some(p) = config.text("reply_to") {
                self.reply_to = p.to_string();
            }
            Ok(vec![])
        }

        fn process_message(&mut self, msg: &Message, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            self.seen += 1;
            Ok(vec![Message::new(
                "Echo",
                Reliability::BestEffort,
                self.reply_to.clone(),
                msg.content().clone(),
                ctx.now_ms,
                None,
            )?])
        }

        fn memento(&self) -> Memento {
            let mut state = Content::new();
            state.set("seen", Value::text(self.seen.to_string())).unwrap();
            Memento::new("echo/v1", 1, state)
        }

        fn restore(&mut self, memento: &Memento) -> Result<(), ComponentError> {
            memento.expect_schema("echo/v1")?;
            self.seen = memento
                .state
                .u64("seen")
                .ok_or_else(|| ComponentError::MementoContents("missing seen".into()))?;
            Ok(())
        }
    }

    /// A component whose memento schema is incompatible with Echo's.
    struct Alien;

    impl Component for Alien {
        fn initialize(&mut self, _: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            Ok(vec![])
        }
        fn process_message(&mut self, _: &Message, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            Ok(vec![])
        }
        fn memento(&self) -> Memento {
            Memento::new("alien/v1", 1, Content::new())
        }
        fn restore(&mut self, m: &Memento) -> Result<(), ComponentError> {
            m.expect_schema("alien/v1")?;
            Ok(())
        }
    }

    fn ctx_with(rng: &mut ChaCha12Rng) -> Ctx<'_> {
        Ctx { now_ms: 0, node_id: "test", rng }
    }

    fn probe(i: u64) -> Message {
        Message::new(
            "Probe",
            Reliability::BestEffort,
            "echo",
            Content::new().with("i", Value::text(i.to_string())).unwrap(),
            i,
            None,
        )
        .unwrap()
    }

    fn echo_shell() -> Shell {
        Shell::new("echo", "echo", Content::new(), Echo::boxed())
    }

    #[test]
    fn running_shell_processes_and_replies() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut shell = echo_shell();
        let out = shell.deliver(&probe(1), &mut ctx_with(&mut rng));
        match out {
            Delivery::Processed(msgs) => {
                assert_eq!(msgs.len(), 1);
                assert_eq!(msgs[0].content().text("i"), Some("1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn paused_shell_buffers_in_arrival_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut shell = echo_shell();
        shell.pause().unwrap();
        for i in 0..3 {
            assert!(matches!(shell.deliver(&probe(i), &mut ctx_with(&mut rng)), Delivery::Buffered));
        }
        assert_eq!(shell.buffered(), 3);
        let flushed = shell.resume(&mut ctx_with(&mut rng));
        let order: Vec<_> = flushed.iter().map(|m| m.content().text("i").unwrap().to_string()).collect();
        assert_eq!(order, vec!["0", "1", "2"]);
    }

    #[test]
    fn destroyed_shell_is_undeliverable() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut shell = echo_shell();
        shell.destroy();
        assert!(matches!(shell.deliver(&probe(0), &mut ctx_with(&mut rng)), Delivery::Undeliverable));
    }

    #[test]
    fn identity_upgrade_preserves_behavior() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut factories = FactoryRegistry::new();
        factories.register("echo", Echo::boxed);
        let mut shell = echo_shell();
        shell.deliver(&probe(0), &mut ctx_with(&mut rng));
        let (report, _) = shell
            .upgrade("echo", &factories, None, &mut ctx_with(&mut rng))
            .unwrap();
        assert_eq!(report.outcome, UpgradeOutcome::Replaced);
        // Counter carried over through the memento.
        let m = shell.memento().unwrap();
        assert_eq!(m.state.u64("seen"), Some(1));
    }

    #[test]
    fn schema_mismatch_aborts_and_old_behavior_continues() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut factories = FactoryRegistry::new();
        factories.register("alien", || Box::new(Alien));
        let mut shell = echo_shell();
        shell.deliver(&probe(0), &mut ctx_with(&mut rng));
        let (report, _) = shell
            .upgrade("alien", &factories, None, &mut ctx_with(&mut rng))
            .unwrap();
        assert!(matches!(report.outcome, UpgradeOutcome::Aborted { .. }));
        assert_eq!(shell.kind(), "echo");
        assert_eq!(shell.state(), ShellState::Running);
        assert_eq!(shell.memento().unwrap().state.u64("seen"), Some(1));
        assert!(matches!(shell.deliver(&probe(1), &mut ctx_with(&mut rng)), Delivery::Processed(_)));
    }

    #[test]
    fn upgrade_flushes_buffer_exactly_once() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut factories = FactoryRegistry::new();
        factories.register("echo", Echo::boxed);
        let mut shell = echo_shell();
        shell.pause().unwrap();
        shell.deliver(&probe(0), &mut ctx_with(&mut rng));
        shell.deliver(&probe(1), &mut ctx_with(&mut rng));
        shell.resume(&mut ctx_with(&mut rng));
        let (report, _) = shell
            .upgrade("echo", &factories, None, &mut ctx_with(&mut rng))
            .unwrap();
        assert_eq!(report.buffered, 0);
        assert_eq!(shell.memento().unwrap().state.u64("seen"), Some(2));
    }

    #[test]
    fn migration_package_round_trips_through_content() {
        let mut shell = echo_shell();
        shell.pause().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        shell.resume(&mut ctx_with(&mut rng));
        shell.deliver(&probe(0), &mut ctx_with(&mut rng));
        // Buffer two pending messages.
        let pkg = shell.begin_migration().unwrap();
        let restored = MigrationPackage::from_content(&pkg.to_content()).unwrap();
        assert_eq!(restored, pkg);
        assert_eq!(restored.memento.state.u64("seen"), Some(1));
    }

    #[test]
    fn messages_during_migration_are_handed_back_for_forwarding() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut shell = echo_shell();
        let pkg = shell.begin_migration().unwrap();
        assert!(pkg.pending.is_empty());
        shell.deliver(&probe(7), &mut ctx_with(&mut rng));
        let leftovers = shell.finish_migration();
        assert_eq!(leftovers.len(), 1);
        assert_eq!(leftovers[0].content().text("i"), Some("7"));
        assert_eq!(shell.state(), ShellState::Destroyed);
    }
}
