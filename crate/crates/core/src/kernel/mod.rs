//! The microkernel: job creation, placement, and prioritized dispatch.
//!
//! Submitting a message creates a job (message plus resolved recipient)
//! and places it into one of a fixed set of dispatcher queues. The two
//! levels of the placement are user-programmable:
//!
//! * the *thread scheduling rule* fixes how many dispatchers exist and at
//!   which priorities they run;
//! * the *job placement rule* maps each message's QoS to a dispatcher and
//!   a position in that dispatcher's priority-ordered queue.
//!
//! Rate-monotonic scheduling falls out of a period-to-dispatcher table;
//! non-preemptive EDF falls out of a single dispatcher keyed by absolute
//! deadline. Within a dispatcher delivery is non-preemptive (a running
//! component callback is never interrupted); between dispatchers the
//! higher priority always runs first, preempting mid-job. On a real
//! platform that ordering comes from fixed-priority OS threads; on the
//! simulated time source the kernel tracks processor occupancy itself so
//! experiments are deterministic.

mod jpr;

pub use jpr::{EdfPlacement, Placement, PlacementRule, QueueKey, RmPlacement};

use crate::component::Shell;
use crate::message::Message;
use crate::services::registry::{Binding, ProfileRegistry, RegistryError};
use crate::time::Micros;
use indexmap::IndexMap;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::{Arc, Mutex};

/// Identifies a live component instance: node plus a node-local id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ComponentAddress {
    pub node_id: String,
    pub local_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatcherSpec {
    pub id: u32,
    /// Platform priority; a larger value is more urgent.
    pub priority: i32,
}

/// How many dispatchers exist and at which fixed priorities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadSchedulingRule {
    pub dispatchers: Vec<DispatcherSpec>,
}

impl ThreadSchedulingRule {
    pub fn new(dispatchers: Vec<DispatcherSpec>) -> Result<Self, KernelError> {
        if dispatchers.is_empty() {
            return Err(KernelError::EmptyTsr);
        }
        for (i, d) in dispatchers.iter().enumerate() {
            for other in &dispatchers[i + 1..] {
                if other.id == d.id {
                    return Err(KernelError::DuplicateDispatcherId(d.id));
                }
                if other.priority == d.priority {
                    return Err(KernelError::EqualPriorities(d.id, other.id));
                }
            }
        }
        Ok(ThreadSchedulingRule { dispatchers })
    }

    /// Convenience: `n` dispatchers with ids 1..=n, id 1 highest priority.
    pub fn descending(n: u32) -> Self {
        ThreadSchedulingRule {
            dispatchers: (1..=n)
                .map(|id| DispatcherSpec { id, priority: (n - id + 1) as i32 })
                .collect(),
        }
    }

    pub fn lowest_priority_id(&self) -> u32 {
        self.dispatchers.iter().min_by_key(|d| d.priority).expect("non-empty").id
    }

    pub fn priority_of(&self, id: u32) -> Option<i32> {
        self.dispatchers.iter().find(|d| d.id == id).map(|d| d.priority)
    }
}

/// Builtin service components. They occupy ordinary queue slots so their
/// work is scheduled like any other job, but their logic lives in the
/// node runtime rather than behind the component interface (they need to
/// touch kernel state, which user components never do).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceKind {
    NetworkMessenger,
    NetworkTime,
    Notifier,
    ProfileRegistry,
    Lifecycle,
    FaultLog,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 6] = [
        ServiceKind::NetworkMessenger,
        ServiceKind::NetworkTime,
        ServiceKind::Notifier,
        ServiceKind::ProfileRegistry,
        ServiceKind::Lifecycle,
        ServiceKind::FaultLog,
    ];

    pub fn profile_prefix(self) -> &'static str {
        match self {
            ServiceKind::NetworkMessenger => "NetworkMessenger",
            ServiceKind::NetworkTime => "NetworkTime",
            ServiceKind::Notifier => "Notifier",
            ServiceKind::ProfileRegistry => "ProfileRegistry",
            ServiceKind::Lifecycle => "Lifecycle",
            ServiceKind::FaultLog => "FaultLog",
        }
    }

    pub fn profile_on(self, node_id: &str) -> String {
        format!("{}@{}", self.profile_prefix(), node_id)
    }
}

/// What a queue slot points at.
#[derive(Clone)]
pub enum SlotRef {
    User(Arc<Mutex<Shell>>),
    Service(ServiceKind),
}

impl std::fmt::Debug for SlotRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SlotRef::User(_) => f.write_str("SlotRef::User"),
            SlotRef::Service(k) => write!(f, "SlotRef::Service({k:?})"),
        }
    }
}

/// The kernel's scheduling entity: one message on its way to one
/// component.
#[derive(Debug, Clone)]
pub struct Job {
    pub id: u64,
    pub message: Message,
    pub recipient: ComponentAddress,
    pub queue_key: QueueKey,
    pub enqueue_us: Micros,
}

#[derive(Debug)]
struct QueuedJob {
    key: QueueKey,
    seq: u64,
    job: Job,
}

impl PartialEq for QueuedJob {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.seq == other.seq
    }
}
impl Eq for QueuedJob {}
impl PartialOrd for QueuedJob {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedJob {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.key, self.seq).cmp(&(other.key, other.seq))
    }
}

/// A job occupying (or suspended from) the processor.
#[derive(Debug)]
pub struct RunningJob {
    pub job: Job,
    pub cost_us: Micros,
    pub remaining_us: Micros,
    pub first_start_us: Option<Micros>,
}

#[derive(Debug)]
struct Dispatcher {
    spec: DispatcherSpec,
    queue: BinaryHeap<Reverse<QueuedJob>>,
    current: Option<RunningJob>,
}

impl Dispatcher {
    fn has_work(&self) -> bool {
        self.current.is_some() || !self.queue.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("thread scheduling rule must declare at least one dispatcher")]
    EmptyTsr,
    #[error("duplicate dispatcher id {0}")]
    DuplicateDispatcherId(u32),
    #[error("dispatchers {0} and {1} share a priority; priorities must be strictly ordered")]
    EqualPriorities(u32, u32),
    #[error("placement rule references unknown dispatcher {0}")]
    UnknownDispatcher(u32),
    #[error("rate-monotonic ordering violated: period {shorter} ms maps to a lower priority than period {longer} ms")]
    RmOrderViolation { shorter: u64, longer: u64 },
    #[error("profile {0:?} already registered on this node")]
    DuplicateProfile(String),
    #[error("profile {0:?} cannot be resolved")]
    Unresolvable(String),
    #[error("empty profile")]
    EmptyProfile,
}

/// Where a submitted message went.
#[derive(Debug, Clone, PartialEq)]
pub enum Submitted {
    /// Placed for local delivery.
    Local { job_id: u64, dispatcher_id: u32 },
    /// Recipient is remote: the job was queued for the network messenger,
    /// at the placement the message's own QoS earns.
    ViaMessenger { job_id: u64, dispatcher_id: u32, dest_node: String },
}

pub struct Kernel {
    node_id: String,
    tsr: ThreadSchedulingRule,
    rule: Box<dyn PlacementRule>,
    // Dispatchers sorted by descending priority; index 0 runs first.
    dispatchers: Vec<Dispatcher>,
    slots: IndexMap<u64, SlotRef>,
    registry: ProfileRegistry,
    next_local_id: u64,
    next_job_id: u64,
    next_seq: u64,
    running: Option<usize>,
    last_sync_us: Micros,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel")
            .field("node_id", &self.node_id)
            .field("dispatchers", &self.dispatchers.len())
            .field("slots", &self.slots.len())
            .finish()
    }
}

impl Kernel {
    /// Builds a kernel per the thread scheduling rule and placement rule,
    /// registering the builtin service components.
    pub fn new(
        node_id: impl Into<String>,
        tsr: ThreadSchedulingRule,
        rule: Box<dyn PlacementRule>,
    ) -> Result<Self, KernelError> {
        rule.check(&tsr)?;
        let node_id = node_id.into();
        let mut dispatchers: Vec<Dispatcher> = tsr
            .dispatchers
            .iter()
            .map(|spec| Dispatcher { spec: *spec, queue: BinaryHeap::new(), current: None })
            .collect();
        dispatchers.sort_by_key(|d| Reverse(d.spec.priority));
        let mut kernel = Kernel {
            node_id,
            tsr,
            rule,
            dispatchers,
            slots: IndexMap::new(),
            registry: ProfileRegistry::new(),
            next_local_id: 1,
            next_job_id: 1,
            next_seq: 0,
            running: None,
            last_sync_us: 0,
        };
        for kind in ServiceKind::ALL {
            let addr = kernel.alloc_address();
            kernel.slots.insert(addr.local_id, SlotRef::Service(kind));
            kernel
                .registry
                .register(&kind.profile_on(&kernel.node_id.clone()), Binding::Local(addr))
                .expect("fresh registry");
        }
        Ok(kernel)
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn tsr(&self) -> &ThreadSchedulingRule {
        &self.tsr
    }

    pub fn registry(&self) -> &ProfileRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ProfileRegistry {
        &mut self.registry
    }

    fn alloc_address(&mut self) -> ComponentAddress {
        let id = self.next_local_id;
        self.next_local_id += 1;
        ComponentAddress { node_id: self.node_id.clone(), local_id: id }
    }

    /// Registers a component shell under its profile.
    pub fn register_component(&mut self, shell: Shell) -> Result<ComponentAddress, KernelError> {
        let profile = shell.profile().to_string();
        if profile.is_empty() {
            return Err(KernelError::EmptyProfile);
        }
        if matches!(self.registry.resolve(&profile), Ok(Binding::Local(_))) {
            return Err(KernelError::DuplicateProfile(profile));
        }
        let addr = self.alloc_address();
        self.slots.insert(addr.local_id, SlotRef::User(Arc::new(Mutex::new(shell))));
        // A stale remote binding (pre-migration) is overwritten.
        self.registry.rebind(&profile, Binding::Local(addr.clone()));
        Ok(addr)
    }

    /// Removes a component; queued jobs addressed to it are returned so
    /// the caller can record them as undeliverable (or forward them).
    pub fn deregister_component(&mut self, addr: &ComponentAddress) -> Vec<Job> {
        self.slots.shift_remove(&addr.local_id);
        self.registry.remove_address(addr);
        let mut flushed = Vec::new();
        for d in &mut self.dispatchers {
            let mut keep = BinaryHeap::new();
            for Reverse(qj) in d.queue.drain() {
                if qj.job.recipient == *addr {
                    flushed.push(qj.job);
                } else {
                    keep.push(Reverse(qj));
                }
            }
            d.queue = keep;
        }
        flushed.sort_by_key(|j| j.id);
        flushed
    }

    pub fn slot(&self, addr: &ComponentAddress) -> Option<SlotRef> {
        if addr.node_id != self.node_id {
            return None;
        }
        self.slots.get(&addr.local_id).cloned()
    }

    pub fn shell(&self, addr: &ComponentAddress) -> Option<Arc<Mutex<Shell>>> {
        match self.slot(addr) {
            Some(SlotRef::User(s)) => Some(s),
            _ => None,
        }
    }

    /// Finds the live shell registered under a profile.
    pub fn shell_by_profile(&self, profile: &str) -> Option<(ComponentAddress, Arc<Mutex<Shell>>)> {
        match self.registry.resolve(profile) {
            Ok(Binding::Local(addr)) => {
                let addr = addr.clone();
                self.shell(&addr).map(|s| (addr, s))
            }
            _ => None,
        }
    }

    pub fn resolve(&self, profile: &str) -> Result<&Binding, RegistryError> {
        self.registry.resolve(profile)
    }

    pub fn service_address(&self, kind: ServiceKind) -> ComponentAddress {
        match self.registry.resolve(&kind.profile_on(&self.node_id)) {
            Ok(Binding::Local(a)) => a.clone(),
            _ => unreachable!("service profiles are registered at construction"),
        }
    }

    /// Turns a message into a job and enqueues it. Local recipients get
    /// the message directly; remote ones go through the network messenger
    /// (at the same placement the message itself earned, so network work
    /// inherits the urgency of what it carries).
    pub fn submit(&mut self, message: Message, now_us: Micros) -> Result<Submitted, KernelError> {
        let (recipient, dest_node) = match self.registry.resolve(message.profile()) {
            Ok(Binding::Local(addr)) => (addr.clone(), None),
            Ok(Binding::Remote { node_id }) => {
                (self.service_address(ServiceKind::NetworkMessenger), Some(node_id.clone()))
            }
            Err(_) => return Err(KernelError::Unresolvable(message.profile().to_string())),
        };
        let placement = self.rule.place(&message, now_us);
        let dispatcher_id = placement.dispatcher_id;
        let job_id = self.next_job_id;
        self.next_job_id += 1;
        let job = Job {
            id: job_id,
            message,
            recipient,
            queue_key: placement.key,
            enqueue_us: now_us,
        };
        self.enqueue(job, placement)?;
        Ok(match dest_node {
            None => Submitted::Local { job_id, dispatcher_id },
            Some(dest_node) => Submitted::ViaMessenger { job_id, dispatcher_id, dest_node },
        })
    }

    /// Enqueues an already-built job at an explicit placement (used when
    /// forwarding jobs after a migration rebind).
    pub fn enqueue(&mut self, job: Job, placement: Placement) -> Result<(), KernelError> {
        let d = self
            .dispatchers
            .iter_mut()
            .find(|d| d.spec.id == placement.dispatcher_id)
            .ok_or(KernelError::UnknownDispatcher(placement.dispatcher_id))?;
        let seq = self.next_seq;
        self.next_seq += 1;
        d.queue.push(Reverse(QueuedJob { key: placement.key, seq, job }));
        Ok(())
    }

    pub fn placement_rule(&self) -> &dyn PlacementRule {
        self.rule.as_ref()
    }

    // --- processor-occupancy model (simulated time source) -------------

    /// Accounts elapsed processor time to the running job.
    pub fn sync(&mut self, now_us: Micros) {
        let elapsed = now_us.saturating_sub(self.last_sync_us);
        if elapsed > 0 {
            if let Some(i) = self.running {
                if let Some(run) = self.dispatchers[i].current.as_mut() {
                    run.remaining_us = run.remaining_us.saturating_sub(elapsed);
                }
            }
        }
        self.last_sync_us = now_us;
    }

    /// Chooses what the processor runs at `now`: the highest-priority
    /// dispatcher with work. Loads the head job of that dispatcher if it
    /// has no current one (non-preemptive within a dispatcher: a loaded
    /// job stays current even if smaller keys arrive behind it). Returns
    /// the completion time of the chosen job, or `None` when idle.
    ///
    /// `cost_of` supplies the simulated execution cost when a job is first
    /// loaded; it sees the job about to start.
    pub fn dispatch(
        &mut self,
        now_us: Micros,
        cost_of: impl Fn(&Job, &SlotRef) -> Micros,
    ) -> Option<(u32, Micros)> {
        self.sync(now_us);
        let idx = self.dispatchers.iter().position(Dispatcher::has_work)?;
        if self.dispatchers[idx].current.is_none() {
            let Reverse(qj) = self.dispatchers[idx].queue.pop().expect("has_work");
            let cost = self
                .slots
                .get(&qj.job.recipient.local_id)
                .map(|slot| cost_of(&qj.job, slot))
                .unwrap_or(0);
            self.dispatchers[idx].current = Some(RunningJob {
                job: qj.job,
                cost_us: cost,
                remaining_us: cost,
                first_start_us: None,
            });
        }
        self.running = Some(idx);
        let id = self.dispatchers[idx].spec.id;
        let run = self.dispatchers[idx].current.as_mut().expect("just loaded");
        if run.first_start_us.is_none() {
            run.first_start_us = Some(now_us);
        }
        Some((id, now_us + run.remaining_us))
    }

    /// Takes the completed running job off the processor. Callers invoke
    /// the component callback afterwards, outside kernel borrows.
    pub fn complete(&mut self, now_us: Micros) -> Option<(RunningJob, Option<SlotRef>)> {
        self.sync(now_us);
        let i = self.running?;
        let done = self.dispatchers[i].current.as_ref().is_some_and(|r| r.remaining_us == 0);
        if !done {
            return None;
        }
        let run = self.dispatchers[i].current.take().expect("checked");
        self.running = None;
        let slot = self.slots.get(&run.job.recipient.local_id).cloned();
        Some((run, slot))
    }

    pub fn has_work(&self) -> bool {
        self.dispatchers.iter().any(Dispatcher::has_work)
    }

    /// Manually dequeues the minimal-key job of a dispatcher (real-time
    /// driver and tests; the simulated driver uses `dispatch`/`complete`).
    pub fn pop_next(&mut self, dispatcher_id: u32) -> Option<Job> {
        let d = self.dispatchers.iter_mut().find(|d| d.spec.id == dispatcher_id)?;
        d.queue.pop().map(|Reverse(qj)| qj.job)
    }

    pub fn queue_len(&self, dispatcher_id: u32) -> usize {
        self.dispatchers
            .iter()
            .find(|d| d.spec.id == dispatcher_id)
            .map(|d| d.queue.len() + usize::from(d.current.is_some()))
            .unwrap_or(0)
    }

    pub fn dispatcher_ids(&self) -> Vec<u32> {
        self.dispatchers.iter().map(|d| d.spec.id).collect()
    }
}

#[cfg(test)]
mod tests;
