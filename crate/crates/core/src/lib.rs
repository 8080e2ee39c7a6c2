//! Real-time message middleware for networked control systems.
//!
//! The runtime delivers QoS-annotated [`message::Message`]s between
//! components under pluggable scheduling rules. A microkernel
//! ([`kernel::Kernel`]) turns submitted messages into jobs and places them
//! into fixed-priority dispatcher queues according to a user-supplied job
//! placement rule (rate-monotonic and earliest-deadline-first rules are
//! built in). Components live inside [`component::Shell`]s that serialize
//! delivery and externalize state as mementos, which is what makes live
//! upgrade and cross-node migration possible without dropping messages.
//!
//! Around the kernel sit the usual services: a profile registry for
//! semantic addressing, a framed reliable network messenger, two-way clock
//! offset/skew estimation, and a time-triggered notifier. The
//! [`sched`] module is a standalone schedulability-analysis library
//! (utilization bounds, response-time analysis, and a discrete-event
//! scheduling oracle with priority inheritance). The [`harness`] module
//! drives a simulated networked inverted-pendulum control system through
//! scripted stress, upgrade, migration, and outage experiments on a
//! deterministic virtual clock.

pub mod component;
pub mod config;
pub mod ft;
pub mod harness;
pub mod kernel;
pub mod message;
pub mod node;
pub mod sched;
pub mod services;
pub mod time;
pub mod trace;
pub mod world;

pub use message::{Message, QosSpec, Reliability};
