//! Simulated networked inverted-pendulum control system and the
//! scripted experiments that exercise it.

pub mod components;
pub mod experiments;
pub mod metrics;
pub mod plant;
