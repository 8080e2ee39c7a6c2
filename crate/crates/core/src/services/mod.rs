//! Service components: naming, transport, clock translation, notification.

pub mod clock;
pub mod link;
pub mod notifier;
pub mod registry;
