//! Shared-workspace human-robot collaboration: BlocksWorld planning and
//! Q-learning, simulated affect and EEG feedback, an in-process message bus,
//! the plan executor and the gateway's tiered store.

pub mod affect;
pub mod agent;
pub mod bus;
pub mod eeg;
pub mod events;
pub mod executor;
pub mod gateway;
pub mod planner;
pub mod scenario;
pub mod system;
pub mod world;
