//! Event-driven multi-agent reinforcement learning with macro-actions.
//!
//! The crate bundles a discrete-event simulation core, macro-action episode
//! collection with continuously discounted rewards, generalized advantage
//! estimation over variable-duration transitions, parameter-shared TRPO,
//! two benchmark environments and a study of event races under fixed-step
//! simulation.

pub mod de;
pub mod env;
pub mod error;
pub mod macdec;
pub mod mgae;
pub mod nn;
pub mod race;
pub mod rng;
pub mod sim;
pub mod transfer;
pub mod trpo;

pub use error::{Error, Result};
pub use macdec::{
    EpisodeBatch, EpisodeSummary, Environment, Observation, Policy, Step, TeamReward, Trajectory,
    Transition,
};
pub use mgae::MGaeConfig;
pub use nn::{Checkpoint, MlpParams, MlpPolicy, NetworkShape};
pub use rng::SimRng;
pub use sim::{EventQueue, SimTime, TimeBase};
