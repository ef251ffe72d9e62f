// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulator and hierarchical optimizer for a UAV serving ground users with
//! onboard vision-language inference.
//!
//! The session-level controls (image resolution and transmit power per user)
//! come from [`arpo`]; the slot-level trajectory is learned with the PPO
//! trainer in [`ppo`] against rewards from [`rewards`] or programs written in
//! the [`reward_dsl`], which the offline loop in [`reward_designer`] proposes
//! and scores.

pub mod arpo;
pub mod channel;
pub mod cli;
pub mod env;
pub mod ppo;
pub mod reward_designer;
pub mod reward_dsl;
pub mod rewards;
pub mod scenario;
pub mod uplink;
pub mod vlm_profile;

pub use scenario::{default_scenario, Scenario};
