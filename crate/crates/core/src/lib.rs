//! Average-reward reinforcement learning at desk scale.
//!
//! * [`mdp`]: finite MDPs with exact gain/bias/optimality oracles.
//! * [`tabular`]: RVI Q-learning with the delayed f(Q) update and exact soft
//!   policy improvement.
//! * [`envs`]: pendulum, faller (cart-pole with termination), access-control
//!   queuing and random ergodic MDPs.
//! * [`nn`]: dense ReLU networks, Adam and the tanh-squashed Gaussian policy.
//! * [`replay`]: ring-buffer experience replay.
//! * [`agent`]: the RVI-SAC learner, its discounted baseline and a discrete
//!   bridge for small MDPs.
//! * [`harness`]: seeded runs, evaluation, CSV/SVG output and the oracle report.

pub mod agent;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod replay;
pub mod tabular;

pub use error::{Error, Result};
