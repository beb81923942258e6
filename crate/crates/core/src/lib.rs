//! Backpropagation-free Q-learning with OS-ELM.
//!
//! The crate bundles a small dense linear-algebra kernel ([`matrix`]), ELM and
//! OS-ELM regressors ([`elm`], [`oselm`]), the OS-ELM Q-Network agent and an
//! ELM baseline ([`agent`]), a DQN baseline ([`dqn`]), a CartPole-v0
//! reimplementation ([`cartpole`]), a Q20 fixed-point emulation of the
//! prediction/update datapath ([`fixedq20`]) and an experiment harness
//! ([`harness`]).

pub mod agent;
pub mod cartpole;
pub mod config;
pub mod dqn;
pub mod elm;
pub mod error;
pub mod fixedq20;
pub mod harness;
pub mod matrix;
pub mod oracle;
pub mod oselm;
pub mod timing;

pub use error::{Error, Result};
pub use matrix::Matrix;
