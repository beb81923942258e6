//! CartPole-v0: the classic-control inverted pendulum with a 200-step cap.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const MASS_CART: f64 = 1.0;
pub const MASS_POLE: f64 = 0.1;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_THRESHOLD: f64 = 2.4;
/// 12 degrees.
pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const MAX_STEPS: u32 = 200;

/// One explicit-Euler step of the cart-pole equations under horizontal `force`.
/// Positions advance with the pre-update velocities.
pub fn euler_step(s: CartPoleState, force: f64) -> CartPoleState {
    let total_mass = MASS_CART + MASS_POLE;
    let pole_mass_length = MASS_POLE * POLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    CartPoleState {
        x: s.x + TAU * s.x_dot,
        x_dot: s.x_dot + TAU * x_acc,
        theta: s.theta + TAU * s.theta_dot,
        theta_dot: s.theta_dot + TAU * theta_acc,
    }
}

/// Anything that can drive a discrete-action agent.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Transition>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The episode ended because the task failed, not because of the step cap.
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Running,
    PoleFell,
    CartOut,
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeStatus {
    pub steps: u32,
    pub done: bool,
    pub done_reason: DoneReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: CartPoleState,
    pub reward: f64,
    pub done: bool,
    pub reason: DoneReason,
}

#[derive(Debug, Clone)]
pub struct CartPole {
    state: CartPoleState,
    steps: u32,
    reason: DoneReason,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(seed: u64) -> Self {
        CartPole {
            state: CartPoleState::default(),
            steps: 0,
            reason: DoneReason::Running,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Each component uniform in `[-0.05, 0.05]`.
    pub fn sample_initial<R: Rng + ?Sized>(rng: &mut R) -> CartPoleState {
        let mut u = || rng.gen_range(-0.05..=0.05);
        CartPoleState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        }
    }

    pub fn reset_state(&mut self) -> CartPoleState {
        let s = Self::sample_initial(&mut self.rng);
        self.set_state(s);
        s
    }

    /// Starts a fresh episode from an explicit state.
    pub fn set_state(&mut self, s: CartPoleState) {
        self.state = s;
        self.steps = 0;
        self.reason = DoneReason::Running;
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn status(&self) -> EpisodeStatus {
        EpisodeStatus {
            steps: self.steps,
            done: self.reason != DoneReason::Running,
            done_reason: self.reason,
        }
    }

    /// Advances one explicit-Euler step. Action 1 pushes right, 0 pushes left.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.reason != DoneReason::Running {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if action > 1 {
            return Err(Error::InvalidArgument(format!("cart-pole action {action} out of range")));
        }
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        self.state = euler_step(self.state, force);
        self.steps += 1;

        self.reason = if self.state.theta.abs() > THETA_THRESHOLD {
            DoneReason::PoleFell
        } else if self.state.x.abs() > X_THRESHOLD {
            DoneReason::CartOut
        } else if self.steps >= MAX_STEPS {
            DoneReason::StepLimit
        } else {
            DoneReason::Running
        };

        Ok(StepOutcome {
            state: self.state,
            reward: 1.0,
            done: self.reason != DoneReason::Running,
            reason: self.reason,
        })
    }
}

impl Environment for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Vec<f64> {
        self.reset_state().to_vec()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let o = CartPole::step(self, action)?;
        Ok(Transition {
            next: o.state.to_vec(),
            reward: o.reward,
            done: o.done,
            failed: matches!(o.reason, DoneReason::PoleFell | DoneReason::CartOut),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: u32,
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

/// Writes `step,x,x_dot,theta,theta_dot,action,reward,done` rows with a header.
pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,x,x_dot,theta,theta_dot,action,reward,done").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.x,
            r.x_dot,
            r.theta,
            r.theta_dot,
            r.action,
            r.reward,
            u8::from(r.done)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
