//! OS-ELM Q-Network.
//!
//! The network uses the simplified output model: its input is the state with
//! one extra column holding the action code, and its single output is the
//! Q-value of that pair. Bootstrapped targets `r + (1-d)·γ·max Q_target(s', ·)`
//! are clipped to `[clip_lo, clip_hi]` and used directly as regression teachers.
//! The first `Ñ` experiences are solved in one shot (ridge-regularized when L2
//! is enabled); afterwards each step trains on the latest experience with
//! probability ε₂.

mod backend;
mod elm_q;

pub use backend::{FloatBackend, Net, QBackend};
pub use elm_q::{ElmAgent, ElmAgentConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::cartpole::{Environment, Transition};
use crate::elm::{ElmParams, NetworkShape};
use crate::error::{Error, Result};
use crate::matrix::{clip, Matrix};
use crate::oselm::OselmState;
use crate::timing::{OpClass, OpTimings};

/// Ridge term used for the initial solve when L2 regularization is off. Keeps
/// `H₀ᵀH₀` invertible without acting as a meaningful regularizer.
pub const INIT_JITTER: f64 = 1e-8;

/// The four OS-ELM designs, distinguished by which regularizers are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    OsElm,
    OsElmL2,
    OsElmLipschitz,
    OsElmL2Lipschitz,
}

impl Variant {
    /// `(use_l2, use_lipschitz)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::OsElm => (false, false),
            Variant::OsElmL2 => (true, false),
            Variant::OsElmLipschitz => (false, true),
            Variant::OsElmL2Lipschitz => (true, true),
        }
    }

    /// Ridge parameter used in the evaluation for each L2 design.
    pub fn default_delta(self) -> f64 {
        match self {
            Variant::OsElmL2 => 1.0,
            Variant::OsElmL2Lipschitz => 0.5,
            Variant::OsElm | Variant::OsElmLipschitz => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Hidden nodes Ñ; also the size of the initial-training buffer.
    pub n_tilde: usize,
    /// Probability of acting greedily.
    pub eps1: f64,
    /// Probability of running a sequential update on a step.
    pub eps2: f64,
    pub gamma: f64,
    /// Ridge parameter for the initial solve; only honored with `use_l2`.
    pub delta: f64,
    /// Target network sync interval, in episodes.
    pub update_step: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub use_l2: bool,
    /// Spectrally normalize α at construction.
    pub use_lipschitz: bool,
    /// Input value fed to the network for each discrete action.
    pub action_codes: Vec<f64>,
    /// Replaces the environment reward on a failing transition.
    pub terminal_reward: Option<f64>,
    /// Store and train on the episode-ending transition instead of dropping it.
    pub store_terminal: bool,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            n_tilde: 64,
            eps1: 0.7,
            eps2: 0.5,
            gamma: 0.99,
            delta: 0.5,
            update_step: 2,
            clip_lo: -1.0,
            clip_hi: 1.0,
            use_l2: true,
            use_lipschitz: true,
            action_codes: vec![-0.5, 0.5],
            terminal_reward: None,
            store_terminal: false,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn for_variant(variant: Variant, n_tilde: usize) -> Self {
        let (use_l2, use_lipschitz) = variant.flags();
        AgentConfig {
            n_tilde,
            use_l2,
            use_lipschitz,
            delta: variant.default_delta(),
            ..AgentConfig::default()
        }
    }

    /// Failing transitions are stored with reward −1.
    pub fn shaped(mut self) -> Self {
        self.terminal_reward = Some(-1.0);
        self.store_terminal = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_tilde == 0 {
            return bad("hidden node count must be positive".into());
        }
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta = {} must be non-negative", self.delta));
        }
        if self.update_step == 0 {
            return bad("update_step must be positive".into());
        }
        if !(self.clip_lo <= self.clip_hi) {
            return bad(format!("clip range [{}, {}] is empty", self.clip_lo, self.clip_hi));
        }
        if self.action_codes.is_empty() {
            return bad("at least one action code is required".into());
        }
        for (i, a) in self.action_codes.iter().enumerate() {
            if self.action_codes[..i].contains(a) {
                return bad(format!("duplicate action code {a}"));
            }
        }
        Ok(())
    }

    /// Ridge parameter actually used for the initial solve.
    pub fn init_delta(&self) -> f64 {
        if self.use_l2 {
            self.delta
        } else {
            INIT_JITTER
        }
    }

    pub fn n_actions(&self) -> usize {
        self.action_codes.len()
    }
}

/// One transition `(s, a, r, s', d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub d: bool,
}

/// Turns an environment transition into the experience the learner sees,
/// applying the terminal-reward override. `None` when the transition ends
/// the episode and terminal transitions are not stored.
pub fn shape_transition(s: &[f64], a: usize, tr: &Transition, cfg: &AgentConfig) -> Option<Experience> {
    if tr.done && !cfg.store_terminal {
        return None;
    }
    let r = match (tr.failed, cfg.terminal_reward) {
        (true, Some(r)) => r,
        _ => tr.reward,
    };
    Some(Experience {
        s: s.to_vec(),
        a,
        r,
        s_next: tr.next.clone(),
        // A step-limit cutoff is not a terminal state of the task.
        d: tr.failed,
    })
}

/// Online network θ₁ and fixed target network θ₂, sharing α and b.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetPair {
    pub theta1: OselmState,
    pub theta2: OselmState,
}

impl QNetPair {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let shape = NetworkShape::new(state_dim + 1, cfg.n_tilde, 1)?;
        let theta1 = OselmState::new(ElmParams::init(shape, rng, cfg.use_lipschitz));
        Ok(QNetPair {
            theta2: theta1.clone(),
            theta1,
        })
    }

    /// θ₂ ← θ₁ (β and P; α and b are already identical).
    pub fn sync_target(&mut self) {
        self.theta2.params.beta.clone_from(&self.theta1.params.beta);
        self.theta2.p.clone_from(&self.theta1.p);
    }

    /// Upper bound on the Lipschitz constant of the online network.
    pub fn lipschitz_bound(&self, cfg: &AgentConfig) -> f64 {
        let beta = self.theta1.params.beta.sigma_max();
        if cfg.use_lipschitz {
            beta
        } else {
            self.theta1.params.alpha.sigma_max() * beta
        }
    }
}

/// `[s, action_codes[a]]` as a `1 × (state_dim + 1)` row.
pub fn encode_input(s: &[f64], a: usize, cfg: &AgentConfig) -> Result<Matrix> {
    let code = cfg.action_codes.get(a).ok_or_else(|| {
        Error::InvalidArgument(format!("action {a} out of range for {} actions", cfg.n_actions()))
    })?;
    let mut row = Vec::with_capacity(s.len() + 1);
    row.extend_from_slice(s);
    row.push(*code);
    Ok(Matrix::row_vector(&row))
}

/// `Q(s, a)` for every action, one forward pass each.
pub fn q_values(net: &OselmState, s: &[f64], cfg: &AgentConfig) -> Result<Vec<f64>> {
    (0..cfg.n_actions())
        .map(|a| Ok(net.predict(&encode_input(s, a, cfg)?)?[(0, 0)]))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy with probability ε₁, uniformly random otherwise.
pub fn select_action<R: Rng + ?Sized>(net: &OselmState, s: &[f64], cfg: &AgentConfig, rng: &mut R) -> Result<usize> {
    if rng.gen::<f64>() < cfg.eps1 {
        Ok(argmax(&q_values(net, s, cfg)?))
    } else {
        Ok(rng.gen_range(0..cfg.n_actions()))
    }
}

/// `clip(lo, r + (1-d)·γ·max_q, hi)`.
pub fn bootstrap_target(r: f64, d: bool, max_q: f64, cfg: &AgentConfig) -> Result<f64> {
    let bootstrap = if d { 0.0 } else { cfg.gamma * max_q };
    clip(cfg.clip_lo, r + bootstrap, cfg.clip_hi)
}

pub fn compute_target(exp: &Experience, target_net: &OselmState, cfg: &AgentConfig) -> Result<f64> {
    let max_q = if exp.d {
        0.0
    } else {
        q_values(target_net, &exp.s_next, cfg)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    bootstrap_target(exp.r, exp.d, max_q, cfg)
}

/// What happened during one [`OsElmAgent::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub action: usize,
    pub transition: Transition,
    pub initial_trained: bool,
    pub seq_updated: bool,
}

/// Experiences held until the initial training; capacity Ñ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitBuffer {
    capacity: usize,
    entries: Vec<Experience>,
}

impl InitBuffer {
    pub fn new(capacity: usize) -> Self {
        InitBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[Experience] {
        &self.entries
    }

    /// Returns false when already full.
    pub fn push(&mut self, e: Experience) -> bool {
        if self.is_full() {
            return false;
        }
        self.entries.push(e);
        true
    }

    fn take(&mut self) -> Vec<Experience> {
        std::mem::take(&mut self.entries)
    }
}

/// Smallest and largest teacher value handed to the learner so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherRange {
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl TeacherRange {
    /// Union of two ranges.
    pub fn merge(&mut self, other: &TeacherRange) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    fn observe(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.count += 1;
    }
}

impl Default for TeacherRange {
    fn default() -> Self {
        TeacherRange {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

/// Common surface the harness drives.
pub trait Learner {
    fn run_episode(&mut self, env: &mut dyn Environment) -> Result<u32>;
    fn timings(&self) -> &OpTimings;
    fn teacher_range(&self) -> Option<TeacherRange> {
        None
    }
    fn overflows(&self) -> Option<u64> {
        None
    }
}

/// The OS-ELM Q-Network state machine.
pub struct OsElmAgent<B: QBackend = FloatBackend> {
    cfg: AgentConfig,
    backend: B,
    buffer: InitBuffer,
    global_step: u64,
    episode: u64,
    rng: ChaCha8Rng,
    timings: OpTimings,
    teachers: TeacherRange,
}

impl OsElmAgent<FloatBackend> {
    pub fn new(cfg: AgentConfig, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backend = FloatBackend::new(QNetPair::new(state_dim, &cfg, &mut rng)?);
        Ok(Self::with_backend(cfg, backend, rng))
    }

    pub fn pair(&self) -> &QNetPair {
        &self.backend.pair
    }
}

impl<B: QBackend> OsElmAgent<B> {
    /// `rng` continues the stream used to build the backend's networks.
    pub fn with_backend(cfg: AgentConfig, backend: B, rng: ChaCha8Rng) -> Self {
        OsElmAgent {
            buffer: InitBuffer::new(cfg.n_tilde),
            cfg,
            backend,
            global_step: 0,
            episode: 0,
            rng,
            timings: OpTimings::default(),
            teachers: TeacherRange::default(),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn buffer(&self) -> &InitBuffer {
        &self.buffer
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn episodes(&self) -> u64 {
        self.episode
    }

    pub fn is_trained(&self) -> bool {
        self.backend.is_trained()
    }

    fn predict_class(&self) -> OpClass {
        if self.backend.is_trained() {
            OpClass::PredictSeq
        } else {
            OpClass::PredictInit
        }
    }

    fn q_values_timed(&mut self, net: Net, s: &[f64]) -> Result<Vec<f64>> {
        let class = self.predict_class();
        let (backend, cfg) = (&mut self.backend, &self.cfg);
        self.timings.time(class, || backend.q_values(net, s, cfg))
    }

    fn teacher(&mut self, exp: &Experience) -> Result<f64> {
        let max_q = if exp.d {
            0.0
        } else {
            self.q_values_timed(Net::Target, &exp.s_next)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let t = bootstrap_target(exp.r, exp.d, max_q, &self.cfg)?;
        if !(self.cfg.clip_lo..=self.cfg.clip_hi).contains(&t) {
            return Err(Error::TeacherOutOfRange {
                value: t,
                lo: self.cfg.clip_lo,
                hi: self.cfg.clip_hi,
            });
        }
        self.teachers.observe(t);
        Ok(t)
    }

    /// Determine, Observe, Store and Update for one environment step.
    pub fn step(&mut self, env: &mut dyn Environment, s: &[f64]) -> Result<StepReport> {
        self.global_step += 1;

        // Determine
        let action = if self.rng.gen::<f64>() < self.cfg.eps1 {
            argmax(&self.q_values_timed(Net::Online, s)?)
        } else {
            self.rng.gen_range(0..self.cfg.n_actions())
        };

        // Observe
        let transition = env.step(action)?;
        let r2: f64 = self.rng.gen();
        let mut report = StepReport {
            action,
            transition,
            initial_trained: false,
            seq_updated: false,
        };
        let Some(exp) = shape_transition(s, action, &report.transition, &self.cfg) else {
            return Ok(report);
        };

        // Store
        if !self.backend.is_trained() {
            self.buffer.push(exp);
            if self.buffer.is_full() {
                self.initial_training()?;
                report.initial_trained = true;
            }
            return Ok(report);
        }

        // Update
        if r2 < self.cfg.eps2 {
            let t = self.teacher(&exp)?;
            let x = encode_input(&exp.s, exp.a, &self.cfg)?;
            let backend = &mut self.backend;
            self.timings.time(OpClass::TrainSeq, || backend.seq_train(x.as_slice(), t))?;
            report.seq_updated = true;
        }
        Ok(report)
    }

    fn initial_training(&mut self) -> Result<()> {
        let entries = self.buffer.take();
        let width = entries[0].s.len() + 1;
        let mut x = Matrix::zeros(entries.len(), width);
        let mut t = Matrix::zeros(entries.len(), 1);
        for (i, e) in entries.iter().enumerate() {
            t[(i, 0)] = self.teacher(e)?;
            x.row_mut(i).copy_from_slice(encode_input(&e.s, e.a, &self.cfg)?.as_slice());
        }
        let delta = self.cfg.init_delta();
        let backend = &mut self.backend;
        self.timings.time(OpClass::TrainInit, || backend.init_train(&x, &t, delta))
    }

    pub fn sync_target(&mut self) {
        self.backend.sync_target();
    }

    /// Runs one episode and returns its length in steps. The target network
    /// is synchronized after every `update_step`-th episode.
    pub fn run_episode(&mut self, env: &mut dyn Environment) -> Result<u32> {
        let mut s = env.reset();
        let mut steps = 0;
        loop {
            let report = self.step(env, &s)?;
            steps += 1;
            if report.transition.done {
                break;
            }
            s = report.transition.next;
        }
        self.episode += 1;
        if self.episode.is_multiple_of(u64::from(self.cfg.update_step)) {
            self.sync_target();
        }
        Ok(steps)
    }
}

impl<B: QBackend> Learner for OsElmAgent<B> {
    fn run_episode(&mut self, env: &mut dyn Environment) -> Result<u32> {
        OsElmAgent::run_episode(self, env)
    }

    fn timings(&self) -> &OpTimings {
        &self.timings
    }

    fn teacher_range(&self) -> Option<TeacherRange> {
        Some(self.teachers)
    }

    fn overflows(&self) -> Option<u64> {
        self.backend.overflows()
    }
}

#[cfg(test)]
mod tests;
