//! Experiment orchestration: the seven designs as run configurations, the
//! reset rule, solve detection, training-curve CSVs and per-operation
//! microbenchmarks.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::agent::{
    encode_input, AgentConfig, ElmAgent, ElmAgentConfig, Learner, OsElmAgent, QNetPair, TeacherRange,
    Variant,
};
use crate::cartpole::{CartPole, Environment};
use crate::dqn::{AdamState, DqnAgent, DqnConfig, MlpParams, ReplayBuffer};
use crate::error::{Error, Result};
use crate::fixedq20::{Bank, FixedOselmState};
use crate::matrix::Matrix;
use crate::oselm::OselmState;
use crate::timing::{OpClass, OpTimings};

pub const SOLVE_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    OsElm,
    OsElmL2,
    OsElmLipschitz,
    OsElmL2Lipschitz,
    Elm,
    Dqn,
    /// OS-ELM-L2-Lipschitz with prediction and sequential training on the
    /// Q20 core.
    Fixed,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::OsElm,
        Algo::OsElmL2,
        Algo::OsElmLipschitz,
        Algo::OsElmL2Lipschitz,
        Algo::Elm,
        Algo::Dqn,
        Algo::Fixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::OsElm => "oselm",
            Algo::OsElmL2 => "oselm-l2",
            Algo::OsElmLipschitz => "oselm-lipschitz",
            Algo::OsElmL2Lipschitz => "oselm-l2-lipschitz",
            Algo::Elm => "elm",
            Algo::Dqn => "dqn",
            Algo::Fixed => "fixed",
        }
    }

    /// `(use_l2, use_lipschitz)` forced by the design; `None` for DQN.
    pub fn flags(self) -> Option<(bool, bool)> {
        match self {
            Algo::OsElm => Some(Variant::OsElm.flags()),
            Algo::OsElmL2 => Some(Variant::OsElmL2.flags()),
            Algo::OsElmLipschitz => Some(Variant::OsElmLipschitz.flags()),
            Algo::OsElmL2Lipschitz | Algo::Fixed => Some(Variant::OsElmL2Lipschitz.flags()),
            Algo::Elm => Some((false, false)),
            Algo::Dqn => None,
        }
    }

    pub fn default_delta(self) -> f64 {
        match self {
            Algo::OsElmL2 => Variant::OsElmL2.default_delta(),
            Algo::OsElmL2Lipschitz | Algo::Fixed => Variant::OsElmL2Lipschitz.default_delta(),
            _ => AgentConfig::default().delta,
        }
    }

    /// Whether the reset rule applies.
    pub fn resets(self) -> bool {
        self != Algo::Dqn
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub agent: AgentConfig,
    pub max_episodes: u32,
    pub trials: u32,
    /// Episodes without solving after which ELM/OS-ELM weights are redrawn.
    pub reset_after: u32,
    pub solve_threshold: f64,
    /// Directory for per-trial CSVs; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Concurrent trials; 0 lets rayon decide.
    pub workers: usize,
}

impl RunConfig {
    /// The benchmark configuration of a design: its regularizer flags and
    /// ridge parameter, and the shaped terminal reward.
    pub fn canonical(algo: Algo, n_tilde: usize) -> Self {
        let agent = AgentConfig {
            n_tilde,
            delta: algo.default_delta(),
            ..AgentConfig::default().shaped()
        };
        RunConfig {
            algo,
            agent,
            max_episodes: 3000,
            trials: 1,
            reset_after: 300,
            solve_threshold: 195.0,
            out_dir: None,
            workers: 0,
        }
    }

    /// Agent configuration with the design's flags applied.
    pub fn effective_agent(&self) -> AgentConfig {
        let mut agent = self.agent.clone();
        if let Some((l2, lip)) = self.algo.flags() {
            agent.use_l2 = l2;
            agent.use_lipschitz = lip;
        }
        agent
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_agent().validate()?;
        if self.max_episodes == 0 {
            return Err(Error::Config("max_episodes must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.reset_after == 0 {
            return Err(Error::Config("reset_after must be positive".into()));
        }
        if !self.solve_threshold.is_finite() {
            return Err(Error::Config("solve_threshold must be finite".into()));
        }
        if self.algo == Algo::Fixed && self.agent.action_codes.len() != 2 {
            // Not a hardware limit, but the only layout the core is checked against.
            return Err(Error::Config("the fixed-point design expects two actions".into()));
        }
        Ok(())
    }
}

/// Seed of the `k`-th weight draw within a trial.
fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        seed
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(attempt));
        rng.gen()
    }
}

pub fn build_learner(cfg: &RunConfig, state_dim: usize, n_actions: usize, seed: u64) -> Result<Box<dyn Learner>> {
    let agent = AgentConfig {
        seed,
        ..cfg.effective_agent()
    };
    Ok(match cfg.algo {
        Algo::OsElm | Algo::OsElmL2 | Algo::OsElmLipschitz | Algo::OsElmL2Lipschitz => {
            Box::new(OsElmAgent::new(agent, state_dim)?)
        }
        Algo::Fixed => Box::new(OsElmAgent::new_fixed(agent, state_dim)?),
        Algo::Elm => Box::new(ElmAgent::new(ElmAgentConfig::new(agent), state_dim)?),
        Algo::Dqn => Box::new(DqnAgent::new(DqnConfig::new(agent), state_dim, n_actions)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub algo: Algo,
    pub seed: u64,
    pub steps: Vec<u32>,
    /// Mean of the last `min(100, i + 1)` episode lengths, per episode.
    pub moving_avg: Vec<f64>,
    /// Cumulative resets at the end of each episode.
    pub resets_so_far: Vec<u32>,
    pub episodes_to_solve: Option<u32>,
    pub resets: u32,
    pub timings: OpTimings,
    pub teacher_range: Option<TeacherRange>,
    pub overflows: Option<u64>,
}

impl TrialResult {
    fn empty(algo: Algo, seed: u64) -> Self {
        TrialResult {
            algo,
            seed,
            steps: Vec::new(),
            moving_avg: Vec::new(),
            resets_so_far: Vec::new(),
            episodes_to_solve: None,
            resets: 0,
            timings: OpTimings::default(),
            teacher_range: None,
            overflows: None,
        }
    }

    pub fn solved(&self) -> bool {
        self.episodes_to_solve.is_some()
    }

    pub fn episodes(&self) -> usize {
        self.steps.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.steps.iter().map(|&s| u64::from(s)).sum()
    }

    /// Resets per episode run.
    pub fn reset_rate(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            f64::from(self.resets) / self.steps.len() as f64
        }
    }

    fn absorb(&mut self, learner: &dyn Learner) {
        self.timings.merge(learner.timings());
        if let Some(r) = learner.teacher_range() {
            self.teacher_range.get_or_insert_with(TeacherRange::default).merge(&r);
        }
        if let Some(o) = learner.overflows() {
            *self.overflows.get_or_insert(0) += o;
        }
    }
}

/// Runs one trial on CartPole-v0 until solved or `max_episodes`.
///
/// The solve check needs a full window: the moving average of the last 100
/// episodes, which may straddle a reset, must reach the threshold. ELM and
/// OS-ELM designs redraw all weights after `reset_after` episodes without
/// solving since the last reset.
pub fn run_trial(cfg: &RunConfig, seed: u64) -> Result<TrialResult> {
    cfg.validate()?;
    let mut env = CartPole::new(seed);
    let (state_dim, n_actions) = (env.state_dim(), env.n_actions());
    let mut result = TrialResult::empty(cfg.algo, seed);
    let mut learner = build_learner(cfg, state_dim, n_actions, attempt_seed(seed, 0))?;
    let mut window: VecDeque<u32> = VecDeque::with_capacity(SOLVE_WINDOW);
    let mut window_sum = 0u64;
    let mut since_reset = 0u32;

    for episode in 1..=cfg.max_episodes {
        let steps = learner.run_episode(&mut env)?;
        since_reset += 1;
        if window.len() == SOLVE_WINDOW {
            window_sum -= u64::from(window.pop_front().unwrap_or(0));
        }
        window.push_back(steps);
        window_sum += u64::from(steps);
        let avg = window_sum as f64 / window.len() as f64;
        result.steps.push(steps);
        result.moving_avg.push(avg);
        result.resets_so_far.push(result.resets);

        if window.len() == SOLVE_WINDOW && avg >= cfg.solve_threshold {
            result.episodes_to_solve = Some(episode);
            break;
        }
        if cfg.algo.resets() && since_reset >= cfg.reset_after && episode < cfg.max_episodes {
            result.absorb(learner.as_ref());
            result.resets += 1;
            since_reset = 0;
            learner = build_learner(cfg, state_dim, n_actions, attempt_seed(seed, result.resets))?;
        }
    }
    result.absorb(learner.as_ref());
    Ok(result)
}

/// Trial `i` uses seed `base_seed + i`. Results come back in trial order.
pub fn run_trials(cfg: &RunConfig, base_seed: u64) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..u64::from(cfg.trials)).map(|i| base_seed.wrapping_add(i)).collect();
    let run = || seeds.par_iter().map(|&s| run_trial(cfg, s)).collect::<Result<Vec<_>>>();
    if cfg.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)
    }
}

/// Writes `episode,steps,moving_avg_100,resets_so_far`, one row per episode.
pub fn write_csv(result: &TrialResult, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(["episode", "steps", "moving_avg_100", "resets_so_far"])
        .map_err(csv_err)?;
    for (i, ((steps, avg), resets)) in result
        .steps
        .iter()
        .zip(&result.moving_avg)
        .zip(&result.resets_so_far)
        .enumerate()
    {
        w.write_record([
            (i + 1).to_string(),
            steps.to_string(),
            avg.to_string(),
            resets.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub episode: u32,
    pub steps: u32,
    pub moving_avg_100: f64,
    pub resets_so_far: u32,
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i)
                    .ok_or_else(|| Error::Format(format!("{}: short row", path.display())))
            };
            let bad = |e: &dyn fmt::Display| Error::Format(format!("{}: {e}", path.display()));
            Ok(CsvRow {
                episode: field(0)?.parse().map_err(|e| bad(&e))?,
                steps: field(1)?.parse().map_err(|e| bad(&e))?,
                moving_avg_100: field(2)?.parse().map_err(|e| bad(&e))?,
                resets_so_far: field(3)?.parse().map_err(|e| bad(&e))?,
            })
        })
        .collect()
}

/// Aggregate over a set of trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub trials: usize,
    pub solved: usize,
    pub median_episodes_to_solve: Option<f64>,
    pub mean_resets: f64,
    /// Mean per-trial wall time in each operation class, in ns.
    pub mean_op_ns: Vec<(&'static str, f64)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn summarize<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> Summary {
    let results: Vec<&TrialResult> = results.into_iter().collect();
    let n = results.len().max(1) as f64;
    Summary {
        trials: results.len(),
        solved: results.iter().filter(|r| r.solved()).count(),
        median_episodes_to_solve: median(
            results
                .iter()
                .filter_map(|r| r.episodes_to_solve.map(f64::from))
                .collect(),
        ),
        mean_resets: results.iter().map(|r| f64::from(r.resets)).sum::<f64>() / n,
        mean_op_ns: OpClass::ALL
            .iter()
            .map(|&c| (c.name(), results.iter().map(|r| r.timings.total_ns(c) as f64).sum::<f64>() / n))
            .collect(),
    }
}

/// Unfiltered aggregate over every trial, and the aggregate over solved
/// trials only.
pub fn summaries(results: &[TrialResult]) -> (Summary, Summary) {
    (summarize(results), summarize(results.iter().filter(|r| r.solved())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpStats {
    pub class: &'static str,
    pub reps: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub algo: String,
    pub n_tilde: usize,
    pub ops: Vec<OpStats>,
}

impl BenchReport {
    pub fn get(&self, class: OpClass) -> Option<&OpStats> {
        self.ops.iter().find(|o| o.class == class.name())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const BENCH_REPS: usize = 1000;

fn time_reps(class: OpClass, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<OpStats> {
    // Warm-up, untimed.
    for _ in 0..reps.min(20) {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    Ok(OpStats {
        class: class.name(),
        reps,
        median_ns: median(samples).unwrap_or(0.0),
        mean_ns: mean,
    })
}

fn stack(rows: &[Matrix]) -> Matrix {
    let cols = rows.first().map_or(0, Matrix::cols);
    Matrix::from_fn(rows.len(), cols, |i, j| rows[i][(0, j)])
}

fn random_states(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| CartPole::sample_initial(rng).to_vec().iter().map(|v| v * 10.0).collect())
        .collect()
}

/// Times single executions of every operation class at the configured Ñ,
/// `reps` times each, on the calling thread. The sequential-phase
/// operations run on the Q20 core for the fixed design.
pub fn benchmark_ops(cfg: &RunConfig, reps: usize) -> Result<BenchReport> {
    cfg.validate()?;
    let reps = reps.max(1);
    let agent = cfg.effective_agent();
    let nt = agent.n_tilde;
    let mut rng = ChaCha8Rng::seed_from_u64(agent.seed);
    let states = random_states(&mut rng, nt.max(64));
    let inputs: Vec<Matrix> = states
        .iter()
        .enumerate()
        .map(|(i, s)| encode_input(s, i % agent.n_actions(), &agent))
        .collect::<Result<_>>()?;
    let teachers: Vec<f64> = (0..inputs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ops = Vec::with_capacity(OpClass::ALL.len());

    // Initial phase.
    let pair = QNetPair::new(states[0].len(), &agent, &mut rng)?;
    let fresh = pair.theta1.clone();
    let mut i = 0;
    ops.push(time_reps(OpClass::PredictInit, reps, || {
        i = (i + 1) % states.len();
        crate::agent::q_values(&fresh, &states[i], &agent).map(drop)
    })?);
    let x0 = stack(&inputs[..nt.min(inputs.len())]);
    let t0 = Matrix::from_vec(x0.rows(), 1, teachers[..x0.rows()].to_vec())?;
    let delta = agent.init_delta();
    let mut trained = fresh.clone();
    ops.push(time_reps(OpClass::TrainInit, reps, || {
        trained = fresh.clone();
        trained.init_train(&x0, &t0, delta)
    })?);

    // Sequential phase.
    let (train_seq, predict_seq) = if cfg.algo == Algo::Fixed {
        let mut core = FixedOselmState::from_float(&trained, &trained.params.beta);
        let mut j = 0;
        let predict = time_reps(OpClass::PredictSeq, reps, || {
            j = (j + 1) % states.len();
            for a in 0..agent.n_actions() {
                let x = encode_input(&states[j], a, &agent)?;
                core.predict(x.as_slice(), Bank::Online);
            }
            Ok(())
        })?;
        let train = time_reps(OpClass::TrainSeq, reps, || {
            j = (j + 1) % inputs.len();
            core.seq_train(inputs[j].as_slice(), teachers[j])
        })?;
        (train, predict)
    } else {
        let mut net: OselmState = trained.clone();
        let mut j = 0;
        let predict = time_reps(OpClass::PredictSeq, reps, || {
            j = (j + 1) % states.len();
            crate::agent::q_values(&net, &states[j], &agent).map(drop)
        })?;
        let targets: Vec<Matrix> = teachers.iter().map(|&t| Matrix::row_vector(&[t])).collect();
        let train = time_reps(OpClass::TrainSeq, reps, || {
            j = (j + 1) % inputs.len();
            net.seq_train(&inputs[j], &targets[j])
        })?;
        (train, predict)
    };
    ops.insert(0, predict_seq);
    ops.insert(0, train_seq);

    // DQN.
    let dqn_cfg = DqnConfig::new(agent.clone());
    let n_actions = agent.n_actions();
    let mut params = MlpParams::init(states[0].len(), nt, n_actions, &mut rng);
    let target = params.clone();
    let mut adam = AdamState::new(&params, dqn_cfg.lr);
    let mut buf = ReplayBuffer::new(dqn_cfg.replay_capacity);
    let mut env = CartPole::new(agent.seed);
    let mut s = env.reset();
    while buf.len() < 1000 {
        let a = rng.gen_range(0..n_actions);
        let tr = Environment::step(&mut env, a)?;
        if let Some(e) = crate::agent::shape_transition(&s, a, &tr, &agent) {
            buf.push(e);
        }
        s = if tr.done { env.reset() } else { tr.next };
    }
    let batch = buf.sample(dqn_cfg.batch_size, &mut rng);
    let batch_states = stack(&batch.iter().map(|e| Matrix::row_vector(&e.s)).collect::<Vec<_>>());
    let actions: Vec<usize> = batch.iter().map(|e| e.a).collect();
    let targets: Vec<f64> = batch.iter().map(|e| e.r).collect();
    // Only the gradient step and the Adam update count as train_DQN; the
    // target prediction is predict_32.
    let train = time_reps(OpClass::TrainDqn, reps, || {
        let (_, grad) = params.loss_and_grad(&batch_states, &actions, &targets)?;
        adam.apply(&mut params, &grad);
        Ok(())
    })?;
    ops.push(train);
    let mut k = 0;
    ops.push(time_reps(OpClass::Predict1, reps, || {
        k = (k + 1) % states.len();
        params.forward(&Matrix::row_vector(&states[k])).map(drop)
    })?);
    ops.push(time_reps(OpClass::Predict32, reps, || target.forward(&batch_states).map(drop))?);

    ops.sort_by_key(|o| OpClass::ALL.iter().position(|c| c.name() == o.class));
    Ok(BenchReport {
        algo: cfg.algo.name().to_string(),
        n_tilde: nt,
        ops,
    })
}

/// Writes the CSV for each trial into `dir` as `<algo>_seed<seed>.csv`.
pub fn write_trial_csvs(results: &[TrialResult], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    results
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}_seed{}.csv", r.algo.name(), r.seed));
            write_csv(r, &path).map(|_| path)
        })
        .collect()
}
