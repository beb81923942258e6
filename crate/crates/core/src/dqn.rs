//! Three-layer DQN baseline trained by backpropagation: ReLU hidden layer,
//! one output per action, Huber loss on the taken action, Adam, uniform
//! experience replay and a fixed target network.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{argmax, shape_transition, AgentConfig, Experience, Learner};
use crate::cartpole::Environment;
use crate::elm::relu;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::timing::{OpClass, OpTimings};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl MlpParams {
    /// Uniform in `±1/√fan_in` for weights and biases of each layer.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, actions: usize, rng: &mut R) -> Self {
        let mut layer = |fan_in: usize, r: usize, c: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
        };
        MlpParams {
            w1: layer(inputs, inputs, hidden),
            b1: layer(inputs, 1, hidden),
            w2: layer(hidden, hidden, actions),
            b2: layer(hidden, 1, actions),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        MlpParams {
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    fn hidden_pre(&self, states: &Matrix) -> Result<Matrix> {
        let mut z1 = states.matmul(&self.w1)?;
        z1.add_row_broadcast(&self.b1)?;
        Ok(z1)
    }

    /// `ReLU(s·W₁ + b₁)·W₂ + b₂`, one row of Q-values per state.
    pub fn forward(&self, states: &Matrix) -> Result<Matrix> {
        let a1 = self.hidden_pre(states)?.map(relu);
        let mut q = a1.matmul(&self.w2)?;
        q.add_row_broadcast(&self.b2)?;
        Ok(q)
    }

    /// Mean Huber loss of `Q(sᵢ, aᵢ) − yᵢ` over the batch and its gradient.
    pub fn loss_and_grad(&self, states: &Matrix, actions: &[usize], targets: &[f64]) -> Result<(f64, MlpParams)> {
        let k = states.rows();
        if actions.len() != k || targets.len() != k || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch of {k} states with {} actions and {} targets",
                actions.len(),
                targets.len()
            )));
        }
        let z1 = self.hidden_pre(states)?;
        let a1 = z1.map(relu);
        let mut q = a1.matmul(&self.w2)?;
        q.add_row_broadcast(&self.b2)?;

        let mut dq = Matrix::zeros(k, q.cols());
        let mut loss = 0.0;
        for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let (l, g) = huber(q[(i, a)] - y);
            loss += l;
            dq[(i, a)] = g / k as f64;
        }
        loss /= k as f64;

        let w2 = a1.t_matmul(&dq)?;
        let b2 = column_sums(&dq);
        let mut dz1 = dq.matmul(&self.w2.transpose())?;
        for (d, z) in dz1.as_mut_slice().iter_mut().zip(z1.as_slice()) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let w1 = states.t_matmul(&dz1)?;
        let b1 = column_sums(&dz1);
        Ok((loss, MlpParams { w1, b1, w2, b2 }))
    }
}

/// Largest relative difference between the analytic gradient and central
/// differences with step `h`, over every parameter. The denominator is
/// floored at 1e-6.
pub fn gradient_check(p: &MlpParams, states: &Matrix, actions: &[usize], targets: &[f64], h: f64) -> Result<f64> {
    let (_, grad) = p.loss_and_grad(states, actions, targets)?;
    let mut worst = 0.0_f64;
    for (ti, g) in grad.tensors().iter().enumerate() {
        for (j, &g) in g.as_slice().iter().enumerate() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].as_mut_slice()[j] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].as_mut_slice()[j] -= h;
            let lp = plus.loss_and_grad(states, actions, targets)?.0;
            let lm = minus.loss_and_grad(states, actions, targets)?.0;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Huber loss with threshold 1: `(loss, d loss / d r)`.
pub fn huber(r: f64) -> (f64, f64) {
    if r.abs() <= 1.0 {
        (0.5 * r * r, r)
    } else {
        (r.abs() - 0.5, r.signum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    step: u64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(like: &MlpParams, lr: f64) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            lr,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut MlpParams, grad: &MlpParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.lr;
        let targets = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in targets.into_iter().zip(grad.tensors()).zip(ms).zip(vs) {
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Fixed-capacity ring of experiences.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Overwrites the oldest entry once full.
    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Uniform sample of distinct slots.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        index::sample(rng, self.items.len(), k.min(self.items.len())).into_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Experience> {
        self.sample_indices(k, rng)
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    /// Hidden width comes from `agent.n_tilde`; ε₂, δ, clipping and the
    /// action codes are not used.
    pub agent: AgentConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
}

impl DqnConfig {
    pub fn new(agent: AgentConfig) -> Self {
        DqnConfig {
            agent,
            lr: 0.01,
            batch_size: 32,
            replay_capacity: 10_000,
        }
    }
}

/// Builds a `k × n` matrix from state vectors.
fn stack_states<'a>(states: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Matrix {
    let k = states.len();
    let mut m = Matrix::zeros(k, width);
    for (i, s) in states.enumerate() {
        m.row_mut(i).copy_from_slice(s);
    }
    m
}

/// One replay-sampled gradient step. Returns the batch loss, or `None` when
/// the buffer does not hold a full batch yet.
#[allow(clippy::too_many_arguments)]
pub fn dqn_train_step<R: Rng + ?Sized>(
    params: &mut MlpParams,
    target: &MlpParams,
    adam: &mut AdamState,
    buf: &ReplayBuffer,
    cfg: &DqnConfig,
    rng: &mut R,
    timings: &mut OpTimings,
) -> Result<Option<f64>> {
    if buf.len() < cfg.batch_size {
        return Ok(None);
    }
    let batch = buf.sample(cfg.batch_size, rng);
    let width = batch[0].s.len();
    let next = stack_states(batch.iter().map(|e| e.s_next.as_slice()), width);
    let q_next = timings.time(OpClass::Predict32, || target.forward(&next))?;
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let max_q = q_next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            e.r + if e.d { 0.0 } else { cfg.agent.gamma * max_q }
        })
        .collect();
    let states = stack_states(batch.iter().map(|e| e.s.as_slice()), width);
    let actions: Vec<usize> = batch.iter().map(|e| e.a).collect();
    timings.time(OpClass::TrainDqn, || {
        let (loss, grad) = params.loss_and_grad(&states, &actions, &targets)?;
        adam.apply(params, &grad);
        Ok(Some(loss))
    })
}

/// Greedy with probability ε₁, uniform otherwise.
pub fn dqn_select_action<R: Rng + ?Sized>(params: &MlpParams, s: &[f64], eps1: f64, rng: &mut R) -> Result<usize> {
    if rng.gen::<f64>() < eps1 {
        Ok(argmax(params.forward(&Matrix::row_vector(s))?.as_slice()))
    } else {
        Ok(rng.gen_range(0..params.b2.cols()))
    }
}

pub struct DqnAgent {
    cfg: DqnConfig,
    params: MlpParams,
    target: MlpParams,
    adam: AdamState,
    replay: ReplayBuffer,
    episode: u64,
    rng: ChaCha8Rng,
    timings: OpTimings,
}

impl DqnAgent {
    pub fn new(cfg: DqnConfig, state_dim: usize, n_actions: usize) -> Result<Self> {
        cfg.agent.validate()?;
        if cfg.batch_size == 0 || cfg.replay_capacity < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch size {} does not fit replay capacity {}",
                cfg.batch_size, cfg.replay_capacity
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.agent.seed);
        let params = MlpParams::init(state_dim, cfg.agent.n_tilde, n_actions, &mut rng);
        Ok(DqnAgent {
            target: params.clone(),
            adam: AdamState::new(&params, cfg.lr),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            params,
            cfg,
            episode: 0,
            rng,
            timings: OpTimings::default(),
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }
}

impl Learner for DqnAgent {
    fn run_episode(&mut self, env: &mut dyn Environment) -> Result<u32> {
        let mut s = env.reset();
        let mut steps = 0;
        loop {
            let (params, rng) = (&self.params, &mut self.rng);
            let eps1 = self.cfg.agent.eps1;
            let action = self
                .timings
                .time(OpClass::Predict1, || dqn_select_action(params, &s, eps1, rng))?;
            let tr = env.step(action)?;
            steps += 1;
            if let Some(exp) = shape_transition(&s, action, &tr, &self.cfg.agent) {
                self.replay.push(exp);
            }
            dqn_train_step(
                &mut self.params,
                &self.target,
                &mut self.adam,
                &self.replay,
                &self.cfg,
                &mut self.rng,
                &mut self.timings,
            )?;
            if tr.done {
                break;
            }
            s = tr.next;
        }
        self.episode += 1;
        if self.episode.is_multiple_of(u64::from(self.cfg.agent.update_step)) {
            self.target.clone_from(&self.params);
        }
        Ok(steps)
    }

    fn timings(&self) -> &OpTimings {
        &self.timings
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_states(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Matrix {
        Matrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn scalar_forward(p: &MlpParams, s: &[f64]) -> Vec<f64> {
        let h = p.w1.cols();
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let z: f64 = p.b1[(0, j)] + (0..s.len()).map(|i| s[i] * p.w1[(i, j)]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        (0..p.w2.cols())
            .map(|a| p.b2[(0, a)] + (0..h).map(|j| hidden[j] * p.w2[(j, a)]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_of_zero_weights_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(4, 8, 2, &mut rng).zeros_like();
        let q = p.forward(&random_states(&mut rng, 3, 4)).unwrap();
        assert!(q.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_batch_consistency_and_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::init(4, 16, 2, &mut rng);
        let s = random_states(&mut rng, 32, 4);
        let q = p.forward(&s).unwrap();
        let single = p.forward(&Matrix::row_vector(s.row(5))).unwrap();
        assert_eq!(single.as_slice(), q.row(5));
        for i in 0..32 {
            for (a, b) in q.row(i).iter().zip(scalar_forward(&p, s.row(i))) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(p.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0), (0.0, 0.0));
        assert_eq!(huber(0.5), (0.125, 0.5));
        assert_eq!(huber(3.0), (2.5, 1.0));
        assert_eq!(huber(-3.0), (2.5, -1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(4, 8, 2, &mut rng);
        let s = random_states(&mut rng, 6, 4);
        let actions: Vec<usize> = (0..6).map(|i| i % 2).collect();
        // Targets spread so both Huber branches are exercised.
        let targets: Vec<f64> = (0..6).map(|i| -2.0 + i as f64 * 0.8).collect();
        let err = gradient_check(&p, &s, &actions, &targets, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MlpParams::init(4, 8, 2, &mut rng);
        let before = p.clone();
        let mut grad = p.zeros_like();
        for t in grad.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut adam = AdamState::new(&p, 0.01);
        adam.apply(&mut p, &grad);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!(((y - x) - 0.01).abs() <= 1e-6 * 0.01);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DqnConfig {
            lr: 0.0,
            ..DqnConfig::new(AgentConfig::default())
        };
        let mut p = MlpParams::init(4, 8, 2, &mut rng);
        let before = p.clone();
        let mut adam = AdamState::new(&p, cfg.lr);
        let mut buf = ReplayBuffer::new(100);
        for i in 0..40 {
            buf.push(Experience {
                s: vec![0.1 * i as f64; 4],
                a: i % 2,
                r: 1.0,
                s_next: vec![0.0; 4],
                d: false,
            });
        }
        let mut timings = OpTimings::default();
        let loss = dqn_train_step(&mut p, &before, &mut adam, &buf, &cfg, &mut rng, &mut timings).unwrap();
        assert!(loss.is_some());
        assert_eq!(p, before);
        assert_eq!(timings.calls(OpClass::Predict32), 1);
        assert_eq!(timings.calls(OpClass::TrainDqn), 1);
    }

    #[test]
    fn insufficient_buffer_is_signalled() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DqnConfig::new(AgentConfig::default());
        let mut p = MlpParams::init(4, 8, 2, &mut rng);
        let t = p.clone();
        let mut adam = AdamState::new(&p, cfg.lr);
        let buf = ReplayBuffer::new(100);
        let out = dqn_train_step(&mut p, &t, &mut adam, &buf, &cfg, &mut rng, &mut OpTimings::default()).unwrap();
        assert_eq!(out, None);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn terminal_experiences_converge_to_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = DqnConfig::new(AgentConfig::default());
        let mut p = MlpParams::init(4, 8, 2, &mut rng);
        let target = p.clone();
        let mut adam = AdamState::new(&p, cfg.lr);
        let mut buf = ReplayBuffer::new(100);
        let exp = Experience {
            s: vec![0.1, -0.2, 0.05, 0.3],
            a: 1,
            r: 1.0,
            s_next: vec![0.0; 4],
            d: true,
        };
        for _ in 0..32 {
            buf.push(exp.clone());
        }
        let mut timings = OpTimings::default();
        for _ in 0..2000 {
            dqn_train_step(&mut p, &target, &mut adam, &buf, &cfg, &mut rng, &mut timings).unwrap();
        }
        let q = p.forward(&Matrix::row_vector(&exp.s)).unwrap()[(0, 1)];
        assert!((q - 1.0).abs() <= 1e-2, "{q}");
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Experience {
                s: vec![i as f64],
                a: 0,
                r: 0.0,
                s_next: vec![],
                d: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let mut seen: Vec<f64> = buf.items.iter().map(|e| e.s[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..100 {
            buf.push(Experience {
                s: vec![i as f64],
                a: 0,
                r: 0.0,
                s_next: vec![],
                d: false,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0u32; 100];
        let draws = 100_000 / 32 * 32;
        for _ in 0..draws / 32 {
            for i in buf.sample_indices(32, &mut rng) {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // χ²(99) upper 0.001 quantile
        assert!(chi2 < 148.23, "chi2 = {chi2}");
    }

    #[test]
    fn select_action_polarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = MlpParams::init(4, 8, 2, &mut rng).zeros_like();
        p.b2 = Matrix::row_vector(&[0.0, 1.0]);
        let s = [0.0; 4];
        for _ in 0..100 {
            assert_eq!(dqn_select_action(&p, &s, 1.0, &mut rng).unwrap(), 1);
        }
        let n = 100_000;
        let zeros = (0..n).filter(|_| dqn_select_action(&p, &s, 0.0, &mut rng).unwrap() == 0).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((zeros as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
    }
}
