//! ELM baseline: the DQN loop with the network replaced by a batch ELM using
//! the simplified output model and clipped targets.
//!
//! Experiences go into a replay buffer; at every target-sync boundary β of the
//! online network is refit in closed form on a uniform sample of the buffer,
//! then copied to the target network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cartpole::Environment;
use crate::dqn::ReplayBuffer;
use crate::elm::{ElmParams, NetworkShape};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::timing::{OpClass, OpTimings};

use super::{argmax, bootstrap_target, encode_input, shape_transition, AgentConfig, Learner, TeacherRange};

#[derive(Debug, Clone, PartialEq)]
pub struct ElmAgentConfig {
    pub agent: AgentConfig,
    pub replay_capacity: usize,
    /// Samples drawn from the replay buffer for each refit.
    pub fit_batch: usize,
}

impl ElmAgentConfig {
    pub fn new(agent: AgentConfig) -> Self {
        ElmAgentConfig {
            agent,
            replay_capacity: 10_000,
            fit_batch: 1024,
        }
    }
}

pub struct ElmAgent {
    cfg: ElmAgentConfig,
    online: ElmParams,
    target: ElmParams,
    replay: ReplayBuffer,
    episode: u64,
    rng: ChaCha8Rng,
    timings: OpTimings,
    teachers: TeacherRange,
}

impl ElmAgent {
    pub fn new(cfg: ElmAgentConfig, state_dim: usize) -> Result<Self> {
        cfg.agent.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.agent.seed);
        let shape = NetworkShape::new(state_dim + 1, cfg.agent.n_tilde, 1)?;
        let online = ElmParams::init(shape, &mut rng, cfg.agent.use_lipschitz);
        Ok(ElmAgent {
            target: online.clone(),
            online,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            cfg,
            episode: 0,
            rng,
            timings: OpTimings::default(),
            teachers: TeacherRange::default(),
        })
    }

    pub fn online(&self) -> &ElmParams {
        &self.online
    }

    fn q_values(&mut self, target: bool, s: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.cfg.agent;
        let net = if target { &self.target } else { &self.online };
        self.timings.time(OpClass::PredictInit, || {
            (0..cfg.n_actions())
                .map(|a| Ok(net.predict(&encode_input(s, a, cfg)?)?[(0, 0)]))
                .collect()
        })
    }

    fn refit(&mut self) -> Result<()> {
        let k = self.cfg.fit_batch.min(self.replay.len());
        if k == 0 {
            return Ok(());
        }
        let batch = self.replay.sample(k, &mut self.rng);
        let width = batch[0].s.len() + 1;
        let mut x = Matrix::zeros(k, width);
        let mut t = Matrix::zeros(k, 1);
        for (i, e) in batch.iter().enumerate() {
            let max_q = if e.d {
                0.0
            } else {
                self.q_values(true, &e.s_next)?
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let v = bootstrap_target(e.r, e.d, max_q, &self.cfg.agent)?;
            self.teachers.observe(v);
            t[(i, 0)] = v;
            x.row_mut(i)
                .copy_from_slice(encode_input(&e.s, e.a, &self.cfg.agent)?.as_slice());
        }
        let delta = self.cfg.agent.init_delta();
        let online = &mut self.online;
        self.timings.time(OpClass::TrainInit, || online.fit(&x, &t, delta))
    }
}

impl Learner for ElmAgent {
    fn run_episode(&mut self, env: &mut dyn Environment) -> Result<u32> {
        let mut s = env.reset();
        let mut steps = 0;
        loop {
            let action = if self.rng.gen::<f64>() < self.cfg.agent.eps1 {
                argmax(&self.q_values(false, &s)?)
            } else {
                self.rng.gen_range(0..self.cfg.agent.n_actions())
            };
            let tr = env.step(action)?;
            steps += 1;
            if let Some(exp) = shape_transition(&s, action, &tr, &self.cfg.agent) {
                self.replay.push(exp);
            }
            if tr.done {
                break;
            }
            s = tr.next;
        }
        self.episode += 1;
        if self.episode.is_multiple_of(u64::from(self.cfg.agent.update_step)) {
            self.refit()?;
            self.target.beta.clone_from(&self.online.beta);
        }
        Ok(steps)
    }

    fn timings(&self) -> &OpTimings {
        &self.timings
    }

    fn teacher_range(&self) -> Option<TeacherRange> {
        Some(self.teachers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cartpole::CartPole;

    #[test]
    fn refits_on_sync_boundaries_only() {
        let cfg = ElmAgentConfig::new(AgentConfig {
            seed: 3,
            ..AgentConfig::default().shaped()
        });
        let mut agent = ElmAgent::new(cfg, 4).unwrap();
        let mut env = CartPole::new(3);
        let before = agent.online().beta.clone();
        agent.run_episode(&mut env).unwrap();
        assert_eq!(agent.online().beta, before);
        agent.run_episode(&mut env).unwrap();
        assert_ne!(agent.online().beta, before);
        assert_eq!(agent.target.beta, agent.online.beta);
        let range = agent.teacher_range().unwrap();
        assert!(range.min >= -1.0 && range.max <= 1.0);
    }
}
