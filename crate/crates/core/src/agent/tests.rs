use super::*;
use crate::cartpole::CartPole;

fn cfg(seed: u64) -> AgentConfig {
    AgentConfig {
        n_tilde: 16,
        seed,
        ..AgentConfig::default().shaped()
    }
}

fn trained_pair(seed: u64) -> (QNetPair, AgentConfig) {
    let cfg = cfg(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = QNetPair::new(4, &cfg, &mut rng).unwrap();
    let x = Matrix::from_fn(16, 5, |_, _| rng.gen_range(-1.0..1.0));
    let t = Matrix::from_fn(16, 1, |_, _| rng.gen_range(-1.0..1.0));
    pair.theta1.init_train(&x, &t, 0.5).unwrap();
    (pair, cfg)
}

/// Never terminates; every step returns reward 1 and a fixed next state.
struct Endless;

impl Environment for Endless {
    fn state_dim(&self) -> usize {
        4
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn reset(&mut self) -> Vec<f64> {
        vec![0.01, 0.0, -0.02, 0.0]
    }
    fn step(&mut self, _action: usize) -> Result<Transition> {
        Ok(Transition {
            next: vec![0.01, 0.1, -0.02, 0.05],
            reward: 1.0,
            done: false,
            failed: false,
        })
    }
}

#[test]
fn encode_input_examples() {
    let c = AgentConfig::default();
    let s = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(encode_input(&s, 0, &c).unwrap().as_slice(), &[0.1, 0.2, 0.3, 0.4, -0.5]);
    assert_eq!(encode_input(&s, 1, &c).unwrap().as_slice(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    assert!(matches!(encode_input(&s, 2, &c), Err(Error::InvalidArgument(_))));
}

#[test]
fn q_values_zero_beta_and_scale_invariance() {
    let (mut pair, c) = trained_pair(1);
    let s = [0.02, -0.1, 0.03, 0.2];
    let q = q_values(&pair.theta1, &s, &c).unwrap();
    let best = argmax(&q);
    pair.theta1.params.beta = pair.theta1.params.beta.scale(3.5);
    assert_eq!(argmax(&q_values(&pair.theta1, &s, &c).unwrap()), best);
    pair.theta1.params.beta = Matrix::zeros(16, 1);
    assert_eq!(q_values(&pair.theta1, &s, &c).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0, 1.0]), 0);
    assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
}

#[test]
fn select_action_greedy_fraction() {
    let (pair, base) = trained_pair(2);
    let s = [0.0, 0.0, 0.0, 0.0];
    let greedy = argmax(&q_values(&pair.theta1, &s, &base).unwrap());
    let n = 100_000;
    for eps1 in [0.0, 1.0, 0.7] {
        let c = AgentConfig { eps1, ..base.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hits = (0..n)
            .filter(|_| select_action(&pair.theta1, &s, &c, &mut rng).unwrap() == greedy)
            .count();
        // Greedy with probability ε₁, plus half of the random picks.
        let p = eps1 + (1.0 - eps1) / 2.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1e-9, "eps1={eps1}: {hits}");
    }
}

#[test]
fn compute_target_examples() {
    let (pair, c) = trained_pair(3);
    let exp = |r, d| Experience {
        s: vec![0.0; 4],
        a: 0,
        r,
        s_next: vec![0.0; 4],
        d,
    };
    assert_eq!(compute_target(&exp(1.0, true), &pair.theta2, &c).unwrap(), 1.0);
    assert_eq!(compute_target(&exp(-1.0, true), &pair.theta2, &c).unwrap(), -1.0);
    assert_eq!(bootstrap_target(1.0, false, 0.5, &c).unwrap(), 1.0);
    assert_eq!(bootstrap_target(0.0, false, 0.5, &c).unwrap(), 0.495);
    assert_eq!(bootstrap_target(-1.0, false, -3.0, &c).unwrap(), -1.0);
}

#[test]
fn shape_transition_modes() {
    let tr = |done, failed| Transition {
        next: vec![1.0; 4],
        reward: 1.0,
        done,
        failed,
    };
    let s = [0.0; 4];
    let literal = AgentConfig::default();
    assert!(shape_transition(&s, 1, &tr(true, true), &literal).is_none());
    assert_eq!(shape_transition(&s, 1, &tr(false, false), &literal).unwrap().r, 1.0);

    let shaped = AgentConfig::default().shaped();
    let e = shape_transition(&s, 1, &tr(true, true), &shaped).unwrap();
    assert_eq!((e.r, e.d), (-1.0, true));
    // The step cap is not a failure: no override, keep bootstrapping.
    let e = shape_transition(&s, 1, &tr(true, false), &shaped).unwrap();
    assert_eq!((e.r, e.d), (1.0, false));
}

#[test]
fn buffer_fills_then_initial_training() {
    let c = cfg(4);
    let mut agent = OsElmAgent::new(c, 4).unwrap();
    let mut env = Endless;
    let s = env.reset();
    for i in 1..16 {
        let rep = agent.step(&mut env, &s).unwrap();
        assert!(!rep.initial_trained);
        assert_eq!(agent.buffer().len(), i);
        assert!(!agent.is_trained());
    }
    let p_before = agent.pair().theta1.p.clone();
    let rep = agent.step(&mut env, &s).unwrap();
    assert!(rep.initial_trained);
    assert!(agent.is_trained());
    assert!(agent.buffer().is_empty());
    assert_ne!(agent.pair().theta1.p, p_before);
}

#[test]
fn random_update_gate() {
    let mut never = OsElmAgent::new(AgentConfig { eps2: 0.0, ..cfg(5) }, 4).unwrap();
    let mut always = OsElmAgent::new(AgentConfig { eps2: 1.0, ..cfg(5) }, 4).unwrap();
    let mut env = Endless;
    let s = env.reset();
    for _ in 0..16 {
        never.step(&mut env, &s).unwrap();
        always.step(&mut env, &s).unwrap();
    }
    let frozen = never.pair().clone();
    for _ in 0..50 {
        assert!(!never.step(&mut env, &s).unwrap().seq_updated);
        assert!(always.step(&mut env, &s).unwrap().seq_updated);
    }
    assert_eq!(never.pair(), &frozen);
    assert_eq!(always.timings().calls(OpClass::TrainSeq), 50);
}

#[test]
fn sync_equalizes_and_is_idempotent() {
    let (mut pair, c) = trained_pair(6);
    let s = [0.05, 0.0, -0.05, 0.1];
    assert_ne!(q_values(&pair.theta1, &s, &c).unwrap(), q_values(&pair.theta2, &s, &c).unwrap());
    pair.sync_target();
    let once = pair.clone();
    assert_eq!(q_values(&pair.theta1, &s, &c).unwrap(), q_values(&pair.theta2, &s, &c).unwrap());
    pair.sync_target();
    assert_eq!(pair, once);
}

#[test]
fn lipschitz_bound_cases() {
    let (mut pair, c) = trained_pair(7);
    let bound = pair.lipschitz_bound(&c);
    assert_eq!(bound, pair.theta1.params.beta.sigma_max());

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..10_000 {
        let a = rng.gen_range(0..2);
        let s1: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s2: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x1 = encode_input(&s1, a, &c).unwrap();
        let x2 = encode_input(&s2, a, &c).unwrap();
        let q1 = pair.theta1.predict(&x1).unwrap()[(0, 0)];
        let q2 = pair.theta1.predict(&x2).unwrap()[(0, 0)];
        let dist = x1.sub(&x2).unwrap().frobenius_norm();
        assert!((q1 - q2).abs() <= bound * dist + 1e-9);
    }

    let plain = AgentConfig {
        use_lipschitz: false,
        ..c.clone()
    };
    let expected = pair.theta1.params.alpha.sigma_max() * pair.theta1.params.beta.sigma_max();
    assert_eq!(pair.lipschitz_bound(&plain), expected);

    pair.theta1.params.beta = Matrix::zeros(16, 1);
    assert_eq!(pair.lipschitz_bound(&c), 0.0);
}

#[test]
fn alpha_and_bias_never_change() {
    let mut agent = OsElmAgent::new(cfg(8), 4).unwrap();
    let alpha = agent.pair().theta1.params.alpha.clone();
    let bias = agent.pair().theta1.params.bias.clone();
    let mut env = CartPole::new(8);
    for _ in 0..20 {
        agent.run_episode(&mut env).unwrap();
    }
    for net in [&agent.pair().theta1, &agent.pair().theta2] {
        assert_eq!(net.params.alpha, alpha);
        assert_eq!(net.params.bias, bias);
    }
}

#[test]
fn variant_flags_and_normalization() {
    assert_eq!(Variant::OsElm.flags(), (false, false));
    assert_eq!(Variant::OsElmL2Lipschitz.flags(), (true, true));
    let c = AgentConfig::for_variant(Variant::OsElmL2Lipschitz, 64);
    assert_eq!((c.delta, c.init_delta()), (0.5, 0.5));
    let plain = AgentConfig::for_variant(Variant::OsElm, 64);
    assert_eq!(plain.init_delta(), INIT_JITTER);

    let norm = OsElmAgent::new(c, 4).unwrap();
    assert!((norm.pair().theta1.params.alpha.sigma_max() - 1.0).abs() < 1e-6);
    let raw = OsElmAgent::new(plain, 4).unwrap();
    assert!(raw.pair().theta1.params.alpha.sigma_max() > 1.5);
}

#[test]
fn config_validation() {
    assert!(AgentConfig::default().validate().is_ok());
    let bad = [
        AgentConfig { eps1: 1.5, ..AgentConfig::default() },
        AgentConfig { n_tilde: 0, ..AgentConfig::default() },
        AgentConfig { update_step: 0, ..AgentConfig::default() },
        AgentConfig { clip_lo: 1.0, clip_hi: -1.0, ..AgentConfig::default() },
        AgentConfig { action_codes: vec![], ..AgentConfig::default() },
        AgentConfig { action_codes: vec![0.5, 0.5], ..AgentConfig::default() },
        AgentConfig { delta: -1.0, ..AgentConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        assert!(OsElmAgent::new(c, 4).is_err());
    }
}

#[test]
fn teachers_stay_in_clip_range() {
    let mut agent = OsElmAgent::new(AgentConfig { n_tilde: 32, ..cfg(9) }, 4).unwrap();
    let mut env = CartPole::new(9);
    for _ in 0..50 {
        agent.run_episode(&mut env).unwrap();
    }
    let r = agent.teacher_range().unwrap();
    assert!(r.count > 0);
    assert!(r.min >= -1.0 && r.max <= 1.0, "{r:?}");
}

#[test]
fn runs_are_bit_reproducible() {
    let run = |seed| {
        let mut agent = OsElmAgent::new(cfg(seed), 4).unwrap();
        let mut env = CartPole::new(seed);
        let steps: Vec<u32> = (0..30).map(|_| agent.run_episode(&mut env).unwrap()).collect();
        (steps, agent.pair().theta1.to_bytes())
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11).1, run(12).1);
}

#[test]
fn target_syncs_every_update_step_episodes() {
    let mut agent = OsElmAgent::new(AgentConfig { update_step: 2, ..cfg(10) }, 4).unwrap();
    let mut env = CartPole::new(10);
    // Get past initial training first.
    while !agent.is_trained() {
        agent.run_episode(&mut env).unwrap();
    }
    if agent.episodes() % 2 == 1 {
        agent.run_episode(&mut env).unwrap();
    }
    agent.run_episode(&mut env).unwrap();
    assert_ne!(agent.pair().theta1.params.beta, agent.pair().theta2.params.beta);
    agent.run_episode(&mut env).unwrap();
    assert_eq!(agent.pair().theta1.params.beta, agent.pair().theta2.params.beta);
}
