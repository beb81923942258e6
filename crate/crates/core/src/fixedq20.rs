//! Bit-exact emulation of a 32-bit Q20 fixed-point OS-ELM core.
//!
//! Values are two's-complement `i32` words with 20 fractional bits (1 sign,
//! 11 integer bits), so the range is `[-2048, 2048 - 2⁻²⁰]`. Arithmetic
//! saturates at the range bounds. Multiplication rounds to nearest through a
//! 64-bit product; division truncates toward zero.
//!
//! The core holds α, b, two β banks (online and target) and P, and runs
//! prediction and the batch-1 sequential update using a single add/mul/div
//! unit ([`FxUnit`]) that counts saturation events. Initial training stays in
//! `f64` on the host; its result is converted into the core once.

use std::fmt;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::agent::{q_values, AgentConfig, FloatBackend, Net, OsElmAgent, QBackend, QNetPair};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::oselm::OselmState;

pub const FRAC_BITS: u32 = 20;
const SCALE: f64 = (1u64 << FRAC_BITS) as f64;
const HALF_ULP: i64 = 1 << (FRAC_BITS - 1);

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FixedQ20(i32);

impl FixedQ20 {
    pub const ZERO: FixedQ20 = FixedQ20(0);
    pub const ONE: FixedQ20 = FixedQ20(1 << FRAC_BITS);
    pub const MAX: FixedQ20 = FixedQ20(i32::MAX);
    pub const MIN: FixedQ20 = FixedQ20(i32::MIN);
    /// One unit in the last place, 2⁻²⁰.
    pub const EPSILON: FixedQ20 = FixedQ20(1);

    pub const fn from_raw(raw: i32) -> Self {
        FixedQ20(raw)
    }

    pub const fn raw(self) -> i32 {
        self.0
    }

    /// Round-to-nearest-even conversion. Out-of-range values saturate and
    /// report `true`; NaN maps to zero and also reports `true`.
    pub fn from_f64(v: f64) -> (Self, bool) {
        if v.is_nan() {
            return (FixedQ20::ZERO, true);
        }
        let scaled = (v * SCALE).round_ties_even();
        if scaled > i32::MAX as f64 {
            (FixedQ20::MAX, true)
        } else if scaled < i32::MIN as f64 {
            (FixedQ20::MIN, true)
        } else {
            (FixedQ20(scaled as i32), false)
        }
    }

    /// Exact.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE
    }

    fn saturate(wide: i64) -> (Self, bool) {
        if wide > i32::MAX as i64 {
            (FixedQ20::MAX, true)
        } else if wide < i32::MIN as i64 {
            (FixedQ20::MIN, true)
        } else {
            (FixedQ20(wide as i32), false)
        }
    }

    pub fn saturating_add(self, rhs: Self) -> (Self, bool) {
        Self::saturate(self.0 as i64 + rhs.0 as i64)
    }

    pub fn saturating_sub(self, rhs: Self) -> (Self, bool) {
        Self::saturate(self.0 as i64 - rhs.0 as i64)
    }

    /// 64-bit product, plus half an ulp, arithmetic shift right by 20.
    pub fn saturating_mul(self, rhs: Self) -> (Self, bool) {
        let wide = self.0 as i64 * rhs.0 as i64;
        Self::saturate((wide + HALF_ULP) >> FRAC_BITS)
    }

    /// Numerator shifted left by 20, then integer division toward zero.
    pub fn checked_div(self, rhs: Self) -> Result<(Self, bool)> {
        if rhs.0 == 0 {
            return Err(Error::DivideByZero);
        }
        Ok(Self::saturate(((self.0 as i64) << FRAC_BITS) / rhs.0 as i64))
    }

    pub fn relu(self) -> Self {
        if self.0 > 0 {
            self
        } else {
            FixedQ20::ZERO
        }
    }
}

impl fmt::Debug for FixedQ20 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q20({} = {:#010x})", self.to_f64(), self.0 as u32)
    }
}

/// The single add/mul/div unit of the core, with a saturation counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FxUnit {
    pub overflows: u64,
}

impl FxUnit {
    #[inline]
    fn count(&mut self, (v, overflowed): (FixedQ20, bool)) -> FixedQ20 {
        self.overflows += u64::from(overflowed);
        v
    }

    pub fn convert(&mut self, v: f64) -> FixedQ20 {
        self.count(FixedQ20::from_f64(v))
    }

    pub fn add(&mut self, a: FixedQ20, b: FixedQ20) -> FixedQ20 {
        self.count(a.saturating_add(b))
    }

    pub fn sub(&mut self, a: FixedQ20, b: FixedQ20) -> FixedQ20 {
        self.count(a.saturating_sub(b))
    }

    pub fn mul(&mut self, a: FixedQ20, b: FixedQ20) -> FixedQ20 {
        self.count(a.saturating_mul(b))
    }

    pub fn div(&mut self, a: FixedQ20, b: FixedQ20) -> Result<FixedQ20> {
        Ok(self.count(a.checked_div(b)?))
    }

    /// Dot product through one accumulator.
    pub fn dot(&mut self, a: &[FixedQ20], b: &[FixedQ20]) -> FixedQ20 {
        a.iter().zip(b).fold(FixedQ20::ZERO, |acc, (&x, &y)| {
            let p = self.mul(x, y);
            self.add(acc, p)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bank {
    Online,
    Target,
}

/// Q20 image of an OS-ELM Q-network pair with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedOselmState {
    n: usize,
    n_tilde: usize,
    /// Row-major `n × Ñ`.
    alpha: Vec<FixedQ20>,
    bias: Vec<FixedQ20>,
    beta_online: Vec<FixedQ20>,
    beta_target: Vec<FixedQ20>,
    /// Row-major `Ñ × Ñ`.
    p: Vec<FixedQ20>,
    unit: FxUnit,
}

impl FixedOselmState {
    /// Converts a float state (online β and P) plus a target β. Panics if the
    /// network output is not scalar.
    pub fn from_float(online: &OselmState, target_beta: &Matrix) -> Self {
        let shape = online.shape();
        assert_eq!(shape.m, 1, "the Q20 core has a scalar output");
        let mut unit = FxUnit::default();
        let mut conv = |m: &Matrix| m.as_slice().iter().map(|&v| unit.convert(v)).collect::<Vec<_>>();
        let alpha = conv(&online.params.alpha);
        let bias = conv(&online.params.bias);
        let beta_online = conv(&online.params.beta);
        let beta_target = conv(target_beta);
        let p = conv(&online.p);
        FixedOselmState {
            n: shape.n,
            n_tilde: shape.n_tilde,
            alpha,
            bias,
            beta_online,
            beta_target,
            p,
            unit,
        }
    }

    pub fn overflows(&self) -> u64 {
        self.unit.overflows
    }

    pub fn beta(&self, bank: Bank) -> &[FixedQ20] {
        match bank {
            Bank::Online => &self.beta_online,
            Bank::Target => &self.beta_target,
        }
    }

    pub fn beta_f64(&self, bank: Bank) -> Vec<f64> {
        self.beta(bank).iter().map(|v| v.to_f64()).collect()
    }

    pub fn p_f64(&self) -> Matrix {
        Matrix::from_vec(self.n_tilde, self.n_tilde, self.p.iter().map(|v| v.to_f64()).collect())
            .expect("P is square")
    }

    fn convert_input(&mut self, x: &[f64]) -> Vec<FixedQ20> {
        assert_eq!(x.len(), self.n, "input width");
        x.iter().map(|&v| self.unit.convert(v)).collect()
    }

    fn hidden(&mut self, x: &[FixedQ20]) -> Vec<FixedQ20> {
        let (n, nt) = (self.n, self.n_tilde);
        (0..nt)
            .map(|j| {
                let mut acc = self.bias[j];
                for i in 0..n {
                    let prod = self.unit.mul(x[i], self.alpha[i * nt + j]);
                    acc = self.unit.add(acc, prod);
                }
                acc.relu()
            })
            .collect()
    }

    /// `ReLU(x·α + b)·β` for one input row, computed entirely in Q20.
    pub fn predict_fixed(&mut self, x: &[FixedQ20], bank: Bank) -> FixedQ20 {
        let h = self.hidden(x);
        let beta = match bank {
            Bank::Online => &self.beta_online,
            Bank::Target => &self.beta_target,
        };
        self.unit.dot(&h, beta)
    }

    /// Converts `x` at the boundary, then predicts.
    pub fn predict(&mut self, x: &[f64], bank: Bank) -> FixedQ20 {
        let x = self.convert_input(x);
        self.predict_fixed(&x, bank)
    }

    /// Batch-1 recursive least-squares update of the online bank.
    pub fn seq_train_fixed(&mut self, x: &[FixedQ20], t: FixedQ20) -> Result<()> {
        let nt = self.n_tilde;
        let h = self.hidden(x);

        let mut ph = Vec::with_capacity(nt);
        for i in 0..nt {
            let row = &self.p[i * nt..(i + 1) * nt];
            let v = row.iter().zip(&h).fold(FixedQ20::ZERO, |acc, (&a, &b)| {
                let prod = self.unit.mul(a, b);
                self.unit.add(acc, prod)
            });
            ph.push(v);
        }
        let hph = self.unit.dot(&h, &ph);
        let s = self.unit.add(FixedQ20::ONE, hph);
        let recip = self.unit.div(FixedQ20::ONE, s)?;

        // P ← P − (P hᵀ)(h P)/s, upper triangle mirrored so P stays symmetric.
        let gain: Vec<FixedQ20> = ph.iter().map(|&v| self.unit.mul(v, recip)).collect();
        for i in 0..nt {
            for j in i..nt {
                let delta = self.unit.mul(gain[i], ph[j]);
                let v = self.unit.sub(self.p[i * nt + j], delta);
                self.p[i * nt + j] = v;
                self.p[j * nt + i] = v;
            }
        }

        // β ← β + P hᵀ (t − hβ); with the updated P, P hᵀ is the gain.
        let hb = self.unit.dot(&h, &self.beta_online);
        let err = self.unit.sub(t, hb);
        for (i, &k) in gain.iter().enumerate() {
            let step = self.unit.mul(k, err);
            self.beta_online[i] = self.unit.add(self.beta_online[i], step);
        }
        Ok(())
    }

    pub fn seq_train(&mut self, x: &[f64], t: f64) -> Result<()> {
        let x = self.convert_input(x);
        let t = self.unit.convert(t);
        self.seq_train_fixed(&x, t)
    }

    /// Target bank ← online bank.
    pub fn sync_target(&mut self) {
        self.beta_target.clone_from(&self.beta_online);
    }

    /// One raw 32-bit word per line as eight hex digits: α, b, online β,
    /// target β, then P, each row-major.
    pub fn hex_dump(&self) -> String {
        let mut out = String::with_capacity(9 * (self.alpha.len() + self.p.len() + 3 * self.n_tilde));
        for w in self
            .alpha
            .iter()
            .chain(&self.bias)
            .chain(&self.beta_online)
            .chain(&self.beta_target)
            .chain(&self.p)
        {
            let _ = writeln!(out, "{:08x}", w.raw() as u32);
        }
        out
    }
}

/// Float host path until the initial training, Q20 core afterwards.
#[derive(Debug, Clone)]
pub struct FixedBackend {
    host: FloatBackend,
    core: Option<FixedOselmState>,
}

impl FixedBackend {
    pub fn new(pair: QNetPair) -> Self {
        FixedBackend {
            host: FloatBackend::new(pair),
            core: None,
        }
    }

    pub fn core(&self) -> Option<&FixedOselmState> {
        self.core.as_ref()
    }
}

impl QBackend for FixedBackend {
    fn is_trained(&self) -> bool {
        self.core.is_some()
    }

    fn q_values(&mut self, net: Net, s: &[f64], cfg: &AgentConfig) -> Result<Vec<f64>> {
        let Some(core) = self.core.as_mut() else {
            return self.host.q_values(net, s, cfg);
        };
        let bank = match net {
            Net::Online => Bank::Online,
            Net::Target => Bank::Target,
        };
        let state = core.convert_input(&[s, &[0.0]].concat());
        let mut x = state;
        let last = x.len() - 1;
        cfg.action_codes
            .iter()
            .map(|&code| {
                x[last] = core.unit.convert(code);
                Ok(core.predict_fixed(&x, bank).to_f64())
            })
            .collect()
    }

    fn init_train(&mut self, x: &Matrix, t: &Matrix, delta: f64) -> Result<()> {
        self.host.init_train(x, t, delta)?;
        let pair = &self.host.pair;
        self.core = Some(FixedOselmState::from_float(&pair.theta1, &pair.theta2.params.beta));
        Ok(())
    }

    fn seq_train(&mut self, x: &[f64], t: f64) -> Result<()> {
        match self.core.as_mut() {
            Some(core) => core.seq_train(x, t),
            None => Err(Error::State("sequential training before initial training".into())),
        }
    }

    fn sync_target(&mut self) {
        match self.core.as_mut() {
            Some(core) => core.sync_target(),
            None => self.host.sync_target(),
        }
    }

    fn overflows(&self) -> Option<u64> {
        Some(self.core.as_ref().map_or(0, FixedOselmState::overflows))
    }
}

impl OsElmAgent<FixedBackend> {
    /// OS-ELM Q-Network whose post-initialization predict and update run on
    /// the Q20 core.
    pub fn new_fixed(cfg: AgentConfig, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backend = FixedBackend::new(QNetPair::new(state_dim, &cfg, &mut rng)?);
        Ok(OsElmAgent::with_backend(cfg, backend, rng))
    }
}

/// Float-path Q-values, for comparisons against the core.
pub fn float_q_values(state: &OselmState, s: &[f64], cfg: &AgentConfig) -> Result<Vec<f64>> {
    q_values(state, s, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elm::{ElmParams, NetworkShape};
    use rand::Rng;

    fn q(v: f64) -> FixedQ20 {
        FixedQ20::from_f64(v).0
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(FixedQ20::from_f64(0.0), (FixedQ20::ZERO, false));
        assert_eq!(FixedQ20::ZERO.to_f64(), 0.0);
        assert_eq!(q(1.0).raw(), 1_048_576);
        let (sat, overflowed) = FixedQ20::from_f64(5000.0);
        assert!(overflowed);
        assert_eq!(sat.to_f64(), 2048.0 - 2f64.powi(-20));
        assert_eq!(FixedQ20::from_f64(-5000.0).0.to_f64(), -2048.0);
        assert_eq!(q(-2048.0).raw(), i32::MIN);
    }

    #[test]
    fn conversion_rounds_ties_to_even() {
        let half_ulp = 2f64.powi(-21);
        assert_eq!(q(half_ulp).raw(), 0);
        assert_eq!(q(3.0 * half_ulp).raw(), 2);
        assert_eq!(q(-half_ulp).raw(), 0);
        assert_eq!(q(-3.0 * half_ulp).raw(), -2);
    }

    #[test]
    fn multiply_examples() {
        let x = q(-2.75);
        assert_eq!(FixedQ20::ONE.saturating_mul(x).0, x);
        assert_eq!(q(0.5).saturating_mul(q(0.5)).0.to_f64(), 0.25);
        let (v, o) = q(100.0).saturating_mul(q(100.0));
        assert!(o);
        assert_eq!(v, FixedQ20::MAX);
    }

    #[test]
    fn arithmetic_error_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bound = 2f64.powi(-19);
        for _ in 0..100_000 {
            let a = q(rng.gen_range(-8.0..8.0));
            let b = q(rng.gen_range(-8.0..8.0));
            let (fa, fb) = (a.to_f64(), b.to_f64());
            assert!((a.saturating_mul(b).0.to_f64() - fa * fb).abs() <= bound);
            assert_eq!(a.saturating_add(b).0.to_f64(), fa + fb);
            if b.raw() != 0 && (fa / fb).abs() < 2000.0 {
                assert!((a.checked_div(b).unwrap().0.to_f64() - fa / fb).abs() <= bound);
            }
        }
    }

    #[test]
    fn division_truncates_toward_zero() {
        // 1/3 and -1/3 truncate to the same magnitude.
        let third = FixedQ20::ONE.checked_div(q(3.0)).unwrap().0;
        let neg = q(-1.0).checked_div(q(3.0)).unwrap().0;
        assert_eq!(third.raw(), 349_525);
        assert_eq!(neg.raw(), -349_525);
        assert!(matches!(FixedQ20::ONE.checked_div(FixedQ20::ZERO), Err(Error::DivideByZero)));
    }

    #[test]
    fn add_saturates() {
        let (v, o) = FixedQ20::MAX.saturating_add(FixedQ20::EPSILON);
        assert!(o);
        assert_eq!(v, FixedQ20::MAX);
        let (v, o) = FixedQ20::MIN.saturating_sub(FixedQ20::EPSILON);
        assert!(o);
        assert_eq!(v, FixedQ20::MIN);
    }

    #[test]
    fn unit_counts_overflows() {
        let mut u = FxUnit::default();
        u.add(FixedQ20::MAX, FixedQ20::ONE);
        u.mul(q(1000.0), q(1000.0));
        u.mul(q(1.0), q(1.0));
        assert_eq!(u.overflows, 2);
    }

    fn float_state(seed: u64, nt: usize) -> (OselmState, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = NetworkShape::new(5, nt, 1).unwrap();
        (OselmState::new(ElmParams::init(shape, &mut rng, true)), rng)
    }

    #[test]
    fn zero_beta_predicts_zero() {
        let (mut st, mut rng) = float_state(2, 16);
        st.params.beta = Matrix::zeros(16, 1);
        let mut core = FixedOselmState::from_float(&st, &st.params.beta);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(core.predict(&x, Bank::Online), FixedQ20::ZERO);
    }

    #[test]
    fn predict_tracks_float_and_is_deterministic() {
        let (mut st, mut rng) = float_state(3, 64);
        st.params.beta = Matrix::from_fn(64, 1, |_, _| rng.gen_range(-8.0..8.0));
        let core = FixedOselmState::from_float(&st, &st.params.beta);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let want = st.predict(&Matrix::row_vector(&x)).unwrap()[(0, 0)];
            let mut a = core.clone();
            let mut b = core.clone();
            let got = a.predict(&x, Bank::Online);
            assert_eq!(got, b.predict(&x, Bank::Online));
            assert!((got.to_f64() - want).abs() <= 1e-3, "{} vs {want}", got.to_f64());
        }
    }

    #[test]
    fn zero_innovation_update_keeps_beta() {
        let (mut st, mut rng) = float_state(4, 16);
        let x0 = Matrix::from_fn(16, 5, |_, _| rng.gen_range(-1.0..1.0));
        let t0 = Matrix::from_fn(16, 1, |_, _| rng.gen_range(-1.0..1.0));
        st.init_train(&x0, &t0, 0.5).unwrap();
        let mut core = FixedOselmState::from_float(&st, &st.params.beta);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xf: Vec<FixedQ20> = x.iter().map(|&v| q(v)).collect();
        let t = core.predict_fixed(&xf, Bank::Online);
        let before = core.beta(Bank::Online).to_vec();
        core.seq_train_fixed(&xf, t).unwrap();
        for (a, b) in core.beta(Bank::Online).iter().zip(&before) {
            assert!((a.raw() - b.raw()).abs() <= 1, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn sequential_updates_track_float_path() {
        let (mut st, mut rng) = float_state(5, 16);
        let x0 = Matrix::from_fn(16, 5, |_, _| rng.gen_range(-1.0..1.0));
        let t0 = Matrix::from_fn(16, 1, |_, _| rng.gen_range(-1.0..1.0));
        st.init_train(&x0, &t0, 0.5).unwrap();
        let mut core = FixedOselmState::from_float(&st, &st.params.beta);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(-1.0..1.0);
            st.seq_train(&Matrix::row_vector(&x), &Matrix::row_vector(&[t])).unwrap();
            core.seq_train(&x, t).unwrap();
        }
        for (a, b) in core.beta_f64(Bank::Online).iter().zip(st.params.beta.as_slice()) {
            assert!((a - b).abs() <= 1e-2, "{a} vs {b}");
        }
        assert_eq!(core.overflows(), 0);
        let p = core.p_f64();
        assert_eq!(p, p.transpose());
    }

    #[test]
    fn sync_copies_online_bank() {
        let (st, mut rng) = float_state(6, 8);
        let other = Matrix::from_fn(8, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut core = FixedOselmState::from_float(&st, &other);
        assert_ne!(core.beta(Bank::Online), core.beta(Bank::Target));
        core.sync_target();
        assert_eq!(core.beta(Bank::Online), core.beta(Bank::Target));
    }

    #[test]
    fn hex_dump_layout() {
        let (st, _) = float_state(7, 3);
        let core = FixedOselmState::from_float(&st, &st.params.beta);
        let dump = core.hex_dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 5 * 3 + 3 + 3 + 3 + 9);
        assert!(lines.iter().all(|l| l.len() == 8 && u32::from_str_radix(l, 16).is_ok()));
        let first = u32::from_str_radix(lines[0], 16).unwrap() as i32;
        assert_eq!(first, q(st.params.alpha[(0, 0)]).raw());
        // P of an untrained state is zero
        assert!(lines[24..].iter().all(|l| *l == "00000000"));
    }
}
