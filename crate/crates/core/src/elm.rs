//! Single-hidden-layer extreme learning machine: random fixed input weights,
//! closed-form (ridge) output weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Hidden activation. ReLU is 1-Lipschitz, which the Lipschitz bound on the
/// whole network relies on.
#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    /// Input nodes.
    pub n: usize,
    /// Hidden nodes.
    pub n_tilde: usize,
    /// Output nodes.
    pub m: usize,
}

impl NetworkShape {
    pub fn new(n: usize, n_tilde: usize, m: usize) -> Result<Self> {
        if n == 0 || n_tilde == 0 || m == 0 {
            return Err(Error::InvalidArgument(format!(
                "network shape ({n}, {n_tilde}, {m}) has an empty layer"
            )));
        }
        Ok(NetworkShape { n, n_tilde, m })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmParams {
    pub shape: NetworkShape,
    /// Input weights, `n × Ñ`. Never changed after construction.
    pub alpha: Matrix,
    /// Hidden bias, `1 × Ñ`.
    pub bias: Matrix,
    /// Output weights, `Ñ × m`.
    pub beta: Matrix,
}

impl ElmParams {
    /// Draws α, b and β uniformly from `[0, 1)`. When `normalize_alpha` is set,
    /// α is divided by its largest singular value.
    pub fn init<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R, normalize_alpha: bool) -> Self {
        let mut uniform = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen::<f64>());
        let mut alpha = uniform(shape.n, shape.n_tilde);
        let bias = uniform(1, shape.n_tilde);
        let beta = uniform(shape.n_tilde, shape.m);
        if normalize_alpha {
            let s = alpha.sigma_max();
            if s > 0.0 {
                alpha = alpha.scale(1.0 / s);
            }
        }
        ElmParams {
            shape,
            alpha,
            bias,
            beta,
        }
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.shape.n {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: self.alpha.shape(),
            });
        }
        Ok(())
    }

    /// `H = ReLU(x·α + b)`, one row per input row.
    pub fn hidden(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "hidden")?;
        let mut h = x.matmul(&self.alpha)?;
        h.add_row_broadcast(&self.bias)?;
        Ok(h.map(relu))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "predict")?;
        self.hidden(x)?.matmul(&self.beta)
    }

    /// Solves `β = (HᵀH + δI)⁻¹ Hᵀ t` for the given chunk and stores it.
    pub fn fit(&mut self, x: &Matrix, t: &Matrix, delta: f64) -> Result<()> {
        self.check_input(x, "fit")?;
        if t.rows() != x.rows() || t.cols() != self.shape.m {
            return Err(Error::Shape {
                op: "fit",
                left: x.shape(),
                right: t.shape(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("fit needs at least one sample".into()));
        }
        if delta < 0.0 {
            return Err(Error::InvalidArgument(format!("negative ridge parameter {delta}")));
        }
        let h = self.hidden(x)?;
        let (_, beta) = ridge_normal_equations(&h, t, delta)?;
        self.beta = beta;
        Ok(())
    }
}

/// Returns `(P, β)` with `P = (HᵀH + δI)⁻¹` and `β = P Hᵀ t`.
pub(crate) fn ridge_normal_equations(h: &Matrix, t: &Matrix, delta: f64) -> Result<(Matrix, Matrix)> {
    let mut gram = h.t_matmul(h)?;
    gram.add_diagonal(delta);
    let mut p = gram.inverse()?;
    p.symmetrize();
    let beta = p.matmul(&h.t_matmul(t)?)?;
    Ok((p, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, shape: NetworkShape, normalize: bool) -> ElmParams {
        ElmParams::init(shape, &mut ChaCha8Rng::seed_from_u64(seed), normalize)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let shape = NetworkShape::new(5, 64, 1).unwrap();
        assert_eq!(params(9, shape, true), params(9, shape, true));
        assert_ne!(params(9, shape, true), params(10, shape, true));
    }

    #[test]
    fn init_normalizes_alpha() {
        let p = params(1, NetworkShape::new(5, 64, 1).unwrap(), true);
        assert!((p.alpha.sigma_max() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn init_without_normalization_is_unit_interval() {
        let p = params(1, NetworkShape::new(5, 64, 1).unwrap(), false);
        for m in [&p.alpha, &p.bias, &p.beta] {
            assert!(m.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(p.alpha.shape(), (5, 64));
        assert_eq!(p.bias.shape(), (1, 64));
        assert_eq!(p.beta.shape(), (64, 1));
    }

    #[test]
    fn shape_rejects_empty_layers() {
        assert!(NetworkShape::new(0, 4, 1).is_err());
        assert!(NetworkShape::new(4, 0, 1).is_err());
        assert!(NetworkShape::new(4, 4, 0).is_err());
    }

    #[test]
    fn hidden_of_zero_input_is_bias() {
        let p = params(2, NetworkShape::new(3, 8, 1).unwrap(), false);
        let h = p.hidden(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(h.row(0), p.bias.as_slice());
        assert_eq!(h.row(1), p.bias.as_slice());
    }

    #[test]
    fn hidden_clamps_negative_preactivations() {
        let mut p = params(2, NetworkShape::new(1, 2, 1).unwrap(), false);
        p.alpha = Matrix::from_rows(&[[1.0, -1.0]]);
        p.bias = Matrix::zeros(1, 2);
        let h = p.hidden(&Matrix::row_vector(&[3.0])).unwrap();
        assert_eq!(h.as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn hidden_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(3, NetworkShape::new(5, 16, 2).unwrap(), true);
        let x = random(&mut rng, 7, 5);
        let h = p.hidden(&x).unwrap();
        let want = oracle::scalar_hidden(&p, &x);
        for (a, b) in h.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(matches!(p.hidden(&Matrix::zeros(1, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = params(4, NetworkShape::new(5, 16, 1).unwrap(), false);
        let x = random(&mut rng, 2, 5);

        let batched = p.predict(&x).unwrap();
        let single = p.predict(&Matrix::row_vector(x.row(1))).unwrap();
        assert_eq!(single.as_slice(), batched.row(1));

        let composed = oracle::naive_matmul(&oracle::scalar_hidden(&p, &x), &p.beta);
        for (a, b) in batched.as_slice().iter().zip(composed.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }

        p.beta = Matrix::zeros(16, 1);
        assert!(p.predict(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_zero_target_gives_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = params(5, NetworkShape::new(5, 16, 1).unwrap(), true);
        p.fit(&random(&mut rng, 10, 5), &Matrix::zeros(10, 1), 0.5).unwrap();
        assert!(p.beta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_least_squares_residual_matches_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = params(6, NetworkShape::new(5, 4, 1).unwrap(), false);
        let x = random(&mut rng, 8, 5);
        let t = random(&mut rng, 8, 1);
        p.fit(&x, &t, 0.0).unwrap();
        let h = p.hidden(&x).unwrap();
        let ours = h.matmul(&p.beta).unwrap().sub(&t).unwrap().frobenius_norm();
        let beta_qr = oracle::ridge_qr(&h, &t, 0.0);
        let best = h.matmul(&beta_qr).unwrap().sub(&t).unwrap().frobenius_norm();
        assert!((ours - best).abs() <= 1e-8, "{ours} vs {best}");
    }

    #[test]
    fn fit_interpolates_square_full_rank_system() {
        // k == Ñ with full column rank: zero training error.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = params(7, NetworkShape::new(5, 6, 1).unwrap(), false);
        let x = Matrix::from_fn(6, 5, |_, _| rng.gen_range(0.0..1.0));
        let t = random(&mut rng, 6, 1);
        p.fit(&x, &t, 0.0).unwrap();
        let resid = p.predict(&x).unwrap().sub(&t).unwrap().frobenius_norm();
        assert!(resid <= 1e-6, "{resid}");
    }

    #[test]
    fn fit_ridge_shrinks_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 20, 5);
        let t = random(&mut rng, 20, 1);
        let mut norms = Vec::new();
        for delta in [1.0, 10.0, 1e3, 1e6] {
            let mut p = params(8, NetworkShape::new(5, 16, 1).unwrap(), true);
            p.fit(&x, &t, delta).unwrap();
            norms.push(p.beta.frobenius_norm());
        }
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        assert!(norms[3] < 1e-3 * norms[0]);
    }

    #[test]
    fn fit_is_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 30, 5);
        let t = random(&mut rng, 30, 1);
        let perm: Vec<usize> = (0..30).rev().collect();
        let xp = Matrix::from_fn(30, 5, |i, j| x[(perm[i], j)]);
        let tp = Matrix::from_fn(30, 1, |i, j| t[(perm[i], j)]);
        let mut a = params(9, NetworkShape::new(5, 16, 1).unwrap(), true);
        let mut b = a.clone();
        a.fit(&x, &t, 0.5).unwrap();
        b.fit(&xp, &tp, 0.5).unwrap();
        let diff = a.beta.sub(&b.beta).unwrap().frobenius_norm();
        assert!(diff <= 1e-9 * a.beta.frobenius_norm().max(1.0));
    }

    #[test]
    fn fit_rejects_bad_input() {
        let mut p = params(1, NetworkShape::new(5, 16, 1).unwrap(), true);
        assert!(p.fit(&Matrix::zeros(3, 5), &Matrix::zeros(4, 1), 1.0).is_err());
        assert!(p.fit(&Matrix::zeros(3, 5), &Matrix::zeros(3, 1), -1.0).is_err());
        // k < Ñ without ridge: HᵀH is singular.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = p.fit(&random(&mut rng, 3, 5), &Matrix::zeros(3, 1), 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }
}
