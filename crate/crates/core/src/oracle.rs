//! Independent reference computations used to check the fast paths.
//!
//! Nothing here shares code with the routines it checks: products are plain
//! triple loops, eigenvalues come from cyclic Jacobi rotations and least
//! squares goes through Householder QR instead of the normal equations.
//! [`run_suite`] bundles the checks for the `oracle` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cartpole::{CartPole, CartPoleState};
use crate::elm::{ElmParams, NetworkShape};
use crate::fixedq20::{FixedOselmState, FixedQ20};
use crate::matrix::Matrix;
use crate::oselm::OselmState;

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// `ReLU(x·α + b)` with explicit scalar loops.
pub fn scalar_hidden(p: &ElmParams, x: &Matrix) -> Matrix {
    let nt = p.shape.n_tilde;
    let mut h = Matrix::zeros(x.rows(), nt);
    for r in 0..x.rows() {
        for j in 0..nt {
            let mut acc = p.bias[(0, j)];
            for i in 0..p.shape.n {
                acc += x[(r, i)] * p.alpha[(i, j)];
            }
            h[(r, j)] = if acc > 0.0 { acc } else { 0.0 };
        }
    }
    h
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(sym: &Matrix) -> Vec<f64> {
    let n = sym.rows();
    assert_eq!(n, sym.cols());
    let mut a = sym.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Largest singular value as the square root of the top Jacobi eigenvalue of `AᵀA`.
pub fn jacobi_sigma_max(a: &Matrix) -> f64 {
    let gram = naive_matmul(&a.transpose(), a);
    jacobi_eigenvalues(&gram)
        .into_iter()
        .fold(0.0, f64::max)
        .sqrt()
}

/// Lower bound on σ_max: the best `‖Av‖` over random unit vectors.
pub fn sampled_sigma_max(a: &Matrix, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.cols();
    let mut v = vec![0.0; n];
    let mut best = 0.0_f64;
    for _ in 0..samples {
        for x in v.iter_mut() {
            *x = standard_normal(&mut rng);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut av2 = 0.0;
        for i in 0..a.rows() {
            let dot: f64 = a.row(i).iter().zip(&v).map(|(p, q)| p * q).sum();
            av2 += dot * dot;
        }
        best = best.max(av2.sqrt() / norm);
    }
    best
}

/// Ridge solution by Householder QR of the augmented system `[H; √δ I] β = [t; 0]`.
pub fn ridge_qr(h: &Matrix, t: &Matrix, delta: f64) -> Matrix {
    let (k, nt) = h.shape();
    let m = t.cols();
    let extra = if delta > 0.0 { nt } else { 0 };
    let rows = k + extra;
    let mut a = Matrix::zeros(rows, nt);
    let mut b = Matrix::zeros(rows, m);
    for i in 0..k {
        for j in 0..nt {
            a[(i, j)] = h[(i, j)];
        }
        for j in 0..m {
            b[(i, j)] = t[(i, j)];
        }
    }
    for j in 0..extra {
        a[(k + j, j)] = delta.sqrt();
    }
    assert!(rows >= nt, "underdetermined system needs delta > 0");

    for col in 0..nt {
        let norm = (col..rows).map(|i| a[(i, col)] * a[(i, col)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[(col, col)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (col..rows).map(|i| a[(i, col)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in col..nt {
            let dot: f64 = (col..rows).map(|i| v[i - col] * a[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in col..rows {
                a[(i, j)] -= f * v[i - col];
            }
        }
        for j in 0..m {
            let dot: f64 = (col..rows).map(|i| v[i - col] * b[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in col..rows {
                b[(i, j)] -= f * v[i - col];
            }
        }
    }
    let mut beta = Matrix::zeros(nt, m);
    for j in 0..m {
        for i in (0..nt).rev() {
            let mut acc = b[(i, j)];
            for c in (i + 1)..nt {
                acc -= a[(i, c)] * beta[(c, j)];
            }
            beta[(i, j)] = acc / a[(i, i)];
        }
    }
    beta
}

/// One explicit-Euler cart-pole step written out term by term.
pub fn cartpole_euler(s: CartPoleState, push_right: bool) -> CartPoleState {
    let (g, mc, mp, half_len, f_mag, tau) = (9.8_f64, 1.0_f64, 0.1_f64, 0.5_f64, 10.0_f64, 0.02_f64);
    let f = if push_right { f_mag } else { -f_mag };
    let total = mc + mp;
    let (sin, cos) = s.theta.sin_cos();
    let tmp = (f + mp * half_len * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (g * sin - cos * tmp) / (half_len * (4.0 / 3.0 - mp * cos * cos / total));
    let x_acc = tmp - mp * half_len * theta_acc * cos / total;
    CartPoleState {
        x: s.x + tau * s.x_dot,
        x_dot: s.x_dot + tau * x_acc,
        theta: s.theta + tau * s.theta_dot,
        theta_dot: s.theta_dot + tau * theta_acc,
    }
}

// Box-Muller
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck { name, passed, detail }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs every derived-value check and reports one line each.
pub fn run_suite() -> Vec<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let a = rand_matrix(&mut rng, 4, 3);
    let b = rand_matrix(&mut rng, 3, 5);
    let err = a
        .matmul(&b)
        .map(|p| p.sub(&naive_matmul(&a, &b)).unwrap().frobenius_norm())
        .unwrap_or(f64::INFINITY);
    out.push(check("matmul vs triple loop", err <= 1e-12, format!("max err {err:e}")));

    let g = rand_matrix(&mut rng, 8, 8);
    let mut spd = naive_matmul(&g.transpose(), &g);
    spd.add_diagonal(1.0);
    let resid = spd
        .inverse()
        .map(|inv| {
            let mut r = inv.matmul(&spd).unwrap();
            r.add_diagonal(-1.0);
            r.frobenius_norm()
        })
        .unwrap_or(f64::INFINITY);
    out.push(check("inverse residual (SPD 8x8)", resid <= 1e-8, format!("{resid:e}")));

    let m = rand_matrix(&mut rng, 6, 4);
    let (pi, jac) = (m.sigma_max(), jacobi_sigma_max(&m));
    out.push(check(
        "sigma_max vs Jacobi",
        (pi - jac).abs() <= 1e-8 * jac,
        format!("{pi} vs {jac}"),
    ));
    let sampled = sampled_sigma_max(&m, 200_000, 1);
    out.push(check(
        "sigma_max vs sampled unit vectors",
        sampled <= pi + 1e-12 && (pi - sampled) <= 1e-3 * pi,
        format!("{pi} vs {sampled}"),
    ));

    let shape = NetworkShape { n: 5, n_tilde: 16, m: 1 };
    let mut state = OselmState::new(ElmParams::init(shape, &mut rng, true));
    let x0 = rand_matrix(&mut rng, 16, 5);
    let t0 = rand_matrix(&mut rng, 16, 1);
    let mut xs = x0.clone();
    let mut ts = t0.clone();
    let mut ok = state.init_train(&x0, &t0, 0.5).is_ok();
    for _ in 0..200 {
        let x = rand_matrix(&mut rng, 1, 5);
        let t = rand_matrix(&mut rng, 1, 1);
        ok &= state.seq_train(&x, &t).is_ok();
        xs = xs.vstack(&x).unwrap();
        ts = ts.vstack(&t).unwrap();
    }
    let want = ridge_qr(&state.params.hidden(&xs).unwrap(), &ts, 0.5);
    let rel = state.params.beta.sub(&want).unwrap().frobenius_norm() / want.frobenius_norm();
    out.push(check("OS-ELM stream vs ridge QR", ok && rel <= 1e-5, format!("rel err {rel:e}")));

    let mut env = CartPole::new(0);
    env.set_state(CartPoleState::default());
    let got = env.step(1).map(|o| o.state);
    let want = cartpole_euler(CartPoleState::default(), true);
    let ok = got.map(|s| s == want).unwrap_or(false);
    out.push(check(
        "cartpole step vs scalar Euler",
        ok && (want.x_dot - 0.19512).abs() < 1e-5 && (want.theta_dot + 0.29268).abs() < 1e-5,
        format!("{want:?}"),
    ));

    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let (x, y) = (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
        let (fx, fy) = (FixedQ20::from_f64(x).0, FixedQ20::from_f64(y).0);
        let prod = fx.saturating_mul(fy).0.to_f64();
        worst = worst.max((prod - fx.to_f64() * fy.to_f64()).abs());
    }
    let bound = 2f64.powi(-19);
    out.push(check("Q20 multiply vs float", worst <= bound, format!("worst {worst:e}")));

    let mut st = OselmState::new(ElmParams::init(NetworkShape { n: 5, n_tilde: 64, m: 1 }, &mut rng, true));
    st.params.beta = Matrix::from_fn(64, 1, |_, _| rng.gen_range(-1.0..1.0));
    let fixed = FixedOselmState::from_float(&st, &st.params.beta);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let x = rand_matrix(&mut rng, 1, 5);
        let f = st.predict(&x).unwrap()[(0, 0)];
        let mut fx = fixed.clone();
        let q = fx.predict(x.as_slice(), crate::fixedq20::Bank::Online).to_f64();
        worst = worst.max((f - q).abs());
    }
    out.push(check("Q20 predict vs float", worst <= 1e-3, format!("worst {worst:e}")));

    out
}
