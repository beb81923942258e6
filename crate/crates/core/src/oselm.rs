//! Online sequential ELM: a ridge-regularized initial solve followed by
//! recursive least-squares updates with one sample at a time.
//!
//! With a single sample the `k × k` inverse in the RLS gain collapses to the
//! scalar `1 / (1 + h P hᵀ)`, so no decomposition is needed after the initial
//! training.

use std::io::Read;

use crate::elm::{ridge_normal_equations, ElmParams, NetworkShape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const DEGENERATE_DENOMINATOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"OSLM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OselmState {
    pub params: ElmParams,
    /// `P = (HᵀH + δI)⁻¹` over every sample seen so far. Zero until trained.
    pub p: Matrix,
    trained: bool,
}

impl OselmState {
    pub fn new(params: ElmParams) -> Self {
        let n_tilde = params.shape.n_tilde;
        OselmState {
            params,
            p: Matrix::zeros(n_tilde, n_tilde),
            trained: false,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        self.params.shape
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// `P₀ = (H₀ᵀH₀ + δI)⁻¹`, `β₀ = P₀H₀ᵀt₀`.
    pub fn init_train(&mut self, x0: &Matrix, t0: &Matrix, delta: f64) -> Result<()> {
        if self.trained {
            return Err(Error::State("initial training already done".into()));
        }
        if x0.rows() == 0 {
            return Err(Error::InvalidArgument("initial training needs at least one sample".into()));
        }
        if t0.rows() != x0.rows() || t0.cols() != self.params.shape.m {
            return Err(Error::Shape {
                op: "init_train",
                left: x0.shape(),
                right: t0.shape(),
            });
        }
        if delta < 0.0 {
            return Err(Error::InvalidArgument(format!("negative ridge parameter {delta}")));
        }
        let h0 = self.params.hidden(x0)?;
        let (p, beta) = ridge_normal_equations(&h0, t0, delta)?;
        self.p = p;
        self.params.beta = beta;
        self.trained = true;
        Ok(())
    }

    /// One recursive least-squares step with a single sample.
    pub fn seq_train(&mut self, x: &Matrix, t: &Matrix) -> Result<()> {
        if !self.trained {
            return Err(Error::State("sequential training before initial training".into()));
        }
        let shape = self.params.shape;
        if x.rows() != 1 || t.shape() != (1, shape.m) {
            return Err(Error::Shape {
                op: "seq_train",
                left: x.shape(),
                right: t.shape(),
            });
        }
        let h = self.params.hidden(x)?;
        let h = h.as_slice();
        let nt = shape.n_tilde;

        // ph = P hᵀ (P is symmetric, so h P = phᵀ)
        let mut ph = vec![0.0; nt];
        for (i, v) in ph.iter_mut().enumerate() {
            *v = self.p.row(i).iter().zip(h).map(|(a, b)| a * b).sum();
        }
        let s = 1.0 + h.iter().zip(&ph).map(|(a, b)| a * b).sum::<f64>();
        if !(s.abs() >= DEGENERATE_DENOMINATOR) {
            return Err(Error::Degenerate(s));
        }
        let inv_s = 1.0 / s;

        // P ← P − (P hᵀ)(h P) / s on the upper triangle, mirrored below so P
        // stays exactly symmetric.
        let p = self.p.as_mut_slice();
        for i in 0..nt {
            let scaled = ph[i] * inv_s;
            for j in i..nt {
                let v = p[i * nt + j] - scaled * ph[j];
                p[i * nt + j] = v;
                p[j * nt + i] = v;
            }
        }

        // β ← β + P hᵀ (t − h β), using the updated P: P hᵀ = ph / s.
        let beta = &mut self.params.beta;
        let m = shape.m;
        let mut residual = vec![0.0; m];
        for (j, r) in residual.iter_mut().enumerate() {
            let hb: f64 = (0..nt).map(|k| h[k] * beta[(k, j)]).sum();
            *r = t[(0, j)] - hb;
        }
        for i in 0..nt {
            let gain = ph[i] * inv_s;
            for (j, r) in residual.iter().enumerate() {
                beta[(i, j)] += gain * r;
            }
        }
        Ok(())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.params.predict(x)
    }

    /// Flat little-endian checkpoint: `"OSLM"`, version `u32`, `n`, `Ñ`, `m` as
    /// `u32`, then α, b, β and P as row-major `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.params.shape;
        let mut out = Vec::with_capacity(4 + 16 + 8 * (s.n * s.n_tilde + s.n_tilde * (1 + s.m + s.n_tilde)));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, s.n as u32, s.n_tilde as u32, s.m as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in [&self.params.alpha, &self.params.bias, &self.params.beta, &self.p] {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). The format carries no trained
    /// flag; a state whose P is not all zero is considered trained.
    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut bytes)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut bytes)? as usize;
        let n_tilde = read_u32(&mut bytes)? as usize;
        let m = read_u32(&mut bytes)? as usize;
        let shape = NetworkShape::new(n, n_tilde, m).map_err(|e| Error::Format(e.to_string()))?;
        let mut matrix = |r: usize, c: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                let mut buf = [0u8; 8];
                read_exact(&mut bytes, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            Matrix::from_vec(r, c, data)
        };
        let alpha = matrix(n, n_tilde)?;
        let bias = matrix(1, n_tilde)?;
        let beta = matrix(n_tilde, m)?;
        let p = matrix(n_tilde, n_tilde)?;
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        let trained = p.as_slice().iter().any(|&v| v != 0.0);
        Ok(OselmState {
            params: ElmParams {
                shape,
                alpha,
                bias,
                beta,
            },
            p,
            trained,
        })
    }
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(bytes, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
