use crate::error::Result;
use crate::matrix::Matrix;

use super::{q_values, AgentConfig, QNetPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    /// θ₁, the network being trained.
    Online,
    /// θ₂, the fixed target network.
    Target,
}

/// Where predictions and updates are computed.
pub trait QBackend {
    fn is_trained(&self) -> bool;
    fn q_values(&mut self, net: Net, s: &[f64], cfg: &AgentConfig) -> Result<Vec<f64>>;
    fn init_train(&mut self, x: &Matrix, t: &Matrix, delta: f64) -> Result<()>;
    fn seq_train(&mut self, x: &[f64], t: f64) -> Result<()>;
    fn sync_target(&mut self);
    /// Saturation events, for fixed-point backends.
    fn overflows(&self) -> Option<u64> {
        None
    }
}

/// Everything in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatBackend {
    pub pair: QNetPair,
}

impl FloatBackend {
    pub fn new(pair: QNetPair) -> Self {
        FloatBackend { pair }
    }
}

impl QBackend for FloatBackend {
    fn is_trained(&self) -> bool {
        self.pair.theta1.is_trained()
    }

    fn q_values(&mut self, net: Net, s: &[f64], cfg: &AgentConfig) -> Result<Vec<f64>> {
        let net = match net {
            Net::Online => &self.pair.theta1,
            Net::Target => &self.pair.theta2,
        };
        q_values(net, s, cfg)
    }

    fn init_train(&mut self, x: &Matrix, t: &Matrix, delta: f64) -> Result<()> {
        self.pair.theta1.init_train(x, t, delta)
    }

    fn seq_train(&mut self, x: &[f64], t: f64) -> Result<()> {
        self.pair
            .theta1
            .seq_train(&Matrix::row_vector(x), &Matrix::row_vector(&[t]))
    }

    fn sync_target(&mut self) {
        self.pair.sync_target();
    }
}
