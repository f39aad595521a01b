use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-agent, per-future-step Gaussian mixture with shared mode weights.
///
/// `mu` and `sigma` are laid out `[N, F, M, 2]` row-major; `logits` is
/// `[M]`. Positions are in the scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrediction {
    pub agents: usize,
    pub steps: usize,
    pub modes: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GmmPrediction {
    pub fn new(agents: usize, steps: usize, modes: usize, mu: Vec<f64>, sigma: Vec<f64>, logits: Vec<f64>) -> Result<Self> {
        let n = agents * steps * modes * 2;
        if mu.len() != n || sigma.len() != n || logits.len() != modes || modes == 0 {
            return Err(Error::shape("GmmPrediction::new", &[agents, steps, modes, 2], &[mu.len(), sigma.len(), logits.len()]));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("mixture scales must be positive".into()));
        }
        if mu.iter().chain(&sigma).chain(&logits).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GmmPrediction::new"));
        }
        Ok(GmmPrediction {
            agents,
            steps,
            modes,
            mu,
            sigma,
            logits,
        })
    }

    /// Builds from mode-major `[M, N, F, 2]` buffers.
    pub fn from_mode_major(agents: usize, steps: usize, modes: usize, mu: &[f64], sigma: &[f64], logits: Vec<f64>) -> Result<Self> {
        let n = agents * steps * modes * 2;
        if mu.len() != n || sigma.len() != n {
            return Err(Error::shape("GmmPrediction::from_mode_major", &[modes, agents, steps, 2], &[mu.len(), sigma.len()]));
        }
        let mut m2 = Vec::with_capacity(n);
        let mut s2 = Vec::with_capacity(n);
        for i in 0..agents {
            for t in 0..steps {
                for m in 0..modes {
                    let o = ((m * agents + i) * steps + t) * 2;
                    m2.extend_from_slice(&mu[o..o + 2]);
                    s2.extend_from_slice(&sigma[o..o + 2]);
                }
            }
        }
        Self::new(agents, steps, modes, m2, s2, logits)
    }

    fn offset(&self, i: usize, t: usize, m: usize) -> usize {
        debug_assert!(i < self.agents && t < self.steps && m < self.modes);
        ((i * self.steps + t) * self.modes + m) * 2
    }

    pub fn mean(&self, i: usize, t: usize, m: usize) -> [f64; 2] {
        let o = self.offset(i, t, m);
        [self.mu[o], self.mu[o + 1]]
    }

    pub fn scale(&self, i: usize, t: usize, m: usize) -> [f64; 2] {
        let o = self.offset(i, t, m);
        [self.sigma[o], self.sigma[o + 1]]
    }

    pub fn set(&mut self, i: usize, t: usize, m: usize, mean: [f64; 2], scale: [f64; 2]) {
        let o = self.offset(i, t, m);
        self.mu[o..o + 2].copy_from_slice(&mean);
        self.sigma[o..o + 2].copy_from_slice(&scale);
    }

    /// Softmax of the mode logits.
    pub fn weights(&self) -> Vec<f64> {
        let lse = crate::math::log_sum_exp(&self.logits);
        self.logits.iter().map(|l| crate::math::exp(l - lse)).collect()
    }

    /// Keeps the agents at `indices`, in order.
    pub fn select_agents(&self, indices: &[usize]) -> GmmPrediction {
        let block = self.steps * self.modes * 2;
        let mut mu = Vec::with_capacity(indices.len() * block);
        let mut sigma = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            mu.extend_from_slice(&self.mu[i * block..(i + 1) * block]);
            sigma.extend_from_slice(&self.sigma[i * block..(i + 1) * block]);
        }
        GmmPrediction {
            agents: indices.len(),
            mu,
            sigma,
            ..self.clone()
        }
    }
}
