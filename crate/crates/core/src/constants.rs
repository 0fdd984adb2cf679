//! Parameter points and the constants derived from (τ, γ, d, n).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// (ω, ν, ε, γ, τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub omega: Vec<f64>,
    pub nu: Vec<f64>,
    pub eps: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl ParameterPoint {
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.omega.len() != n || self.nu.len() != d {
            return Err(Error::Config(format!(
                "omega needs {n} and nu needs {d} components"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if !(self.tau > 0.0) || !(self.eps >= 0.0) {
            return Err(Error::Config("tau must be positive and eps non-negative".into()));
        }
        Ok(())
    }
}

/// α = 12τ+7, β = α+1, m = 2τ+2, N0 = 1/γ, M = 2m + 2β + [d/2] + 1, s0 = [n/2] + 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamConstants {
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
    pub n0: f64,
    pub big_m: usize,
    pub s0: f64,
}

impl KamConstants {
    pub fn derive(tau: f64, gamma: f64, d: usize, n: usize) -> Self {
        let alpha = 12.0 * tau + 7.0;
        let beta = alpha + 1.0;
        let m = 2.0 * tau + 2.0;
        let big_m = (2.0 * m + 2.0 * beta + (d / 2) as f64 + 1.0).ceil() as usize;
        Self {
            tau,
            gamma,
            alpha,
            beta,
            m,
            n0: 1.0 / gamma,
            big_m,
            s0: crate::operator::s0(n),
        }
    }

    /// N_k = N0^{(3/2)^k} for k ≥ 0 and N_{-1} = 1.
    pub fn scale(&self, k: i64) -> f64 {
        if k < 0 {
            1.0
        } else {
            self.n0.powf(1.5f64.powi(k as i32))
        }
    }
}
