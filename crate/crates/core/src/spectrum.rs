//! Diagonal parts λ_j = iν0·j + z(j) + ρ_j.

use serde::{Deserialize, Serialize};

use crate::lattice::{dot, LatticeSpec, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSpectrum {
    pub spec: LatticeSpec,
    pub nu0: Vec<f64>,
    /// Smoothing contribution, ε already included.
    pub z: Vec<C64>,
    /// Accumulated KAM corrections.
    pub rho: Vec<C64>,
}

impl DiagonalSpectrum {
    pub fn new(spec: LatticeSpec, nu0: Vec<f64>) -> Self {
        let k = spec.spatial_count();
        Self {
            spec,
            nu0,
            z: vec![C64::new(0.0, 0.0); k],
            rho: vec![C64::new(0.0, 0.0); k],
        }
    }

    pub fn with_z(mut self, z: Vec<C64>) -> Self {
        assert_eq!(z.len(), self.z.len());
        self.z = z;
        self
    }

    /// iν0·j for every mode.
    pub fn transport(&self) -> Vec<C64> {
        self.spec
            .spatial()
            .iter()
            .map(|j| C64::new(0.0, dot(&self.nu0, j)))
            .collect()
    }

    pub fn lambdas(&self) -> Vec<C64> {
        self.transport()
            .into_iter()
            .zip(&self.z)
            .zip(&self.rho)
            .map(|((t, z), r)| t + z + r)
            .collect()
    }

    pub fn max_real_part(&self) -> f64 {
        self.lambdas().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_real_part(&self) -> f64 {
        self.lambdas().iter().map(|l| l.re.abs()).fold(0.0, f64::max)
    }
}
