use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CMat, QPOperator};
use crate::lattice::ModeSet;
use crate::numeric::{compensated_sum, CompensatedSum};

/// Exponents of the weighted norms: angle regularity `s`, spatial weights `sigma1`
/// (input side) and `sigma2` (output side), and the extra decay `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormProfile {
    pub s: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub beta: f64,
}

impl NormProfile {
    pub fn new(s: f64, sigma1: f64, sigma2: f64, beta: f64) -> Self {
        assert!(s >= 0.0 && beta >= 0.0, "norm profile needs s, beta >= 0");
        Self {
            s,
            sigma1,
            sigma2,
            beta,
        }
    }

    pub fn with_s(self, s: f64) -> Self {
        Self { s, ..self }
    }
}

/// s0 = [n/2] + 1.
pub fn s0(n: usize) -> f64 {
    (n / 2 + 1) as f64
}

fn hs_sq(m: &CMat, out_w: &[f64], in_w: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let v = m[(r, c)].norm_sqr();
            if v != 0.0 {
                acc.add(out_w[r] * v * in_w[c]);
            }
        }
    }
    acc.value()
}

fn weights(modes: &ModeSet, exponent: f64) -> Vec<f64> {
    modes.brackets().iter().map(|b| b.powf(exponent)).collect()
}

/// (Σ ⟨k⟩^{2σ2} |R_k^{k'}|² ⟨k'⟩^{-2σ1})^{1/2} for one block.
pub fn hs_norm(m: &CMat, modes: &ModeSet, sigma1: f64, sigma2: f64) -> f64 {
    hs_sq(m, &weights(modes, 2.0 * sigma2), &weights(modes, -2.0 * sigma1)).sqrt()
}

/// (Σ_l ⟨l⟩^{2s} (‖R̂(l)‖^{HS}_{σ1,σ2})²)^{1/2}.
pub fn m_norm(r: &QPOperator, p: &NormProfile) -> f64 {
    let spec = r.spec();
    let sp = spec.spatial();
    let ang = spec.angles();
    let out_w = weights(&sp, 2.0 * p.sigma2);
    let in_w = weights(&sp, -2.0 * p.sigma1);
    let terms: Vec<f64> = r
        .blocks()
        .par_iter()
        .enumerate()
        .map(|(li, b)| ang.bracket(li).powf(2.0 * p.s) * hs_sq(b, &out_w, &in_w))
        .collect();
    compensated_sum(terms).sqrt()
}

/// Entrywise multiplication by ⟨j - j'⟩^β.
pub fn grad_weight(r: &QPOperator, beta: f64) -> QPOperator {
    let spec = *r.spec();
    let sp = spec.spatial();
    let dim = sp.len();
    let mut diff = vec![0i64; spec.d];
    let w = CMat::from_fn(dim, dim, |a, b| {
        for k in 0..spec.d {
            diff[k] = sp.mode(a)[k] - sp.mode(b)[k];
        }
        crate::lattice::japanese_bracket(&diff).powf(beta).into()
    });
    let blocks = r.blocks().iter().map(|b| b.component_mul(&w)).collect();
    QPOperator::from_blocks(spec, blocks).expect("same shape")
}

/// ‖R‖_{s+β} + ‖⟨∇⟩^β R‖_s.
pub fn beta_norm(r: &QPOperator, p: &NormProfile) -> f64 {
    m_norm(r, &p.with_s(p.s + p.beta)) + m_norm(&grad_weight(r, p.beta), p)
}
