use serde::{Deserialize, Serialize};

use super::{m_norm, NormProfile, QPOperator};
use crate::numeric::fit_line;

/// Relative tolerance of the coefficient identities.
pub const STRUCTURE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureFlags {
    pub real: bool,
    pub reversible: bool,
    pub reversibility_preserving: bool,
    /// m-norm (s = 0, σ = 0) of R + R*.
    pub symmetric_hyperbolic_defect: f64,
    /// Largest relative violation of each identity, for diagnostics.
    pub real_defect: f64,
    pub reversible_defect: f64,
    pub preserving_defect: f64,
    /// Largest entry modulus; the defects above are relative to it.
    pub max_abs: f64,
}

/// Coefficient tests against P̂(-l)_{-k}^{-k'}:
/// real iff P̂(l)_k^{k'} equals its conjugate, reversible iff it equals minus it,
/// reversibility preserving iff it equals it.
pub fn check_structure(r: &QPOperator) -> StructureFlags {
    let spec = r.spec();
    let ang = spec.angles();
    let sp = spec.spatial();
    let scale = r.max_abs();
    let (mut real, mut rev, mut pres) = (0.0f64, 0.0f64, 0.0f64);
    for (li, b) in r.blocks().iter().enumerate() {
        let mirror = &r.blocks()[ang.neg_index(li)];
        for c in 0..b.ncols() {
            let mc = sp.neg_index(c);
            for row in 0..b.nrows() {
                let v = b[(row, c)];
                let w = mirror[(sp.neg_index(row), mc)];
                real = real.max((v - w.conj()).norm());
                rev = rev.max((v + w).norm());
                pres = pres.max((v - w).norm());
            }
        }
    }
    let rel = |x: f64| if scale > 0.0 { x / scale } else { 0.0 };
    let (real, rev, pres) = (rel(real), rel(rev), rel(pres));
    let defect = m_norm(&(r + &r.adjoint()), &NormProfile::default());
    StructureFlags {
        real: real <= STRUCTURE_TOL,
        reversible: rev <= STRUCTURE_TOL,
        reversibility_preserving: pres <= STRUCTURE_TOL,
        symmetric_hyperbolic_defect: defect,
        real_defect: real,
        reversible_defect: rev,
        preserving_defect: pres,
        max_abs: scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    /// Fitted exponent; NaN when the fit is degenerate.
    pub order: f64,
    pub r2: f64,
    pub points: usize,
    pub degenerate: bool,
}

/// Log-log regression of column norms (summed over angles and rows) against ⟨j'⟩,
/// over columns with 2 ≤ |j'|_∞ ≤ ⌈3J/4⌉ to stay clear of the truncation edge.
pub fn estimate_order(r: &QPOperator) -> OrderFit {
    let spec = r.spec();
    let sp = spec.spatial();
    let hi = (3 * spec.j_max + 3) / 4;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in 0..sp.len() {
        let sup = sp.sup_norm(c);
        if sup < 2 || sup > hi {
            continue;
        }
        let col: f64 = r
            .blocks()
            .iter()
            .map(|b| b.column(c).iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if col > 1e-300 {
            xs.push(sp.bracket(c).ln());
            ys.push(col.ln());
        }
    }
    match fit_line(&xs, &ys) {
        Some(f) if xs.len() >= 3 => OrderFit {
            order: f.slope,
            r2: f.r2,
            points: f.points,
            degenerate: false,
        },
        _ => OrderFit {
            order: f64::NAN,
            r2: f64::NAN,
            points: xs.len(),
            degenerate: true,
        },
    }
}
