//! Concrete transport fields V(φ, x) and order-(1-𝔢) perturbations W(φ).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{japanese_bracket, FourierCoeffs, LatticeSpec, ModeSet, C64};
use crate::operator::QPOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Cos,
    Sin,
}

/// amplitude · cos(l·φ + k·x) or amplitude · sin(l·φ + k·x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub l: Vec<i64>,
    pub k: Vec<i64>,
    pub amplitude: f64,
    #[serde(default = "default_parity")]
    pub parity: Parity,
    /// Vector component for fields; ignored for scalar functions.
    #[serde(default)]
    pub component: usize,
}

fn default_parity() -> Parity {
    Parity::Cos
}

impl TrigTerm {
    pub fn value(&self, phi: &[f64], x: &[f64]) -> f64 {
        let theta = crate::lattice::dot(phi, &self.l) + crate::lattice::dot(x, &self.k);
        match self.parity {
            Parity::Cos => self.amplitude * theta.cos(),
            Parity::Sin => self.amplitude * theta.sin(),
        }
    }

    /// Coefficients of e^{±i(l·φ + k·x)}.
    fn exponentials(&self) -> [(i64, C64); 2] {
        let a = self.amplitude;
        match self.parity {
            Parity::Cos => [(1, C64::new(a / 2.0, 0.0)), (-1, C64::new(a / 2.0, 0.0))],
            Parity::Sin => [(1, C64::new(0.0, -a / 2.0)), (-1, C64::new(0.0, a / 2.0))],
        }
    }
}

/// A sum of trigonometric terms on T^n × T^d, scalar or vector valued.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrigSeries {
    pub terms: Vec<TrigTerm>,
}

impl TrigSeries {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        Self { terms }
    }

    pub fn validate(&self, n: usize, d: usize, components: usize) -> Result<()> {
        for t in &self.terms {
            if t.l.len() != n || t.k.len() != d {
                return Err(Error::Config(format!(
                    "term with l={:?}, k={:?} does not match n={n}, d={d}",
                    t.l, t.k
                )));
            }
            if t.component >= components {
                return Err(Error::Config(format!("component {} out of range", t.component)));
            }
            if !t.amplitude.is_finite() {
                return Err(Error::Config("non-finite amplitude".into()));
            }
        }
        Ok(())
    }

    /// Even in (φ, x) jointly: only cosines.
    pub fn is_even(&self) -> bool {
        self.terms.iter().all(|t| t.parity == Parity::Cos || t.amplitude == 0.0)
    }

    pub fn value(&self, component: usize, phi: &[f64], x: &[f64]) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.component == component)
            .map(|t| t.value(phi, x))
            .sum()
    }

    /// Smallest box (angle radii then spatial radii) holding every term.
    pub fn radii(&self, n: usize, d: usize) -> Vec<i64> {
        let mut r = vec![0i64; n + d];
        for t in &self.terms {
            for (a, c) in t.l.iter().chain(&t.k).enumerate() {
                r[a] = r[a].max(c.abs());
            }
        }
        r
    }

    /// Fourier coefficients of one component on the box `radii` (angle axes first).
    pub fn coefficients(&self, component: usize, radii: &[i64]) -> FourierCoeffs {
        let mut out = FourierCoeffs::zeros(radii.to_vec());
        for t in self.terms.iter().filter(|t| t.component == component) {
            for (sign, c) in t.exponentials() {
                let m: Vec<i64> = t.l.iter().chain(&t.k).map(|v| sign * v).collect();
                if let Some(i) = out.index_of(&m) {
                    out.data[i] += c;
                }
            }
        }
        out
    }
}

fn operator_radii(spec: &LatticeSpec) -> Vec<i64> {
    std::iter::repeat_n(spec.l_max, spec.n)
        .chain(std::iter::repeat_n(2 * spec.j_max, spec.d))
        .collect()
}

fn shift(l: &[i64], j: &[i64], jp: &[i64]) -> Vec<i64> {
    l.iter().copied().chain(j.iter().zip(jp).map(|(x, y)| x - y)).collect()
}

/// Operator of multiplication by a(φ, x): entries â(l, j - j').
pub fn multiplication_operator(spec: LatticeSpec, a: &TrigSeries, component: usize) -> QPOperator {
    let co = a.coefficients(component, &operator_radii(&spec));
    QPOperator::from_fn(spec, |l, j, jp| co.get(&shift(l, j, jp)))
}

/// The first-order operator V·∇ with entries Σ_a V̂_a(l, j - j') i j'_a.
pub fn transport_operator(spec: LatticeSpec, v: &TrigSeries) -> QPOperator {
    let radii = operator_radii(&spec);
    let co: Vec<FourierCoeffs> = (0..spec.d).map(|a| v.coefficients(a, &radii)).collect();
    QPOperator::from_fn(spec, |l, j, jp| {
        let m = shift(l, j, jp);
        co.iter()
            .zip(jp)
            .map(|(c, &ja)| c.get(&m) * C64::new(0.0, ja as f64))
            .sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureTarget {
    Reversible,
    SymmetricHyperbolicOnly,
    PlantedGrowth,
}

/// W = M_b ∘ Q with Q the Fourier multiplier i(c·j)⟨j⟩^{-𝔢}, plus an optional
/// real order-0 multiplier μ⟨j⟩^{-2} that breaks reversibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierPotential {
    pub b: TrigSeries,
    pub c: Vec<f64>,
    #[serde(default)]
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitEntry {
    pub l: Vec<i64>,
    pub j: Vec<i64>,
    pub jp: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WModel {
    MultiplierTimesPotential(MultiplierPotential),
    ExplicitBlocks { entries: Vec<ExplicitEntry> },
}

impl WModel {
    /// Diagonal of the l = 0 block of W on an arbitrary spatial mode set, without
    /// building the operator.
    pub fn mean_diagonal(&self, modes: &ModeSet, gain: f64) -> Vec<C64> {
        match self {
            WModel::MultiplierTimesPotential(mp) => {
                let n = mp.b.terms.first().map_or(0, |t| t.l.len());
                let zero = vec![0i64; n + modes.dim()];
                let b0 = mp.b.coefficients(0, &vec![0; zero.len()]).get(&zero);
                modes
                    .iter()
                    .map(|j| {
                        let bracket = japanese_bracket(j);
                        let cj: f64 = mp.c.iter().zip(j).map(|(c, &x)| c * x as f64).sum();
                        b0 * C64::new(0.0, cj * bracket.powf(-gain)) + C64::new(mp.growth * bracket.powi(-2), 0.0)
                    })
                    .collect()
            }
            WModel::ExplicitBlocks { entries } => {
                let mut out = vec![C64::new(0.0, 0.0); modes.len()];
                for e in entries.iter().filter(|e| e.l.iter().all(|&x| x == 0) && e.j == e.jp) {
                    if let Some(i) = modes.index_of(&e.j) {
                        out[i] += C64::new(e.re, e.im);
                    }
                }
                out
            }
        }
    }

    pub fn build(&self, spec: LatticeSpec, gain: f64) -> Result<QPOperator> {
        match self {
            WModel::MultiplierTimesPotential(mp) => {
                mp.b.validate(spec.n, spec.d, 1)?;
                if mp.c.len() != spec.d {
                    return Err(Error::Config(format!("W.c needs {} components", spec.d)));
                }
                let m = multiplication_operator(spec, &mp.b, 0);
                let q: Vec<C64> = spec
                    .spatial()
                    .iter()
                    .map(|j| {
                        let cj: f64 = mp.c.iter().zip(j).map(|(c, &x)| c * x as f64).sum();
                        C64::new(0.0, cj * japanese_bracket(j).powf(-gain))
                    })
                    .collect();
                let mut w = m.clone();
                for blk in w.blocks_mut() {
                    for col in 0..blk.ncols() {
                        let qc = q[col];
                        blk.column_mut(col).iter_mut().for_each(|v| *v *= qc);
                    }
                }
                if mp.growth != 0.0 {
                    let g: Vec<C64> = spec
                        .spatial()
                        .iter()
                        .map(|j| C64::new(mp.growth * japanese_bracket(j).powi(-2), 0.0))
                        .collect();
                    w.add_diagonal(&g);
                }
                Ok(w)
            }
            WModel::ExplicitBlocks { entries } => {
                let mut w = QPOperator::zeros(spec);
                for e in entries {
                    if e.l.len() != spec.n || e.j.len() != spec.d || e.jp.len() != spec.d {
                        return Err(Error::Config("explicit entry has wrong dimensions".into()));
                    }
                    w.set_entry(&e.l, &e.j, &e.jp, C64::new(e.re, e.im));
                }
                Ok(w)
            }
        }
    }
}
