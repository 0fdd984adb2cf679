//! Order-lowering conjugations H ↦ e^{-G}(H e^{G} − ω·∂_φ e^{G}).
//!
//! H = iν0·∇ + Z + R with Z an angle-independent diagonal. Each step removes
//! R − ⟨R⟩ at first order, moves ⟨R⟩ into Z and leaves commutators of lower order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dot, japanese_bracket, C64};
use crate::operator::{check_structure, estimate_order, m_norm, NormProfile, OrderFit, QPOperator, StructureFlags};

/// Generic norm for series control and guards: s = s0, no spatial weights.
fn control_norm(r: &QPOperator) -> f64 {
    m_norm(r, &NormProfile::new(crate::operator::s0(r.spec().n), 0.0, 0.0, 0.0))
}

const MAX_SERIES_TERMS: usize = 80;

/// Double average ⟨W⟩: the diagonal of the l = 0 block.
pub fn double_average(w: &QPOperator) -> Vec<C64> {
    w.zero_block_diagonal()
}

fn remove_average(w: &QPOperator) -> QPOperator {
    let mut out = w.clone();
    let avg: Vec<C64> = double_average(w).into_iter().map(|v| -v).collect();
    out.add_diagonal(&avg);
    out
}

fn transport_diagonal(w: &QPOperator, nu0: &[f64]) -> Vec<C64> {
    w.spec()
        .spatial()
        .iter()
        .map(|j| C64::new(0.0, dot(nu0, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingGenerator {
    pub g: QPOperator,
    /// min over solved entries of |ω·l + ν0·(j' − j)| − γ/⟨(l, j' − j)⟩^τ.
    pub min_margin: f64,
}

/// Solve ω·∂_φG − [iν0·∇, G] = W − ⟨W⟩ entrywise:
/// Ĝ(l)_j^{j'} = Ŵ(l)_j^{j'} / (i(ω·l + ν0·(j' − j))).
pub fn solve_homological_smoothing(
    w: &QPOperator,
    omega: &[f64],
    nu0: &[f64],
    gamma: f64,
    tau: f64,
) -> Result<SmoothingGenerator> {
    let spec = *w.spec();
    let ang = spec.angles();
    let sp = spec.spatial();
    let mut g = QPOperator::zeros(spec);
    let mut min_margin = f64::INFINITY;
    let mut k = vec![0i64; spec.d];
    let mut lk = vec![0i64; spec.n + spec.d];
    for (li, blk) in w.blocks().iter().enumerate() {
        let l = ang.mode(li);
        let wl = dot(omega, l);
        for c in 0..blk.ncols() {
            for r in 0..blk.nrows() {
                let v = blk[(r, c)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                for a in 0..spec.d {
                    k[a] = sp.mode(c)[a] - sp.mode(r)[a];
                }
                if li == ang.zero_index() && k.iter().all(|&x| x == 0) {
                    continue;
                }
                let div = wl + dot(nu0, &k);
                lk[..spec.n].copy_from_slice(l);
                lk[spec.n..].copy_from_slice(&k);
                let bound = gamma / japanese_bracket(&lk).powf(tau);
                let margin = div.abs() - bound;
                if margin <= 0.0 {
                    return Err(Error::Diophantine {
                        l: l.to_vec(),
                        j: k.clone(),
                        divisor: div.abs(),
                        bound,
                    });
                }
                min_margin = min_margin.min(margin);
                g.blocks_mut()[li][(r, c)] = v / C64::new(0.0, div);
            }
        }
    }
    Ok(SmoothingGenerator { g, min_margin })
}

/// E = ω·∂_φG − [iν0·∇, G] − (W − ⟨W⟩).
pub fn homological_defect(g: &QPOperator, w: &QPOperator, omega: &[f64], nu0: &[f64]) -> QPOperator {
    let d0 = transport_diagonal(w, nu0);
    let lhs = &g.omega_derivative(omega) - &g.diag_commutator(&d0);
    &lhs - &remove_average(w)
}

/// m_norm of the defect relative to m_norm(W − ⟨W⟩) (absolute when that vanishes).
pub fn homological_residual(g: &QPOperator, w: &QPOperator, omega: &[f64], nu0: &[f64]) -> f64 {
    let p = NormProfile::default();
    let rhs = m_norm(&remove_average(w), &p);
    let e = m_norm(&homological_defect(g, w, omega, nu0), &p);
    if rhs > 0.0 {
        e / rhs
    } else {
        e
    }
}

/// Σ_{k ≥ k0} c_k ad^k(Y) with ad(Y) = [Y, G], c_k = 1/(k + shift)!.
fn ad_series(y: &QPOperator, g: &QPOperator, k0: usize, shift: usize, tol: f64) -> Result<(QPOperator, usize)> {
    let mut term = y.clone();
    // term_k = ad^k(Y)/(k+shift)!
    for k in 1..=shift {
        term = term.scale(C64::new(1.0 / k as f64, 0.0));
    }
    let mut sum = QPOperator::zeros(*y.spec());
    for k in 0..MAX_SERIES_TERMS {
        if k >= k0 {
            sum += &term;
        }
        let size = control_norm(&term);
        if k >= k0 && size <= tol {
            return Ok((sum, k + 1));
        }
        if !size.is_finite() {
            return Err(Error::Divergence("commutator series overflow".into()));
        }
        term = term.commutator(g)?.scale(C64::new(1.0 / (k + shift + 1) as f64, 0.0));
    }
    Err(Error::NoConvergence {
        what: "commutator series",
        iterations: MAX_SERIES_TERMS,
        residual: control_norm(&term),
    })
}

fn check_generator(g: &QPOperator) -> Result<()> {
    let n = control_norm(g);
    if !(n < 0.5) {
        return Err(Error::Divergence(format!("generator norm {n:.3e} too large for the exponential series")));
    }
    Ok(())
}

/// Remainder of e^{-G}(H e^{G} − ω·∂_φe^{G}) for H = diag(d) + R, with no
/// cancellation assumed. The diagonal d is carried over unchanged; the returned
/// operator is everything else.
pub fn conjugate_by_exp(d: &[C64], r: &QPOperator, g: &QPOperator, omega: &[f64], series_tol: f64) -> Result<QPOperator> {
    check_generator(g)?;
    let scale = (control_norm(r) + control_norm(g)).max(f64::MIN_POSITIVE);
    let tol = series_tol * scale;
    let (sr, _) = ad_series(r, g, 0, 0, tol)?;
    // Σ_{k≥1} ad^k(D)/k! = Σ_{k≥0} ad^k([D, G])/(k+1)!
    let (sd, _) = ad_series(&g.diag_commutator(d), g, 0, 1, tol)?;
    let (sq, _) = ad_series(&g.omega_derivative(omega), g, 0, 1, tol)?;
    Ok(&(&sr + &sd) - &sq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conjugated {
    /// New diagonal Z + ⟨R⟩.
    pub z: Vec<C64>,
    pub r: QPOperator,
    pub series_terms: usize,
}

/// One smoothing conjugation with the homological cancellation applied:
/// R' = Σ_{k≥1} ad^k(Z)/k! + Σ_{k≥1} [ad^k(R)/k! − ad^k(R − ⟨R⟩)/(k+1)!] − Σ_{k≥0} ad^k(E)/(k+1)!,
/// where E is the homological defect of G.
pub fn exp_conjugate(
    nu0: &[f64],
    z: &[C64],
    r: &QPOperator,
    g: &QPOperator,
    omega: &[f64],
    series_tol: f64,
) -> Result<Conjugated> {
    check_generator(g)?;
    let scale = control_norm(r).max(f64::MIN_POSITIVE);
    let tol = series_tol * scale;
    let mut terms = 0;
    // Σ_{k≥1} ad^k(Z)/k! = Σ_{k≥0} ad^k([Z, G])/(k+1)!
    let (s_z, t) = ad_series(&g.diag_commutator(z), g, 0, 1, tol)?;
    terms = terms.max(t);
    let (s_r, t) = ad_series(r, g, 1, 0, tol)?;
    terms = terms.max(t);
    let (s_rm, t) = ad_series(&remove_average(r), g, 1, 1, tol)?;
    terms = terms.max(t);
    let e = homological_defect(g, r, omega, nu0);
    let (s_e, t) = ad_series(&e, g, 0, 1, tol)?;
    terms = terms.max(t);
    let r_new = &(&(&s_z + &s_r) - &s_rm) - &s_e;
    let z_new = z.iter().zip(double_average(r)).map(|(a, b)| a + b).collect();
    Ok(Conjugated {
        z: z_new,
        r: r_new,
        series_terms: terms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingOptions {
    pub steps: usize,
    pub series_tol: f64,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingStepReport {
    pub step: usize,
    pub remainder_norm: f64,
    pub generator_norm: f64,
    pub order: OrderFit,
    pub homological_residual: f64,
    pub min_divisor_margin: f64,
    pub series_terms: usize,
    pub remainder_structure: StructureFlags,
    pub generator_structure: StructureFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingState {
    pub step: usize,
    pub nu0: Vec<f64>,
    pub z: Vec<C64>,
    /// Current remainder, ε included.
    pub w: QPOperator,
    pub generators: Vec<QPOperator>,
    pub reports: Vec<SmoothingStepReport>,
    /// Order and structure of the input remainder.
    pub initial_order: OrderFit,
    pub initial_structure: StructureFlags,
}

pub fn run_smoothing(nu0: &[f64], w0: QPOperator, omega: &[f64], opts: &SmoothingOptions) -> Result<SmoothingState> {
    let k = w0.spec().spatial_count();
    let mut state = SmoothingState {
        step: 0,
        nu0: nu0.to_vec(),
        z: vec![C64::new(0.0, 0.0); k],
        initial_order: estimate_order(&w0),
        initial_structure: check_structure(&w0),
        w: w0,
        generators: Vec::new(),
        reports: Vec::new(),
    };
    for step in 1..=opts.steps {
        let sol = solve_homological_smoothing(&state.w, omega, nu0, opts.gamma, opts.tau)?;
        let residual = homological_residual(&sol.g, &state.w, omega, nu0);
        let next = exp_conjugate(nu0, &state.z, &state.w, &sol.g, omega, opts.series_tol)?;
        if !next.r.is_finite() {
            return Err(Error::Numerical(format!("non-finite remainder at smoothing step {step}")));
        }
        state.reports.push(SmoothingStepReport {
            step,
            remainder_norm: m_norm(&next.r, &NormProfile::default()),
            generator_norm: control_norm(&sol.g),
            order: estimate_order(&next.r),
            homological_residual: residual,
            min_divisor_margin: sol.min_margin,
            series_terms: next.series_terms,
            remainder_structure: check_structure(&next.r),
            generator_structure: check_structure(&sol.g),
        });
        state.z = next.z;
        state.w = next.r;
        state.generators.push(sol.g);
        state.step = step;
    }
    Ok(state)
}
