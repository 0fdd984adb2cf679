//! KAM reducibility: H_k = A_k + P_k with A_k diagonal is pushed forward by
//! Φ_k = Id + X_k, where ω·∂_φX − [A, X] = Π_N P − P̄.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::KamConstants;
use crate::error::{Error, Result};
use crate::lattice::{dot, japanese_bracket, C64};
use crate::operator::{beta_norm, check_structure, hs_norm, m_norm, NormProfile, QPOperator, StructureFlags};
use crate::spectrum::DiagonalSpectrum;

/// |iω·l + λ_j − λ_{j'}| − γ/(⟨l⟩^τ⟨j⟩^τ⟨j'⟩^τ); +∞ on the excluded tuples (0, j, j).
#[allow(clippy::too_many_arguments)]
pub fn melnikov_margin(lambdas: &[C64], modes: &crate::lattice::ModeSet, omega: &[f64], l: &[i64], ji: usize, jpi: usize, gamma: f64, tau: f64) -> f64 {
    if ji == jpi && l.iter().all(|&x| x == 0) {
        return f64::INFINITY;
    }
    let div = C64::new(0.0, dot(omega, l)) + lambdas[ji] - lambdas[jpi];
    let w = (japanese_bracket(l) * modes.bracket(ji) * modes.bracket(jpi)).powf(tau);
    div.norm() - gamma / w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovReport {
    pub ok: bool,
    pub margin: f64,
    /// (l, j, j') of the smallest margin, when any tuple was scanned.
    pub worst: Option<(Vec<i64>, Vec<i64>, Vec<i64>)>,
    pub scanned: usize,
}

/// Scan every (l, j, j') ≠ (0, j, j) with |l| ≤ N and |j − j'| ≤ N (Euclidean)
/// inside the truncation; `gamma` is the constant in front of the bound.
pub fn check_melnikov_set(spectrum: &DiagonalSpectrum, omega: &[f64], gamma: f64, tau: f64, n_scale: f64) -> MelnikovReport {
    scan_lambdas(&spectrum.lambdas(), spectrum, omega, gamma, tau, n_scale)
}

fn scan_lambdas(lambdas: &[C64], spectrum: &DiagonalSpectrum, omega: &[f64], gamma: f64, tau: f64, n_scale: f64) -> MelnikovReport {
    let spec = spectrum.spec;
    let ang = spec.angles();
    let sp = spec.spatial();
    let best = (0..ang.len())
        .into_par_iter()
        .filter(|&li| ang.norm(li) <= n_scale)
        .map(|li| {
            let l = ang.mode(li);
            let mut best = (f64::INFINITY, usize::MAX, 0usize, 0usize, 0usize);
            let mut diff = vec![0i64; spec.d];
            for ji in 0..sp.len() {
                for jpi in 0..sp.len() {
                    for a in 0..spec.d {
                        diff[a] = sp.mode(ji)[a] - sp.mode(jpi)[a];
                    }
                    if crate::lattice::euclid(&diff) > n_scale {
                        continue;
                    }
                    let m = melnikov_margin(lambdas, &sp, omega, l, ji, jpi, gamma, tau);
                    best.4 += 1;
                    if m < best.0 {
                        best = (m, li, ji, jpi, best.4);
                    }
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, 0, 0, 0),
            |a, b| {
                let count = a.4 + b.4;
                // ties resolved by the smaller angle index for determinism
                let pick = if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a };
                (pick.0, pick.1, pick.2, pick.3, count)
            },
        );
    let worst = (best.1 != usize::MAX && best.0.is_finite()).then(|| {
        (
            ang.mode(best.1).to_vec(),
            sp.mode(best.2).to_vec(),
            sp.mode(best.3).to_vec(),
        )
    });
    MelnikovReport {
        ok: best.0 >= 0.0,
        margin: best.0,
        worst,
        scanned: best.4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KamHomological {
    pub x: QPOperator,
    /// diag P̂(0)_j^j
    pub pbar: Vec<C64>,
}

/// X̂(l)_j^{j'} = P̂(l)_j^{j'} / (iω·l − λ_j + λ_{j'}) on the support of Π_N,
/// (0, j, j) excluded.
pub fn solve_homological_kam(p: &QPOperator, spectrum: &DiagonalSpectrum, omega: &[f64], n_scale: f64, gamma: f64, tau: f64) -> Result<KamHomological> {
    let spec = *p.spec();
    let ang = spec.angles();
    let sp = spec.spatial();
    let lambdas = spectrum.lambdas();
    let (low, _) = p.cutoff(n_scale);
    let mut x = QPOperator::zeros(spec);
    for (li, blk) in low.blocks().iter().enumerate() {
        let l = ang.mode(li);
        let wl = dot(omega, l);
        let lb = japanese_bracket(l);
        for c in 0..blk.ncols() {
            for r in 0..blk.nrows() {
                let v = blk[(r, c)];
                if v == C64::new(0.0, 0.0) || (li == ang.zero_index() && r == c) {
                    continue;
                }
                let div = C64::new(0.0, wl) - lambdas[r] + lambdas[c];
                let bound = gamma / (lb * sp.bracket(r) * sp.bracket(c)).powf(tau);
                // |div| is the margin of the tuple (−l, j, j')
                if div.norm() - bound < 0.0 {
                    return Err(Error::Melnikov {
                        l: l.iter().map(|x| -x).collect(),
                        j: sp.mode(r).to_vec(),
                        jp: sp.mode(c).to_vec(),
                        margin: div.norm() - bound,
                    });
                }
                x.blocks_mut()[li][(r, c)] = v / div;
            }
        }
    }
    Ok(KamHomological {
        x,
        pbar: p.zero_block_diagonal(),
    })
}

/// ω·∂_φX − [A, X] − (Π_N P − P̄) relative to m_norm(Π_N P − P̄).
pub fn kam_homological_residual(sol: &KamHomological, p: &QPOperator, spectrum: &DiagonalSpectrum, omega: &[f64], n_scale: f64) -> f64 {
    let (mut rhs, _) = p.cutoff(n_scale);
    let minus: Vec<C64> = sol.pbar.iter().map(|v| -v).collect();
    rhs.add_diagonal(&minus);
    let lhs = &sol.x.omega_derivative(omega) - &sol.x.diag_commutator(&spectrum.lambdas());
    let prof = NormProfile::default();
    let e = m_norm(&(&lhs - &rhs), &prof);
    let r = m_norm(&rhs, &prof);
    if r > 0.0 {
        e / r
    } else {
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamOptions {
    pub max_steps: usize,
    /// Stop once m_norm(P_k) ≤ stop_rel · m_norm(P_0).
    pub stop_rel: f64,
    pub neumann_tol: f64,
    /// σ of the σ ∓ m norm profile.
    pub sigma: f64,
}

impl Default for KamOptions {
    fn default() -> Self {
        Self {
            max_steps: 12,
            stop_rel: 1e-13,
            neumann_tol: 1e-16,
            sigma: 0.0,
        }
    }
}

/// One row of the KAM trace, describing step k (the transition P_k → P_{k+1}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamTraceRow {
    pub k: usize,
    pub n_k: f64,
    /// ‖P_k‖ with profile (s0, σ − m, σ + m).
    pub p_norm: f64,
    /// ‖P_k‖ with profile (s0, 0, 0).
    pub p_norm_plain: f64,
    pub p_beta_norm: f64,
    pub melnikov_margin: f64,
    pub max_dlambda: f64,
    pub homological_residual: f64,
    pub neumann_residual: f64,
    /// Every |Δλ_j| ≤ ⟨j⟩^{−2m} hs(P̂_k(0); σ − m, σ + m).
    pub increment_bound_ok: bool,
    pub p_structure: StructureFlags,
    pub x_structure: StructureFlags,
    /// Clipped angle mass of the products formed in the step.
    pub dropped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KamState {
    pub k: usize,
    pub spectrum: DiagonalSpectrum,
    pub p: QPOperator,
    /// V_k − Id for V_k = Φ_0 ∘ ... ∘ Φ_{k−1}.
    pub v_tail: QPOperator,
    pub trace: Vec<KamTraceRow>,
    /// λ^{(k)} for every k reached, starting with λ^{(0)}.
    pub lambda_history: Vec<Vec<C64>>,
}

impl KamState {
    pub fn new(spectrum: DiagonalSpectrum, p: QPOperator) -> Self {
        let spec = *p.spec();
        let l0 = spectrum.lambdas();
        Self {
            k: 0,
            spectrum,
            p,
            v_tail: QPOperator::zeros(spec),
            trace: Vec::new(),
            lambda_history: vec![l0],
        }
    }
}

pub fn weighted_profile(consts: &KamConstants, sigma: f64) -> NormProfile {
    NormProfile::new(consts.s0, sigma - consts.m, sigma + consts.m, consts.beta)
}

pub fn kam_step(state: &KamState, consts: &KamConstants, omega: &[f64], opts: &KamOptions) -> Result<KamState> {
    let k = state.k;
    let n_k = consts.scale(k as i64);
    let p = &state.p;
    let spec = *p.spec();
    let prof = weighted_profile(consts, opts.sigma);
    let mel = check_melnikov_set(&state.spectrum, omega, consts.gamma, consts.tau, n_k);
    let sol = solve_homological_kam(p, &state.spectrum, omega, n_k, consts.gamma, consts.tau)?;
    let residual = kam_homological_residual(&sol, p, &state.spectrum, omega, n_k);
    let (_, high) = p.cutoff(n_k);
    let px = p.compose_with_tail(&sol.x)?;
    let inv = sol.x.neumann_inverse(opts.neumann_tol)?;
    let pbar_op = QPOperator::diagonal(spec, &sol.pbar);
    let t = &(&pbar_op + &high) + &px.op;
    let st = inv.correction.compose_with_tail(&t)?;
    let p_next = &(&high + &px.op) + &st.op;
    if !p_next.is_finite() {
        return Err(Error::Numerical(format!("non-finite remainder at KAM step {k}")));
    }

    let mut spectrum = state.spectrum.clone();
    for (r, d) in spectrum.rho.iter_mut().zip(&sol.pbar) {
        *r += d;
    }
    let sp = spec.spatial();
    let hs0 = hs_norm(&p.blocks()[spec.angles().zero_index()], &sp, prof.sigma1, prof.sigma2);
    let increment_bound_ok = sol
        .pbar
        .iter()
        .enumerate()
        .all(|(i, d)| d.norm() <= sp.bracket(i).powf(-2.0 * consts.m) * hs0 * (1.0 + 1e-12));
    let tv = state.v_tail.compose_with_tail(&sol.x)?;
    let v_tail = &(&state.v_tail + &sol.x) + &tv.op;

    let mut trace = state.trace.clone();
    trace.push(KamTraceRow {
        k,
        n_k,
        p_norm: m_norm(p, &prof),
        p_norm_plain: m_norm(p, &NormProfile::new(consts.s0, 0.0, 0.0, 0.0)),
        p_beta_norm: beta_norm(p, &prof),
        melnikov_margin: mel.margin,
        max_dlambda: sol.pbar.iter().map(|v| v.norm()).fold(0.0, f64::max),
        homological_residual: residual,
        neumann_residual: inv.residual,
        increment_bound_ok,
        p_structure: check_structure(p),
        x_structure: check_structure(&sol.x),
        dropped: px.dropped + st.dropped + tv.dropped,
    });
    let mut lambda_history = state.lambda_history.clone();
    lambda_history.push(spectrum.lambdas());
    Ok(KamState {
        k: k + 1,
        spectrum,
        p: p_next,
        v_tail,
        trace,
        lambda_history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KamResult {
    pub state: KamState,
    /// ‖P‖ of the final remainder in the weighted and plain profiles.
    pub final_norm: f64,
    pub final_norm_plain: f64,
    pub converged: bool,
}

impl KamResult {
    pub fn spectrum(&self) -> &DiagonalSpectrum {
        &self.state.spectrum
    }
}

/// Iterate `kam_step` until ‖P_k‖ ≤ stop_rel·‖P_0‖ or `max_steps`. Growth of the
/// plain norm for two consecutive steps is reported as divergence.
pub fn kam_reduce(spectrum: DiagonalSpectrum, p0: QPOperator, consts: &KamConstants, omega: &[f64], opts: &KamOptions) -> Result<KamResult> {
    let plain = NormProfile::new(consts.s0, 0.0, 0.0, 0.0);
    let prof = weighted_profile(consts, opts.sigma);
    let start = m_norm(&p0, &plain);
    let mut state = KamState::new(spectrum, p0);
    let mut growth = 0;
    let mut last = start;
    let mut converged = start == 0.0;
    while !converged && state.k < opts.max_steps {
        state = kam_step(&state, consts, omega, opts)?;
        let now = m_norm(&state.p, &plain);
        growth = if now > last { growth + 1 } else { 0 };
        if growth >= 2 {
            return Err(Error::Divergence(format!(
                "KAM remainder grew for two consecutive steps (step {}, norm {now:.3e})",
                state.k
            )));
        }
        last = now;
        converged = now <= opts.stop_rel * start;
    }
    Ok(KamResult {
        final_norm: m_norm(&state.p, &prof),
        final_norm_plain: last,
        converged,
        state,
    })
}

impl KamState {
    /// CSV export of the trace.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(
            "k,N_k,p_norm,p_norm_plain,p_beta_norm,melnikov_margin,max_dlambda,homological_residual,neumann_residual,increment_bound_ok,dropped\n",
        );
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
                r.k,
                r.n_k,
                r.p_norm,
                r.p_norm_plain,
                r.p_beta_norm,
                r.melnikov_margin,
                r.max_dlambda,
                r.homological_residual,
                r.neumann_residual,
                r.increment_bound_ok,
                r.dropped
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CantorCheck {
    /// Final conditions with constant 2γ.
    pub final_report: MelnikovReport,
    /// Per-step rescans with constant γ at scale N_k on the final tuples;
    /// `None` when the final check failed and inclusion was not examined.
    pub inclusion_violations: Option<usize>,
    pub steps_checked: usize,
}

impl CantorCheck {
    pub fn ok(&self) -> bool {
        self.final_report.ok
    }
}

/// O_{∞,γ} membership on |l|_∞ ≤ l_max (all spatial pairs), then the inclusion
/// property against every recorded intermediate spectrum.
pub fn final_cantor_check(state: &KamState, omega: &[f64], consts: &KamConstants, l_max: i64) -> CantorCheck {
    let spectrum = &state.spectrum;
    let reach = (l_max as f64) * (spectrum.spec.n as f64).sqrt() + 2.0 * spectrum.spec.j_max as f64 * (spectrum.spec.d as f64).sqrt() + 1.0;
    let limited = spectrum.spec.l_max.min(l_max);
    let final_report = scan_box(&spectrum.lambdas(), spectrum, omega, 2.0 * consts.gamma, consts.tau, limited, reach);
    if !final_report.ok {
        return CantorCheck {
            final_report,
            inclusion_violations: None,
            steps_checked: 0,
        };
    }
    let mut violations = 0;
    for (k, lambdas) in state.lambda_history.iter().enumerate() {
        let n_k = consts.scale(k as i64 - 1).min(reach);
        let rep = scan_box(lambdas, spectrum, omega, consts.gamma, consts.tau, limited, n_k);
        if !rep.ok {
            violations += 1;
        }
    }
    CantorCheck {
        final_report,
        inclusion_violations: Some(violations),
        steps_checked: state.lambda_history.len(),
    }
}

fn scan_box(lambdas: &[C64], spectrum: &DiagonalSpectrum, omega: &[f64], gamma: f64, tau: f64, l_max: i64, n_scale: f64) -> MelnikovReport {
    let restricted = DiagonalSpectrum {
        spec: spectrum.spec.with_angle_radius(l_max),
        ..spectrum.clone()
    };
    scan_lambdas(lambdas, &restricted, omega, gamma, tau, n_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeSpec;
    use crate::operator::testing::{max_diff, random_op};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OMEGA: [f64; 1] = [1.618_033_988_749_895];
    const NU0: [f64; 1] = [std::f64::consts::SQRT_2];

    fn spectrum(spec: LatticeSpec) -> DiagonalSpectrum {
        DiagonalSpectrum::new(spec, NU0.to_vec())
    }

    fn consts() -> KamConstants {
        KamConstants::derive(3.0, 0.05, 1, 1)
    }

    #[test]
    fn margin_closed_form_and_sentinel() {
        let spec = LatticeSpec::new(1, 1, 4, 2).unwrap();
        let s = spectrum(spec);
        let sp = spec.spatial();
        let lam = s.lambdas();
        assert_eq!(melnikov_margin(&lam, &sp, &OMEGA, &[0], 3, 3, 0.05, 3.0), f64::INFINITY);
        let (j, jp) = (sp.index_of(&[2]).unwrap(), sp.index_of(&[-1]).unwrap());
        let m = melnikov_margin(&lam, &sp, &OMEGA, &[0], j, jp, 0.05, 3.0);
        let expect = (NU0[0] * 3.0).abs() - 0.05 / (5f64.sqrt() * 2f64.sqrt()).powf(3.0);
        assert!((m - expect).abs() < 1e-14);
    }

    #[test]
    fn scan_matches_brute_force() {
        let spec = LatticeSpec::new(1, 1, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = spectrum(spec);
        for r in s.rho.iter_mut() {
            *r = C64::new(0.0, rng.random_range(-0.05..0.05));
        }
        let rep = check_melnikov_set(&s, &OMEGA, 0.05, 3.0, 4.0);
        let lam = s.lambdas();
        let sp = spec.spatial();
        let mut best = f64::INFINITY;
        for l in -3i64..=3 {
            if l.abs() > 4 {
                continue;
            }
            for a in 0..sp.len() {
                for b in 0..sp.len() {
                    if (sp.mode(a)[0] - sp.mode(b)[0]).abs() > 4 {
                        continue;
                    }
                    best = best.min(melnikov_margin(&lam, &sp, &OMEGA, &[l], a, b, 0.05, 3.0));
                }
            }
        }
        assert_eq!(rep.margin, best);
        // pointwise agreement on random tuples
        for _ in 0..100 {
            let l = [rng.random_range(-3..=3)];
            let (a, b) = (rng.random_range(0..sp.len()), rng.random_range(0..sp.len()));
            let m = melnikov_margin(&lam, &sp, &OMEGA, &l, a, b, 0.05, 3.0);
            assert!(m >= rep.margin || (sp.mode(a)[0] - sp.mode(b)[0]).abs() > 4);
        }
    }

    #[test]
    fn planted_resonance_is_reported() {
        let spec = LatticeSpec::new(1, 1, 3, 2).unwrap();
        let mut s = spectrum(spec);
        let sp = spec.spatial();
        let (j, jp) = (sp.index_of(&[1]).unwrap(), sp.index_of(&[0]).unwrap());
        // make iω + λ_1 − λ_0 nearly vanish
        s.rho[j] = C64::new(0.0, -OMEGA[0] - NU0[0] + 1e-9);
        let rep = check_melnikov_set(&s, &OMEGA, 0.05, 3.0, 3.0);
        assert!(!rep.ok);
        let (l, a, b) = rep.worst.unwrap();
        // (−l, j', j) has the same margin
        let planted = (vec![1], sp.mode(j).to_vec(), sp.mode(jp).to_vec());
        let mirrored = (vec![-1], sp.mode(jp).to_vec(), sp.mode(j).to_vec());
        assert!((l.clone(), a.clone(), b.clone()) == planted || (l, a, b) == mirrored);
        // N = 0 keeps only l = 0 diagonal tuples, which are excluded
        assert!(check_melnikov_set(&s, &OMEGA, 0.05, 3.0, 0.0).ok);
    }

    #[test]
    fn homological_solution() {
        let spec = LatticeSpec::new(1, 1, 4, 3).unwrap();
        let s = spectrum(spec);
        let mut p = QPOperator::zeros(spec);
        let c = C64::new(0.2, 0.1);
        p.set_entry(&[1], &[2], &[0], c);
        let sol = solve_homological_kam(&p, &s, &OMEGA, 20.0, 0.05, 3.0).unwrap();
        let expect = c / C64::new(0.0, OMEGA[0] - 2.0 * NU0[0]);
        assert!((sol.x.entry(&[1], &[2], &[0]) - expect).norm() < 1e-16);
        let diag = QPOperator::diagonal(spec, &[C64::new(0.0, 0.3); 9]);
        let sol = solve_homological_kam(&diag, &s, &OMEGA, 20.0, 0.05, 3.0).unwrap();
        assert!(sol.x.is_zero());
        assert_eq!(sol.pbar, vec![C64::new(0.0, 0.3); 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_op(&mut rng, spec, 1.0);
            let sol = solve_homological_kam(&p, &s, &OMEGA, 3.0, 1e-4, 3.0).unwrap();
            assert!(kam_homological_residual(&sol, &p, &s, &OMEGA, 3.0) < 1e-12);
        }
    }

    #[test]
    fn trivial_steps() {
        let spec = LatticeSpec::new(1, 1, 4, 2).unwrap();
        let st = KamState::new(spectrum(spec), QPOperator::zeros(spec));
        let next = kam_step(&st, &consts(), &OMEGA, &KamOptions::default()).unwrap();
        assert_eq!(next.k, 1);
        assert!(next.p.is_zero());
        assert_eq!(next.spectrum, st.spectrum);
        // single l = 0 diagonal entry
        let mut p = QPOperator::zeros(spec);
        p.set_entry(&[0], &[1], &[1], C64::new(0.0, 0.01));
        let next = kam_step(&KamState::new(spectrum(spec), p), &consts(), &OMEGA, &KamOptions::default()).unwrap();
        assert!(next.p.is_zero());
        let j = spec.spatial().index_of(&[1]).unwrap();
        assert_eq!(next.spectrum.rho[j], C64::new(0.0, 0.01));
        let r = kam_reduce(spectrum(spec), QPOperator::zeros(spec), &consts(), &OMEGA, &KamOptions::default()).unwrap();
        assert_eq!(r.state.k, 0);
    }

    #[test]
    fn step_is_a_push_forward() {
        let spec = LatticeSpec::new(1, 1, 6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // band-limited random perturbation so the products stay inside the angle box
        let p = random_op(&mut rng, spec, 1e-3).with_angle_radius(1).with_angle_radius(6);
        let s = spectrum(spec);
        let st = KamState::new(s.clone(), p.clone());
        let next = kam_step(&st, &consts(), &OMEGA, &KamOptions::default()).unwrap();
        // Φ^{-1}(HΦ − ω·∂_φΦ) with Φ = Id + X computed directly
        let sol = solve_homological_kam(&p, &s, &OMEGA, consts().scale(0), 0.05, 3.0).unwrap();
        let mut h = p.clone();
        h.add_diagonal(&s.lambdas());
        let id = QPOperator::identity(spec);
        let phi = &id + &sol.x;
        let inner = &h.compose(&phi).unwrap() - &sol.x.omega_derivative(&OMEGA);
        let phi_inv = &id + &sol.x.neumann_inverse(1e-16).unwrap().correction;
        let pushed = phi_inv.compose(&inner).unwrap();
        let mut ours = next.p.clone();
        ours.add_diagonal(&next.spectrum.lambdas());
        let err = max_diff(&pushed, &ours);
        assert!(err < 1e-10 * p.max_abs(), "{err}");
    }

    #[test]
    fn reduction_of_random_reversible_perturbation() {
        let spec = LatticeSpec::new(1, 1, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random_op(&mut rng, spec, 1e-4);
        // real and reversible: P(l)_k^{k'} = −mirror = conj(mirror), with
        // mirror = P(−l)_{−k}^{−k'}; i·Im((a − mirror)/2) satisfies both
        let ang = spec.angles();
        let sp = spec.spatial();
        let mut p = QPOperator::zeros(spec);
        for li in 0..ang.len() {
            for r in 0..sp.len() {
                for c in 0..sp.len() {
                    let a = raw.blocks()[li][(r, c)];
                    let m = raw.blocks()[ang.neg_index(li)][(sp.neg_index(r), sp.neg_index(c))];
                    p.blocks_mut()[li][(r, c)] = C64::new(0.0, ((a - m) * 0.5).im);
                }
            }
        }
        let f = check_structure(&p);
        assert!(f.reversible && f.real, "{f:?}");
        let res = kam_reduce(spectrum(spec), p, &consts(), &OMEGA, &KamOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.spectrum().max_abs_real_part() < 1e-12);
        for row in &res.state.trace {
            assert!(row.homological_residual < 1e-12);
            assert!(row.increment_bound_ok);
            assert!(row.p_structure.real && row.p_structure.reversible);
            assert!(row.x_structure.reversibility_preserving);
        }
        let cc = final_cantor_check(&res.state, &OMEGA, &consts(), 4);
        if cc.ok() {
            assert_eq!(cc.inclusion_violations, Some(0));
        }
        assert!(!res.state.trace_csv().is_empty());
    }
}
