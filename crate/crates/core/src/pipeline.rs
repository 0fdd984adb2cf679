//! Straightening → smoothing → KAM → checks at one parameter point.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitialDatum};
use crate::constants::{KamConstants, ParameterPoint};
use crate::dynamics::{evolve_direct, growth_classifier, max_difference, sobolev_norm, CVec, EvolutionConfig, Generator, Growth, ReducedFlow, Trajectory};
use crate::error::{Error, Result};
use crate::kam::{final_cantor_check, kam_reduce, CantorCheck, KamOptions, KamResult, KamTraceRow};
use crate::lattice::{LatticeSpec, C64};
use crate::model::{transport_operator, StructureTarget};
use crate::numeric::{fit_line, LineFit};
use crate::operator::{check_structure, QPOperator, StructureFlags, STRUCTURE_TOL};
use crate::smoothing::{run_smoothing, SmoothingOptions, SmoothingState, SmoothingStepReport};
use crate::spectrum::DiagonalSpectrum;
use crate::straighten::{composition_operator, solve_straightening, Direction, StraightenOptions, StraighteningResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Straighten,
    Smoothing,
    Kam,
    Cantor,
    Dynamics,
}

/// How far a run goes; each CLI subcommand maps to one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopAfter {
    Straighten,
    Smoothing,
    Kam,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    DiophantineExit,
    MelnikovExit,
    Divergence,
    Numerical,
}

impl FailureKind {
    pub fn classify(e: &Error) -> Self {
        match e {
            Error::Diophantine { .. } => Self::DiophantineExit,
            Error::Melnikov { .. } => Self::MelnikovExit,
            Error::Divergence(_) | Error::NoConvergence { .. } | Error::NeumannGuard { .. } => Self::Divergence,
            _ => Self::Numerical,
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            Self::DiophantineExit => 3,
            Self::MelnikovExit => 4,
            Self::Divergence => 5,
            Self::Numerical => 6,
        }
    }

    /// Small-divisor exits mean the parameter point is outside the Cantor set, not a bug.
    pub fn is_exclusion(self) -> bool {
        matches!(self, Self::DiophantineExit | Self::MelnikovExit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub l: Vec<i64>,
    pub j: Vec<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jp: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Excluded {
        stage: Stage,
        kind: FailureKind,
        message: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        offender: Option<Offender>,
    },
    Failed {
        stage: Stage,
        kind: FailureKind,
        message: String,
    },
}

impl RunStatus {
    fn from_error(stage: Stage, e: &Error) -> Self {
        let kind = FailureKind::classify(e);
        let message = e.to_string();
        if !kind.is_exclusion() {
            return Self::Failed { stage, kind, message };
        }
        let offender = match e {
            Error::Diophantine { l, j, .. } => Some(Offender {
                l: l.clone(),
                j: j.clone(),
                jp: None,
            }),
            Error::Melnikov { l, j, jp, .. } => Some(Offender {
                l: l.clone(),
                j: j.clone(),
                jp: Some(jp.clone()),
            }),
            _ => None,
        };
        Self::Excluded {
            stage,
            kind,
            message,
            offender,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Completed => 0,
            Self::Excluded { kind, .. } | Self::Failed { kind, .. } => kind.exit_code(),
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraightenSummary {
    pub nu0: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub shift_constant: f64,
    pub diophantine_margin: f64,
    pub max_gradient: f64,
    pub roundtrip_defect: f64,
    /// Nonzero coefficients of α per component: (mode, re, im), angle axes first.
    pub alpha: Vec<Vec<(Vec<i64>, f64, f64)>>,
    /// Entries of W0 dropped by the angle clipping of A^{-1}WA.
    pub dropped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSummary {
    pub steps: usize,
    pub initial_order: f64,
    pub reports: Vec<SmoothingStepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamSummary {
    pub steps: usize,
    pub converged: bool,
    pub final_norm: f64,
    pub final_norm_plain: f64,
    pub trace: Vec<KamTraceRow>,
}

/// Log-log decay fits of |ρ_j| and |z(j)| in ⟨j⟩ over the inner modes 0 < |j|_∞ ≤ 3J/4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenStructure {
    pub rho_fit: Option<LineFit>,
    pub z_fit: Option<LineFit>,
    /// z slope minus ρ slope; positive when ρ decays faster.
    pub steeper_by: Option<f64>,
    pub max_abs_rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Should be real and, in reversible runs, reversible.
    Vector,
    /// Should be real and, in reversible runs, reversibility preserving.
    Map,
}

/// Structure identities of one stage object. Defects are measured against the
/// larger of the object's own size and the size of εW: a remainder that is the
/// result of cancellations carries rounding at the scale of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStructure {
    pub stage: String,
    pub role: Role,
    pub flags: StructureFlags,
    /// Largest relevant identity defect divided by the reference scale.
    pub scaled_defect: f64,
    pub ok: bool,
}

impl StageStructure {
    pub fn new(stage: impl Into<String>, role: Role, flags: StructureFlags, reversible: bool, input_scale: f64) -> Self {
        let reference = flags.max_abs.max(input_scale);
        let partner = match role {
            Role::Vector => flags.reversible_defect,
            Role::Map => flags.preserving_defect,
        };
        let worst = if reversible { flags.real_defect.max(partner) } else { flags.real_defect };
        let scaled_defect = if reference > 0.0 { worst * flags.max_abs / reference } else { 0.0 };
        Self {
            stage: stage.into(),
            role,
            ok: scaled_defect <= STRUCTURE_TOL,
            flags,
            scaled_defect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub datum: String,
    pub t_final: f64,
    pub initial_norm: f64,
    /// sup_t ‖u_direct − u_reduced‖_{H^σ}.
    pub max_difference: f64,
    pub sup_ratio: f64,
    pub forward: Growth,
    pub backward: Option<Growth>,
    pub blew_up: bool,
    pub max_re_lambda: f64,
    /// |rate − max Re λ| / max Re λ when the forward run is exponential.
    pub rate_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stop_after: StopAfter,
    pub structure_target: StructureTarget,
    pub parameters: ParameterPoint,
    pub constants: KamConstants,
    pub m_effective: usize,
    pub deviations: Vec<String>,
    pub overrides: Vec<String>,
    pub status: RunStatus,
    pub straightening: Option<StraightenSummary>,
    pub smoothing: Option<SmoothingSummary>,
    pub kam: Option<KamSummary>,
    pub max_abs_re_lambda: Option<f64>,
    pub max_re_lambda: Option<f64>,
    pub eigen_structure: Option<EigenStructure>,
    pub cantor: Option<CantorCheck>,
    pub structure: Vec<StageStructure>,
    pub dynamics: Option<DynamicsSummary>,
}

/// Everything a run produced; only `report` is required to exist.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Wall-clock seconds per stage, kept out of the report so reports stay reproducible.
    pub timings: BTreeMap<String, f64>,
    pub straightening: Option<StraighteningResult>,
    pub smoothing: Option<SmoothingState>,
    pub kam: Option<KamResult>,
    pub flow: Option<ReducedFlow>,
    pub generator: Option<Generator>,
    pub direct: Option<Trajectory>,
    pub reduced: Option<Trajectory>,
}

impl RunOutput {
    pub fn spectrum(&self) -> Option<&DiagonalSpectrum> {
        self.kam.as_ref().map(|k| k.spectrum())
    }
}

/// Generator perturbation ε(V·∇ + W) of the original equation.
pub fn direct_perturbation(cfg: &ExperimentConfig) -> Result<QPOperator> {
    let spec = cfg.spec()?;
    let eps = cfg.parameters.eps;
    let w = cfg.w.model.build(spec, cfg.parameters.gain)?;
    Ok((&transport_operator(spec, &cfg.v) + &w).scale(C64::new(eps, 0.0)))
}

pub fn effective_m(consts: &KamConstants, cap: usize) -> usize {
    consts.big_m.min(cap)
}

fn alpha_listing(res: &StraighteningResult) -> Vec<Vec<(Vec<i64>, f64, f64)>> {
    res.diffeo
        .alpha
        .iter()
        .map(|co| {
            let mut mode = vec![0i64; co.radii.len()];
            (0..co.data.len())
                .filter(|&i| co.data[i].norm() > 0.0)
                .map(|i| {
                    co.mode(i, &mut mode);
                    (mode.clone(), co.data[i].re, co.data[i].im)
                })
                .collect()
        })
        .collect()
}

pub fn eigen_structure(spectrum: &DiagonalSpectrum) -> EigenStructure {
    let sp = spectrum.spec.spatial();
    let inner = (3 * spectrum.spec.j_max) / 4;
    let fit = |vals: &[C64]| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..sp.len())
            .filter(|&i| {
                let s = sp.sup_norm(i);
                s > 0 && s <= inner && vals[i].norm() > 0.0
            })
            .map(|i| (sp.bracket(i).ln(), vals[i].norm().ln()))
            .unzip();
        if xs.len() >= 3 {
            fit_line(&xs, &ys)
        } else {
            None
        }
    };
    let rho_fit = fit(&spectrum.rho);
    let z_fit = fit(&spectrum.z);
    EigenStructure {
        steeper_by: rho_fit.zip(z_fit).map(|(r, z)| z.slope - r.slope),
        rho_fit,
        z_fit,
        max_abs_rho: spectrum.rho.iter().map(|v| v.norm()).fold(0.0, f64::max),
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    input_scale: f64,
    spec: LatticeSpec,
    point: ParameterPoint,
    consts: KamConstants,
    m_eff: usize,
    structure: Vec<StageStructure>,
    timings: BTreeMap<String, f64>,
}

impl Runner<'_> {
    fn flag(&mut self, stage: impl Into<String>, role: Role, op: &QPOperator) {
        self.push(stage, role, check_structure(op));
    }

    fn push(&mut self, stage: impl Into<String>, role: Role, flags: StructureFlags) {
        let reversible = self.cfg.w.structure == StructureTarget::Reversible;
        self.structure.push(StageStructure::new(stage, role, flags, reversible, self.input_scale));
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        self.timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig, stop_after: StopAfter, overrides: &[String]) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let point = cfg.point()?;
    let consts = KamConstants::derive(point.tau, point.gamma, spec.d, spec.n);
    let m_eff = effective_m(&consts, cfg.smoothing.m_cap);
    let mut deviations = Vec::new();
    if m_eff < consts.big_m {
        deviations.push(format!(
            "smoothing steps capped: M = {} from the constants, {} used",
            consts.big_m, m_eff
        ));
    }
    let mut report = RunReport {
        stop_after,
        structure_target: cfg.w.structure,
        parameters: point.clone(),
        constants: consts,
        m_effective: m_eff,
        deviations,
        overrides: overrides.to_vec(),
        status: RunStatus::Completed,
        straightening: None,
        smoothing: None,
        kam: None,
        max_abs_re_lambda: None,
        max_re_lambda: None,
        eigen_structure: None,
        cantor: None,
        structure: Vec::new(),
        dynamics: None,
    };
    let mut out = RunOutput {
        report: report.clone(),
        timings: BTreeMap::new(),
        straightening: None,
        smoothing: None,
        kam: None,
        flow: None,
        generator: None,
        direct: None,
        reduced: None,
    };
    let mut r = Runner {
        cfg,
        input_scale: 0.0,
        spec,
        point,
        consts,
        m_eff,
        structure: Vec::new(),
        timings: BTreeMap::new(),
    };
    let status = stages(&mut r, &mut report, &mut out, stop_after);
    report.status = status;
    report.structure = std::mem::take(&mut r.structure);
    out.report = report;
    out.timings = r.timings;
    Ok(out)
}

fn stages(r: &mut Runner, report: &mut RunReport, out: &mut RunOutput, stop_after: StopAfter) -> RunStatus {
    let cfg = r.cfg;
    let tol = cfg.tolerances;
    let (omega, nu, eps) = (r.point.omega.clone(), r.point.nu.clone(), r.point.eps);
    let (gamma, tau) = (r.point.gamma, r.point.tau);

    // straightening
    let w = match cfg.w.model.build(r.spec, cfg.parameters.gain) {
        Ok(w) => w.scale(C64::new(eps, 0.0)),
        Err(e) => return RunStatus::from_error(Stage::Straighten, &e),
    };
    r.input_scale = w.max_abs();
    r.flag("w", Role::Vector, &w);
    let opts = StraightenOptions {
        tol: tol.straighten,
        max_iter: tol.straighten_max_iter,
        max_eps_over_gamma: tol.max_eps_over_gamma,
    };
    let spec = r.spec;
    let st = r.timed("straighten", |_| solve_straightening(spec, &cfg.v, &omega, &nu, eps, gamma, tau, &opts));
    let st = match st {
        Ok(s) => s,
        Err(e) => return RunStatus::from_error(Stage::Straighten, &e),
    };
    let a = composition_operator(&st.diffeo, Direction::Forward);
    let a_inv = composition_operator(&st.diffeo, Direction::Inverse);
    r.flag("straightening_map", Role::Map, &a);
    let w0 = a_inv.compose_with_tail(&w).and_then(|aw| Ok((aw.dropped, aw.op.compose_with_tail(&a)?)));
    let (dropped0, w0) = match w0 {
        Ok((d0, p)) => (d0 + p.dropped, p.op),
        Err(e) => return RunStatus::from_error(Stage::Straighten, &e),
    };
    r.flag("straightened_w", Role::Vector, &w0);
    report.straightening = Some(StraightenSummary {
        nu0: st.nu0.clone(),
        residual: st.residual,
        iterations: st.iterations,
        shift_constant: st.shift_constant,
        diophantine_margin: st.diophantine.margin,
        max_gradient: st.diffeo.max_gradient(),
        roundtrip_defect: st.diffeo.roundtrip_defect(),
        alpha: alpha_listing(&st),
        dropped: dropped0,
    });
    let nu0 = st.nu0.clone();
    out.straightening = Some(st);
    if let Some(s) = &report.straightening {
        if !(s.residual <= tol.straighten) {
            return RunStatus::Failed {
                stage: Stage::Straighten,
                kind: FailureKind::Numerical,
                message: format!("straightening residual {:.3e} above {:.3e}", s.residual, tol.straighten),
            };
        }
    }
    if stop_after == StopAfter::Straighten {
        return RunStatus::Completed;
    }

    // smoothing
    let sopts = SmoothingOptions {
        steps: r.m_eff,
        series_tol: tol.series,
        gamma,
        tau,
    };
    let sm = r.timed("smoothing", |_| run_smoothing(&nu0, w0, &omega, &sopts));
    let sm = match sm {
        Ok(s) => s,
        Err(e) => return RunStatus::from_error(Stage::Smoothing, &e),
    };
    for rep in &sm.reports {
        r.push(format!("smoothing_{}_remainder", rep.step), Role::Vector, rep.remainder_structure);
        r.push(format!("smoothing_{}_generator", rep.step), Role::Map, rep.generator_structure);
    }
    report.smoothing = Some(SmoothingSummary {
        steps: sm.step,
        initial_order: sm.initial_order.order,
        reports: sm.reports.clone(),
    });
    let bad = sm.reports.iter().find(|rep| !(rep.homological_residual <= tol.homological));
    let bad = bad.map(|rep| (rep.step, rep.homological_residual));
    let z = sm.z.clone();
    let p0 = sm.w.clone();
    out.smoothing = Some(sm);
    if let Some((step, res)) = bad {
        return RunStatus::Failed {
            stage: Stage::Smoothing,
            kind: FailureKind::Numerical,
            message: format!("homological residual {res:.3e} at smoothing step {step}"),
        };
    }
    if stop_after == StopAfter::Smoothing {
        return RunStatus::Completed;
    }

    // KAM
    let spectrum0 = DiagonalSpectrum::new(r.spec, nu0.clone()).with_z(z);
    let kopts = KamOptions {
        max_steps: cfg.kam.max_steps,
        stop_rel: tol.kam_stop_rel,
        neumann_tol: tol.neumann,
        sigma: cfg.kam.sigma,
    };
    let consts = r.consts;
    let kam = r.timed("kam", |_| kam_reduce(spectrum0, p0, &consts, &omega, &kopts));
    let kam = match kam {
        Ok(k) => k,
        Err(e) => return RunStatus::from_error(Stage::Kam, &e),
    };
    for row in &kam.state.trace {
        r.push(format!("kam_{}_remainder", row.k), Role::Vector, row.p_structure);
        r.push(format!("kam_{}_generator", row.k), Role::Map, row.x_structure);
    }
    r.flag("kam_final_remainder", Role::Vector, &kam.state.p);
    r.flag("kam_tail", Role::Map, &kam.state.v_tail);
    report.kam = Some(KamSummary {
        steps: kam.state.k,
        converged: kam.converged,
        final_norm: kam.final_norm,
        final_norm_plain: kam.final_norm_plain,
        trace: kam.state.trace.clone(),
    });
    report.max_abs_re_lambda = Some(kam.spectrum().max_abs_real_part());
    report.max_re_lambda = Some(kam.spectrum().max_real_part());
    report.eigen_structure = Some(eigen_structure(kam.spectrum()));
    let bad = kam.state.trace.iter().find(|row| !(row.homological_residual <= tol.homological));
    let bad = bad.map(|row| (row.k, row.homological_residual));
    let converged = kam.converged;
    let cantor = r.timed("cantor", |r| final_cantor_check(&kam.state, &omega, &r.consts, r.spec.l_max));
    let cantor_ok = cantor.ok();
    let worst = cantor.final_report.worst.clone();
    let margin = cantor.final_report.margin;
    report.cantor = Some(cantor);
    out.kam = Some(kam);
    if let Some((k, res)) = bad {
        return RunStatus::Failed {
            stage: Stage::Kam,
            kind: FailureKind::Numerical,
            message: format!("homological residual {res:.3e} at KAM step {k}"),
        };
    }
    if !converged {
        return RunStatus::Failed {
            stage: Stage::Kam,
            kind: FailureKind::Divergence,
            message: format!("remainder above the stop threshold after {} steps", cfg.kam.max_steps),
        };
    }
    if !cantor_ok {
        return RunStatus::Excluded {
            stage: Stage::Cantor,
            kind: FailureKind::MelnikovExit,
            message: format!("final eigenvalues violate the 2γ conditions (margin {margin:.3e})"),
            offender: worst.map(|(l, j, jp)| Offender { l, j, jp: Some(jp) }),
        };
    }
    if stop_after == StopAfter::Kam || !cfg.stages.dynamics {
        return RunStatus::Completed;
    }

    // dynamics
    let res = r.timed("dynamics", |r| dynamics_stage(r, out, a));
    match res {
        Ok(summary) => {
            report.dynamics = Some(summary);
            RunStatus::Completed
        }
        Err(e) => RunStatus::from_error(Stage::Dynamics, &e),
    }
}

fn dynamics_stage(r: &Runner, out: &mut RunOutput, a: QPOperator) -> Result<DynamicsSummary> {
    let cfg = r.cfg;
    let ev = &cfg.evolution;
    let kam = out.kam.as_ref().expect("KAM ran");
    let smoothing = out.smoothing.as_ref().expect("smoothing ran");
    let spectrum = kam.spectrum();
    let lambdas = spectrum.lambdas();
    let flow = ReducedFlow {
        omega: r.point.omega.clone(),
        straightening: a,
        generators: smoothing.generators.clone(),
        v_tail: kam.state.v_tail.clone(),
        lambdas: lambdas.clone(),
    };
    let gen = Generator::new(&r.point.nu, &r.point.omega, &direct_perturbation(cfg)?);
    let sp = r.spec.spatial();
    let (u0, datum) = match &ev.initial {
        InitialDatum::ReducedMode { j } => {
            let idx = match j {
                Some(j) => sp.index_of(j).ok_or_else(|| Error::Config(format!("mode {j:?} outside the lattice")))?,
                None => dominant_mode(&lambdas, &sp),
            };
            (flow.mode_datum(idx), format!("reduced_mode {:?}", sp.mode(idx)))
        }
        InitialDatum::Modes { entries } => {
            let mut u = CVec::zeros(sp.len());
            for e in entries {
                let i = sp.index_of(&e.j).ok_or_else(|| Error::Config(format!("mode {:?} outside the lattice", e.j)))?;
                u[i] += C64::new(e.re, e.im);
            }
            (u, "explicit modes".to_string())
        }
    };
    let ecfg = EvolutionConfig {
        t_final: ev.t_final,
        dt: ev.dt,
        integrator: ev.integrator,
        sigma: ev.sigma,
        record_every: ev.record_every,
    };
    let direct = evolve_direct(&gen, &u0, &ecfg)?;
    let reduced = flow.evolve(&u0, &ecfg)?;
    let diff = if direct.blew_up {
        f64::INFINITY
    } else {
        max_difference(&direct, &reduced, &sp, ev.sigma)?
    };
    let forward = growth_classifier(&direct.times, &direct.h_sigma, ev.tol_rate);
    let backward = if ev.both_directions {
        let back = evolve_direct(
            &gen,
            &u0,
            &EvolutionConfig {
                t_final: -ev.t_final,
                ..ecfg
            },
        )?;
        Some(growth_classifier(&back.times, &back.h_sigma, ev.tol_rate))
    } else {
        None
    };
    let max_re = spectrum.max_real_part();
    let rate_relative_error = match forward {
        Growth::Exponential { rate, .. } if max_re > 0.0 => Some((rate - max_re).abs() / max_re),
        _ => None,
    };
    let summary = DynamicsSummary {
        datum,
        t_final: ev.t_final,
        initial_norm: sobolev_norm(&u0, &sp, ev.sigma),
        max_difference: diff,
        sup_ratio: direct.sup_ratio(),
        forward,
        backward,
        blew_up: direct.blew_up,
        max_re_lambda: max_re,
        rate_relative_error,
    };
    out.flow = Some(flow);
    out.generator = Some(gen);
    out.direct = Some(direct);
    out.reduced = Some(reduced);
    Ok(summary)
}

/// Largest Re λ; near-ties go to the mode with the smallest ⟨j⟩.
pub fn dominant_mode(lambdas: &[C64], sp: &crate::lattice::ModeSet) -> usize {
    let top = lambdas.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let scale = lambdas.iter().map(|l| l.norm()).fold(0.0, f64::max).max(1.0);
    (0..lambdas.len())
        .filter(|&i| lambdas[i].re >= top - 1e-12 * scale)
        .min_by(|&a, &b| sp.bracket(a).total_cmp(&sp.bracket(b)).then(a.cmp(&b)))
        .unwrap_or(0)
}

/// Writes report.json, spectrum.json, kam_trace.csv, norms.csv, effective_config
/// and timings.json into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)? + "\n")?;
    std::fs::write(dir.join("effective_config"), cfg.to_toml()?)?;
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&out.timings)? + "\n")?;
    if let Some(s) = out.spectrum() {
        std::fs::write(dir.join("spectrum.json"), serde_json::to_string_pretty(s)? + "\n")?;
    }
    if let Some(k) = &out.kam {
        std::fs::write(dir.join("kam_trace.csv"), k.state.trace_csv())?;
    }
    if let Some(t) = &out.direct {
        std::fs::write(dir.join("norms.csv"), t.norms_csv())?;
    }
    Ok(())
}
