//! Time evolution of ∂_t u = (iν·j) u + B(ωt) u on Fourier coefficients, with
//! B = ε(V·∇ + W), and the reduced flow u(t) = U(ωt) e^{Λt} U(0)^{-1} u0.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dot, LatticeSpec, ModeSet, C64};
use crate::numeric::fit_line;
use crate::operator::{CMat, QPOperator};

pub type CVec = DVector<C64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    StrangSplitting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Final time; negative values integrate backwards.
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_record")]
    pub record_every: usize,
}

fn default_integrator() -> Integrator {
    Integrator::StrangSplitting
}

fn default_record() -> usize {
    100
}

impl EvolutionConfig {
    fn steps(&self) -> Result<(usize, f64)> {
        if !(self.dt > 0.0) || !self.t_final.is_finite() || self.record_every == 0 {
            return Err(Error::Config("evolution needs dt > 0, finite t_final and record_every ≥ 1".into()));
        }
        let steps = (self.t_final.abs() / self.dt).round() as usize;
        Ok((steps, self.dt * self.t_final.signum()))
    }
}

pub fn sobolev_norm(u: &CVec, modes: &ModeSet, sigma: f64) -> f64 {
    let w = modes.brackets();
    u.iter()
        .zip(&w)
        .map(|(v, b)| b.powf(2.0 * sigma) * v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// The generator split as a constant diagonal plus the angle blocks of B that are nonzero.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: LatticeSpec,
    pub omega: Vec<f64>,
    pub diag: Vec<C64>,
    blocks: Vec<(Vec<i64>, CMat)>,
}

impl Generator {
    pub fn new(nu: &[f64], omega: &[f64], perturbation: &QPOperator) -> Self {
        let spec = *perturbation.spec();
        let ang = spec.angles();
        let diag = spec
            .spatial()
            .iter()
            .map(|j| C64::new(0.0, dot(nu, j)))
            .collect();
        let blocks = perturbation
            .blocks()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.iter().any(|v| *v != C64::new(0.0, 0.0)))
            .map(|(li, b)| (ang.mode(li).to_vec(), b.clone()))
            .collect();
        Self {
            spec,
            omega: omega.to_vec(),
            diag,
            blocks,
        }
    }

    /// B(ωt) u
    pub fn apply_perturbation(&self, t: f64, u: &CVec) -> CVec {
        let mut out = CVec::zeros(u.len());
        for (l, b) in &self.blocks {
            let ph = C64::from_polar(1.0, t * dot(&self.omega, l));
            out += b * u * ph;
        }
        out
    }

    fn apply(&self, t: f64, u: &CVec) -> CVec {
        let mut out = self.apply_perturbation(t, u);
        for (o, (d, v)) in out.iter_mut().zip(self.diag.iter().zip(u.iter())) {
            *o += d * v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<CVec>,
    pub h_sigma: Vec<f64>,
    pub l2: Vec<f64>,
    /// Set when the run was cut short by the overflow guard.
    pub blew_up: bool,
}

impl Trajectory {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            h_sigma: Vec::new(),
            l2: Vec::new(),
            blew_up: false,
        }
    }

    fn record(&mut self, t: f64, u: &CVec, modes: &ModeSet, sigma: f64) {
        self.times.push(t);
        self.h_sigma.push(sobolev_norm(u, modes, sigma));
        self.l2.push(u.norm());
        self.states.push(u.clone());
    }

    pub fn norms_csv(&self) -> String {
        let mut out = String::from("t,h_sigma,l2\n");
        for ((t, h), l) in self.times.iter().zip(&self.h_sigma).zip(&self.l2) {
            let _ = writeln!(out, "{t:e},{h:e},{l:e}");
        }
        out
    }

    /// sup_t H^σ norm ratio against the initial datum.
    pub fn sup_ratio(&self) -> f64 {
        let h0 = self.h_sigma.first().copied().unwrap_or(0.0);
        self.h_sigma.iter().fold(0.0f64, |m, h| m.max(h / h0))
    }
}

const OVERFLOW: f64 = 1e150;

pub fn evolve_direct(gen: &Generator, u0: &CVec, cfg: &EvolutionConfig) -> Result<Trajectory> {
    let (steps, h) = cfg.steps()?;
    let modes = gen.spec.spatial();
    if u0.len() != modes.len() {
        return Err(Error::SizeMismatch {
            expected: modes.len(),
            found: u0.len(),
        });
    }
    let half_phase: Vec<C64> = gen.diag.iter().map(|d| (d * (h / 2.0)).exp()).collect();
    let mut traj = Trajectory::new();
    let mut u = u0.clone();
    traj.record(0.0, &u, &modes, cfg.sigma);
    for n in 0..steps {
        let t = n as f64 * h;
        u = match cfg.integrator {
            Integrator::Rk4 => {
                let k1 = gen.apply(t, &u);
                let k2 = gen.apply(t + h / 2.0, &(&u + &k1 * C64::new(h / 2.0, 0.0)));
                let k3 = gen.apply(t + h / 2.0, &(&u + &k2 * C64::new(h / 2.0, 0.0)));
                let k4 = gen.apply(t + h, &(&u + &k3 * C64::new(h, 0.0)));
                &u + (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0)
            }
            Integrator::StrangSplitting => {
                // exact half phase, midpoint rule for B over the full step, exact half phase
                let mut v = u.clone();
                v.iter_mut().zip(&half_phase).for_each(|(x, p)| *x *= p);
                let mid = &v + gen.apply_perturbation(t, &v) * C64::new(h / 2.0, 0.0);
                let mut w = &v + gen.apply_perturbation(t + h / 2.0, &mid) * C64::new(h, 0.0);
                w.iter_mut().zip(&half_phase).for_each(|(x, p)| *x *= p);
                w
            }
        };
        if (n + 1) % cfg.record_every == 0 || n + 1 == steps {
            traj.record((n + 1) as f64 * h, &u, &modes, cfg.sigma);
            if !traj.l2.last().is_some_and(|v| v.is_finite() && *v < OVERFLOW) {
                traj.blew_up = true;
                break;
            }
        }
    }
    Ok(traj)
}

/// U(φ) = A(φ) e^{G_1(φ)} ... e^{G_M(φ)} (Id + T(φ)) with the diagonal flow e^{Λt}.
#[derive(Debug, Clone)]
pub struct ReducedFlow {
    pub omega: Vec<f64>,
    pub straightening: QPOperator,
    pub generators: Vec<QPOperator>,
    pub v_tail: QPOperator,
    pub lambdas: Vec<C64>,
}

impl ReducedFlow {
    pub fn transform(&self, phi: &[f64]) -> CMat {
        let mut u = self.straightening.evaluate(phi);
        for g in &self.generators {
            u *= g.evaluate(phi).exp();
        }
        let v = self.v_tail.evaluate(phi) + CMat::identity(u.nrows(), u.ncols());
        u * v
    }

    /// u0 = U(0) e_j: the solution stays on one reduced mode.
    pub fn mode_datum(&self, j: usize) -> CVec {
        self.transform(&vec![0.0; self.omega.len()]).column(j).into_owned()
    }

    pub fn evolve(&self, u0: &CVec, cfg: &EvolutionConfig) -> Result<Trajectory> {
        let (steps, h) = cfg.steps()?;
        let spec = *self.v_tail.spec();
        let modes = spec.spatial();
        let u_zero = self.transform(&vec![0.0; self.omega.len()]);
        let v0 = u_zero
            .lu()
            .solve(u0)
            .ok_or_else(|| Error::Numerical("U(0) is singular".into()))?;
        let mut traj = Trajectory::new();
        let mut n = 0;
        loop {
            let t = n as f64 * h;
            let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
            let flow = CVec::from_iterator(v0.len(), v0.iter().zip(&self.lambdas).map(|(v, l)| v * (l * t).exp()));
            let u = self.transform(&phi) * flow;
            traj.record(t, &u, &modes, cfg.sigma);
            if n == steps {
                break;
            }
            n = (n + cfg.record_every).min(steps);
        }
        Ok(traj)
    }
}

/// sup over common record times of the H^σ norm of the difference.
pub fn max_difference(a: &Trajectory, b: &Trajectory, modes: &ModeSet, sigma: f64) -> Result<f64> {
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9 * (1.0 + x.abs())) {
        return Err(Error::Numerical("trajectories are recorded at different times".into()));
    }
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| sobolev_norm(&(x - y), modes, sigma))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Growth {
    Bounded { slope: f64 },
    Exponential { rate: f64, r2: f64 },
    Undecided { slope: f64, r2: f64 },
}

pub const TOL_RATE: f64 = 1e-4;
const MIN_SAMPLES: usize = 100;

/// Linear fit of log‖u(t)‖ against t.
pub fn growth_classifier(times: &[f64], norms: &[f64], tol_rate: f64) -> Growth {
    if times.len() < MIN_SAMPLES || norms.iter().any(|v| !(*v > 0.0)) {
        return Growth::Undecided {
            slope: f64::NAN,
            r2: f64::NAN,
        };
    }
    let logs: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let abs_t: Vec<f64> = times.iter().map(|t| t.abs()).collect();
    let Some(fit) = fit_line(&abs_t, &logs) else {
        return Growth::Undecided {
            slope: f64::NAN,
            r2: f64::NAN,
        };
    };
    if fit.slope.abs() < tol_rate {
        Growth::Bounded { slope: fit.slope }
    } else if fit.slope >= tol_rate && fit.r2 >= 0.99 {
        Growth::Exponential {
            rate: fit.slope,
            r2: fit.r2,
        }
    } else {
        Growth::Undecided {
            slope: fit.slope,
            r2: fit.r2,
        }
    }
}
