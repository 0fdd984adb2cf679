//! Straightening of the transport field by a quasi-periodic torus diffeomorphism
//! x ↦ x + α(φ, x), so that the pushed field becomes a constant ν0.
//!
//! With u(t, x) = v(t, x + α(ωt, x)) the new field is
//! ν + εV + (ν + εV)·∇α − ω·∂_φα, read at x = y + α̃(φ, y).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    dft_forward, dft_inverse, dot, grid_point, japanese_bracket, FourierCoeffs, GridFunction, LatticeSpec,
    ModeSet, NdFft, C64,
};
use crate::model::TrigSeries;
use crate::operator::{CMat, QPOperator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub ok: bool,
    /// min over the scanned set of |ω·l + ν0·j| − γ/⟨(l, j)⟩^τ.
    pub margin: f64,
    pub worst_l: Vec<i64>,
    pub worst_j: Vec<i64>,
}

/// Scan (l, j) ≠ 0 with |l|_∞ ≤ l_max, |j|_∞ ≤ j_max for |ω·l + ν0·j| > γ/⟨(l, j)⟩^τ.
pub fn diophantine_check(omega: &[f64], nu0: &[f64], gamma: f64, tau: f64, l_max: i64, j_max: i64) -> DiophantineReport {
    let ls = ModeSet::new(omega.len(), l_max);
    let js = ModeSet::new(nu0.len(), j_max);
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for li in 0..ls.len() {
        let l = ls.mode(li);
        let wl = dot(omega, l);
        let l2: i64 = l.iter().map(|c| c * c).sum();
        for ji in 0..js.len() {
            if li == ls.zero_index() && ji == js.zero_index() {
                continue;
            }
            let j = js.mode(ji);
            let j2: i64 = j.iter().map(|c| c * c).sum();
            let bracket = ((1 + l2 + j2) as f64).sqrt();
            let margin = (wl + dot(nu0, j)).abs() - gamma / bracket.powf(tau);
            if margin < best.0 {
                best = (margin, li, ji);
            }
        }
    }
    DiophantineReport {
        ok: best.0 > 0.0,
        margin: best.0,
        worst_l: ls.mode(best.1).to_vec(),
        worst_j: js.mode(best.2).to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StraightenOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Refuse to start when ε/γ exceeds this.
    pub max_eps_over_gamma: f64,
}

impl Default for StraightenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            max_eps_over_gamma: 0.5,
        }
    }
}

/// x ↦ x + α(φ, x) with inverse y ↦ y + α̃(φ, y); one coefficient box per component,
/// angle axes first, radii (L, J).
#[derive(Debug, Clone, PartialEq)]
pub struct Diffeomorphism {
    pub spec: LatticeSpec,
    pub alpha: Vec<FourierCoeffs>,
    pub alpha_inv: Vec<FourierCoeffs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// u(x) ↦ u(x + α(φ, x))
    Forward,
    /// u(y) ↦ u(y + α̃(φ, y))
    Inverse,
}

fn box_radii(spec: &LatticeSpec) -> Vec<i64> {
    std::iter::repeat_n(spec.l_max, spec.n)
        .chain(std::iter::repeat_n(spec.j_max, spec.d))
        .collect()
}

fn doubled_shape(radii: &[i64]) -> Vec<usize> {
    radii.iter().map(|&r| (2 * (2 * r + 1)) as usize).collect()
}

/// A displacement frozen at one angle, ready for pointwise evaluation in x.
struct Slice {
    modes: ModeSet,
    coeffs: Vec<Vec<C64>>,
}

impl Slice {
    fn new(spec: &LatticeSpec, field: &[FourierCoeffs], phi: &[f64]) -> Self {
        let modes = spec.spatial();
        let ang = spec.angles();
        let ks = modes.len();
        let coeffs = field
            .iter()
            .map(|co| {
                let mut out = vec![C64::new(0.0, 0.0); ks];
                for li in 0..ang.len() {
                    let ph = C64::from_polar(1.0, dot(phi, ang.mode(li)));
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += co.data[li * ks + k] * ph;
                    }
                }
                out
            })
            .collect();
        Self { modes, coeffs }
    }

    /// Values and Jacobian rows ∂_b of every component at x.
    fn eval(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = x.len();
        let phases: Vec<C64> = self
            .modes
            .iter()
            .map(|k| C64::from_polar(1.0, dot(x, k)))
            .collect();
        let mut vals = vec![0.0; self.coeffs.len()];
        let mut grads = vec![vec![0.0; d]; self.coeffs.len()];
        for (c, co) in self.coeffs.iter().enumerate() {
            for (ki, k) in self.modes.iter().enumerate() {
                let t = co[ki] * phases[ki];
                vals[c] += t.re;
                for b in 0..d {
                    // ∂_b e^{ik·x} = i k_b e^{ik·x}
                    grads[c][b] -= k[b] as f64 * t.im;
                }
            }
        }
        (vals, grads)
    }
}

impl Diffeomorphism {
    pub fn identity(spec: LatticeSpec) -> Self {
        let zero = vec![FourierCoeffs::zeros(box_radii(&spec)); spec.d];
        Self {
            spec,
            alpha: zero.clone(),
            alpha_inv: zero,
        }
    }

    pub fn from_displacement(spec: LatticeSpec, alpha: Vec<FourierCoeffs>) -> Result<Self> {
        let alpha_inv = invert_displacement(&spec, &alpha)?;
        Ok(Self {
            spec,
            alpha,
            alpha_inv,
        })
    }

    fn field(&self, direction: Direction) -> &[FourierCoeffs] {
        match direction {
            Direction::Forward => &self.alpha,
            Direction::Inverse => &self.alpha_inv,
        }
    }

    /// Displacement (α or α̃) at one point.
    pub fn displacement(&self, direction: Direction, phi: &[f64], x: &[f64]) -> Vec<f64> {
        Slice::new(&self.spec, self.field(direction), phi).eval(x).0
    }

    /// sup over the doubled grid of the ∞-norm of ∇α.
    pub fn max_gradient(&self) -> f64 {
        max_gradient(&self.spec, &self.alpha)
    }

    /// sup over a grid of |x + α(x) + α̃(x + α(x)) − x|.
    pub fn roundtrip_defect(&self) -> f64 {
        let spec = self.spec;
        let shape = doubled_shape(&box_radii(&spec));
        let (n, d) = (spec.n, spec.d);
        let ang_shape = &shape[..n];
        let sp_shape = &shape[n..];
        let ang_points: usize = ang_shape.iter().product();
        let sp_points: usize = sp_shape.iter().product();
        (0..ang_points)
            .into_par_iter()
            .map(|ai| {
                let mut phi = vec![0.0; n];
                grid_point(ang_shape, ai, &mut phi);
                let fwd = Slice::new(&spec, &self.alpha, &phi);
                let inv = Slice::new(&spec, &self.alpha_inv, &phi);
                let mut x = vec![0.0; d];
                let mut worst = 0.0f64;
                for si in 0..sp_points {
                    grid_point(sp_shape, si, &mut x);
                    let a = fwd.eval(&x).0;
                    let y: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
                    let b = inv.eval(&y).0;
                    for c in 0..d {
                        worst = worst.max((y[c] + b[c] - x[c]).abs());
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }
}

fn max_gradient(spec: &LatticeSpec, alpha: &[FourierCoeffs]) -> f64 {
    let radii = box_radii(spec);
    let shape = doubled_shape(&radii);
    let (n, d) = (spec.n, spec.d);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for co in alpha {
        for b in 0..d {
            let g = spatial_derivative(co, n, b);
            let vals = dft_inverse(&g, &shape).expect("doubled grid");
            rows.push(vals.values.iter().map(|v| v.re).collect());
        }
    }
    let points: usize = shape.iter().product();
    (0..points)
        .map(|p| {
            (0..alpha.len())
                .map(|c| (0..d).map(|b| rows[c * d + b][p].abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn spatial_derivative(co: &FourierCoeffs, n: usize, b: usize) -> FourierCoeffs {
    let mut out = co.clone();
    let mut m = vec![0i64; co.radii.len()];
    for i in 0..out.data.len() {
        co.mode(i, &mut m);
        out.data[i] *= C64::new(0.0, m[n + b] as f64);
    }
    out
}

fn angle_derivative(co: &FourierCoeffs, omega: &[f64]) -> FourierCoeffs {
    let mut out = co.clone();
    let mut m = vec![0i64; co.radii.len()];
    for i in 0..out.data.len() {
        co.mode(i, &mut m);
        out.data[i] *= C64::new(0.0, dot(omega, &m[..omega.len()]));
    }
    out
}

/// Inverse displacement by Newton's method at every point of a doubled grid,
/// projected back onto the (L, J) coefficient box.
pub fn invert_displacement(spec: &LatticeSpec, alpha: &[FourierCoeffs]) -> Result<Vec<FourierCoeffs>> {
    let g = max_gradient(spec, alpha);
    if !(g < 1.0) {
        return Err(Error::Jacobian(g));
    }
    let radii = box_radii(spec);
    let shape = doubled_shape(&radii);
    let (n, d) = (spec.n, spec.d);
    let ang_shape = shape[..n].to_vec();
    let sp_shape = shape[n..].to_vec();
    let ang_points: usize = ang_shape.iter().product();
    let sp_points: usize = sp_shape.iter().product();
    let per_angle: Vec<Result<Vec<Vec<f64>>>> = (0..ang_points)
        .into_par_iter()
        .map(|ai| {
            let mut phi = vec![0.0; n];
            grid_point(&ang_shape, ai, &mut phi);
            let slice = Slice::new(spec, alpha, &phi);
            let mut y = vec![0.0; d];
            let mut out = vec![vec![0.0; sp_points]; d];
            for si in 0..sp_points {
                grid_point(&sp_shape, si, &mut y);
                let x = newton_preimage(&slice, &y)?;
                for c in 0..d {
                    out[c][si] = x[c] - y[c];
                }
            }
            Ok(out)
        })
        .collect();
    let mut samples = vec![vec![C64::new(0.0, 0.0); ang_points * sp_points]; d];
    for (ai, res) in per_angle.into_iter().enumerate() {
        let vals = res?;
        for c in 0..d {
            for si in 0..sp_points {
                samples[c][ai * sp_points + si] = C64::new(vals[c][si], 0.0);
            }
        }
    }
    samples
        .into_iter()
        .map(|values| dft_forward(&GridFunction::new(shape.clone(), values)?, &radii))
        .collect()
}

/// Solve x + α(x) = y.
fn newton_preimage(slice: &Slice, y: &[f64]) -> Result<Vec<f64>> {
    let d = y.len();
    let a0 = slice.eval(y).0;
    let mut x: Vec<f64> = y.iter().zip(&a0).map(|(y, a)| y - a).collect();
    for _ in 0..60 {
        let (a, grad) = slice.eval(&x);
        let f: Vec<f64> = (0..d).map(|c| x[c] + a[c] - y[c]).collect();
        let fmax = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if fmax <= 1e-15 {
            return Ok(x);
        }
        let jac = DMatrix::from_fn(d, d, |r, c| grad[r][c] + if r == c { 1.0 } else { 0.0 });
        let step = jac
            .lu()
            .solve(&DVector::from_vec(f))
            .ok_or_else(|| Error::Numerical("singular Jacobian in inversion".into()))?;
        for c in 0..d {
            x[c] -= step[c];
        }
        if step.amax() <= 1e-16 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        what: "pointwise Newton inversion",
        iterations: 60,
        residual: f64::NAN,
    })
}

/// Matrix of A(φ): u ↦ u(x + α(φ, x)) (or the inverse map), entries
/// A(φ)_j^{j'} = avg_x e^{ij'·(x + α)} e^{-ij·x}, followed by an angle transform.
pub fn composition_operator(diffeo: &Diffeomorphism, direction: Direction) -> QPOperator {
    let spec = diffeo.spec;
    let field = diffeo.field(direction);
    let (n, d) = (spec.n, spec.d);
    let ang_side = (2 * (2 * spec.l_max + 1)) as usize;
    let ang_shape = vec![ang_side; n];
    let quad = ((4 * (2 * spec.j_max + 1)) as usize).next_power_of_two();
    let sp_shape = vec![quad; d];
    let sp_points: usize = sp_shape.iter().product();
    let modes = spec.spatial();
    let sp_radii = vec![spec.j_max; d];
    let ang_points: usize = ang_shape.iter().product();
    let fft = NdFft::new(&sp_shape, FftDirection::Forward);
    let mats: Vec<CMat> = (0..ang_points)
        .into_par_iter()
        .map(|ai| {
            let mut phi = vec![0.0; n];
            grid_point(&ang_shape, ai, &mut phi);
            // displaced grid points x + α(φ, x)
            let slice_co: Vec<FourierCoeffs> = field
                .iter()
                .map(|co| {
                    let s = Slice::new(&spec, std::slice::from_ref(co), &phi);
                    FourierCoeffs {
                        radii: sp_radii.clone(),
                        data: s.coeffs.into_iter().next().unwrap(),
                    }
                })
                .collect();
            let disp: Vec<Vec<f64>> = slice_co
                .iter()
                .map(|c| {
                    dft_inverse(c, &sp_shape)
                        .expect("quadrature grid")
                        .values
                        .iter()
                        .map(|v| v.re)
                        .collect()
                })
                .collect();
            let mut x = vec![0.0; d];
            let moved: Vec<Vec<f64>> = (0..sp_points)
                .map(|p| {
                    grid_point(&sp_shape, p, &mut x);
                    (0..d).map(|c| x[c] + disp[c][p]).collect()
                })
                .collect();
            let mut mat = CMat::zeros(modes.len(), modes.len());
            let mut buf = vec![C64::new(0.0, 0.0); sp_points];
            for (col, jp) in modes.iter().enumerate() {
                for (b, y) in buf.iter_mut().zip(&moved) {
                    *b = C64::from_polar(1.0, dot(y, jp));
                }
                fft.process(&mut buf);
                for (row, j) in modes.iter().enumerate() {
                    let idx = j
                        .iter()
                        .zip(&sp_shape)
                        .fold(0usize, |acc, (&c, &s)| acc * s + c.rem_euclid(s as i64) as usize);
                    mat[(row, col)] = buf[idx] / sp_points as f64;
                }
            }
            mat
        })
        .collect();
    QPOperator::from_angle_samples(spec, ang_side, &mats).expect("angle grid sized for L")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StraighteningResult {
    pub nu0: Vec<f64>,
    pub diffeo: Diffeomorphism,
    /// sup-norm on the doubled grid of the pushed field minus ν0.
    pub residual: f64,
    pub iterations: usize,
    pub diophantine: DiophantineReport,
    /// |ν0 − ν| / ε (0 when ε = 0).
    pub shift_constant: f64,
    pub residual_history: Vec<f64>,
}

/// Picard iteration on (α, ν0): ν0 is the mean of the current pushed field and α
/// is corrected by inverting ν0·∇ − ω·∂_φ on the defect.
#[allow(clippy::too_many_arguments)]
pub fn solve_straightening(
    spec: LatticeSpec,
    v: &TrigSeries,
    omega: &[f64],
    nu: &[f64],
    eps: f64,
    gamma: f64,
    tau: f64,
    opts: &StraightenOptions,
) -> Result<StraighteningResult> {
    let (n, d) = (spec.n, spec.d);
    if omega.len() != n || nu.len() != d {
        return Err(Error::Config("omega/nu dimensions do not match the lattice".into()));
    }
    v.validate(n, d, d)?;
    let radii = box_radii(&spec);
    let vr = v.radii(n, d);
    if vr.iter().zip(&radii).any(|(a, b)| a > b) {
        return Err(Error::Config("V has modes outside the lattice".into()));
    }
    if eps / gamma > opts.max_eps_over_gamma {
        return Err(Error::Config(format!(
            "eps/gamma = {:.3e} exceeds the straightening threshold {:.3e}",
            eps / gamma,
            opts.max_eps_over_gamma
        )));
    }
    let shape = doubled_shape(&radii);
    let points: usize = shape.iter().product();
    let v_grid: Vec<Vec<f64>> = (0..d)
        .map(|c| {
            dft_inverse(&v.coefficients(c, &radii), &shape)
                .expect("doubled grid")
                .values
                .iter()
                .map(|z| z.re)
                .collect()
        })
        .collect();
    let mut alpha = vec![FourierCoeffs::zeros(radii.clone()); d];
    let mut history = Vec::new();
    let mut nu0: Vec<f64>;
    let mut m = vec![0i64; n + d];
    for iter in 0..=opts.max_iter {
        // pushed field on the grid
        let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(d);
        let mut dphi: Vec<Vec<f64>> = Vec::with_capacity(d);
        for co in &alpha {
            grads.push(
                (0..d)
                    .map(|b| real_grid(&spatial_derivative(co, n, b), &shape))
                    .collect(),
            );
            dphi.push(real_grid(&angle_derivative(co, omega), &shape));
        }
        let field: Vec<Vec<f64>> = (0..d)
            .map(|c| {
                (0..points)
                    .map(|p| {
                        let mut f = nu[c] + eps * v_grid[c][p] - dphi[c][p];
                        for b in 0..d {
                            f += (nu[b] + eps * v_grid[b][p]) * grads[c][b][p];
                        }
                        f
                    })
                    .collect()
            })
            .collect();
        nu0 = field
            .iter()
            .map(|f| crate::numeric::compensated_sum(f.iter().copied()) / points as f64)
            .collect();
        let residual = field
            .iter()
            .zip(&nu0)
            .flat_map(|(f, m)| f.iter().map(move |x| (x - m).abs()))
            .fold(0.0, f64::max);
        history.push(residual);
        if residual <= opts.tol {
            let diophantine = diophantine_check(omega, &nu0, gamma, tau, spec.l_max, spec.j_max);
            let diffeo = Diffeomorphism::from_displacement(spec, alpha)?;
            let shift = nu0.iter().zip(nu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            return Ok(StraighteningResult {
                nu0,
                diffeo,
                residual,
                iterations: iter,
                diophantine,
                shift_constant: if eps > 0.0 { shift / eps } else { 0.0 },
                residual_history: history,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        for c in 0..d {
            let defect = GridFunction::new(
                shape.clone(),
                field[c].iter().map(|x| C64::new(x - nu0[c], 0.0)).collect(),
            )?;
            let r = dft_forward(&defect, &radii)?;
            for i in 0..r.data.len() {
                r.mode(i, &mut m);
                if m.iter().all(|&x| x == 0) {
                    continue;
                }
                let (l, j) = m.split_at(n);
                // divisor of ν0·∇ − ω·∂_φ on e^{i(l·φ + j·x)}, i.e. i(ω·(−l) + ν0·j)
                let div = dot(&nu0, j) - dot(omega, l);
                let bound = gamma / japanese_bracket(&m).powf(tau);
                if div.abs() <= bound {
                    return Err(Error::Diophantine {
                        l: l.iter().map(|x| -x).collect(),
                        j: j.to_vec(),
                        divisor: div.abs(),
                        bound,
                    });
                }
                alpha[c].data[i] -= r.data[i] / C64::new(0.0, div);
            }
        }
    }
    Err(Error::NoConvergence {
        what: "straightening",
        iterations: opts.max_iter,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

fn real_grid(co: &FourierCoeffs, shape: &[usize]) -> Vec<f64> {
    dft_inverse(co, shape)
        .expect("doubled grid")
        .values
        .iter()
        .map(|v| v.re)
        .collect()
}

/// Direct check of the straightened field: at points (φ, y) of a grid, locate
/// x with x + α(φ, x) = y by Newton and evaluate ν + εV + (ν+εV)·∇α − ω·∂_φα
/// there by explicit trigonometric sums. Returns sup |field − ν0|.
pub fn pushed_field_defect(
    res: &StraighteningResult,
    v: &TrigSeries,
    omega: &[f64],
    nu: &[f64],
    eps: f64,
    samples_per_axis: usize,
) -> Result<f64> {
    let spec = res.diffeo.spec;
    let (n, d) = (spec.n, spec.d);
    let shape = vec![samples_per_axis; n + d];
    let points: usize = shape.iter().product();
    let alpha = &res.diffeo.alpha;
    let dphi: Vec<FourierCoeffs> = alpha.iter().map(|co| angle_derivative(co, omega)).collect();
    let results: Vec<Result<f64>> = (0..points)
        .into_par_iter()
        .map(|p| {
            let mut z = vec![0.0; n + d];
            grid_point(&shape, p, &mut z);
            // shift off the solver grid
            for v in z.iter_mut() {
                *v += 0.123;
            }
            let (phi, y) = z.split_at(n);
            let slice = Slice::new(&spec, alpha, phi);
            let x = newton_preimage(&slice, y)?;
            let (_, grad) = slice.eval(&x);
            let dslice = Slice::new(&spec, &dphi, phi);
            let (dp, _) = dslice.eval(&x);
            let mut worst = 0.0f64;
            for c in 0..d {
                let mut f = nu[c] + eps * v.value(c, phi, &x) - dp[c];
                for b in 0..d {
                    f += (nu[b] + eps * v.value(b, phi, &x)) * grad[c][b];
                }
                worst = worst.max((f - res.nu0[c]).abs());
            }
            Ok(worst)
        })
        .collect();
    results.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
}
