//! Truncated lattices Z^d, Z^n, uniform grids and discrete Fourier transforms.
//!
//! Fourier convention: for samples u(x_k) on the uniform grid x_k = 2πk/N of
//! each axis, the coefficient of mode ξ is the grid average
//! û(ξ) = (1/N_total) Σ_k u(x_k) e^{-iξ·x_k}, and synthesis is
//! u(x) = Σ_ξ û(ξ) e^{iξ·x}. With N = 2r+1 per axis the pair is a bijection.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dimensions and truncation radii. Spatial modes satisfy |j|_∞ ≤ J, angle modes |l|_∞ ≤ L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "J")]
    pub j_max: i64,
    #[serde(rename = "L")]
    pub l_max: i64,
}

impl LatticeSpec {
    pub fn new(d: usize, n: usize, j_max: i64, l_max: i64) -> Result<Self> {
        let spec = Self { d, n, j_max, l_max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::InvalidSpec("d and n must be positive".into()));
        }
        if self.j_max < 1 || self.l_max < 1 {
            return Err(Error::InvalidSpec("J and L must be at least 1".into()));
        }
        Ok(())
    }

    pub fn spatial(&self) -> ModeSet {
        ModeSet::new(self.d, self.j_max)
    }

    pub fn angles(&self) -> ModeSet {
        ModeSet::new(self.n, self.l_max)
    }

    pub fn spatial_count(&self) -> usize {
        side(self.j_max).pow(self.d as u32)
    }

    pub fn angle_count(&self) -> usize {
        side(self.l_max).pow(self.n as u32)
    }

    /// Same lattice with a different angle radius.
    pub fn with_angle_radius(&self, l_max: i64) -> Self {
        Self { l_max, ..*self }
    }

    pub fn with_spatial_radius(&self, j_max: i64) -> Self {
        Self { j_max, ..*self }
    }
}

fn side(r: i64) -> usize {
    (2 * r + 1) as usize
}

/// The hypercube {m ∈ Z^dim : |m|_∞ ≤ radius}, enumerated lexicographically
/// with the first coordinate varying slowest and each coordinate running from
/// -radius to radius.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    dim: usize,
    radius: i64,
    coords: Vec<i64>,
}

impl ModeSet {
    pub fn new(dim: usize, radius: i64) -> Self {
        let s = side(radius);
        let count = s.pow(dim as u32);
        let mut coords = Vec::with_capacity(count * dim);
        for idx in 0..count {
            let mut rem = idx;
            let start = coords.len();
            coords.resize(start + dim, 0);
            for a in (0..dim).rev() {
                coords[start + a] = (rem % s) as i64 - radius;
                rem /= s;
            }
        }
        Self { dim, radius, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn mode(&self, idx: usize) -> &[i64] {
        &self.coords[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn index_of(&self, m: &[i64]) -> Option<usize> {
        if m.len() != self.dim {
            return None;
        }
        let s = side(self.radius) as i64;
        let mut idx = 0i64;
        for &c in m {
            if c.abs() > self.radius {
                return None;
            }
            idx = idx * s + (c + self.radius);
        }
        Some(idx as usize)
    }

    /// Index of -m. The enumeration is symmetric so this is a reflection.
    pub fn neg_index(&self, idx: usize) -> usize {
        self.len() - 1 - idx
    }

    /// Index of the zero mode.
    pub fn zero_index(&self) -> usize {
        self.len() / 2
    }

    pub fn bracket(&self, idx: usize) -> f64 {
        japanese_bracket(self.mode(idx))
    }

    pub fn norm(&self, idx: usize) -> f64 {
        euclid(self.mode(idx))
    }

    pub fn sup_norm(&self, idx: usize) -> i64 {
        self.mode(idx).iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn brackets(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.bracket(i)).collect()
    }
}

/// ⟨ξ⟩ = (1 + |ξ|²)^{1/2} with the Euclidean norm.
pub fn japanese_bracket(xi: &[i64]) -> f64 {
    let s: f64 = xi.iter().map(|&c| (c as f64) * (c as f64)).sum();
    (1.0 + s).sqrt()
}

pub fn euclid(xi: &[i64]) -> f64 {
    xi.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], m: &[i64]) -> f64 {
    a.iter().zip(m).map(|(x, &c)| x * c as f64).sum()
}

/// Samples on a uniform product grid, row-major with the first axis slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub shape: Vec<usize>,
    pub values: Vec<C64>,
}

impl GridFunction {
    pub fn new(shape: Vec<usize>, values: Vec<C64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![C64::new(0.0, 0.0); len],
        }
    }

    /// Sample f at the grid points x_k = 2πk/N_a.
    pub fn from_fn(shape: Vec<usize>, f: impl Fn(&[f64]) -> C64) -> Self {
        let len: usize = shape.iter().product();
        let mut x = vec![0.0; shape.len()];
        let values = (0..len)
            .map(|idx| {
                grid_point(&shape, idx, &mut x);
                f(&x)
            })
            .collect();
        Self { shape, values }
    }

    pub fn mean_abs2(&self) -> f64 {
        crate::numeric::compensated_sum(self.values.iter().map(|v| v.norm_sqr()))
            / self.values.len() as f64
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }
}

/// Coordinates of grid point `idx` written into `x`.
pub fn grid_point(shape: &[usize], idx: usize, x: &mut [f64]) {
    let mut rem = idx;
    for a in (0..shape.len()).rev() {
        let k = rem % shape[a];
        rem /= shape[a];
        x[a] = 2.0 * std::f64::consts::PI * k as f64 / shape[a] as f64;
    }
}

/// Fourier coefficients on the box |m_a| ≤ radii[a], lexicographic order as in [`ModeSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct FourierCoeffs {
    pub radii: Vec<i64>,
    pub data: Vec<C64>,
}

impl FourierCoeffs {
    pub fn zeros(radii: Vec<i64>) -> Self {
        let len = radii.iter().map(|&r| side(r)).product();
        Self {
            radii,
            data: vec![C64::new(0.0, 0.0); len],
        }
    }

    pub fn index_of(&self, m: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (&c, &r) in m.iter().zip(&self.radii) {
            if c.abs() > r {
                return None;
            }
            idx = idx * side(r) + (c + r) as usize;
        }
        Some(idx)
    }

    pub fn get(&self, m: &[i64]) -> C64 {
        self.index_of(m)
            .map(|i| self.data[i])
            .unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn set(&mut self, m: &[i64], v: C64) {
        if let Some(i) = self.index_of(m) {
            self.data[i] = v;
        }
    }

    pub fn mode(&self, idx: usize, out: &mut [i64]) {
        let mut rem = idx;
        for a in (0..self.radii.len()).rev() {
            let s = side(self.radii[a]);
            out[a] = (rem % s) as i64 - self.radii[a];
            rem /= s;
        }
    }

    pub fn sum_abs2(&self) -> f64 {
        crate::numeric::compensated_sum(self.data.iter().map(|v| v.norm_sqr()))
    }

    /// Restriction (or zero padding) to another box.
    pub fn resized(&self, radii: &[i64]) -> Self {
        let mut out = Self::zeros(radii.to_vec());
        let mut m = vec![0i64; radii.len()];
        for idx in 0..self.data.len() {
            self.mode(idx, &mut m);
            out.set(&m, self.data[idx]);
        }
        out
    }
}

/// Multi-dimensional FFT with plans prepared once, unnormalized in both directions.
pub struct NdFft {
    shape: Vec<usize>,
    plans: Vec<Option<Arc<dyn Fft<f64>>>>,
}

impl NdFft {
    pub fn new(shape: &[usize], direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        let plans = shape
            .iter()
            .map(|&len| (len > 1).then(|| planner.plan_fft(len, direction)))
            .collect();
        Self {
            shape: shape.to_vec(),
            plans,
        }
    }

    pub fn process(&self, data: &mut [C64]) {
        let total: usize = self.shape.iter().product();
        assert_eq!(total, data.len(), "buffer does not match FFT shape");
        let mut stride = total;
        for (&len, plan) in self.shape.iter().zip(&self.plans) {
            stride /= len;
            let Some(fft) = plan else { continue };
            if stride == 1 {
                fft.process(data);
                continue;
            }
            let mut line = vec![C64::new(0.0, 0.0); len];
            let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            let block = stride * len;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (k, v) in line.iter_mut().enumerate() {
                        *v = data[base + k * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (k, v) in line.iter().enumerate() {
                        data[base + k * stride] = *v;
                    }
                }
            }
        }
    }
}

pub fn fft_nd(data: &mut [C64], shape: &[usize], direction: FftDirection) {
    NdFft::new(shape, direction).process(data);
}

fn wrap(c: i64, n: usize) -> usize {
    c.rem_euclid(n as i64) as usize
}

/// Grid average transform restricted to the box `radii`. Needs N_a ≥ 2 r_a + 1.
pub fn dft_forward(f: &GridFunction, radii: &[i64]) -> Result<FourierCoeffs> {
    check_grid(&f.shape, radii)?;
    let mut buf = f.values.clone();
    fft_nd(&mut buf, &f.shape, FftDirection::Forward);
    let scale = 1.0 / buf.len() as f64;
    let mut out = FourierCoeffs::zeros(radii.to_vec());
    let mut m = vec![0i64; radii.len()];
    for idx in 0..out.data.len() {
        out.mode(idx, &mut m);
        out.data[idx] = buf[flat_wrapped(&m, &f.shape)] * scale;
    }
    Ok(out)
}

/// Synthesis of the trigonometric polynomial on a grid of the given shape.
pub fn dft_inverse(c: &FourierCoeffs, shape: &[usize]) -> Result<GridFunction> {
    check_grid(shape, &c.radii)?;
    let total: usize = shape.iter().product();
    let mut buf = vec![C64::new(0.0, 0.0); total];
    let mut m = vec![0i64; c.radii.len()];
    for idx in 0..c.data.len() {
        c.mode(idx, &mut m);
        buf[flat_wrapped(&m, shape)] += c.data[idx];
    }
    fft_nd(&mut buf, shape, FftDirection::Inverse);
    Ok(GridFunction {
        shape: shape.to_vec(),
        values: buf,
    })
}

fn flat_wrapped(m: &[i64], shape: &[usize]) -> usize {
    m.iter()
        .zip(shape)
        .fold(0usize, |acc, (&c, &n)| acc * n + wrap(c, n))
}

fn check_grid(shape: &[usize], radii: &[i64]) -> Result<()> {
    if shape.len() != radii.len() {
        return Err(Error::SizeMismatch {
            expected: radii.len(),
            found: shape.len(),
        });
    }
    for (&n, &r) in shape.iter().zip(radii) {
        if n < side(r) {
            return Err(Error::SizeMismatch {
                expected: side(r),
                found: n,
            });
        }
    }
    Ok(())
}

/// Product of two trigonometric polynomials restricted to `out_radii`,
/// computed on a grid large enough that no alias lands inside the kept box.
pub fn multiply_dealiased(a: &FourierCoeffs, b: &FourierCoeffs, out_radii: &[i64]) -> FourierCoeffs {
    let shape: Vec<usize> = a
        .radii
        .iter()
        .zip(&b.radii)
        .zip(out_radii)
        .map(|((&ra, &rb), &ro)| ((ra + rb + ro + 1) as usize).max(side(ro)).max(side(ra)).max(side(rb)))
        .collect();
    let fa = dft_inverse(a, &shape).expect("grid sized for operand");
    let fb = dft_inverse(b, &shape).expect("grid sized for operand");
    let prod = GridFunction {
        shape: shape.clone(),
        values: fa.values.iter().zip(&fb.values).map(|(x, y)| x * y).collect(),
    };
    dft_forward(&prod, out_radii).expect("grid sized for output")
}
