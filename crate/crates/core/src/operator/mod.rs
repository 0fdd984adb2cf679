//! Quasi-periodic operators: one complex matrix per angle-Fourier index.
//!
//! Block `l` of an operator R holds R̂(l), so that R(φ) = Σ_l R̂(l) e^{il·φ}.
//! Rows are indexed by the output mode j, columns by the input mode j'.

mod io;
mod norms;
mod structure;

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::FftDirection;

use crate::error::{Error, Result};
use crate::lattice::{dot, LatticeSpec, ModeSet, NdFft, C64};

pub use io::OperatorRecord;
pub use norms::{beta_norm, grad_weight, hs_norm, m_norm, s0, NormProfile};
pub use structure::{check_structure, estimate_order, OrderFit, StructureFlags, STRUCTURE_TOL};

pub type CMat = DMatrix<C64>;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct QPOperator {
    spec: LatticeSpec,
    blocks: Vec<CMat>,
}

impl QPOperator {
    pub fn zeros(spec: LatticeSpec) -> Self {
        let dim = spec.spatial_count();
        Self {
            spec,
            blocks: vec![CMat::zeros(dim, dim); spec.angle_count()],
        }
    }

    /// Angle-independent identity.
    pub fn identity(spec: LatticeSpec) -> Self {
        Self::diagonal(spec, &vec![ONE; spec.spatial_count()])
    }

    /// Angle-independent Fourier multiplier with the given symbol per spatial mode.
    pub fn diagonal(spec: LatticeSpec, symbol: &[C64]) -> Self {
        let mut op = Self::zeros(spec);
        let zero = spec.angles().zero_index();
        for (i, &v) in symbol.iter().enumerate() {
            op.blocks[zero][(i, i)] = v;
        }
        op
    }

    pub fn from_blocks(spec: LatticeSpec, blocks: Vec<CMat>) -> Result<Self> {
        if blocks.len() != spec.angle_count() {
            return Err(Error::SizeMismatch {
                expected: spec.angle_count(),
                found: blocks.len(),
            });
        }
        let dim = spec.spatial_count();
        for b in &blocks {
            if b.nrows() != dim || b.ncols() != dim {
                return Err(Error::SizeMismatch {
                    expected: dim,
                    found: b.nrows().max(b.ncols()),
                });
            }
        }
        Ok(Self { spec, blocks })
    }

    /// Build entry by entry from (l, j, j') mode coordinates.
    pub fn from_fn(spec: LatticeSpec, f: impl Fn(&[i64], &[i64], &[i64]) -> C64 + Sync) -> Self {
        let ang = spec.angles();
        let sp = spec.spatial();
        let dim = sp.len();
        let blocks = (0..ang.len())
            .into_par_iter()
            .map(|li| CMat::from_fn(dim, dim, |r, c| f(ang.mode(li), sp.mode(r), sp.mode(c))))
            .collect();
        Self { spec, blocks }
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.spatial_count()
    }

    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [CMat] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<CMat> {
        self.blocks
    }

    pub fn block(&self, l: &[i64]) -> Option<&CMat> {
        self.spec.angles().index_of(l).map(|i| &self.blocks[i])
    }

    pub fn block_mut(&mut self, l: &[i64]) -> Option<&mut CMat> {
        let idx = self.spec.angles().index_of(l)?;
        Some(&mut self.blocks[idx])
    }

    /// Entry R̂(l)_j^{j'}, zero outside the truncation.
    pub fn entry(&self, l: &[i64], j: &[i64], jp: &[i64]) -> C64 {
        let sp = self.spec.spatial();
        match (self.block(l), sp.index_of(j), sp.index_of(jp)) {
            (Some(b), Some(r), Some(c)) => b[(r, c)],
            _ => ZERO,
        }
    }

    pub fn set_entry(&mut self, l: &[i64], j: &[i64], jp: &[i64], v: C64) {
        let sp = self.spec.spatial();
        if let (Some(r), Some(c)) = (sp.index_of(j), sp.index_of(jp)) {
            if let Some(b) = self.block_mut(l) {
                b[(r, c)] = v;
            }
        }
    }

    /// Diagonal of the l = 0 block.
    pub fn zero_block_diagonal(&self) -> Vec<C64> {
        let b = &self.blocks[self.spec.angles().zero_index()];
        (0..b.nrows()).map(|i| b[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| *v == ZERO))
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            spec: self.spec,
            blocks: self.blocks.iter().map(|b| b * c).collect(),
        }
    }

    /// ω·∂_φ acting on the angle dependence: block l is multiplied by iω·l.
    pub fn omega_derivative(&self, omega: &[f64]) -> Self {
        let ang = self.spec.angles();
        Self {
            spec: self.spec,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(li, b)| b * C64::new(0.0, dot(omega, ang.mode(li))))
                .collect(),
        }
    }

    /// [D, R] for an angle-independent diagonal D: entry (j, j') scaled by d_j - d_{j'}.
    pub fn diag_commutator(&self, d: &[C64]) -> Self {
        Self {
            spec: self.spec,
            blocks: self
                .blocks
                .iter()
                .map(|b| CMat::from_fn(b.nrows(), b.ncols(), |r, c| (d[r] - d[c]) * b[(r, c)]))
                .collect(),
        }
    }

    /// Add an angle-independent diagonal.
    pub fn add_diagonal(&mut self, d: &[C64]) {
        let zero = self.spec.angles().zero_index();
        for (i, v) in d.iter().enumerate() {
            self.blocks[zero][(i, i)] += *v;
        }
    }

    /// Blockwise conjugate transpose with angle index negation, the pointwise adjoint in φ.
    pub fn adjoint(&self) -> Self {
        let ang = self.spec.angles();
        Self {
            spec: self.spec,
            blocks: (0..self.blocks.len())
                .map(|li| self.blocks[ang.neg_index(li)].adjoint())
                .collect(),
        }
    }

    /// Keep blocks with |l| ≤ N and entries with |j - j'| < N (Euclidean norms).
    /// Returns (Π_N R, R - Π_N R).
    pub fn cutoff(&self, n_cut: f64) -> (Self, Self) {
        let ang = self.spec.angles();
        let sp = self.spec.spatial();
        let d = self.spec.d;
        let mut low = Self::zeros(self.spec);
        let mut high = Self::zeros(self.spec);
        let mut diff = vec![0i64; d];
        for li in 0..ang.len() {
            let keep_l = ang.norm(li) <= n_cut;
            let b = &self.blocks[li];
            for c in 0..b.ncols() {
                for r in 0..b.nrows() {
                    let v = b[(r, c)];
                    for a in 0..d {
                        diff[a] = sp.mode(r)[a] - sp.mode(c)[a];
                    }
                    if keep_l && crate::lattice::euclid(&diff) < n_cut {
                        low.blocks[li][(r, c)] = v;
                    } else {
                        high.blocks[li][(r, c)] = v;
                    }
                }
            }
        }
        (low, high)
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        let g = GridOperator::pair(self, other)?;
        Ok(g.commutator())
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        Ok(self.compose_with_tail(other)?.op)
    }

    /// Product with angle convolution, clipped to |l|_∞ ≤ L; the clipped part is reported.
    pub fn compose_with_tail(&self, other: &Self) -> Result<Product> {
        let g = GridOperator::pair(self, other)?;
        Ok(g.product())
    }

    /// Reference implementation of the clipped product by explicit block convolution.
    pub fn compose_direct(&self, other: &Self) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch);
        }
        let ang = self.spec.angles();
        let n = self.spec.n;
        let blocks = (0..ang.len())
            .into_par_iter()
            .map(|li| {
                let l = ang.mode(li);
                let mut acc = CMat::zeros(self.dim(), self.dim());
                let mut diff = vec![0i64; n];
                for lp in 0..ang.len() {
                    for a in 0..n {
                        diff[a] = l[a] - ang.mode(lp)[a];
                    }
                    if let Some(ld) = ang.index_of(&diff) {
                        acc += &self.blocks[ld] * &other.blocks[lp];
                    }
                }
                acc
            })
            .collect();
        Ok(Self {
            spec: self.spec,
            blocks,
        })
    }

    /// Φ^{-1} - Id for Φ = Id + X through the Neumann series Σ_{n≥1} (-X)^n.
    pub fn neumann_inverse(&self, tol: f64) -> Result<NeumannInverse> {
        const MAX_TERMS: usize = 200;
        let guard = m_norm(self, &NormProfile::new(s0(self.spec.n), 0.0, 0.0, 0.0));
        if !(guard < 1.0) {
            return Err(Error::NeumannGuard { norm: guard });
        }
        let minus_x = -self;
        let mut sum = minus_x.clone();
        let mut term = minus_x.clone();
        let plain = NormProfile::default();
        let mut terms = 1;
        loop {
            let tn = m_norm(&term, &plain);
            let sn = m_norm(&sum, &plain);
            if tn <= tol * sn.max(f64::MIN_POSITIVE) || tn == 0.0 {
                break;
            }
            if terms >= MAX_TERMS {
                return Err(Error::NoConvergence {
                    what: "Neumann series",
                    iterations: terms,
                    residual: tn,
                });
            }
            // left multiplication keeps (Id + X)(Id + S) = Id exact under clipping
            term = minus_x.compose(&term)?;
            sum += &term;
            terms += 1;
        }
        let prod = self.compose(&sum)?;
        let residual_op = &(self + &sum) + &prod;
        let residual = m_norm(&residual_op, &plain);
        Ok(NeumannInverse {
            correction: sum,
            terms,
            residual,
        })
    }

    /// Apply R(φ) at one angle to a vector of spatial coefficients.
    pub fn apply_at(&self, phi: &[f64], u: &nalgebra::DVector<C64>) -> nalgebra::DVector<C64> {
        self.evaluate(phi) * u
    }

    /// The matrix R(φ) = Σ_l R̂(l) e^{il·φ}.
    pub fn evaluate(&self, phi: &[f64]) -> CMat {
        let ang = self.spec.angles();
        let mut out = CMat::zeros(self.dim(), self.dim());
        for (li, b) in self.blocks.iter().enumerate() {
            let ph = C64::from_polar(1.0, dot(phi, ang.mode(li)));
            out.zip_apply(b, |o, v| *o += v * ph);
        }
        out
    }

    /// Same operator on a lattice with another angle radius (padding or clipping).
    pub fn with_angle_radius(&self, l_max: i64) -> Self {
        let spec = self.spec.with_angle_radius(l_max);
        let old = self.spec.angles();
        let new = spec.angles();
        let mut out = Self::zeros(spec);
        for li in 0..new.len() {
            if let Some(oi) = old.index_of(new.mode(li)) {
                out.blocks[li] = self.blocks[oi].clone();
            }
        }
        out
    }
}

/// Result of a clipped product: the kept part and the m-norm (s = 0, σ = 0) of the dropped tail.
#[derive(Debug, Clone)]
pub struct Product {
    pub op: QPOperator,
    pub dropped: f64,
}

#[derive(Debug, Clone)]
pub struct NeumannInverse {
    pub correction: QPOperator,
    pub terms: usize,
    pub residual: f64,
}

/// Two operators sampled on a common angle grid with 4L+1 points per axis,
/// fine enough to hold their full product without aliasing.
struct GridOperator {
    spec: LatticeSpec,
    a: Vec<CMat>,
    b: Vec<CMat>,
}

impl GridOperator {
    fn pair(x: &QPOperator, y: &QPOperator) -> Result<Self> {
        if x.spec != y.spec {
            return Err(Error::SpecMismatch);
        }
        Ok(Self {
            spec: x.spec,
            a: to_angle_grid(x),
            b: to_angle_grid(y),
        })
    }

    fn product(&self) -> Product {
        let mats: Vec<CMat> = self.a.par_iter().zip(&self.b).map(|(x, y)| x * y).collect();
        from_angle_grid(&self.spec, &mats)
    }

    fn commutator(&self) -> QPOperator {
        let mats: Vec<CMat> = self
            .a
            .par_iter()
            .zip(&self.b)
            .map(|(x, y)| x * y - y * x)
            .collect();
        from_angle_grid(&self.spec, &mats).op
    }
}

fn product_grid_side(spec: &LatticeSpec) -> usize {
    (4 * spec.l_max + 1) as usize
}

impl QPOperator {
    /// Samples R(φ) on the uniform angle grid with `side` points per axis.
    pub fn to_angle_samples(&self, side: usize) -> Vec<CMat> {
        to_angle_grid_sized(self, side)
    }

    /// Inverse of [`QPOperator::to_angle_samples`]: grid averages against e^{-il·φ}
    /// for |l|_∞ ≤ L. Harmonics beyond the grid's resolution alias.
    pub fn from_angle_samples(spec: LatticeSpec, side: usize, mats: &[CMat]) -> Result<Self> {
        let expected = side.pow(spec.n as u32);
        if mats.len() != expected || side < (2 * spec.l_max + 1) as usize {
            return Err(Error::SizeMismatch {
                expected,
                found: mats.len(),
            });
        }
        Ok(from_angle_grid_sized(&spec, side, mats, false).op)
    }
}

fn to_angle_grid(op: &QPOperator) -> Vec<CMat> {
    to_angle_grid_sized(op, product_grid_side(&op.spec))
}

fn to_angle_grid_sized(op: &QPOperator, g: usize) -> Vec<CMat> {
    let spec = op.spec;
    let shape = vec![g; spec.n];
    let points: usize = shape.iter().product();
    let dim = op.dim();
    let ang = spec.angles();
    let slots: Vec<usize> = ang.iter().map(|l| wrapped_index(l, &shape)).collect();
    let fft = NdFft::new(&shape, FftDirection::Inverse);
    let mut lines = vec![ZERO; dim * dim * points];
    lines
        .par_chunks_mut(points)
        .enumerate()
        .for_each(|(e, line)| {
            let (r, c) = (e % dim, e / dim);
            for (li, b) in op.blocks.iter().enumerate() {
                line[slots[li]] = b[(r, c)];
            }
            fft.process(line);
        });
    (0..points)
        .into_par_iter()
        .map(|p| CMat::from_fn(dim, dim, |r, c| lines[(c * dim + r) * points + p]))
        .collect()
}

fn from_angle_grid(spec: &LatticeSpec, mats: &[CMat]) -> Product {
    from_angle_grid_sized(spec, product_grid_side(spec), mats, true)
}

fn from_angle_grid_sized(spec: &LatticeSpec, g: usize, mats: &[CMat], with_tail: bool) -> Product {
    let shape = vec![g; spec.n];
    let points = mats.len();
    let dim = spec.spatial_count();
    let fft = NdFft::new(&shape, FftDirection::Forward);
    let scale = 1.0 / points as f64;
    let mut lines = vec![ZERO; dim * dim * points];
    lines
        .par_chunks_mut(points)
        .enumerate()
        .for_each(|(e, line)| {
            let (r, c) = (e % dim, e / dim);
            for (p, m) in mats.iter().enumerate() {
                line[p] = m[(r, c)];
            }
            fft.process(line);
            for v in line.iter_mut() {
                *v *= scale;
            }
        });
    let ang = spec.angles();
    let blocks: Vec<CMat> = ang
        .iter()
        .map(|l| {
            let slot = wrapped_index(l, &shape);
            CMat::from_fn(dim, dim, |r, c| lines[(c * dim + r) * points + slot])
        })
        .collect();
    if !with_tail {
        return Product {
            op: QPOperator {
                spec: *spec,
                blocks,
            },
            dropped: 0.0,
        };
    }
    // Everything in the product box |l| ≤ 2L outside |l| ≤ L is dropped.
    let full = ModeSet::new(spec.n, 2 * spec.l_max);
    let tail_slots: Vec<usize> = full
        .iter()
        .filter(|l| l.iter().any(|c| c.abs() > spec.l_max))
        .map(|l| wrapped_index(l, &shape))
        .collect();
    let dropped = crate::numeric::compensated_sum(tail_slots.iter().flat_map(|&s| {
        lines[s..].iter().step_by(points).map(|v| v.norm_sqr())
    }))
    .sqrt();
    Product {
        op: QPOperator {
            spec: *spec,
            blocks,
        },
        dropped,
    }
}

fn wrapped_index(m: &[i64], shape: &[usize]) -> usize {
    m.iter()
        .zip(shape)
        .fold(0usize, |acc, (&c, &n)| acc * n + c.rem_euclid(n as i64) as usize)
}

impl Add for &QPOperator {
    type Output = QPOperator;
    fn add(self, rhs: &QPOperator) -> QPOperator {
        assert_eq!(self.spec, rhs.spec, "operands live on different lattices");
        QPOperator {
            spec: self.spec,
            blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &QPOperator {
    type Output = QPOperator;
    fn sub(self, rhs: &QPOperator) -> QPOperator {
        assert_eq!(self.spec, rhs.spec, "operands live on different lattices");
        QPOperator {
            spec: self.spec,
            blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Add for QPOperator {
    type Output = QPOperator;
    fn add(mut self, rhs: QPOperator) -> QPOperator {
        self += &rhs;
        self
    }
}

impl Sub for QPOperator {
    type Output = QPOperator;
    fn sub(mut self, rhs: QPOperator) -> QPOperator {
        self -= &rhs;
        self
    }
}

impl AddAssign<&QPOperator> for QPOperator {
    fn add_assign(&mut self, rhs: &QPOperator) {
        assert_eq!(self.spec, rhs.spec, "operands live on different lattices");
        for (a, b) in self.blocks.iter_mut().zip(&rhs.blocks) {
            *a += b;
        }
    }
}

impl SubAssign<&QPOperator> for QPOperator {
    fn sub_assign(&mut self, rhs: &QPOperator) {
        assert_eq!(self.spec, rhs.spec, "operands live on different lattices");
        for (a, b) in self.blocks.iter_mut().zip(&rhs.blocks) {
            *a -= b;
        }
    }
}

impl Neg for &QPOperator {
    type Output = QPOperator;
    fn neg(self) -> QPOperator {
        QPOperator {
            spec: self.spec,
            blocks: self.blocks.iter().map(|b| -b).collect(),
        }
    }
}

impl Mul<C64> for &QPOperator {
    type Output = QPOperator;
    fn mul(self, c: C64) -> QPOperator {
        self.scale(c)
    }
}

impl Mul<f64> for &QPOperator {
    type Output = QPOperator;
    fn mul(self, c: f64) -> QPOperator {
        self.scale(C64::new(c, 0.0))
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> LatticeSpec {
        LatticeSpec::new(1, 1, 3, 2).unwrap()
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_op(&mut rng, spec(), 1.0);
        let id = QPOperator::identity(spec());
        assert!(max_diff(&id.compose(&p).unwrap(), &p) < 1e-13);
        assert!(max_diff(&p.compose(&id).unwrap(), &p) < 1e-13);
    }

    #[test]
    fn point_masses_multiply() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_op(&mut rng, s, 1.0);
        let p = random_op(&mut rng, s, 1.0);
        let mut a = QPOperator::zeros(s);
        let mut b = QPOperator::zeros(s);
        *a.block_mut(&[1]).unwrap() = r.block(&[1]).unwrap().clone();
        *b.block_mut(&[-2]).unwrap() = p.block(&[-2]).unwrap().clone();
        let ab = a.compose_with_tail(&b).unwrap();
        let expect = r.block(&[1]).unwrap() * p.block(&[-2]).unwrap();
        let got = ab.op.block(&[-1]).unwrap();
        assert!((got - &expect).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-13);
        assert!(ab.dropped < 1e-13);
        // l = 2 + 2 falls outside the truncation and is reported as dropped
        let mut c = QPOperator::zeros(s);
        *c.block_mut(&[2]).unwrap() = CMat::identity(7, 7);
        let cc = c.compose_with_tail(&c).unwrap();
        assert!(cc.op.max_abs() < 1e-13);
        assert!((cc.dropped - 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grid_product_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [spec(), LatticeSpec::new(2, 2, 1, 1).unwrap()] {
            let a = random_op(&mut rng, s, 1.0);
            let b = random_op(&mut rng, s, 1.0);
            let g = a.compose(&b).unwrap();
            let d = a.compose_direct(&b).unwrap();
            assert!(max_diff(&g, &d) < 1e-12);
        }
    }

    #[test]
    fn commutator_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_op(&mut rng, spec(), 1.0);
        assert!(a.commutator(&a).unwrap().max_abs() < 1e-13);
        let d1: Vec<C64> = (0..7).map(|i| C64::new(i as f64, 1.0)).collect();
        let d2: Vec<C64> = (0..7).map(|i| C64::new(0.5, -(i as f64))).collect();
        let x = QPOperator::diagonal(spec(), &d1);
        let y = QPOperator::diagonal(spec(), &d2);
        assert!(x.commutator(&y).unwrap().max_abs() < 1e-13);
        // diag_commutator agrees with the general one
        let b = random_op(&mut rng, spec(), 1.0);
        let lhs = x.commutator(&b).unwrap();
        assert!(max_diff(&lhs, &b.diag_commutator(&d1)) < 1e-12);
    }

    #[test]
    fn adjoint_is_involutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_op(&mut rng, spec(), 1.0);
        assert_eq!(a.adjoint().adjoint(), a);
    }

    #[test]
    fn adjoint_matches_pointwise_conjugate_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_op(&mut rng, spec(), 1.0);
        let phi = [0.7];
        let lhs = a.adjoint().evaluate(&phi);
        let rhs = a.evaluate(&phi).adjoint();
        assert!((lhs - rhs).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-13);
    }

    #[test]
    fn cutoff_splits_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_op(&mut rng, spec(), 1.0);
        let (lo, hi) = a.cutoff(2.0);
        assert_eq!(&lo + &hi, a);
        assert_eq!(lo.entry(&[2], &[0], &[1]), a.entry(&[2], &[0], &[1]));
        assert_eq!(lo.entry(&[1], &[0], &[2]), C64::new(0.0, 0.0));
        let (all, none) = a.cutoff(100.0);
        assert_eq!(all, a);
        assert!(none.is_zero());
        let d = QPOperator::diagonal(spec(), &[C64::new(2.0, 0.0); 7]);
        let (lo, hi) = d.cutoff(1.0);
        assert_eq!(lo, d);
        assert!(hi.is_zero());
    }

    #[test]
    fn neumann_scalar_case() {
        let c = C64::new(0.3, -0.2);
        let x = QPOperator::identity(spec()).scale(c);
        // guard uses the Hilbert-Schmidt size, so shrink below 1/sqrt(7)
        let x = x.scale(C64::new(0.5, 0.0));
        let c = c * 0.5;
        let inv = x.neumann_inverse(1e-15).unwrap();
        let expect = ONE / (ONE + c) - ONE;
        for (i, v) in inv.correction.zero_block_diagonal().iter().enumerate() {
            assert!((v - expect).norm() < 1e-14, "mode {i}");
        }
        let zero = QPOperator::zeros(spec()).neumann_inverse(1e-15).unwrap();
        assert!(zero.correction.is_zero());
    }

    #[test]
    fn neumann_random_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_op(&mut rng, spec(), 0.01);
        let inv = x.neumann_inverse(1e-15).unwrap();
        // direct multiplication oracle, independent of the grid product
        let id = QPOperator::identity(spec());
        let prod = (&id + &x).compose_direct(&(&id + &inv.correction)).unwrap();
        assert!(max_diff(&prod, &id) < 1e-10);
        assert!(inv.residual < 1e-10);
    }

    #[test]
    fn neumann_guard_refuses() {
        let x = QPOperator::identity(spec());
        assert!(matches!(x.neumann_inverse(1e-12), Err(Error::NeumannGuard { .. })));
    }

    #[test]
    fn spec_mismatch() {
        let a = QPOperator::zeros(spec());
        let b = QPOperator::zeros(LatticeSpec::new(1, 1, 2, 2).unwrap());
        assert!(matches!(a.compose(&b), Err(Error::SpecMismatch)));
    }

    #[test]
    fn evaluate_matches_synthesis() {
        let s = spec();
        let mut op = QPOperator::zeros(s);
        op.set_entry(&[1], &[0], &[0], C64::new(1.0, 0.0));
        let m = op.evaluate(&[0.4]);
        let z = s.spatial().zero_index();
        assert!((m[(z, z)] - C64::from_polar(1.0, 0.4)).norm() < 1e-15);
    }
}
