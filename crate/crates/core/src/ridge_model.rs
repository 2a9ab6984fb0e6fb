//! Ridge functions `g(Wᵀx)` with polynomial profiles.
//!
//! Profiles are total-degree polynomials in the monomial basis, graded
//! lexicographic order. Each reduced coordinate `u_k` is mapped affinely to
//! `t_k ∈ [-1, 1]` using bounds taken from the training data before the
//! monomials are formed; the bounds travel with the profile. Stored
//! coefficients are in `t`; [`RidgeProfile::raw_coefficients`] expands them
//! back to monomials in `u`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::subspace::Subspace;

/// Vandermonde condition numbers above this are reported as [`Error::IllConditioned`].
pub const MAX_CONDITION: f64 = 1e12;

/// `C(r + p, p)`, the number of monomials of total degree at most `p` in `r` variables.
pub fn num_terms(reduced_dim: usize, degree: usize) -> usize {
    let mut n: u128 = 1;
    for i in 1..=degree as u128 {
        n = n * (reduced_dim as u128 + i) / i;
    }
    n as usize
}

/// Exponent tuples of the total-degree basis in graded-lexicographic order:
/// by total degree, then lexicographically descending within a degree
/// (`1, u₁, u₂, u₁², u₁u₂, u₂², …`).
pub fn exponents(reduced_dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(rem: u32, slot: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if slot + 1 == cur.len() {
            cur[slot] = rem;
            out.push(cur.clone());
            return;
        }
        for e in (0..=rem).rev() {
            cur[slot] = e;
            fill(rem - e, slot + 1, cur, out);
        }
    }
    let mut out = Vec::with_capacity(num_terms(reduced_dim, degree));
    let mut cur = vec![0u32; reduced_dim];
    for total in 0..=degree as u32 {
        fill(total, 0, &mut cur, &mut out);
    }
    out
}

/// A polynomial ridge profile over `r` reduced coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProfile {
    reduced_dim: usize,
    degree: usize,
    coefficients: Vec<f64>,
    bounds: Vec<[f64; 2]>,
    exponents: Vec<Vec<u32>>,
}

impl RidgeProfile {
    /// Builds a profile from coefficients in the scaled coordinates `t`.
    pub fn new(reduced_dim: usize, degree: usize, coefficients: Vec<f64>, bounds: Vec<[f64; 2]>) -> Result<Self> {
        if reduced_dim == 0 {
            return Err(Error::InvalidInput("reduced dimension must be at least 1".into()));
        }
        let n = num_terms(reduced_dim, degree);
        if coefficients.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: coefficients.len() });
        }
        if bounds.len() != reduced_dim {
            return Err(Error::DimensionMismatch { expected: reduced_dim, found: bounds.len() });
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("profile coefficients must be finite".into()));
        }
        for b in &bounds {
            if !(b[0].is_finite() && b[1].is_finite() && b[1] > b[0]) {
                return Err(Error::InvalidInput(format!("invalid coordinate bounds [{}, {}]", b[0], b[1])));
            }
        }
        Ok(Self { reduced_dim, degree, coefficients, bounds, exponents: exponents(reduced_dim, degree) })
    }

    /// Profile given by monomial coefficients in the unscaled coordinates `u`.
    pub fn from_raw(reduced_dim: usize, degree: usize, coefficients: Vec<f64>) -> Result<Self> {
        Self::new(reduced_dim, degree, coefficients, vec![[-1.0, 1.0]; reduced_dim])
    }

    /// The constant profile `c`.
    pub fn constant(reduced_dim: usize, degree: usize, c: f64) -> Result<Self> {
        let mut coefficients = vec![0.0; num_terms(reduced_dim, degree)];
        coefficients[0] = c;
        Self::from_raw(reduced_dim, degree, coefficients)
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Coefficients in the scaled coordinates.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }

    fn scale(&self, k: usize) -> (f64, f64) {
        affine(self.bounds[k])
    }

    fn scaled(&self, u: &[f64]) -> Vec<f64> {
        (0..self.reduced_dim)
            .map(|k| {
                let (a, b) = self.scale(k);
                a * u[k] + b
            })
            .collect()
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.reduced_dim {
            return Err(Error::DimensionMismatch { expected: self.reduced_dim, found: u.len() });
        }
        Ok(())
    }

    /// `g(u)`.
    pub fn value(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        let powers = power_table(&self.scaled(u), self.degree);
        Ok(self
            .exponents
            .iter()
            .zip(&self.coefficients)
            .map(|(alpha, c)| c * monomial(&powers, alpha))
            .sum())
    }

    /// `∇_u g(u)`, exact for the polynomial.
    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u)?;
        let powers = power_table(&self.scaled(u), self.degree);
        let mut grad = vec![0.0; self.reduced_dim];
        for (alpha, c) in self.exponents.iter().zip(&self.coefficients) {
            for (l, g) in grad.iter_mut().enumerate() {
                *g += c * monomial_derivative(&powers, alpha, l);
            }
        }
        for (l, g) in grad.iter_mut().enumerate() {
            *g *= self.scale(l).0;
        }
        Ok(grad)
    }

    /// Coefficients of the same polynomial in monomials of the unscaled `u`.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let index: BTreeMap<&[u32], usize> =
            self.exponents.iter().enumerate().map(|(i, e)| (e.as_slice(), i)).collect();
        let scales: Vec<(f64, f64)> = (0..self.reduced_dim).map(|k| self.scale(k)).collect();
        let mut raw = vec![0.0; self.coefficients.len()];
        let mut target = vec![0u32; self.reduced_dim];
        for (alpha, &c) in self.exponents.iter().zip(&self.coefficients) {
            if c != 0.0 {
                expand(alpha, &scales, 0, c, &mut target, &index, &mut raw);
            }
        }
        raw
    }
}

// (a u + b)^e expanded binomially, one coordinate at a time.
fn expand(
    alpha: &[u32],
    scales: &[(f64, f64)],
    k: usize,
    weight: f64,
    target: &mut Vec<u32>,
    index: &BTreeMap<&[u32], usize>,
    raw: &mut [f64],
) {
    if k == alpha.len() {
        raw[index[target.as_slice()]] += weight;
        return;
    }
    let e = alpha[k];
    let (a, b) = scales[k];
    for j in 0..=e {
        let term = binomial(e, j) * libm::pow(a, j as f64) * libm::pow(b, (e - j) as f64);
        if term != 0.0 {
            target[k] = j;
            expand(alpha, scales, k + 1, weight * term, target, index, raw);
        }
    }
    target[k] = 0;
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `t = a u + b` mapping `[lo, hi]` onto `[-1, 1]`.
fn affine(bounds: [f64; 2]) -> (f64, f64) {
    let [lo, hi] = bounds;
    let a = 2.0 / (hi - lo);
    (a, -(hi + lo) / (hi - lo))
}

fn power_table(t: &[f64], degree: usize) -> Vec<Vec<f64>> {
    t.iter()
        .map(|&v| {
            let mut p = Vec::with_capacity(degree + 1);
            let mut acc = 1.0;
            for _ in 0..=degree {
                p.push(acc);
                acc *= v;
            }
            p
        })
        .collect()
}

fn monomial(powers: &[Vec<f64>], alpha: &[u32]) -> f64 {
    alpha.iter().enumerate().map(|(k, &e)| powers[k][e as usize]).product()
}

fn monomial_derivative(powers: &[Vec<f64>], alpha: &[u32], l: usize) -> f64 {
    if alpha[l] == 0 {
        return 0.0;
    }
    alpha
        .iter()
        .enumerate()
        .map(|(k, &e)| if k == l { e as f64 * powers[k][e as usize - 1] } else { powers[k][e as usize] })
        .product()
}

/// Per-column `[min, max]` of reduced coordinates, widened when a column is
/// (numerically) constant so the affine map stays defined.
pub fn data_bounds(u: &DMatrix<f64>) -> Vec<[f64; 2]> {
    u.column_iter()
        .map(|col| {
            let lo = col.min();
            let hi = col.max();
            let span = hi - lo;
            if span > 1e-12 * lo.abs().max(hi.abs()).max(1.0) {
                [lo, hi]
            } else {
                [lo - 1.0, hi + 1.0]
            }
        })
        .collect()
}

/// Design matrix `V[m, j] = φ_j(u_m)` for rows of `u`.
pub fn design_matrix(u: &DMatrix<f64>, degree: usize, bounds: &[[f64; 2]]) -> DMatrix<f64> {
    let r = u.ncols();
    let exps = exponents(r, degree);
    let scales: Vec<(f64, f64)> = bounds.iter().map(|b| affine(*b)).collect();
    let mut v = DMatrix::zeros(u.nrows(), exps.len());
    let mut t = vec![0.0; r];
    for m in 0..u.nrows() {
        for k in 0..r {
            t[k] = scales[k].0 * u[(m, k)] + scales[k].1;
        }
        let powers = power_table(&t, degree);
        for (j, alpha) in exps.iter().enumerate() {
            v[(m, j)] = monomial(&powers, alpha);
        }
    }
    v
}

/// `∂V/∂u_l`: derivative of every basis function with respect to reduced coordinate `l`.
pub fn design_derivative(u: &DMatrix<f64>, degree: usize, bounds: &[[f64; 2]], l: usize) -> DMatrix<f64> {
    let r = u.ncols();
    let exps = exponents(r, degree);
    let scales: Vec<(f64, f64)> = bounds.iter().map(|b| affine(*b)).collect();
    let mut v = DMatrix::zeros(u.nrows(), exps.len());
    let mut t = vec![0.0; r];
    for m in 0..u.nrows() {
        for k in 0..r {
            t[k] = scales[k].0 * u[(m, k)] + scales[k].1;
        }
        let powers = power_table(&t, degree);
        for (j, alpha) in exps.iter().enumerate() {
            v[(m, j)] = monomial_derivative(&powers, alpha, l) * scales[l].0;
        }
    }
    v
}

/// Least-squares polynomial fit on reduced coordinates together with the
/// factorization of its design matrix.
#[derive(Debug, Clone)]
pub struct ProfileFit {
    pub profile: RidgeProfile,
    /// `y - V c`.
    pub residuals: DVector<f64>,
    pub condition: f64,
    /// Thin SVD `V = U S Vᵀ` of the design matrix.
    pub(crate) left: DMatrix<f64>,
    pub(crate) singular: DVector<f64>,
    pub(crate) right_t: DMatrix<f64>,
}

impl ProfileFit {
    pub fn residual_sum_squares(&self) -> f64 {
        self.residuals.norm_squared()
    }
}

/// Fits a degree-`p` profile to `(u_m, y_m)` by least squares through the SVD
/// of the design matrix.
pub fn fit_reduced(u: &DMatrix<f64>, y: &DVector<f64>, degree: usize) -> Result<ProfileFit> {
    let (m, r) = u.shape();
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: y.len() });
    }
    let n = num_terms(r, degree);
    if m < n {
        return Err(Error::InsufficientSamples { needed: n, got: m });
    }
    let bounds = data_bounds(u);
    let v = design_matrix(u, degree, &bounds);
    let svd = v.svd(true, true);
    let (left, right_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidInput("SVD did not return singular vectors".into())),
    };
    let singular = svd.singular_values;
    let smax = singular.max();
    let smin = singular.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let proj = left.tr_mul(y);
    let scaled = proj.component_div(&singular);
    let coefficients = right_t.tr_mul(&scaled);
    let residuals = y - &left * &proj;
    let profile = RidgeProfile::new(r, degree, coefficients.iter().copied().collect(), bounds)?;
    Ok(ProfileFit { profile, residuals, condition, left, singular, right_t })
}

/// Fits the profile of `y ≈ g(Sᵀx)` for fixed directions `S`.
pub fn fit_profile(directions: &Subspace, x: &DMatrix<f64>, y: &DVector<f64>, degree: usize) -> Result<RidgeProfile> {
    if x.ncols() != directions.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: directions.ambient_dim(), found: x.ncols() });
    }
    let u = x * directions.basis();
    fit_reduced(&u, y, degree).map(|f| f.profile)
}

/// A ridge approximation `f(x) ≈ g(Wᵀx)` at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalRidgeModel {
    directions: Subspace,
    profile: RidgeProfile,
}

impl NodalRidgeModel {
    pub fn new(directions: Subspace, profile: RidgeProfile) -> Result<Self> {
        if profile.reduced_dim() != directions.dim() {
            return Err(Error::DimensionMismatch { expected: directions.dim(), found: profile.reduced_dim() });
        }
        Ok(Self { directions, profile })
    }

    /// Fits the profile on `(Wᵀx_m, y_m)`.
    pub fn fit(directions: Subspace, x: &DMatrix<f64>, y: &DVector<f64>, degree: usize) -> Result<Self> {
        let profile = fit_profile(&directions, x, y, degree)?;
        Self::new(directions, profile)
    }

    pub fn directions(&self) -> &Subspace {
        &self.directions
    }

    pub fn profile(&self) -> &RidgeProfile {
        &self.profile
    }

    pub fn ambient_dim(&self) -> usize {
        self.directions.ambient_dim()
    }

    /// `g(Wᵀx)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let u = self.directions.project(x)?;
        self.profile.value(u.as_slice())
    }

    /// `W ∇g(Wᵀx)`.
    pub fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let u = self.directions.project(x)?;
        let g = DVector::from_vec(self.profile.gradient(u.as_slice())?);
        Ok(self.directions.basis() * g)
    }

    /// Evaluates every row of `x`.
    pub fn evaluate_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim(), found: x.ncols() });
        }
        let u = x * self.directions.basis();
        let mut out = DVector::zeros(x.nrows());
        for m in 0..x.nrows() {
            let row: Vec<f64> = u.row(m).iter().copied().collect();
            out[m] = self.profile.value(&row)?;
        }
        Ok(out)
    }
}
