//! Gradient-free estimation of ridge directions from input/output samples.
//!
//! Three strategies are provided:
//!
//! * [`fit_linear_direction`]: the normalized slope of a global affine
//!   least-squares model. One direction, no iterations.
//! * [`fit_vp`]: polynomial variable projection. For fixed directions `W` the
//!   profile is the least-squares polynomial in `Wᵀx`; the outer problem over
//!   the Grassmannian is solved with Gauss-Newton steps along geodesics using
//!   the full (Golub-Pereyra) Jacobian of the projected residual, with
//!   step-halving.
//! * [`fit_mave`]: minimum average variance estimation, alternating between
//!   kernel-weighted local linear fits and a weighted least-squares update of
//!   `W`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ridge_model::{design_derivative, fit_reduced, num_terms, ProfileFit};
use crate::subspace::{subspace_distance, Subspace};

/// Maximum number of step halvings in the VP line search.
const MAX_HALVINGS: usize = 20;
/// Ridge term added to singular MAVE systems, relative to their mean diagonal.
const MAVE_RIDGE: f64 = 1e-10;

/// Input/output pairs `(x_m, y_m)`; rows of `x` are the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl SampleSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
        }
        if x.nrows() < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: x.nrows() });
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("samples have no input columns".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("samples contain non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// True when the response does not vary beyond roundoff.
    pub fn is_constant(&self) -> bool {
        let lo = self.y.min();
        let hi = self.y.max();
        hi - lo <= 1e-14 * lo.abs().max(hi.abs()).max(1.0)
    }
}

/// Outcome of an iterative direction fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub subspace: Subspace,
    /// Final objective: residual sum of squares for VP, mean weighted local
    /// residual for MAVE.
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the stopping rule held;
    /// the best iterate is still returned.
    pub converged: bool,
    /// Objective after every accepted iteration of the returned run.
    pub objective_trace: Vec<f64>,
    /// MAVE only: local systems that needed the ridge term.
    pub regularized_systems: usize,
}

/// Ridge direction from the global affine model `min ‖Xw + c - y‖`.
pub fn fit_linear_direction(data: &SampleSet) -> Result<Subspace> {
    let (m, d) = data.x.shape();
    if m < d + 1 {
        return Err(Error::InsufficientSamples { needed: d + 1, got: m });
    }
    if data.is_constant() {
        return Err(Error::Degenerate);
    }
    let mut design = DMatrix::from_element(m, d + 1, 1.0);
    design.columns_mut(0, d).copy_from(&data.x);
    let svd = design.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let coef = svd
        .solve(&data.y, eps)
        .map_err(|e| Error::InvalidInput(format!("linear least squares failed: {e}")))?;
    let w = coef.rows(0, d).into_owned();
    if w.norm() < 1e-14 {
        return Err(Error::Degenerate);
    }
    Subspace::from_direction(w.as_slice())
}

/// Configuration of [`fit_vp`].
#[derive(Debug, Clone, PartialEq)]
pub struct VpConfig {
    pub reduced_dim: usize,
    pub degree: usize,
    pub max_iters: usize,
    /// Stop when consecutive iterates are closer than this in subspace distance.
    pub subspace_tol: f64,
    pub n_restarts: usize,
    pub rng_seed: u64,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self { reduced_dim: 1, degree: 7, max_iters: 200, subspace_tol: 1e-7, n_restarts: 3, rng_seed: 0 }
    }
}

impl VpConfig {
    fn validate(&self, d: usize) -> Result<()> {
        if self.reduced_dim == 0 || self.reduced_dim > d {
            return Err(Error::InvalidInput(format!("reduced_dim must be in 1..={d}")));
        }
        if !(self.subspace_tol > 0.0) {
            return Err(Error::InvalidInput("subspace_tol must be positive".into()));
        }
        Ok(())
    }

    /// Identifiability floor `C(r+p, p) + d·r`.
    pub fn min_samples(&self, d: usize) -> usize {
        num_terms(self.reduced_dim, self.degree) + d * self.reduced_dim
    }
}

/// Polynomial variable projection from several starting subspaces.
///
/// Starts are `n_restarts` random Gaussian subspaces and, when `r = 1`, the
/// global linear direction. The run with the smallest residual wins.
pub fn fit_vp(data: &SampleSet, cfg: &VpConfig) -> Result<FitReport> {
    check_vp(data, cfg)?;
    if data.is_constant() {
        return Err(Error::Degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut starts = Vec::with_capacity(cfg.n_restarts + 1);
    if cfg.reduced_dim == 1 {
        if let Ok(s) = fit_linear_direction(data) {
            starts.push(s);
        }
    }
    for _ in 0..cfg.n_restarts {
        starts.push(Subspace::random(data.dim(), cfg.reduced_dim, &mut rng)?);
    }
    if starts.is_empty() {
        starts.push(Subspace::random(data.dim(), cfg.reduced_dim, &mut rng)?);
    }
    let mut best: Option<FitReport> = None;
    let mut last_err = None;
    for start in &starts {
        match vp_run(data, cfg, start) {
            Ok(rep) => {
                if best.as_ref().map_or(true, |b| rep.objective < b.objective) {
                    best = Some(rep);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::InvalidInput("no VP start available".into())),
    }
}

/// A single VP run from `start`.
pub fn fit_vp_from(data: &SampleSet, cfg: &VpConfig, start: &Subspace) -> Result<FitReport> {
    check_vp(data, cfg)?;
    if start.ambient_dim() != data.dim() || start.dim() != cfg.reduced_dim {
        return Err(Error::DimensionMismatch { expected: data.dim(), found: start.ambient_dim() });
    }
    vp_run(data, cfg, start)
}

fn check_vp(data: &SampleSet, cfg: &VpConfig) -> Result<()> {
    cfg.validate(data.dim())?;
    let needed = cfg.min_samples(data.dim());
    if data.len() < needed {
        return Err(Error::InsufficientSamples { needed, got: data.len() });
    }
    Ok(())
}

fn vp_inner(data: &SampleSet, w: &Subspace, degree: usize) -> Result<ProfileFit> {
    fit_reduced(&(&data.x * w.basis()), &data.y, degree)
}

fn vp_run(data: &SampleSet, cfg: &VpConfig, start: &Subspace) -> Result<FitReport> {
    let mut w = start.clone();
    let mut fit = vp_inner(data, &w, cfg.degree)?;
    let mut objective = fit.residual_sum_squares();
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let step = gauss_newton_step(data, &w, &fit)?;
        if step.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let candidate = geodesic(&w, &step, t)?;
            if let Ok(f) = vp_inner(data, &candidate, cfg.degree) {
                if f.residual_sum_squares() < objective {
                    accepted = Some((candidate, f));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, next_fit)) = accepted else {
            // No descent along the Gauss-Newton direction: the iterate is stationary.
            converged = true;
            break;
        };
        let moved = subspace_distance(&w, &next)?;
        w = next;
        fit = next_fit;
        objective = fit.residual_sum_squares();
        trace.push(objective);
        if moved < cfg.subspace_tol {
            converged = true;
            break;
        }
    }
    Ok(FitReport { subspace: w, objective, iterations, converged, objective_trace: trace, regularized_systems: 0 })
}

/// Gauss-Newton direction for the projected residual `r(W) = (I - P_V(W)) y`,
/// projected onto the horizontal space `(I - WWᵀ)`.
fn gauss_newton_step(data: &SampleSet, w: &Subspace, fit: &ProfileFit) -> Result<DMatrix<f64>> {
    let x = &data.x;
    let (m, d) = x.shape();
    let r = w.dim();
    let u = x * w.basis();
    let profile = &fit.profile;
    let coef = DVector::from_column_slice(profile.coefficients());
    let resid = &fit.residuals;
    let q = &fit.left;
    // (V⁺)ᵀ = Q S⁻¹ Vᵀ_right
    let pinv_t = {
        let mut qs = q.clone();
        for (j, mut col) in qs.column_iter_mut().enumerate() {
            col /= fit.singular[j];
        }
        qs * &fit.right_t
    };
    let rx = {
        let mut rx = x.clone();
        for (i, mut row) in rx.row_iter_mut().enumerate() {
            row *= resid[i];
        }
        rx
    };
    let mut jac = DMatrix::zeros(m, d * r);
    for l in 0..r {
        let dv = design_derivative(&u, profile.degree(), profile.bounds(), l);
        let g = &dv * &coef;
        let mut a = x.clone();
        for (i, mut row) in a.row_iter_mut().enumerate() {
            row *= g[i];
        }
        let a_perp = &a - q * q.tr_mul(&a);
        let b = dv.tr_mul(&rx);
        let second = &pinv_t * b;
        let block = -(a_perp + second);
        jac.columns_mut(l * d, d).copy_from(&block);
    }
    let svd = jac.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Ok(DMatrix::zeros(d, r));
    }
    let delta = svd
        .solve(&(-resid), 1e-10 * smax)
        .map_err(|e| Error::InvalidInput(format!("Gauss-Newton solve failed: {e}")))?;
    let delta = DMatrix::from_column_slice(d, r, delta.as_slice());
    let basis = w.basis();
    Ok(&delta - basis * basis.tr_mul(&delta))
}

/// Point at parameter `t` on the Grassmann geodesic from `w` with horizontal
/// tangent `step`.
fn geodesic(w: &Subspace, step: &DMatrix<f64>, t: f64) -> Result<Subspace> {
    let svd = step.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidInput("SVD did not return singular vectors".into())),
    };
    let k = svd.singular_values.len();
    let cos = DMatrix::from_fn(k, k, |i, j| if i == j { libm::cos(t * svd.singular_values[i]) } else { 0.0 });
    let sin = DMatrix::from_fn(k, k, |i, j| if i == j { libm::sin(t * svd.singular_values[i]) } else { 0.0 });
    let v = v_t.transpose();
    let moved = w.basis() * &v * cos * &v_t + u * sin * &v_t;
    Subspace::orthonormalize(&moved)
}

/// Configuration of [`fit_mave`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaveConfig {
    pub reduced_dim: usize,
    /// Multiplier on the bandwidth `M^(-1/(r+4))·std(u_l)`.
    pub bandwidth_rule: f64,
    pub max_iters: usize,
    /// Stop when the objective decreases by less than `tol` relative to its value.
    pub tol: f64,
    /// Seeds the fallback random start used when the linear warm start is unavailable.
    pub rng_seed: u64,
}

impl Default for MaveConfig {
    fn default() -> Self {
        Self { reduced_dim: 1, bandwidth_rule: 1.0, max_iters: 50, tol: 1e-8, rng_seed: 0 }
    }
}

/// Minimum average variance estimation of an `r`-dimensional ridge subspace.
///
/// Two starts are run: the linear-model direction (completed with coordinate
/// axes when `r > 1`) and the leading coordinate block `[e₁ … e_r]`. Each run
/// alternates the local linear step and the direction step until the
/// objective stops decreasing by `tol`, then takes one more reweighting pass.
/// The run with the smaller objective is returned.
pub fn fit_mave(data: &SampleSet, cfg: &MaveConfig) -> Result<FitReport> {
    let (m, d) = data.x.shape();
    let r = cfg.reduced_dim;
    if r == 0 || r > d {
        return Err(Error::InvalidInput(format!("reduced_dim must be in 1..={d}")));
    }
    if !(cfg.bandwidth_rule > 0.0) {
        return Err(Error::InvalidInput("bandwidth_rule must be positive".into()));
    }
    if m < 5 * d {
        return Err(Error::InsufficientSamples { needed: 5 * d, got: m });
    }
    if data.is_constant() {
        return Err(Error::Degenerate);
    }
    let mut starts = Vec::new();
    match fit_linear_direction(data) {
        Ok(lin) => {
            let mut a = DMatrix::zeros(d, r);
            a.column_mut(0).copy_from(&lin.direction(0));
            let mut col = 1;
            for axis in 0..d {
                if col == r {
                    break;
                }
                let mut trial = a.columns(0, col + 1).into_owned();
                trial[(axis, col)] = 1.0;
                if Subspace::orthonormalize(&trial).is_ok() {
                    a[(axis, col)] = 1.0;
                    col += 1;
                }
            }
            starts.push(Subspace::orthonormalize(&a)?);
        }
        Err(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            starts.push(Subspace::random(d, r, &mut rng)?);
        }
    }
    let block: Vec<usize> = (0..r).collect();
    starts.push(Subspace::coordinate(d, &block)?);

    let mut best: Option<FitReport> = None;
    for start in &starts {
        let rep = mave_run(data, cfg, start)?;
        if best.as_ref().map_or(true, |b| rep.objective < b.objective) {
            best = Some(rep);
        }
    }
    best.ok_or_else(|| Error::InvalidInput("no MAVE start available".into()))
}

struct LocalFits {
    intercepts: Vec<f64>,
    slopes: DMatrix<f64>,
    weights: DMatrix<f64>,
    objective: f64,
    regularized: usize,
}

fn mave_run(data: &SampleSet, cfg: &MaveConfig, start: &Subspace) -> Result<FitReport> {
    let mut w = start.clone();
    let mut local = local_linear(data, &w, cfg.bandwidth_rule)?;
    let mut regularized = local.regularized;
    let mut trace = vec![local.objective];
    let mut converged = false;
    let mut iterations = 0;
    let mut refined = false;
    loop {
        let stop_rule_met = converged || iterations >= cfg.max_iters;
        if stop_rule_met && refined {
            break;
        }
        iterations += 1;
        let (next_basis, reg) = direction_update(data, &local)?;
        regularized += reg;
        let next = Subspace::orthonormalize(&next_basis)?;
        let next_local = local_linear(data, &next, cfg.bandwidth_rule)?;
        regularized += next_local.regularized;
        let decrease = local.objective - next_local.objective;
        if stop_rule_met {
            // Final reweighting pass.
            refined = true;
            if decrease > 0.0 {
                w = next;
                local = next_local;
                trace.push(local.objective);
            }
            continue;
        }
        if decrease <= 0.0 {
            converged = true;
            continue;
        }
        w = next;
        local = next_local;
        trace.push(local.objective);
        if decrease < cfg.tol * local.objective.abs().max(f64::MIN_POSITIVE) {
            converged = true;
        }
    }
    Ok(FitReport {
        subspace: w,
        objective: local.objective,
        iterations,
        converged,
        objective_trace: trace,
        regularized_systems: regularized,
    })
}

/// Gaussian product-kernel weights on reduced coordinates, each column `j`
/// normalized to sum to one over `i`.
fn kernel_weights(u: &DMatrix<f64>, rule: f64) -> DMatrix<f64> {
    let (m, r) = u.shape();
    let factor = rule * libm::pow(m as f64, -1.0 / (r as f64 + 4.0));
    let h: Vec<f64> = u
        .column_iter()
        .map(|c| {
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
            (factor * libm::sqrt(var)).max(f64::MIN_POSITIVE)
        })
        .collect();
    let mut k = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut total = 0.0;
        for i in 0..m {
            let mut e = 0.0;
            for l in 0..r {
                let z = (u[(i, l)] - u[(j, l)]) / h[l];
                e += z * z;
            }
            let v = libm::exp(-0.5 * e);
            k[(i, j)] = v;
            total += v;
        }
        for i in 0..m {
            k[(i, j)] /= total;
        }
    }
    k
}

/// Solves the symmetric positive semidefinite system `a z = b`, adding a small
/// ridge when the Cholesky factorization fails. Returns whether it was needed.
fn solve_psd(a: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(ch) = a.clone().cholesky() {
        let z = ch.solve(b);
        if z.iter().all(|v| v.is_finite()) {
            return (z, false);
        }
    }
    let n = a.nrows();
    let mean_diag = (a.trace() / n as f64).abs().max(1.0);
    let mut reg = a;
    let mut ridge = MAVE_RIDGE * mean_diag;
    loop {
        let mut trial = reg.clone();
        for i in 0..n {
            trial[(i, i)] += ridge;
        }
        if let Some(ch) = trial.cholesky() {
            return (ch.solve(b), true);
        }
        ridge *= 10.0;
        if ridge > mean_diag {
            for i in 0..n {
                reg[(i, i)] += ridge;
            }
        }
    }
}

/// Local linear step: for fixed `W`, fit `a_j + b_jᵀWᵀ(x_i - x_j)` around every sample.
fn local_linear(data: &SampleSet, w: &Subspace, rule: f64) -> Result<LocalFits> {
    let x = &data.x;
    let y = &data.y;
    let (m, _) = x.shape();
    let r = w.dim();
    let u = x * w.basis();
    let weights = kernel_weights(&u, rule);
    let mut intercepts = vec![0.0; m];
    let mut slopes = DMatrix::zeros(r, m);
    let mut regularized = 0;
    let mut objective = 0.0;
    let mut z = DVector::zeros(r + 1);
    for j in 0..m {
        let mut a = DMatrix::zeros(r + 1, r + 1);
        let mut b = DVector::zeros(r + 1);
        for i in 0..m {
            let wij = weights[(i, j)];
            if wij == 0.0 {
                continue;
            }
            z[0] = 1.0;
            for l in 0..r {
                z[l + 1] = u[(i, l)] - u[(j, l)];
            }
            a.ger(wij, &z, &z, 1.0);
            b.axpy(wij * y[i], &z, 1.0);
        }
        let (theta, reg) = solve_psd(a, &b);
        regularized += reg as usize;
        intercepts[j] = theta[0];
        for l in 0..r {
            slopes[(l, j)] = theta[l + 1];
        }
        for i in 0..m {
            let mut pred = theta[0];
            for l in 0..r {
                pred += theta[l + 1] * (u[(i, l)] - u[(j, l)]);
            }
            let e = y[i] - pred;
            objective += weights[(i, j)] * e * e;
        }
    }
    Ok(LocalFits { intercepts, slopes, weights, objective: objective / m as f64, regularized })
}

/// Direction step: for fixed `a_j, b_j` and weights, minimize over `W`
/// (unconstrained; the caller orthonormalizes). `vec(W)` is column-major.
fn direction_update(data: &SampleSet, local: &LocalFits) -> Result<(DMatrix<f64>, usize)> {
    let x = &data.x;
    let y = &data.y;
    let (m, d) = x.shape();
    let r = local.slopes.nrows();
    let n = d * r;
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let mut diff = DVector::zeros(d);
    for j in 0..m {
        let mut s = DMatrix::zeros(d, d);
        let mut t = DVector::zeros(d);
        for i in 0..m {
            let wij = local.weights[(i, j)];
            if wij == 0.0 {
                continue;
            }
            for k in 0..d {
                diff[k] = x[(i, k)] - x[(j, k)];
            }
            s.ger(wij, &diff, &diff, 1.0);
            t.axpy(wij * (y[i] - local.intercepts[j]), &diff, 1.0);
        }
        let bj = local.slopes.column(j);
        for l in 0..r {
            for l2 in 0..r {
                let coef = bj[l] * bj[l2];
                if coef != 0.0 {
                    let mut block = a.view_mut((l * d, l2 * d), (d, d));
                    block += &s * coef;
                }
            }
            let mut seg = rhs.rows_mut(l * d, d);
            seg.axpy(bj[l], &t, 1.0);
        }
    }
    let (z, reg) = solve_psd(a, &rhs);
    if z.iter().any(|v| !v.is_finite()) || z.norm() == 0.0 {
        return Err(Error::InvalidInput("MAVE direction update produced no direction".into()));
    }
    Ok((DMatrix::from_column_slice(d, r, z.as_slice()), reg as usize))
}
