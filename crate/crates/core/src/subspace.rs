//! Orthonormal subspaces of `R^d` and the arithmetic shared by every fitter:
//! projector distances, principal angles and vectors, and the symmetric
//! eigendecomposition used to read dimension-reducing subspaces off a
//! covariance matrix.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Entrywise tolerance on `BᵀB - I` accepted for a basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;
/// Relative singular-value cutoff used to decide numerical rank.
pub const RANK_TOL: f64 = 1e-12;
/// Entries smaller than this are skipped when fixing column signs.
const SIGN_EPS: f64 = 1e-12;
/// Inputs this close to orthonormal are passed through by `orthonormalize`.
const PASS_THROUGH_TOL: f64 = 1e-14;

/// A subspace of `R^d` stored as a `d x r` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps a basis that is already orthonormal. Column signs are kept as given.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let (d, r) = basis.shape();
        if r == 0 || r > d {
            return Err(Error::InvalidInput(format!(
                "subspace basis must be d x r with 1 <= r <= d, got {d} x {r}"
            )));
        }
        let err = orthonormality_error(&basis);
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidInput(format!(
                "basis columns are not orthonormal (max |BᵀB - I| = {err:e})"
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes the columns of `a`, spanning the same column space.
    ///
    /// The first entry of each column whose magnitude exceeds `1e-12` is made
    /// positive so that fits are reproducible. Inputs that are already
    /// orthonormal to `1e-14` are returned unchanged apart from that sign fix,
    /// which makes the operation idempotent.
    pub fn orthonormalize(a: &DMatrix<f64>) -> Result<Self> {
        let (d, r) = a.shape();
        if r == 0 || r > d {
            return Err(Error::InvalidInput(format!(
                "cannot orthonormalize a {d} x {r} matrix"
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let rank = numerical_rank(a);
        if rank < r {
            return Err(Error::RankDeficient { rank, expected: r });
        }
        let mut basis = if orthonormality_error(a) <= PASS_THROUGH_TOL {
            a.clone()
        } else {
            a.clone().qr().q()
        };
        fix_column_signs(&mut basis);
        Ok(Self { basis })
    }

    /// The line spanned by `v`.
    pub fn from_direction(v: &[f64]) -> Result<Self> {
        Self::orthonormalize(&DMatrix::from_column_slice(v.len(), 1, v))
    }

    /// `span(e_i : i in axes)` in `R^d`.
    pub fn coordinate(d: usize, axes: &[usize]) -> Result<Self> {
        let mut b = DMatrix::zeros(d, axes.len());
        for (c, &ax) in axes.iter().enumerate() {
            if ax >= d {
                return Err(Error::DimensionMismatch { expected: d, found: ax + 1 });
            }
            b[(ax, c)] = 1.0;
        }
        Self::from_orthonormal(b)
    }

    /// Orthonormalized `d x r` standard Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Result<Self> {
        loop {
            let a = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(rng));
            match Self::orthonormalize(&a) {
                Err(Error::RankDeficient { .. }) => continue,
                other => return other,
            }
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<f64> {
        self.basis
    }

    /// Column `i` of the basis as a vector.
    pub fn direction(&self, i: usize) -> DVector<f64> {
        self.basis.column(i).into_owned()
    }

    /// Reduced coordinates `Wᵀx`.
    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim(), found: x.len() });
        }
        let x = DVector::from_column_slice(x);
        Ok(self.basis.tr_mul(&x))
    }

    /// Orthogonal projector `WWᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// The same subspace with the basis rotated by an `r x r` orthogonal matrix.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self> {
        if q.nrows() != self.dim() || q.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: q.nrows() });
        }
        Self::from_orthonormal(&self.basis * q)
    }

    /// `‖W₁W₁ᵀ - W₂W₂ᵀ‖₂`, see [`subspace_distance`].
    pub fn distance(&self, other: &Subspace) -> Result<f64> {
        subspace_distance(self, other)
    }
}

/// Largest singular value of the difference of the two orthogonal projectors.
///
/// `P₁ - P₂ = B·diag(I, -I)·Bᵀ` with `B = [W₁ W₂]`. With the thin QR `B = QR`
/// the nonzero spectrum is that of the small symmetric matrix `R·diag(I,-I)·Rᵀ`,
/// so the `d x d` projectors are never formed.
pub fn subspace_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    let d = a.ambient_dim();
    if b.ambient_dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: b.ambient_dim() });
    }
    let (r1, r2) = (a.dim(), b.dim());
    let mut stacked = DMatrix::zeros(d, r1 + r2);
    stacked.columns_mut(0, r1).copy_from(a.basis());
    stacked.columns_mut(r1, r2).copy_from(b.basis());
    let r = stacked.qr().r();
    let mut signed = r.clone();
    for mut col in signed.columns_mut(r1, r2).column_iter_mut() {
        col.neg_mut();
    }
    let small = &signed * r.transpose();
    let small = (&small + small.transpose()) * 0.5;
    let eig = small.symmetric_eigen();
    let norm = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    Ok(norm.min(1.0))
}

/// Principal angles `θ₁ ≤ … ≤ θ_r` between two subspaces of equal dimension.
///
/// Cosines are the singular values of `W₁ᵀW₂` clipped to `[0, 1]`; sines are the
/// singular values of `(I - W₁W₁ᵀ)W₂`. Each angle is recovered from whichever of
/// the two is better conditioned.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let cross = a.basis().tr_mul(b.basis());
    let mut cosines: Vec<f64> = cross
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let residual = b.basis() - a.basis() * &cross;
    let mut sines: Vec<f64> = residual
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            if c > core::f64::consts::FRAC_1_SQRT_2 {
                libm::asin(s)
            } else {
                libm::acos(c)
            }
        })
        .collect())
}

/// Paired principal vectors of two equidimensional subspaces.
#[derive(Debug, Clone)]
pub struct PrincipalVectors {
    /// Basis of the first subspace, column `i` paired with column `i` of `second`.
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
    /// `cos θᵢ = firstᵢᵀ secondᵢ`, descending.
    pub cosines: Vec<f64>,
    /// Rotation applied to the first basis: `first = W₁·rotation`.
    pub rotation: DMatrix<f64>,
}

/// Principal vectors from the SVD `W₁ᵀW₂ = YΣZᵀ`: `W₁Y` and `W₂Z`.
pub fn principal_vectors(a: &Subspace, b: &Subspace) -> Result<PrincipalVectors> {
    check_pair(a, b)?;
    let r = a.dim();
    let svd = a.basis().tr_mul(b.basis()).svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidInput("SVD did not return singular vectors".into())),
    };
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let y = DMatrix::from_fn(r, r, |i, j| u[(i, order[j])]);
    let z = DMatrix::from_fn(r, r, |i, j| v_t[(order[j], i)]);
    let cosines = order.iter().map(|&k| svd.singular_values[k].clamp(0.0, 1.0)).collect();
    Ok(PrincipalVectors {
        first: a.basis() * &y,
        second: b.basis() * &z,
        cosines,
        rotation: y,
    })
}

fn check_pair(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: a.ambient_dim(), found: b.ambient_dim() });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: DMatrix<f64>,
}

impl SymmetricSpectrum {
    /// Span of the `k` leading eigenvectors.
    pub fn leading(&self, k: usize) -> Result<Subspace> {
        let d = self.eigenvectors.nrows();
        if k == 0 || k > d {
            return Err(Error::InvalidInput(format!("cannot take {k} leading eigenvectors of a {d} x {d} matrix")));
        }
        Subspace::from_orthonormal(self.eigenvectors.columns(0, k).into_owned())
    }

    /// `λ_k - λ_{k+1}` for consecutive eigenvalues.
    pub fn gaps(&self) -> Vec<f64> {
        self.eigenvalues.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

/// Symmetric eigendecomposition with descending eigenvalues.
///
/// The input is symmetrized as `(C + Cᵀ)/2`; asymmetry above `1e-8` relative to
/// the largest entry is rejected. Equal eigenvalues keep the solver's column
/// order, and each eigenvector gets the same sign convention as
/// [`Subspace::orthonormalize`].
pub fn symmetric_eig(c: &DMatrix<f64>) -> Result<SymmetricSpectrum> {
    let (n, m) = c.shape();
    if n != m {
        return Err(Error::DimensionMismatch { expected: n, found: m });
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let scale = c.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let asymmetry = (c - c.transpose()).amax();
    if asymmetry > 1e-8 * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut eigenvectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    fix_column_signs(&mut eigenvectors);
    Ok(SymmetricSpectrum { eigenvalues, eigenvectors })
}

/// `max |BᵀB - I|`.
pub fn orthonormality_error(b: &DMatrix<f64>) -> f64 {
    let g = b.tr_mul(b);
    let mut err = 0.0_f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((g[(i, j)] - target).abs());
        }
    }
    err
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.singular_values();
    let top = sv.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

fn fix_column_signs(b: &mut DMatrix<f64>) {
    for mut col in b.column_iter_mut() {
        if let Some(first) = col.iter().copied().find(|v| v.abs() > SIGN_EPS) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(d: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng))
    }

    // Oracle: spectral norm of the explicit d x d projector difference.
    fn brute_distance(a: &Subspace, b: &Subspace) -> f64 {
        (a.projector() - b.projector()).singular_values().max()
    }

    #[test]
    fn identity_columns_are_kept() {
        let a = DMatrix::<f64>::identity(3, 3).columns(0, 2).into_owned();
        let s = Subspace::orthonormalize(&a).unwrap();
        assert_eq!(s.basis(), &a);
    }

    #[test]
    fn scaling_is_removed() {
        let a = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let s = Subspace::orthonormalize(&a).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((s.basis() - expected).amax() < 1e-15);
    }

    #[test]
    fn random_matrix_keeps_column_space() {
        let a = gaussian(10, 2, 7);
        let s = Subspace::orthonormalize(&a).unwrap();
        assert!(orthonormality_error(s.basis()) < 1e-12);
        let reprojected = s.projector() * &a;
        assert!((reprojected - &a).norm() < 1e-10);
        for col in s.basis().column_iter() {
            let first = col.iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            Subspace::orthonormalize(&a),
            Err(Error::RankDeficient { rank: 1, expected: 2 })
        ));
    }

    #[test]
    fn distance_examples() {
        let e1 = Subspace::coordinate(3, &[0]).unwrap();
        let e2 = Subspace::coordinate(3, &[1]).unwrap();
        assert_eq!(subspace_distance(&e1, &e1).unwrap(), 0.0);
        assert!((subspace_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        let diag = Subspace::from_direction(&[1.0, 1.0, 0.0]).unwrap();
        let expected = brute_distance(&e1, &diag);
        assert!((expected - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((subspace_distance(&e1, &diag).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
    }

    #[test]
    fn distance_rejects_mismatched_ambient_dimension() {
        let a = Subspace::coordinate(3, &[0]).unwrap();
        let b = Subspace::coordinate(4, &[0]).unwrap();
        assert!(matches!(subspace_distance(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn distance_between_unequal_dimensions_matches_projector_route() {
        let a = Subspace::orthonormalize(&gaussian(6, 1, 1)).unwrap();
        let b = Subspace::orthonormalize(&gaussian(6, 3, 2)).unwrap();
        let fast = subspace_distance(&a, &b).unwrap();
        assert!((fast - brute_distance(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn principal_angle_examples() {
        let e1 = Subspace::coordinate(3, &[0]).unwrap();
        let e2 = Subspace::coordinate(3, &[1]).unwrap();
        assert_eq!(principal_angles(&e1, &e1).unwrap(), alloc::vec![0.0]);
        assert!((principal_angles(&e1, &e2).unwrap()[0] - FRAC_PI_2).abs() < 1e-15);

        let a = Subspace::orthonormalize(&gaussian(6, 2, 11)).unwrap();
        let b = Subspace::orthonormalize(&gaussian(6, 2, 12)).unwrap();
        let angles = principal_angles(&a, &b).unwrap();
        assert!(angles[0] <= angles[1]);
        let dist = brute_distance(&a, &b);
        assert!((libm::sin(angles[1]) - dist).abs() < 1e-10);
        assert!((libm::cos(angles[1]) - libm::sqrt(1.0 - dist * dist)).abs() < 1e-10);
    }

    #[test]
    fn small_angles_are_resolved() {
        // acos of the cosine alone would return 0 here.
        let theta = 1e-9;
        let a = Subspace::coordinate(4, &[0]).unwrap();
        let b = Subspace::from_direction(&[libm::cos(theta), libm::sin(theta), 0.0, 0.0]).unwrap();
        let angles = principal_angles(&a, &b).unwrap();
        assert!((angles[0] - theta).abs() < 1e-15, "{:e}", angles[0] - theta);
        let dist = subspace_distance(&a, &b).unwrap();
        assert!((dist - libm::sin(theta)).abs() < 1e-15, "{:e}", dist - libm::sin(theta));
    }

    #[test]
    fn principal_vectors_pair_columns() {
        let a = Subspace::orthonormalize(&gaussian(7, 3, 5)).unwrap();
        let b = Subspace::orthonormalize(&gaussian(7, 3, 6)).unwrap();
        let pv = principal_vectors(&a, &b).unwrap();
        let angles = principal_angles(&a, &b).unwrap();
        for i in 0..3 {
            let c = pv.first.column(i).dot(&pv.second.column(i));
            assert!((c - pv.cosines[i]).abs() < 1e-12);
            assert!((libm::acos(pv.cosines[i].min(1.0)) - angles[i]).abs() < 1e-7);
        }
        assert!(orthonormality_error(&pv.first) < 1e-12);
        assert!((pv.first.clone() - a.basis() * &pv.rotation).amax() < 1e-14);
    }

    #[test]
    fn eig_of_diagonal() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![3.0, 1.0, 2.0]));
        let spec = symmetric_eig(&c).unwrap();
        assert_eq!(spec.eigenvalues, alloc::vec![3.0, 2.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(spec.eigenvectors, expected);
        assert_eq!(spec.gaps(), alloc::vec![1.0, 1.0]);
    }

    #[test]
    fn eig_of_rank_one() {
        let w = DVector::from_vec(alloc::vec![0.6, 0.0, -0.8, 0.0]);
        let c = &w * w.transpose();
        let spec = symmetric_eig(&c).unwrap();
        assert!((spec.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!(spec.eigenvalues[1..].iter().all(|v| v.abs() < 1e-14));
        let lead = spec.eigenvectors.column(0);
        assert!((lead.dot(&w).abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_asymmetric_input() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(symmetric_eig(&c), Err(Error::NotSymmetric { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_is_a_metric(seed in 0u64..10_000, d in 3usize..=12, r in 1usize..=3) {
            let r = r.min(d - 1);
            let a = Subspace::orthonormalize(&gaussian(d, r, seed)).unwrap();
            let b = Subspace::orthonormalize(&gaussian(d, r, seed + 1)).unwrap();
            let c = Subspace::orthonormalize(&gaussian(d, r, seed + 2)).unwrap();
            let ab = subspace_distance(&a, &b).unwrap();
            let ba = subspace_distance(&b, &a).unwrap();
            let bc = subspace_distance(&b, &c).unwrap();
            let ac = subspace_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-14);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(subspace_distance(&a, &a).unwrap() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - brute_distance(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn sine_of_largest_angle_is_distance(seed in 0u64..10_000, d in 2usize..=12, r in 1usize..=3) {
            let r = r.min(d);
            let a = Subspace::orthonormalize(&gaussian(d, r, seed)).unwrap();
            let b = Subspace::orthonormalize(&gaussian(d, r, seed + 7)).unwrap();
            let angles = principal_angles(&a, &b).unwrap();
            let largest = angles[r - 1];
            prop_assert!((libm::sin(largest) - subspace_distance(&a, &b).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn orthonormalize_is_idempotent(seed in 0u64..10_000, d in 1usize..=10, r in 1usize..=4) {
            let r = r.min(d);
            let once = Subspace::orthonormalize(&gaussian(d, r, seed)).unwrap();
            let twice = Subspace::orthonormalize(once.basis()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn eig_reconstructs(seed in 0u64..10_000, d in 1usize..=10) {
            let a = gaussian(d, d, seed);
            let c = &a * a.transpose();
            let spec = symmetric_eig(&c).unwrap();
            let v = &spec.eigenvectors;
            let lambda = DMatrix::from_diagonal(&DVector::from_vec(spec.eigenvalues.clone()));
            let norm = c.singular_values().max();
            prop_assert!((v * lambda * v.transpose() - &c).singular_values().max() <= 1e-6 * norm.max(1e-300));
            prop_assert!(orthonormality_error(v) < 1e-8);
            for w in spec.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for k in 0..d {
                let col = v.column(k);
                let resid = (&c * col - col * spec.eigenvalues[k]).norm();
                prop_assert!(resid <= 1e-7 * norm.max(1e-300));
            }
        }
    }
}
