//! Test problems with known ridge structure.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedded::{FieldSamples, QuadratureWeights};
use crate::error::{Error, Result};
use crate::subspace::Subspace;

/// Input dimension of the analytical problem.
pub const ANALYTICAL_DIM: usize = 10;
/// qoi weights `h = 2f₁ + 3f₂ + 5f₃`.
pub const ANALYTICAL_WEIGHTS: [f64; 3] = [2.0, 3.0, 5.0];

fn uniform_inputs<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..=1.0))
}

/// `f₁ = t₁² + t₁³`, `f₂ = exp(t₂)`, `f₃ = sin(π t₃)` with `tᵢ = wᵢᵀx` on
/// `[-1, 1]^10`, and `h = 2f₁ + 3f₂ + 5f₃`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalProblem {
    directions: [DVector<f64>; 3],
}

impl AnalyticalProblem {
    /// Draws the three unit directions from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = || loop {
            let v = DVector::from_fn(ANALYTICAL_DIM, |_, _| normal.sample(&mut rng));
            let n = v.norm();
            if n > 1e-8 {
                break v / n;
            }
        };
        Self { directions: [draw(), draw(), draw()] }
    }

    pub fn from_directions(directions: [DVector<f64>; 3]) -> Result<Self> {
        for w in &directions {
            if w.len() != ANALYTICAL_DIM {
                return Err(Error::DimensionMismatch { expected: ANALYTICAL_DIM, found: w.len() });
            }
            if (w.norm() - 1.0).abs() > 1e-14 {
                return Err(Error::InvalidInput("analytical directions must have unit norm".into()));
            }
        }
        Ok(Self { directions })
    }

    pub fn directions(&self) -> &[DVector<f64>; 3] {
        &self.directions
    }

    /// `span(w₁, w₂, w₃)`.
    pub fn ridge_subspace(&self) -> Result<Subspace> {
        Subspace::orthonormalize(&DMatrix::from_columns(&self.directions))
    }

    pub fn component_subspace(&self, i: usize) -> Result<Subspace> {
        Subspace::from_direction(self.directions[i].as_slice())
    }

    pub fn weights(&self) -> QuadratureWeights {
        QuadratureWeights::new(ANALYTICAL_WEIGHTS.to_vec()).expect("fixed weights")
    }

    fn projections(&self, x: &[f64]) -> [f64; 3] {
        let xv = DVector::from_column_slice(x);
        [self.directions[0].dot(&xv), self.directions[1].dot(&xv), self.directions[2].dot(&xv)]
    }

    pub fn components(&self, x: &[f64]) -> [f64; 3] {
        let [t1, t2, t3] = self.projections(x);
        [t1 * t1 + t1 * t1 * t1, libm::exp(t2), libm::sin(PI * t3)]
    }

    /// `∇h(x) = 2(2t₁ + 3t₁²)w₁ + 3exp(t₂)w₂ + 5π cos(πt₃)w₃`.
    pub fn qoi_gradient(&self, x: &[f64]) -> DVector<f64> {
        let [t1, t2, t3] = self.projections(x);
        let [a, b, c] = ANALYTICAL_WEIGHTS;
        &self.directions[0] * (a * (2.0 * t1 + 3.0 * t1 * t1))
            + &self.directions[1] * (b * libm::exp(t2))
            + &self.directions[2] * (c * PI * libm::cos(PI * t3))
    }

    pub fn qoi(&self, x: &[f64]) -> f64 {
        let f = self.components(x);
        ANALYTICAL_WEIGHTS.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    /// `m` uniform samples: the field `(f₁, f₂, f₃)` and `h = F (2, 3, 5)ᵀ`.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<(FieldSamples, DVector<f64>)> {
        let x = uniform_inputs(m, ANALYTICAL_DIM, rng);
        let mut f = DMatrix::zeros(m, 3);
        let mut row = [0.0; ANALYTICAL_DIM];
        for r in 0..m {
            for (k, v) in row.iter_mut().enumerate() {
                *v = x[(r, k)];
            }
            let c = self.components(&row);
            for i in 0..3 {
                f[(r, i)] = c[i];
            }
        }
        let field = FieldSamples::on_chain(x, f)?;
        let h = field.qoi(&self.weights())?;
        Ok((field, h))
    }
}

/// Directions from `seed`, then `m` samples from the same stream.
pub fn generate_analytical(seed: u64, m: usize) -> Result<(AnalyticalProblem, FieldSamples, DVector<f64>)> {
    let problem = AnalyticalProblem::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A4D_504C_4553);
    let (field, h) = problem.sample(m, &mut rng)?;
    Ok((problem, field, h))
}

/// Ridge profile applied at a node of the localized field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkFamily {
    /// `t + t²/2`
    Quadratic,
    /// `t + 0.3t³`
    Cubic,
    /// `exp(0.8t)`
    Exp,
    /// `sin(1.2t)`
    Sine,
}

impl LinkFamily {
    pub const ALL: [LinkFamily; 4] = [LinkFamily::Quadratic, LinkFamily::Cubic, LinkFamily::Exp, LinkFamily::Sine];

    pub fn eval(self, t: f64) -> f64 {
        match self {
            LinkFamily::Quadratic => t + 0.5 * t * t,
            LinkFamily::Cubic => t + 0.3 * t * t * t,
            LinkFamily::Exp => libm::exp(0.8 * t),
            LinkFamily::Sine => libm::sin(1.2 * t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFamily::Quadratic => "quadratic",
            LinkFamily::Cubic => "cubic",
            LinkFamily::Exp => "exp",
            LinkFamily::Sine => "sine",
        }
    }
}

/// A field on a chain of `N` nodes whose node `i` depends on a window of about
/// `window_width` consecutive inputs centred at `i (d-1)/(N-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFieldSpec {
    pub d: usize,
    pub n: usize,
    pub window_width: usize,
    /// One per node.
    pub links: Vec<LinkFamily>,
    pub noise_sd: f64,
    pub rng_seed: u64,
}

impl SyntheticFieldSpec {
    /// Links assigned in four contiguous blocks, no noise.
    pub fn new(d: usize, n: usize, window_width: usize, rng_seed: u64) -> Self {
        let links = (0..n).map(|i| LinkFamily::ALL[(i * 4 / n.max(1)).min(3)]).collect();
        Self { d, n, window_width, links, noise_sd: 0.0, rng_seed }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::InvalidInput("field needs d >= 1 and N >= 1".into()));
        }
        if self.window_width == 0 || self.window_width > self.d {
            return Err(Error::InvalidInput("window_width must lie in 1..=d".into()));
        }
        if self.links.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: self.links.len() });
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidInput("noise_sd must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of a localized field.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedField {
    spec: SyntheticFieldSpec,
    directions: Vec<Subspace>,
}

impl LocalizedField {
    /// Node `i` weights input `k` by `a_k cos²(π(k - cᵢ)/w)` for `|k - cᵢ| < w/2`,
    /// where the per-input amplitudes `a_k = ±U(0.5, 1.5)` come from the seed.
    /// A node whose window misses every integer falls back to the nearest axis.
    pub fn new(spec: SyntheticFieldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let amp: Vec<f64> = (0..spec.d)
            .map(|_| {
                let a = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) {
                    a
                } else {
                    -a
                }
            })
            .collect();
        let w = spec.window_width as f64;
        let mut directions = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let c = if spec.n == 1 { 0.0 } else { i as f64 * (spec.d - 1) as f64 / (spec.n - 1) as f64 };
            let mut v: Vec<f64> = (0..spec.d)
                .map(|k| {
                    let off = k as f64 - c;
                    let b = libm::cos(PI * off / w);
                    // Snap the edge of the window to exact zeros.
                    if off.abs() < w / 2.0 && b * b > 1e-12 {
                        amp[k] * b * b
                    } else {
                        0.0
                    }
                })
                .collect();
            if v.iter().all(|x| *x == 0.0) {
                let k = (libm::round(c) as usize).min(spec.d - 1);
                v[k] = amp[k];
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            v.iter_mut().for_each(|x| *x /= norm);
            directions.push(Subspace::from_direction(&v)?);
        }
        Ok(Self { spec, directions })
    }

    pub fn spec(&self) -> &SyntheticFieldSpec {
        &self.spec
    }

    /// True unit direction of every node.
    pub fn directions(&self) -> &[Subspace] {
        &self.directions
    }

    /// `m` uniform samples on `[-1, 1]^d` drawn from `seed`.
    pub fn sample(&self, m: usize, seed: u64) -> Result<FieldSamples> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_inputs(m, self.spec.d, &mut rng);
        let t = &x * DMatrix::from_columns(&self.directions.iter().map(|w| w.direction(0)).collect::<Vec<_>>());
        let noise = Normal::new(0.0, self.spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        let f = DMatrix::from_fn(m, self.spec.n, |r, i| {
            let clean = self.spec.links[i].eval(t[(r, i)]);
            if self.spec.noise_sd > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            }
        });
        FieldSamples::on_chain(x, f)
    }
}

/// Builds the field from `spec` and draws `m` samples from `sample_seed`.
pub fn generate_localized_field(spec: SyntheticFieldSpec, m: usize, sample_seed: u64) -> Result<(LocalizedField, FieldSamples)> {
    let field = LocalizedField::new(spec)?;
    let samples = field.sample(m, sample_seed)?;
    Ok((field, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::subspace_distance;

    #[test]
    fn analytical_is_reproducible_and_exact() {
        let (p, field, h) = generate_analytical(3, 50).unwrap();
        let (q, field2, _) = generate_analytical(3, 50).unwrap();
        assert_eq!(p, q);
        assert_eq!(field, field2);
        for w in p.directions() {
            assert!((w.norm() - 1.0).abs() < 1e-14);
        }
        let expected = field.values() * DVector::from_column_slice(&ANALYTICAL_WEIGHTS);
        assert_eq!(h, expected);
        for r in 0..50 {
            let row: Vec<f64> = field.x().row(r).iter().copied().collect();
            assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!((p.qoi(&row) - h[r]).abs() <= 1e-13 * h[r].abs().max(1.0));
        }
        assert_ne!(AnalyticalProblem::new(4), p);
    }

    #[test]
    fn analytical_gradient_at_origin() {
        let p = AnalyticalProblem::new(11);
        let g = p.qoi_gradient(&[0.0; ANALYTICAL_DIM]);
        let expected = &p.directions()[1] * 3.0 + &p.directions()[2] * (5.0 * PI);
        assert!((g - expected).amax() < 1e-14);
    }

    #[test]
    fn analytical_gradient_matches_differences() {
        let p = AnalyticalProblem::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..ANALYTICAL_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = p.qoi_gradient(&x);
        let h = 1e-6;
        for k in 0..ANALYTICAL_DIM {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (p.qoi(&a) - p.qoi(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g.amax().max(1.0));
        }
    }

    #[test]
    fn unit_window_gives_axes() {
        let f = LocalizedField::new(SyntheticFieldSpec::new(8, 20, 1, 2)).unwrap();
        for w in f.directions() {
            let v = w.direction(0);
            assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
            assert!((v.amax() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_window_can_be_dense() {
        let f = LocalizedField::new(SyntheticFieldSpec::new(6, 5, 6, 2)).unwrap();
        let mid = f.directions()[2].direction(0);
        assert!(mid.iter().filter(|x| x.abs() > 1e-3).count() >= 5);
    }

    #[test]
    fn adjacent_distances_are_smooth() {
        let f = LocalizedField::new(SyntheticFieldSpec::new(30, 200, 5, 1)).unwrap();
        let dirs = f.directions();
        let gaps: Vec<f64> = dirs.windows(2).map(|p| subspace_distance(&p[0], &p[1]).unwrap()).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let max = gaps.iter().copied().fold(0.0, f64::max);
        assert!(max < 2.0 * mean, "max {max} mean {mean}");
    }

    #[test]
    fn directions_are_local() {
        let spec = SyntheticFieldSpec::new(30, 200, 5, 3);
        let f = LocalizedField::new(spec).unwrap();
        for (i, w) in f.directions().iter().enumerate() {
            let c = i as f64 * 29.0 / 199.0;
            for (k, v) in w.direction(0).iter().enumerate() {
                if (k as f64 - c).abs() >= 2.5 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn field_values_follow_links() {
        let mut spec = SyntheticFieldSpec::new(10, 8, 3, 4);
        let (field, samples) = generate_localized_field(spec.clone(), 20, 9).unwrap();
        for i in 0..8 {
            let w = field.directions()[i].direction(0);
            for r in 0..20 {
                let t = samples.x().row(r).transpose().dot(&w);
                assert!((samples.values()[(r, i)] - spec.links[i].eval(t)).abs() < 1e-14);
            }
        }
        assert_eq!(spec.links[0], LinkFamily::Quadratic);
        assert_eq!(spec.links[7], LinkFamily::Sine);
        spec.noise_sd = 0.1;
        let (_, noisy) = generate_localized_field(spec, 20, 9).unwrap();
        assert!((noisy.values() - samples.values()).amax() > 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(LocalizedField::new(SyntheticFieldSpec::new(5, 4, 6, 0)).is_err());
        assert!(LocalizedField::new(SyntheticFieldSpec::new(5, 4, 0, 0)).is_err());
    }
}
