//! Embedded ridge approximation of a weighted quantity of interest.
//!
//! Every field component `f_i` gets its own ridge model `g_i(W_iᵀx)`. For a
//! qoi `h = ωᵀf`, the gradient covariance `E[∇h ∇hᵀ]` is estimated from the
//! nodal models as `(1/M) Σ_m J(x_m) ωωᵀ J(x_m)ᵀ`. Because `ωωᵀ` has rank one
//! this is accumulated from the `d`-vectors `v_m = J(x_m)ω`; neither `ωωᵀ`
//! nor `J` is formed. The leading eigenvectors of the estimate span the
//! dimension-reducing subspace of `h`, on which a profile is then fitted.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ridge_fit::{fit_linear_direction, fit_mave, fit_vp, MaveConfig, SampleSet, VpConfig};
use crate::ridge_model::{fit_profile, NodalRidgeModel, RidgeProfile};
use crate::subspace::{symmetric_eig, Subspace, SymmetricSpectrum};

/// Number of samples summed per partial covariance.
pub const COVARIANCE_CHUNK: usize = 64;

/// Field evaluations at shared inputs: `f[(m, i)] = f(x_m, s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    x: DMatrix<f64>,
    f: DMatrix<f64>,
    node_coords: DMatrix<f64>,
}

impl FieldSamples {
    pub fn new(x: DMatrix<f64>, f: DMatrix<f64>, node_coords: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || f.ncols() == 0 {
            return Err(Error::InvalidInput("field samples need M >= 1 and N >= 1".into()));
        }
        if f.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), found: f.nrows() });
        }
        if node_coords.nrows() != f.ncols() {
            return Err(Error::DimensionMismatch { expected: f.ncols(), found: node_coords.nrows() });
        }
        if x.iter().chain(f.iter()).chain(node_coords.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field samples contain non-finite values".into()));
        }
        Ok(Self { x, f, node_coords })
    }

    /// Nodes placed at `s_i = i` on a line.
    pub fn on_chain(x: DMatrix<f64>, f: DMatrix<f64>) -> Result<Self> {
        let n = f.ncols();
        Self::new(x, f, DMatrix::from_fn(n, 1, |i, _| i as f64))
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn node_coords(&self) -> &DMatrix<f64> {
        &self.node_coords
    }

    pub fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.f.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Samples of component `i`.
    pub fn node(&self, i: usize) -> Result<SampleSet> {
        SampleSet::new(self.x.clone(), self.f.column(i).into_owned())
    }

    /// `F ω`, the qoi at every sample.
    pub fn qoi(&self, weights: &QuadratureWeights) -> Result<DVector<f64>> {
        if weights.len() != self.num_nodes() {
            return Err(Error::DimensionMismatch { expected: self.num_nodes(), found: weights.len() });
        }
        Ok(&self.f * weights.as_vector())
    }
}

/// Quadrature weights `ω` turning the field into a scalar qoi `ωᵀf`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights(DVector<f64>);

impl QuadratureWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("quadrature weights must be finite".into()));
        }
        if omega.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidInput("quadrature weights are all zero".into()));
        }
        Ok(Self(DVector::from_vec(omega)))
    }

    /// `1/N` at every node.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(alloc::vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Gradient-free strategy used to find nodal ridge directions.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitter {
    /// Global linear model; always one direction.
    Linear,
    Vp(VpConfig),
    Mave(MaveConfig),
}

impl Fitter {
    pub fn name(&self) -> &'static str {
        match self {
            Fitter::Linear => "linear",
            Fitter::Vp(_) => "vp",
            Fitter::Mave(_) => "mave",
        }
    }
}

/// How each node is fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFitConfig {
    pub fitter: Fitter,
    /// Ridge dimension per node (ignored by [`Fitter::Linear`]).
    pub reduced_dim: usize,
    /// Degree of the nodal profile fitted on the recovered directions.
    pub profile_degree: usize,
}

impl NodeFitConfig {
    fn node_reduced_dim(&self) -> usize {
        match self.fitter {
            Fitter::Linear => 1,
            _ => self.reduced_dim,
        }
    }
}

/// Outcome of a single nodal fit.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeStatus {
    Fitted { converged: bool },
    /// Constant component: stored with a constant profile and zero gradient.
    Degenerate,
    /// The fitter failed; stored with the sample-mean constant profile.
    Failed(Error),
}

impl NodeStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, NodeStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub model: NodalRidgeModel,
    pub status: NodeStatus,
}

/// Fits one node. The fitter's RNG stream is seeded with `seed ^ node_index`,
/// so results do not depend on scheduling order.
pub fn fit_node(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &NodeFitConfig, node_index: usize) -> NodeFit {
    let r = cfg.node_reduced_dim();
    let placeholder = |c: f64, status: NodeStatus| -> NodeFit {
        let axes: Vec<usize> = (0..r.min(x.ncols()).max(1)).collect();
        let model = Subspace::coordinate(x.ncols().max(1), &axes)
            .and_then(|s| {
                let k = s.dim();
                NodalRidgeModel::new(s, RidgeProfile::constant(k, cfg.profile_degree, c)?)
            })
            .expect("coordinate subspace with constant profile");
        NodeFit { model, status }
    };
    let data = match SampleSet::new(x.clone(), y.clone()) {
        Ok(d) => d,
        Err(e) => return placeholder(0.0, NodeStatus::Failed(e)),
    };
    let mean = y.mean();
    if data.is_constant() {
        return placeholder(mean, NodeStatus::Degenerate);
    }
    let found = match &cfg.fitter {
        Fitter::Linear => fit_linear_direction(&data).map(|s| (s, true)),
        Fitter::Vp(base) => {
            let vp = VpConfig { reduced_dim: r, rng_seed: base.rng_seed ^ node_index as u64, ..base.clone() };
            fit_vp(&data, &vp).map(|rep| (rep.subspace, rep.converged))
        }
        Fitter::Mave(base) => {
            let mave = MaveConfig { reduced_dim: r, rng_seed: base.rng_seed ^ node_index as u64, ..base.clone() };
            fit_mave(&data, &mave).map(|rep| (rep.subspace, rep.converged))
        }
    };
    let fitted = found.and_then(|(dirs, converged)| {
        let profile = fit_profile(&dirs, x, y, cfg.profile_degree)?;
        Ok((NodalRidgeModel::new(dirs, profile)?, converged))
    });
    match fitted {
        Ok((model, converged)) => NodeFit { model, status: NodeStatus::Fitted { converged } },
        Err(Error::Degenerate) => placeholder(mean, NodeStatus::Degenerate),
        Err(e) => placeholder(mean, NodeStatus::Failed(e)),
    }
}

/// Nodal ridge models together with the quadrature that defines the qoi.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedRidgeModel {
    nodes: Vec<NodalRidgeModel>,
    status: Vec<NodeStatus>,
    weights: QuadratureWeights,
    node_coords: DMatrix<f64>,
}

impl EmbeddedRidgeModel {
    /// Assembles nodal fits; fails if more than half of them failed.
    pub fn from_fits(fits: Vec<NodeFit>, weights: QuadratureWeights, node_coords: DMatrix<f64>) -> Result<Self> {
        let failed = fits.iter().filter(|f| f.status.is_failed()).count();
        if 2 * failed > fits.len() {
            return Err(Error::TooManyFailures { failed, total: fits.len() });
        }
        let (nodes, status) = fits.into_iter().map(|f| (f.model, f.status)).unzip();
        Self::new(nodes, status, weights, node_coords)
    }

    pub fn new(
        nodes: Vec<NodalRidgeModel>,
        status: Vec<NodeStatus>,
        weights: QuadratureWeights,
        node_coords: DMatrix<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::InvalidInput("embedded model needs at least one node".into()));
        }
        if status.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: status.len() });
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: weights.len() });
        }
        if node_coords.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: node_coords.nrows() });
        }
        let d = nodes[0].ambient_dim();
        if let Some(bad) = nodes.iter().find(|m| m.ambient_dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.ambient_dim() });
        }
        Ok(Self { nodes, status, weights, node_coords })
    }

    pub fn nodes(&self) -> &[NodalRidgeModel] {
        &self.nodes
    }

    pub fn status(&self) -> &[NodeStatus] {
        &self.status
    }

    pub fn weights(&self) -> &QuadratureWeights {
        &self.weights
    }

    pub fn node_coords(&self) -> &DMatrix<f64> {
        &self.node_coords
    }

    pub fn input_dim(&self) -> usize {
        self.nodes[0].ambient_dim()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// The same nodal models under different quadrature weights.
    pub fn with_weights(&self, weights: QuadratureWeights) -> Result<Self> {
        Self::new(self.nodes.clone(), self.status.clone(), weights, self.node_coords.clone())
    }

    /// `J(x) = [∇f̂₁(x), …, ∇f̂_N(x)]`, `d x N`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: x.len() });
        }
        let mut j = DMatrix::zeros(d, self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            j.column_mut(i).copy_from(&node.gradient(x)?);
        }
        Ok(j)
    }

    /// `J(x) ω = Σᵢ ωᵢ ∇f̂ᵢ(x)`, the gradient of the qoi surrogate.
    pub fn qoi_gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: x.len() });
        }
        let mut v = DVector::zeros(d);
        for (node, &w) in self.nodes.iter().zip(self.weights.as_slice()) {
            if w != 0.0 {
                v.axpy(w, &node.gradient(x)?, 1.0);
            }
        }
        Ok(v)
    }

    /// `Σᵢ ωᵢ f̂ᵢ(x)`.
    pub fn qoi_value(&self, x: &[f64]) -> Result<f64> {
        let mut h = 0.0;
        for (node, &w) in self.nodes.iter().zip(self.weights.as_slice()) {
            h += w * node.evaluate(x)?;
        }
        Ok(h)
    }
}

/// Fits every node of `field` sequentially and assembles the model.
pub fn fit_embedded(field: &FieldSamples, weights: QuadratureWeights, cfg: &NodeFitConfig) -> Result<EmbeddedRidgeModel> {
    if weights.len() != field.num_nodes() {
        return Err(Error::DimensionMismatch { expected: field.num_nodes(), found: weights.len() });
    }
    let fits = (0..field.num_nodes())
        .map(|i| fit_node(field.x(), &field.values().column(i).into_owned(), cfg, i))
        .collect();
    EmbeddedRidgeModel::from_fits(fits, weights, field.node_coords().clone())
}

/// `Σ_{m ∈ rows} v_m v_mᵀ` with `v_m = J(x_m) ω` (not normalized).
pub fn covariance_partial(model: &EmbeddedRidgeModel, x_eval: &DMatrix<f64>, rows: Range<usize>) -> Result<DMatrix<f64>> {
    let d = model.input_dim();
    if x_eval.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: x_eval.ncols() });
    }
    let mut acc = DMatrix::zeros(d, d);
    let mut x = alloc::vec![0.0; d];
    for m in rows {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = x_eval[(m, k)];
        }
        let v = model.qoi_gradient(&x)?;
        acc.ger(1.0, &v, &v, 1.0);
    }
    Ok(acc)
}

/// Row ranges of [`COVARIANCE_CHUNK`] samples covering `0..m`.
pub fn covariance_chunks(m: usize) -> Vec<Range<usize>> {
    (0..m).step_by(COVARIANCE_CHUNK).map(|s| s..(s + COVARIANCE_CHUNK).min(m)).collect()
}

/// Sums matrices by a balanced pairwise tree in index order.
pub fn pairwise_sum(mut parts: Vec<DMatrix<f64>>) -> Option<DMatrix<f64>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a + b),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// `Ĉ(h) = (1/M) Σ_m J(x_m) ωωᵀ J(x_m)ᵀ` over the rows of `x_eval`.
///
/// Partial sums over fixed chunks are combined by [`pairwise_sum`], so a
/// parallel evaluation of the same chunks reproduces the result bit for bit.
pub fn gradient_covariance(model: &EmbeddedRidgeModel, x_eval: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = x_eval.nrows();
    if m == 0 {
        return Err(Error::InvalidInput("no evaluation points for the gradient covariance".into()));
    }
    let parts = covariance_chunks(m)
        .into_iter()
        .map(|rows| covariance_partial(model, x_eval, rows))
        .collect::<Result<Vec<_>>>()?;
    let total = pairwise_sum(parts).expect("at least one chunk");
    Ok(total / m as f64)
}

/// Ridge approximation `h(x) ≈ ĝ_h(Uᵀx)` of the qoi.
#[derive(Debug, Clone, PartialEq)]
pub struct QoiRidgeModel {
    model: NodalRidgeModel,
    spectrum: SymmetricSpectrum,
}

impl QoiRidgeModel {
    pub fn new(subspace: Subspace, profile: RidgeProfile, spectrum: SymmetricSpectrum) -> Result<Self> {
        Ok(Self { model: NodalRidgeModel::new(subspace, profile)?, spectrum })
    }

    pub fn subspace(&self) -> &Subspace {
        self.model.directions()
    }

    pub fn profile(&self) -> &RidgeProfile {
        self.model.profile()
    }

    pub fn spectrum(&self) -> &SymmetricSpectrum {
        &self.spectrum
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.model.evaluate(x)
    }

    pub fn evaluate_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.model.evaluate_rows(x)
    }
}

/// Leading `k` eigenvectors of `Ĉ(h)` evaluated at the training inputs, with a
/// degree-`p` profile fitted on `(Uᵀx_m, y_m)`.
pub fn extract_qoi_ridge(
    model: &EmbeddedRidgeModel,
    x: &DMatrix<f64>,
    y_qoi: &DVector<f64>,
    k: usize,
    degree: usize,
) -> Result<QoiRidgeModel> {
    let cov = gradient_covariance(model, x)?;
    qoi_ridge_from_covariance(&cov, x, y_qoi, k, degree)
}

/// As [`extract_qoi_ridge`] for a covariance computed elsewhere (for example on
/// fresh Monte Carlo points).
pub fn qoi_ridge_from_covariance(
    cov: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y_qoi: &DVector<f64>,
    k: usize,
    degree: usize,
) -> Result<QoiRidgeModel> {
    if cov.nrows() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), found: cov.nrows() });
    }
    if y_qoi.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y_qoi.len() });
    }
    let spectrum = symmetric_eig(cov)?;
    let subspace = spectrum.leading(k)?;
    let profile = fit_profile(&subspace, x, y_qoi, degree)?;
    QoiRidgeModel::new(subspace, profile, spectrum)
}

/// `(1/M') Σ (h - ĥ)² / σ_h²` with `σ_h²` the sample variance (divisor `M' - 1`).
pub fn normalized_mse(predicted: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    let m = truth.len();
    if predicted.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: predicted.len() });
    }
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let mean = truth.mean();
    let var = truth.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / (m as f64 - 1.0);
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let mse = (predicted - truth).norm_squared() / m as f64;
    Ok(mse / var)
}

/// Normalized MSE `ε_h` of a qoi surrogate on verification samples.
pub fn qoi_mse(model: &QoiRidgeModel, y_eval: &DMatrix<f64>, h_true: &DVector<f64>) -> Result<f64> {
    if y_eval.nrows() != h_true.len() {
        return Err(Error::DimensionMismatch { expected: y_eval.nrows(), found: h_true.len() });
    }
    let predicted = model.evaluate_rows(y_eval)?;
    normalized_mse(&predicted, h_true)
}

/// Eigenvalue gaps of `Ĉ(h)`, largest first, to justify a choice of `k`.
pub fn eigen_gap_report(spectrum: &SymmetricSpectrum) -> Vec<(usize, f64)> {
    spectrum.gaps().into_iter().enumerate().map(|(i, g)| (i + 1, g)).collect()
}

impl core::fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NodeStatus::Fitted { converged: true } => f.write_str("fitted"),
            NodeStatus::Fitted { converged: false } => f.write_str("not_converged"),
            NodeStatus::Degenerate => f.write_str("degenerate"),
            NodeStatus::Failed(e) => f.write_str(&format!("failed: {e}")),
        }
    }
}
