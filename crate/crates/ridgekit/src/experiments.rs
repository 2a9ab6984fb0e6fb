//! Recovery-probability experiment on the analytical three-ridge problem and a
//! compression study on synthetic localized fields.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ridgekit_core::compression::{
    compress_recursive_with_distances, compress_with_distances, kmedoids_with_distances, random_deletion_with_distances,
    reconstruction_error, recover, retained_directions, CompressionPlan,
};
use ridgekit_core::embedded::{
    fit_embedded, fit_node, gradient_covariance, normalized_mse, EmbeddedRidgeModel, Fitter, NodeFitConfig, NodeStatus,
    QuadratureWeights,
};
use ridgekit_core::ridge_fit::{fit_vp, MaveConfig, SampleSet, VpConfig};
use ridgekit_core::subspace::{subspace_distance, symmetric_eig};
use ridgekit_core::synthetic::{generate_analytical, LocalizedField, SyntheticFieldSpec};
use ridgekit_core::{NodalRidgeModel, Result, Subspace};

use crate::parallel::distance_matrix_parallel;

/// Success threshold on the subspace distance.
pub const DEFAULT_THRESHOLD: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitterKind {
    Linear,
    Vp,
    Mave,
}

impl FitterKind {
    /// Nodal fitter with the given polynomial degree (VP only) and seed.
    pub fn build(self, degree: usize, seed: u64) -> Fitter {
        match self {
            FitterKind::Linear => Fitter::Linear,
            FitterKind::Vp => Fitter::Vp(VpConfig { degree, rng_seed: seed, ..VpConfig::default() }),
            FitterKind::Mave => Fitter::Mave(MaveConfig { rng_seed: seed, ..MaveConfig::default() }),
        }
    }
}

impl fmt::Display for FitterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitterKind::Linear => "linear",
            FitterKind::Vp => "vp",
            FitterKind::Mave => "mave",
        })
    }
}

impl FromStr for FitterKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(FitterKind::Linear),
            "vp" => Ok(FitterKind::Vp),
            "mave" => Ok(FitterKind::Mave),
            _ => Err(format!("unknown fitter `{s}` (expected linear, vp or mave)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMethod {
    /// VP with `r = 3` on qoi samples.
    Direct,
    /// Nodal fits, `Ĉ(h)`, leading eigenvectors.
    Embedded,
}

impl fmt::Display for RecoveryMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecoveryMethod::Direct => "direct",
            RecoveryMethod::Embedded => "embedded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub methods: Vec<RecoveryMethod>,
    /// Nodal fitter of the embedded path.
    pub fitter: FitterKind,
    pub m_grid: Vec<usize>,
    pub n_trials: usize,
    pub threshold: f64,
    pub degree: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            methods: vec![RecoveryMethod::Embedded, RecoveryMethod::Direct],
            fitter: FitterKind::Vp,
            m_grid: (1..=8).map(|i| 50 * i).collect(),
            n_trials: 20,
            threshold: DEFAULT_THRESHOLD,
            degree: 7,
            seed: 0,
        }
    }
}

/// One trial of one method. `distance` is `None` when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub m: usize,
    pub trial: usize,
    pub method: RecoveryMethod,
    pub distance: Option<f64>,
    /// Per-component `dist(Wᵢ, wᵢ)` (embedded only).
    pub component_distances: Option<[f64; 3]>,
}

/// CSV row `M, method, recovery_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub method: RecoveryMethod,
    pub recovery_prob: f64,
}

/// Per-component success rate of the embedded nodal fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub component: String,
    pub recovery_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTable {
    pub rows: Vec<RecoveryRow>,
    pub components: Vec<ComponentRow>,
    pub trials: Vec<TrialOutcome>,
}

impl RecoveryTable {
    pub fn probability(&self, m: usize, method: RecoveryMethod) -> Option<f64> {
        self.rows.iter().find(|r| r.m == m && r.method == method).map(|r| r.recovery_prob)
    }
}

fn run_trial(cfg: &RecoveryConfig, m: usize, trial: usize, method: RecoveryMethod) -> TrialOutcome {
    let seed = cfg.seed ^ trial as u64;
    let mut out = TrialOutcome { m, trial, method, distance: None, component_distances: None };
    let Ok((problem, field, h)) = generate_analytical(seed, m) else {
        return out;
    };
    let Ok(truth) = problem.ridge_subspace() else {
        return out;
    };
    match method {
        RecoveryMethod::Direct => {
            let vp = VpConfig { reduced_dim: 3, degree: cfg.degree, rng_seed: seed, ..VpConfig::default() };
            out.distance = SampleSet::new(field.x().clone(), h)
                .and_then(|data| fit_vp(&data, &vp))
                .and_then(|rep| subspace_distance(&rep.subspace, &truth))
                .ok();
        }
        RecoveryMethod::Embedded => {
            let node_cfg =
                NodeFitConfig { fitter: cfg.fitter.build(cfg.degree, seed), reduced_dim: 1, profile_degree: cfg.degree };
            let Ok(model) = fit_embedded(&field, problem.weights(), &node_cfg) else {
                return out;
            };
            out.component_distances = component_distances(&model, &problem);
            out.distance = gradient_covariance(&model, field.x())
                .and_then(|c| symmetric_eig(&c)?.leading(3))
                .and_then(|u| subspace_distance(&u, &truth))
                .ok();
        }
    }
    out
}

fn component_distances(model: &EmbeddedRidgeModel, problem: &ridgekit_core::synthetic::AnalyticalProblem) -> Option<[f64; 3]> {
    let mut d = [f64::NAN; 3];
    for (i, slot) in d.iter_mut().enumerate() {
        if model.status()[i].is_failed() {
            continue;
        }
        *slot = subspace_distance(model.nodes()[i].directions(), &problem.component_subspace(i).ok()?).ok()?;
    }
    Some(d)
}

/// Fraction of trials whose recovered qoi subspace lies within `threshold` of
/// `span(w₁, w₂, w₃)`, for every `M` and method. Trials run in parallel with
/// seed `seed ^ trial`; failed fits count as failures.
pub fn recovery_probability_experiment(cfg: &RecoveryConfig) -> RecoveryTable {
    let jobs: Vec<(usize, usize, RecoveryMethod)> = cfg
        .m_grid
        .iter()
        .flat_map(|&m| cfg.methods.iter().flat_map(move |&method| (0..cfg.n_trials).map(move |t| (m, t, method))))
        .collect();
    let trials: Vec<TrialOutcome> = jobs.into_par_iter().map(|(m, t, method)| run_trial(cfg, m, t, method)).collect();
    let n = cfg.n_trials.max(1) as f64;
    let success = |d: Option<f64>| d.is_some_and(|d| d < cfg.threshold);
    let mut rows = Vec::new();
    let mut components = Vec::new();
    for &m in &cfg.m_grid {
        for &method in &cfg.methods {
            let these: Vec<&TrialOutcome> = trials.iter().filter(|t| t.m == m && t.method == method).collect();
            let hits = these.iter().filter(|t| success(t.distance)).count();
            rows.push(RecoveryRow { m, method, recovery_prob: hits as f64 / n });
            if method == RecoveryMethod::Embedded {
                for c in 0..3 {
                    let hits = these
                        .iter()
                        .filter(|t| success(t.component_distances.map(|d| d[c]).filter(|v| v.is_finite())))
                        .count();
                    components.push(ComponentRow { m, component: format!("f{}", c + 1), recovery_prob: hits as f64 / n });
                }
                let hits = these.iter().filter(|t| success(t.distance)).count();
                components.push(ComponentRow { m, component: "h".into(), recovery_prob: hits as f64 / n });
            }
        }
    }
    RecoveryTable { rows, components, trials }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionMethod {
    Greedy,
    Recursive,
    Kmedoids,
    Random,
}

impl fmt::Display for CompressionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompressionMethod::Greedy => "greedy",
            CompressionMethod::Recursive => "recursive",
            CompressionMethod::Kmedoids => "kmedoids",
            CompressionMethod::Random => "random",
        })
    }
}

impl FromStr for CompressionMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(CompressionMethod::Greedy),
            "recursive" => Ok(CompressionMethod::Recursive),
            "kmedoids" => Ok(CompressionMethod::Kmedoids),
            "random" => Ok(CompressionMethod::Random),
            _ => Err(format!("unknown compression method `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStudyConfig {
    pub d: usize,
    pub n: usize,
    pub window_width: usize,
    pub noise_sd: f64,
    pub m_train: usize,
    pub m_eval: usize,
    pub removals: Vec<usize>,
    pub stride: usize,
    pub methods: Vec<CompressionMethod>,
    pub fitter: FitterKind,
    /// Degree of the nodal profiles (and of the VP fit).
    pub degree: usize,
    pub seed: u64,
}

impl Default for CompressionStudyConfig {
    fn default() -> Self {
        Self {
            d: 30,
            n: 200,
            window_width: 5,
            noise_sd: 0.0,
            m_train: 300,
            m_eval: 500,
            removals: vec![40, 80, 120, 160],
            stride: 20,
            methods: vec![CompressionMethod::Recursive, CompressionMethod::Kmedoids, CompressionMethod::Random],
            fitter: FitterKind::Vp,
            degree: 5,
            seed: 0,
        }
    }
}

/// `ε_R` of one method at one removal count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub seed: u64,
    pub removal: usize,
    pub method: CompressionMethod,
    /// May fall short of `removal` when a greedy plan stalls.
    pub achieved_removal: usize,
    pub epsilon_r: f64,
    /// Mean subspace distance between recovered and fitted directions.
    pub mean_direction_error: f64,
    pub flagged: usize,
}

/// Fitted field, ready for compression.
pub struct StudyField {
    pub truth: LocalizedField,
    pub train: ridgekit_core::embedded::FieldSamples,
    pub eval: ridgekit_core::embedded::FieldSamples,
    pub models: Vec<NodalRidgeModel>,
    pub status: Vec<NodeStatus>,
}

impl StudyField {
    pub fn directions(&self) -> Vec<Subspace> {
        self.models.iter().map(|m| m.directions().clone()).collect()
    }
}

/// Generates the field for `seed` and fits every node on the training samples.
pub fn prepare_study_field(cfg: &CompressionStudyConfig, seed: u64) -> Result<StudyField> {
    let mut spec = SyntheticFieldSpec::new(cfg.d, cfg.n, cfg.window_width, seed);
    spec.noise_sd = cfg.noise_sd;
    let truth = LocalizedField::new(spec)?;
    let train = truth.sample(cfg.m_train, seed.wrapping_mul(2).wrapping_add(1))?;
    let eval = truth.sample(cfg.m_eval, seed.wrapping_mul(2).wrapping_add(2))?;
    let node_cfg = NodeFitConfig { fitter: cfg.fitter.build(cfg.degree, seed), reduced_dim: 1, profile_degree: cfg.degree };
    let fits: Vec<_> = (0..cfg.n)
        .into_par_iter()
        .map(|i| fit_node(train.x(), &train.values().column(i).into_owned(), &node_cfg, i))
        .collect();
    let model = EmbeddedRidgeModel::from_fits(fits, QuadratureWeights::uniform(cfg.n)?, train.node_coords().clone())?;
    Ok(StudyField {
        truth,
        train,
        eval,
        models: model.nodes().to_vec(),
        status: model.status().to_vec(),
    })
}

/// Plan for `method` keeping `n - removal` directions.
pub fn study_plan(
    method: CompressionMethod,
    dist: &nalgebra::DMatrix<f64>,
    removal: usize,
    stride: usize,
    seed: u64,
) -> Result<CompressionPlan> {
    let n = dist.nrows();
    let k = n.saturating_sub(removal).max(1);
    match method {
        CompressionMethod::Greedy => compress_with_distances(dist, k),
        CompressionMethod::Recursive => compress_recursive_with_distances(dist, k, stride),
        CompressionMethod::Kmedoids => kmedoids_with_distances(dist, k, seed).map(|r| r.plan),
        CompressionMethod::Random => random_deletion_with_distances(dist, k, seed),
    }
}

/// Runs every method at every removal count for one seed, with profiles refitted
/// on the recovered directions. A removal count of 0 reports the mean nodal error
/// over all components.
pub fn compression_study(cfg: &CompressionStudyConfig, seed: u64) -> Result<Vec<CompressionRow>> {
    let field = prepare_study_field(cfg, seed)?;
    study_rows(cfg, &field, seed)
}

/// [`compression_study`] on an already fitted field.
pub fn study_rows(cfg: &CompressionStudyConfig, field: &StudyField, seed: u64) -> Result<Vec<CompressionRow>> {
    let directions = field.directions();
    let dist = distance_matrix_parallel(&directions)?;
    let jobs: Vec<(usize, CompressionMethod)> =
        cfg.removals.iter().flat_map(|&r| cfg.methods.iter().map(move |&m| (r, m))).collect();
    jobs.into_par_iter()
        .map(|(removal, method)| {
            if removal == 0 {
                let eps = baseline_error(field)?;
                return Ok(CompressionRow {
                    seed,
                    removal,
                    method,
                    achieved_removal: 0,
                    epsilon_r: eps,
                    mean_direction_error: 0.0,
                    flagged: 0,
                });
            }
            let plan = study_plan(method, &dist, removal, cfg.stride, seed)?;
            let rec = recover(&plan, &retained_directions(&plan, &directions)?)?;
            let missing = plan.missing();
            let err = reconstruction_error(&field.models, &rec.directions, &missing, &field.train, &field.eval, true)?;
            let mean_dir = if missing.is_empty() {
                0.0
            } else {
                missing
                    .iter()
                    .map(|&i| subspace_distance(&rec.directions[i], &directions[i]))
                    .sum::<Result<f64>>()?
                    / missing.len() as f64
            };
            Ok(CompressionRow {
                seed,
                removal,
                method,
                achieved_removal: missing.len(),
                epsilon_r: err.epsilon,
                mean_direction_error: mean_dir,
                flagged: rec.flagged.len(),
            })
        })
        .collect()
}

/// Mean normalized error of the nodal models on the evaluation samples.
pub fn baseline_error(field: &StudyField) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, model) in field.models.iter().enumerate() {
        let pred = model.evaluate_rows(field.eval.x())?;
        match normalized_mse(&pred, &field.eval.values().column(i).into_owned()) {
            Ok(e) => {
                total += e;
                count += 1;
            }
            Err(ridgekit_core::Error::ZeroVariance) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
