//! Ridge compression: store one-dimensional ridge directions at a subset of
//! nodes and rebuild the rest from neighbours.
//!
//! Plans come from the greedy two-neighbour scheme (optionally applied in
//! stages of at most `S` removals), from k-medoids clustering or from random
//! deletion. Every plan is a list of stages; recovery replays them last stage
//! first, so a stage may use directions rebuilt by a later stage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedded::{normalized_mse, FieldSamples};
use crate::error::{Error, Result};
use crate::ridge_model::{fit_profile, NodalRidgeModel};
use crate::subspace::{principal_angles, principal_vectors, subspace_distance, Subspace};

/// Slack on the second-neighbour test, so that identical subspaces qualify.
pub const NEIGHBOR_TOL: f64 = 1e-12;

const KMEDOIDS_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMethod {
    Greedy,
    Recursive { stride: usize },
    KMedoids,
    RandomDeletion,
}

impl PlanMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PlanMethod::Greedy => "greedy",
            PlanMethod::Recursive { .. } => "recursive",
            PlanMethod::KMedoids => "kmedoids",
            PlanMethod::RandomDeletion => "random",
        }
    }
}

/// Nodes removed in one stage together with the two neighbours each is rebuilt from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlanStage {
    pub missing: Vec<usize>,
    pub neighbors: Vec<[usize; 2]>,
}

/// Which directions are stored and how the others are rebuilt. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionPlan {
    pub num_nodes: usize,
    pub requested_k: usize,
    /// Stored nodes, ascending.
    pub retained: Vec<usize>,
    /// In compression order.
    pub stages: Vec<PlanStage>,
    pub method: PlanMethod,
    pub seed: Option<u64>,
    /// No further node could be removed before reaching `requested_k`.
    pub stalled: bool,
}

impl CompressionPlan {
    pub fn achieved_k(&self) -> usize {
        self.retained.len()
    }

    /// All missing nodes, stage by stage.
    pub fn missing(&self) -> Vec<usize> {
        self.stages.iter().flat_map(|s| s.missing.iter().copied()).collect()
    }

    pub fn neighbors(&self) -> Vec<[usize; 2]> {
        self.stages.iter().flat_map(|s| s.neighbors.iter().copied()).collect()
    }

    fn identity(n: usize, method: PlanMethod, seed: Option<u64>) -> Self {
        Self { num_nodes: n, requested_k: n, retained: (0..n).collect(), stages: Vec::new(), method, seed, stalled: false }
    }
}

fn check_directions(directions: &[Subspace]) -> Result<()> {
    let first = directions.first().ok_or_else(|| Error::InvalidInput("no ridge directions given".into()))?;
    for w in directions {
        if w.dim() != 1 {
            return Err(Error::UnsupportedRank { r: w.dim() });
        }
        if w.ambient_dim() != first.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: first.ambient_dim(), found: w.ambient_dim() });
        }
    }
    Ok(())
}

/// Symmetric table of pairwise subspace distances.
pub fn distance_matrix(directions: &[Subspace]) -> Result<DMatrix<f64>> {
    let n = directions.len();
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = subspace_distance(&directions[i], &directions[j])?;
            dist[(i, j)] = v;
            dist[(j, i)] = v;
        }
    }
    Ok(dist)
}

fn check_distances(dist: &DMatrix<f64>) -> Result<usize> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: dist.ncols() });
    }
    if n == 0 {
        return Err(Error::InvalidInput("no ridge directions given".into()));
    }
    Ok(n)
}

/// Nearest `j` in `pool` (excluding `i` and `skip`) subject to the
/// second-neighbour test when `first` is given. Ties go to the lowest index.
fn nearest(dist: &DMatrix<f64>, i: usize, pool: &[usize], first: Option<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in pool {
        if j == i || Some(j) == first {
            continue;
        }
        let dij = dist[(i, j)];
        if let Some(a) = first {
            if dij > dist[(j, a)] + NEIGHBOR_TOL {
                continue;
            }
        }
        match best {
            Some((bj, bd)) if dij > bd || (dij == bd && j > bj) => {}
            _ => best = Some((j, dij)),
        }
    }
    best.map(|(j, _)| j)
}

/// One run of the greedy scheme over `active`, removing at most `max_remove` nodes.
fn greedy_stage(dist: &DMatrix<f64>, active: &[usize], max_remove: usize) -> PlanStage {
    let n = dist.nrows();
    let mut in_m = vec![false; n];
    let mut in_l = vec![false; n];
    let mut stage = PlanStage::default();
    let mut candidates: Vec<usize> = active.to_vec();
    while stage.missing.len() < max_remove && !candidates.is_empty() {
        candidates.retain(|&i| !in_m[i] && !in_l[i]);
        let available: Vec<usize> = active.iter().copied().filter(|&j| !in_m[j]).collect();
        let mut scored: Vec<(usize, [usize; 2], f64)> = Vec::with_capacity(candidates.len());
        let mut unpaired = Vec::new();
        for &i in &candidates {
            let pair = nearest(dist, i, &available, None)
                .and_then(|a| nearest(dist, i, &available, Some(a)).map(|b| [a, b]));
            match pair {
                Some([a, b]) => scored.push((i, [a, b], dist[(i, a)] + dist[(i, b)])),
                None => unpaired.push(i),
            }
        }
        scored.sort_by(|x, y| x.2.total_cmp(&y.2));
        let before = stage.missing.len();
        for (i, [a, b], _) in &scored {
            if stage.missing.len() >= max_remove {
                break;
            }
            if in_m[*i] || in_l[*i] || in_m[*a] || in_m[*b] {
                continue;
            }
            in_m[*i] = true;
            in_l[*a] = true;
            in_l[*b] = true;
            stage.missing.push(*i);
            stage.neighbors.push([*a, *b]);
        }
        if stage.missing.len() == before {
            break;
        }
        candidates = scored.into_iter().map(|s| s.0).chain(unpaired).collect();
    }
    stage
}

fn retained_after(n: usize, stages: &[PlanStage]) -> Vec<usize> {
    let mut gone = vec![false; n];
    for s in stages {
        for &i in &s.missing {
            gone[i] = true;
        }
    }
    (0..n).filter(|&i| !gone[i]).collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Greedy single-stage compression down to `k` stored directions (or as close
/// as the neighbour constraints allow).
pub fn compress(directions: &[Subspace], k: usize) -> Result<CompressionPlan> {
    check_directions(directions)?;
    compress_with_distances(&distance_matrix(directions)?, k)
}

pub fn compress_with_distances(dist: &DMatrix<f64>, k: usize) -> Result<CompressionPlan> {
    let n = check_distances(dist)?;
    check_k(k, n)?;
    let all: Vec<usize> = (0..n).collect();
    let stage = greedy_stage(dist, &all, n - k);
    let stages = if stage.missing.is_empty() { Vec::new() } else { vec![stage] };
    let retained = retained_after(n, &stages);
    let stalled = retained.len() > k;
    Ok(CompressionPlan { num_nodes: n, requested_k: k, retained, stages, method: PlanMethod::Greedy, seed: None, stalled })
}

/// Greedy compression applied in stages of at most `stride` removals, each
/// stage working on the survivors of the previous one.
pub fn compress_recursive(directions: &[Subspace], k_final: usize, stride: usize) -> Result<CompressionPlan> {
    check_directions(directions)?;
    compress_recursive_with_distances(&distance_matrix(directions)?, k_final, stride)
}

pub fn compress_recursive_with_distances(dist: &DMatrix<f64>, k_final: usize, stride: usize) -> Result<CompressionPlan> {
    let n = check_distances(dist)?;
    check_k(k_final, n)?;
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let mut survivors: Vec<usize> = (0..n).collect();
    let mut stages = Vec::new();
    while survivors.len() > k_final {
        let stage = greedy_stage(dist, &survivors, stride.min(survivors.len() - k_final));
        if stage.missing.is_empty() {
            break;
        }
        let mut gone = vec![false; n];
        for &i in &stage.missing {
            gone[i] = true;
        }
        survivors.retain(|&i| !gone[i]);
        stages.push(stage);
    }
    let stalled = survivors.len() > k_final;
    Ok(CompressionPlan {
        num_nodes: n,
        requested_k: k_final,
        retained: survivors,
        stages,
        method: PlanMethod::Recursive { stride },
        seed: None,
        stalled,
    })
}

/// Rebuilt directions for every node, plus the nodes whose neighbours were
/// antipodal and were copied from the first neighbour instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub directions: Vec<Subspace>,
    pub flagged: Vec<usize>,
}

/// Normalized `w_a + w_b` or `w_a - w_b`, whichever lies closer to `w_a`.
/// Returns `None` when the chosen combination vanishes.
pub fn combine_neighbors(wa: &Subspace, wb: &Subspace) -> Result<Option<Subspace>> {
    let a = wa.direction(0);
    let b = wb.direction(0);
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let scale = a.norm() + b.norm();
    let variant = |v: DVector<f64>| -> Result<Option<(Subspace, f64)>> {
        if v.norm() <= 1e-12 * scale {
            return Ok(None);
        }
        let s = Subspace::from_direction(v.as_slice())?;
        let dist = subspace_distance(&s, wa)?;
        Ok(Some((s, dist)))
    };
    let sum = variant(&a + &b)?;
    let diff = variant(&a - &b)?;
    Ok(match (sum, diff) {
        (Some((s, ds)), Some((t, dt))) => Some(if dt < ds { t } else { s }),
        (Some((s, _)), None) => Some(s),
        // The sum vanished: the neighbours are antipodal.
        (None, _) => None,
    })
}

/// Rebuilds every direction from the stored ones (given in `plan.retained` order),
/// replaying stages from last to first.
pub fn recover(plan: &CompressionPlan, retained_dirs: &[Subspace]) -> Result<Recovery> {
    if retained_dirs.len() != plan.retained.len() {
        return Err(Error::DimensionMismatch { expected: plan.retained.len(), found: retained_dirs.len() });
    }
    check_directions(retained_dirs)?;
    let mut slots: Vec<Option<Subspace>> = vec![None; plan.num_nodes];
    for (&i, w) in plan.retained.iter().zip(retained_dirs) {
        if i >= plan.num_nodes {
            return Err(Error::InvalidPlan(format!("retained node {i} out of range")));
        }
        slots[i] = Some(w.clone());
    }
    let mut flagged = Vec::new();
    for stage in plan.stages.iter().rev() {
        if stage.missing.len() != stage.neighbors.len() {
            return Err(Error::InvalidPlan("stage has mismatched missing and neighbour lists".into()));
        }
        let mut rebuilt = Vec::with_capacity(stage.missing.len());
        for (&i, &[a, b]) in stage.missing.iter().zip(&stage.neighbors) {
            let get = |j: usize| -> Result<&Subspace> {
                slots.get(j).and_then(|s| s.as_ref()).ok_or(Error::MissingNeighbor { node: i, neighbor: j })
            };
            let (wa, wb) = (get(a)?, get(b)?);
            match combine_neighbors(wa, wb)? {
                Some(w) => rebuilt.push((i, w)),
                None => {
                    flagged.push(i);
                    rebuilt.push((i, wa.clone()));
                }
            }
        }
        for (i, w) in rebuilt {
            if i >= plan.num_nodes {
                return Err(Error::InvalidPlan(format!("missing node {i} out of range")));
            }
            slots[i] = Some(w);
        }
    }
    let directions = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::InvalidPlan(format!("node {i} is neither retained nor missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Recovery { directions, flagged })
}

/// Same as [`recover`], which already replays multi-stage plans in reverse.
pub fn recover_recursive(plan: &CompressionPlan, retained_dirs: &[Subspace]) -> Result<Recovery> {
    recover(plan, retained_dirs)
}

/// Picks the stored directions of `plan` out of the full list.
pub fn retained_directions(plan: &CompressionPlan, directions: &[Subspace]) -> Result<Vec<Subspace>> {
    plan.retained
        .iter()
        .map(|&i| directions.get(i).cloned().ok_or_else(|| Error::InvalidPlan(format!("retained node {i} out of range"))))
        .collect()
}

/// k-medoids plan together with the `Σ_d` value after every assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct KMedoidsResult {
    pub plan: CompressionPlan,
    pub medoids: Vec<usize>,
    pub cost_trace: Vec<f64>,
}

fn assign(dist: &DMatrix<f64>, medoids: &[usize]) -> (Vec<usize>, f64) {
    let n = dist.nrows();
    let mut owner = vec![0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut best = 0;
        for (c, &m) in medoids.iter().enumerate() {
            if dist[(i, m)] < dist[(i, medoids[best])] {
                best = c;
            }
        }
        owner[i] = best;
        total += dist[(i, medoids[best])];
    }
    (owner, total)
}

/// Clusters the directions around `k` medoids; non-medoids are rebuilt from
/// their two nearest medoids.
pub fn kmedoids_compress(directions: &[Subspace], k: usize, rng_seed: u64) -> Result<KMedoidsResult> {
    check_directions(directions)?;
    kmedoids_with_distances(&distance_matrix(directions)?, k, rng_seed)
}

pub fn kmedoids_with_distances(dist: &DMatrix<f64>, k: usize, rng_seed: u64) -> Result<KMedoidsResult> {
    let n = check_distances(dist)?;
    check_k(k, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut medoids: Vec<usize> = sample(&mut rng, n, k).into_vec();
    medoids.sort_unstable();
    let (mut owner, mut cost) = assign(dist, &medoids);
    let mut trace = vec![cost];
    for _ in 0..KMEDOIDS_MAX_ITERS {
        let mut next = medoids.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| owner[i] == c).collect();
            let mut best = (*slot, f64::INFINITY);
            for &cand in &members {
                let s: f64 = members.iter().map(|&j| dist[(cand, j)]).sum();
                if s < best.1 || (s == best.1 && cand < best.0) {
                    best = (cand, s);
                }
            }
            *slot = best.0;
        }
        let (next_owner, next_cost) = assign(dist, &next);
        if !(next_cost < cost) {
            break;
        }
        medoids = next;
        owner = next_owner;
        cost = next_cost;
        trace.push(cost);
    }
    let mut is_medoid = vec![false; n];
    for &m in &medoids {
        is_medoid[m] = true;
    }
    let mut sorted = medoids.clone();
    sorted.sort_unstable();
    let mut stage = PlanStage::default();
    for i in (0..n).filter(|&i| !is_medoid[i]) {
        let a = nearest(dist, i, &sorted, None).expect("k >= 1 medoid");
        let b = nearest(dist, i, &sorted, Some(a)).unwrap_or(a);
        stage.missing.push(i);
        stage.neighbors.push([a, b]);
    }
    let stages = if stage.missing.is_empty() { Vec::new() } else { vec![stage] };
    let plan = CompressionPlan {
        num_nodes: n,
        requested_k: k,
        retained: sorted,
        stages,
        method: PlanMethod::KMedoids,
        seed: Some(rng_seed),
        stalled: false,
    };
    Ok(KMedoidsResult { plan, medoids, cost_trace: trace })
}

/// Removes `N - k` nodes uniformly at random; each is replaced by its nearest
/// stored direction (listed twice, so recovery copies it).
pub fn random_deletion(directions: &[Subspace], k: usize, rng_seed: u64) -> Result<CompressionPlan> {
    check_directions(directions)?;
    random_deletion_with_distances(&distance_matrix(directions)?, k, rng_seed)
}

pub fn random_deletion_with_distances(dist: &DMatrix<f64>, k: usize, rng_seed: u64) -> Result<CompressionPlan> {
    let n = check_distances(dist)?;
    check_k(k, n)?;
    if k == n {
        return Ok(CompressionPlan::identity(n, PlanMethod::RandomDeletion, Some(rng_seed)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut missing = sample(&mut rng, n, n - k).into_vec();
    missing.sort_unstable();
    let mut gone = vec![false; n];
    for &i in &missing {
        gone[i] = true;
    }
    let retained: Vec<usize> = (0..n).filter(|&i| !gone[i]).collect();
    let neighbors = missing
        .iter()
        .map(|&i| {
            let a = nearest(dist, i, &retained, None).expect("k >= 1 retained");
            [a, a]
        })
        .collect();
    Ok(CompressionPlan {
        num_nodes: n,
        requested_k: k,
        retained,
        stages: vec![PlanStage { missing, neighbors }],
        method: PlanMethod::RandomDeletion,
        seed: Some(rng_seed),
        stalled: false,
    })
}

/// Checks the structural invariants of a plan:
/// retained and missing nodes partition `0..N`; every neighbour of a stage is
/// still present after that stage; `achieved_k >= requested_k`.
pub fn validate_plan(plan: &CompressionPlan) -> Result<()> {
    let n = plan.num_nodes;
    let bad = |msg: String| Err(Error::InvalidPlan(msg));
    let mut seen = vec![false; n];
    let mut removed_at = vec![usize::MAX; n];
    for &i in &plan.retained {
        if i >= n {
            return bad(format!("retained node {i} out of range 0..{n}"));
        }
        if seen[i] {
            return bad(format!("node {i} listed twice"));
        }
        seen[i] = true;
    }
    for (s, stage) in plan.stages.iter().enumerate() {
        if stage.missing.len() != stage.neighbors.len() {
            return bad(format!(
                "stage {s}: {} missing nodes but {} neighbour pairs",
                stage.missing.len(),
                stage.neighbors.len()
            ));
        }
        for &i in &stage.missing {
            if i >= n {
                return bad(format!("missing node {i} out of range 0..{n}"));
            }
            if seen[i] {
                return bad(format!("node {i} listed twice"));
            }
            seen[i] = true;
            removed_at[i] = s;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return bad(format!("node {i} is neither retained nor missing"));
    }
    for (s, stage) in plan.stages.iter().enumerate() {
        for (&i, pair) in stage.missing.iter().zip(&stage.neighbors) {
            for &j in pair {
                if j >= n {
                    return bad(format!("stage {s}: neighbour {j} of node {i} out of range"));
                }
                if j == i {
                    return bad(format!("stage {s}: node {i} is its own neighbour"));
                }
                if removed_at[j] <= s {
                    return bad(format!("stage {s}: neighbour {j} of node {i} is missing at that stage"));
                }
            }
        }
    }
    if plan.achieved_k() < plan.requested_k {
        return bad(format!("achieved k {} is below requested k {}", plan.achieved_k(), plan.requested_k));
    }
    Ok(())
}

/// Average normalized MSE over the recovered components.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionError {
    /// `ε_R`, averaged over the components that were scored.
    pub epsilon: f64,
    /// `(node, ε_i)` for each scored component.
    pub per_node: Vec<(usize, f64)>,
    /// Components skipped because their evaluation values have zero variance.
    pub skipped: Vec<usize>,
}

/// Procrustes alignment of `recovered` to `original`, so that the original
/// profile can be reused on the new directions.
fn aligned_basis(original: &Subspace, recovered: &Subspace) -> Result<Subspace> {
    let pv = principal_vectors(original, recovered)?;
    Subspace::from_orthonormal(pv.second * pv.rotation.transpose())
}

/// `ε_R` of the components in `components` when their directions are replaced by
/// `recovered[i]`. With `refit` the profile is refitted on `train` projected to
/// the recovered directions (same degree as the original); otherwise the
/// original profile is reused after aligning the bases.
pub fn reconstruction_error(
    original: &[NodalRidgeModel],
    recovered: &[Subspace],
    components: &[usize],
    train: &FieldSamples,
    eval: &FieldSamples,
    refit: bool,
) -> Result<ReconstructionError> {
    if recovered.len() != original.len() {
        return Err(Error::DimensionMismatch { expected: original.len(), found: recovered.len() });
    }
    for fs in [train, eval] {
        if fs.num_nodes() != original.len() {
            return Err(Error::DimensionMismatch { expected: original.len(), found: fs.num_nodes() });
        }
    }
    let mut per_node = Vec::new();
    let mut skipped = Vec::new();
    for &i in components {
        let (orig, new_dirs) = match (original.get(i), recovered.get(i)) {
            (Some(o), Some(w)) => (o, w),
            _ => return Err(Error::DimensionMismatch { expected: original.len(), found: i + 1 }),
        };
        let model = if refit {
            let y = train.values().column(i).into_owned();
            let profile = fit_profile(new_dirs, train.x(), &y, orig.profile().degree())?;
            NodalRidgeModel::new(new_dirs.clone(), profile)?
        } else {
            NodalRidgeModel::new(aligned_basis(orig.directions(), new_dirs)?, orig.profile().clone())?
        };
        let truth = eval.values().column(i).into_owned();
        let predicted = model.evaluate_rows(eval.x())?;
        match normalized_mse(&predicted, &truth) {
            Ok(e) => per_node.push((i, e)),
            Err(Error::ZeroVariance) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    let epsilon = if per_node.is_empty() {
        0.0
    } else {
        per_node.iter().map(|p| p.1).sum::<f64>() / per_node.len() as f64
    };
    Ok(ReconstructionError { epsilon, per_node, skipped })
}

/// Monte Carlo estimate of the first-order MSE from perturbing a ridge
/// subspace, next to the bound `G² σ_x² r (2 - 2cos θ_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCheck {
    pub epsilon_est: f64,
    pub bound: f64,
    /// Largest principal angle between the two subspaces.
    pub theta: f64,
    /// Largest `‖∇_u g‖` seen over the Monte Carlo points.
    pub observed_gradient: f64,
}

impl PerturbationCheck {
    /// `epsilon_est <= bound (1 + 3/√n_mc)`.
    pub fn holds(&self, n_mc: usize) -> bool {
        self.epsilon_est <= self.bound * (1.0 + 3.0 / libm::sqrt(n_mc as f64))
    }
}

/// `ε = E[(xᵀ(W̃ - W)∇_u g(Wᵀx))²]` with both bases taken as paired principal
/// vectors. Inputs are uniform on `[-a, a]^d` with `a = √3 σ_x`, so that
/// `E[xxᵀ] = σ_x² I`.
pub fn check_perturbation_bound(
    model: &NodalRidgeModel,
    perturbed: &Subspace,
    g_bound: f64,
    sigma_x: f64,
    n_mc: usize,
    rng_seed: u64,
) -> Result<PerturbationCheck> {
    let w = model.directions();
    let pv = principal_vectors(w, perturbed)?;
    let angles = principal_angles(w, perturbed)?;
    let theta = angles.iter().copied().fold(0.0, f64::max);
    let r = w.dim();
    let d = w.ambient_dim();
    // Gradients come in the stored basis; rotate them into the principal basis.
    let delta = (&pv.second - &pv.first) * pv.rotation.transpose();
    let half = sigma_x * libm::sqrt(3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = vec![0.0; d];
    let mut sum = 0.0;
    let mut g_max: f64 = 0.0;
    for _ in 0..n_mc {
        for xi in x.iter_mut() {
            *xi = rng.random_range(-half..=half);
        }
        let xv = DVector::from_column_slice(&x);
        let u = w.basis().tr_mul(&xv);
        let grad = DVector::from_vec(model.profile().gradient(u.as_slice())?);
        g_max = g_max.max(grad.norm());
        let term = xv.dot(&(&delta * &grad));
        sum += term * term;
    }
    let epsilon_est = if n_mc == 0 { 0.0 } else { sum / n_mc as f64 };
    let bound = g_bound * g_bound * sigma_x * sigma_x * r as f64 * (2.0 - 2.0 * libm::cos(theta));
    Ok(PerturbationCheck { epsilon_est, bound, theta, observed_gradient: g_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedded::FieldSamples;
    use crate::ridge_model::RidgeProfile;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn line(v: &[f64]) -> Subspace {
        Subspace::from_direction(v).unwrap()
    }

    /// Unit directions `cos(t)a + sin(t)b` with `t` evenly spaced over `[0, span]`.
    fn great_circle(n: usize, d: usize, span: f64, seed: u64) -> Vec<Subspace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ab = Subspace::random(d, 2, &mut rng).unwrap();
        let (a, b) = (ab.direction(0), ab.direction(1));
        (0..n)
            .map(|i| {
                let t = span * i as f64 / (n - 1) as f64;
                let v = &a * libm::cos(t) + &b * libm::sin(t);
                line(v.as_slice())
            })
            .collect()
    }

    #[test]
    fn k_equal_n_is_identity() {
        let dirs = great_circle(8, 4, 1.0, 1);
        for plan in [
            compress(&dirs, 8).unwrap(),
            compress_recursive(&dirs, 8, 3).unwrap(),
            kmedoids_compress(&dirs, 8, 2).unwrap().plan,
            random_deletion(&dirs, 8, 3).unwrap(),
        ] {
            assert!(plan.missing().is_empty());
            assert_eq!(plan.retained, (0..8).collect::<Vec<_>>());
            validate_plan(&plan).unwrap();
            let rec = recover(&plan, &retained_directions(&plan, &dirs).unwrap()).unwrap();
            assert_eq!(rec.directions, dirs);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let dirs = great_circle(5, 3, 1.0, 1);
        assert_eq!(compress(&dirs, 0), Err(Error::InvalidK { k: 0, n: 5 }));
        assert_eq!(compress(&dirs, 6), Err(Error::InvalidK { k: 6, n: 5 }));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = Subspace::random(3, 2, &mut rng).unwrap();
        assert_eq!(compress(&[plane.clone(), plane], 1), Err(Error::UnsupportedRank { r: 2 }));
        assert!(matches!(compress(&[line(&[1.0, 0.0]), line(&[1.0, 0.0, 0.0])], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn identical_subspaces_three_nodes() {
        let w = line(&[0.3, -0.4, 0.5, 0.7]);
        let dirs = vec![w.clone(), w.clone(), w.clone()];
        let plan = compress(&dirs, 2).unwrap();
        validate_plan(&plan).unwrap();
        assert_eq!(plan.stages.len(), 1);
        let stage = &plan.stages[0];
        assert_eq!(stage.missing.len(), 1);
        let i = stage.missing[0];
        let mut pair = stage.neighbors[0].to_vec();
        pair.sort_unstable();
        let mut others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
        others.sort_unstable();
        assert_eq!(pair, others);
        let dist = distance_matrix(&dirs).unwrap();
        assert_eq!(dist[(i, pair[0])] + dist[(i, pair[1])], 0.0);
        let rec = recover(&plan, &retained_directions(&plan, &dirs).unwrap()).unwrap();
        assert!(subspace_distance(&rec.directions[i], &w).unwrap() <= 1e-12);
    }

    #[test]
    fn great_circle_neighbors_are_path_adjacent() {
        let dirs = great_circle(30, 5, 1.2, 7);
        let plan = compress(&dirs, 20).unwrap();
        validate_plan(&plan).unwrap();
        for (&i, pair) in plan.missing().iter().zip(plan.neighbors()) {
            for j in pair {
                assert!(i.abs_diff(j) <= 2, "node {i} paired with {j}");
            }
        }
    }

    #[test]
    fn bisector_recovery() {
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let e1 = line(&[1.0, 0.0, 0.0]);
        let diag = line(&[s, s, 0.0]);
        let w = combine_neighbors(&e1, &diag).unwrap().unwrap();
        let expected = libm::sin(core::f64::consts::PI / 8.0);
        assert!((subspace_distance(&w, &e1).unwrap() - expected).abs() < 1e-12);
        assert!((subspace_distance(&w, &diag).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.38268).abs() < 1e-5);

        // A sign flip of one neighbour selects the difference and gives the same line.
        let flipped = Subspace::from_orthonormal(-diag.basis()).unwrap();
        let w2 = combine_neighbors(&e1, &flipped).unwrap().unwrap();
        assert!(subspace_distance(&w, &w2).unwrap() < 1e-12);
        assert!((w2.basis().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_neighbors_recover_exactly() {
        let w = line(&[0.1, 0.9, -0.3]);
        let rec = combine_neighbors(&w, &w).unwrap().unwrap();
        assert!(subspace_distance(&rec, &w).unwrap() <= 1e-12);
    }

    #[test]
    fn antipodal_neighbors_copy_first_and_flag() {
        let a = line(&[1.0, 0.0]);
        let b = Subspace::from_orthonormal(-a.basis()).unwrap();
        assert_eq!(combine_neighbors(&a, &b).unwrap(), None);
        let plan = CompressionPlan {
            num_nodes: 3,
            requested_k: 2,
            retained: vec![0, 2],
            stages: vec![PlanStage { missing: vec![1], neighbors: vec![[0, 2]] }],
            method: PlanMethod::Greedy,
            seed: None,
            stalled: false,
        };
        let rec = recover(&plan, &[a.clone(), b]).unwrap();
        assert_eq!(rec.flagged, vec![1]);
        assert_eq!(rec.directions[1], a);
    }

    #[test]
    fn missing_neighbor_is_reported() {
        let plan = CompressionPlan {
            num_nodes: 3,
            requested_k: 1,
            retained: vec![0],
            stages: vec![PlanStage { missing: vec![1, 2], neighbors: vec![[0, 2], [0, 0]] }],
            method: PlanMethod::Greedy,
            seed: None,
            stalled: false,
        };
        assert!(validate_plan(&plan).is_err());
        assert_eq!(recover(&plan, &[line(&[1.0, 0.0])]), Err(Error::MissingNeighbor { node: 1, neighbor: 2 }));
    }

    #[test]
    fn great_circle_recovery_beats_spacing() {
        let n = 30;
        let dirs = great_circle(n, 5, 1.2, 3);
        let spacing: f64 =
            (1..n).map(|i| subspace_distance(&dirs[i - 1], &dirs[i]).unwrap()).sum::<f64>() / (n - 1) as f64;
        let plan = compress(&dirs, 20).unwrap();
        let rec = recover(&plan, &retained_directions(&plan, &dirs).unwrap()).unwrap();
        let missing = plan.missing();
        let err: f64 =
            missing.iter().map(|&i| subspace_distance(&rec.directions[i], &dirs[i]).unwrap()).sum::<f64>() / missing.len() as f64;
        assert!(err < spacing, "mean recovery error {err} vs spacing {spacing}");
        for w in &rec.directions {
            assert!((w.basis().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recursive_with_large_stride_matches_single_stage() {
        let dirs = great_circle(40, 6, 1.5, 4);
        let single = compress(&dirs, 25).unwrap();
        let rec = compress_recursive(&dirs, 25, 15).unwrap();
        assert_eq!(single.stages, rec.stages);
        assert_eq!(single.retained, rec.retained);
        let a = recover(&single, &retained_directions(&single, &dirs).unwrap()).unwrap();
        let b = recover_recursive(&rec, &retained_directions(&rec, &dirs).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recursive_path_reaches_further() {
        let dirs = great_circle(100, 6, 2.0, 5);
        let single = compress(&dirs, 20).unwrap();
        let rec = compress_recursive(&dirs, 20, 10).unwrap();
        validate_plan(&single).unwrap();
        validate_plan(&rec).unwrap();
        assert!(single.stalled);
        assert!(rec.achieved_k() <= 30, "achieved {}", rec.achieved_k());
        assert!(rec.achieved_k() < single.achieved_k());
        assert!(rec.stages.len() >= 2);
        assert!(rec.stages.iter().all(|s| s.missing.len() <= 10));
        let out = recover(&rec, &retained_directions(&rec, &dirs).unwrap()).unwrap();
        assert_eq!(out.directions.len(), 100);
        for &i in &rec.retained {
            assert_eq!(out.directions[i], dirs[i]);
        }
    }

    #[test]
    fn compress_is_deterministic() {
        let dirs = great_circle(50, 5, 1.0, 6);
        assert_eq!(compress_recursive(&dirs, 15, 7).unwrap(), compress_recursive(&dirs, 15, 7).unwrap());
    }

    #[test]
    fn kmedoids_one_removed() {
        let dirs = great_circle(12, 4, 1.0, 8);
        let res = kmedoids_compress(&dirs, 11, 3).unwrap();
        validate_plan(&res.plan).unwrap();
        let stage = &res.plan.stages[0];
        assert_eq!(stage.missing.len(), 1);
        let i = stage.missing[0];
        let dist = distance_matrix(&dirs).unwrap();
        let mut by_dist: Vec<usize> = (0..12).filter(|&j| j != i).collect();
        by_dist.sort_by(|&a, &b| dist[(i, a)].total_cmp(&dist[(i, b)]));
        assert_eq!(stage.neighbors[0][0], by_dist[0]);
    }

    #[test]
    fn kmedoids_separates_clusters() {
        // Two tight bundles of lines about 0.9 apart in subspace distance.
        let theta = libm::asin(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut dirs = Vec::new();
        for c in 0..2 {
            let base = [libm::cos(c as f64 * theta), libm::sin(c as f64 * theta), 0.0, 0.0];
            for _ in 0..10 {
                let jitter: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.025..0.025)).collect();
                dirs.push(line(&jitter));
            }
        }
        for seed in 0..5 {
            let res = kmedoids_compress(&dirs, 2, seed).unwrap();
            let clusters: Vec<usize> = res.medoids.iter().map(|m| m / 10).collect();
            assert!(clusters.contains(&0) && clusters.contains(&1), "seed {seed}: {:?}", res.medoids);
            validate_plan(&res.plan).unwrap();
            assert!(res.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn random_deletion_is_seeded_copy() {
        let dirs = great_circle(20, 4, 1.0, 10);
        let a = random_deletion(&dirs, 12, 77).unwrap();
        let b = random_deletion(&dirs, 12, 77).unwrap();
        assert_eq!(a, b);
        validate_plan(&a).unwrap();
        let rec = recover(&a, &retained_directions(&a, &dirs).unwrap()).unwrap();
        for (&i, pair) in a.missing().iter().zip(a.neighbors()) {
            assert_eq!(pair[0], pair[1]);
            assert!(subspace_distance(&rec.directions[i], &dirs[pair[0]]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn validator_catches_broken_plans() {
        let good = CompressionPlan {
            num_nodes: 4,
            requested_k: 2,
            retained: vec![0, 3],
            stages: vec![
                PlanStage { missing: vec![1], neighbors: vec![[0, 2]] },
                PlanStage { missing: vec![2], neighbors: vec![[0, 3]] },
            ],
            method: PlanMethod::Recursive { stride: 1 },
            seed: None,
            stalled: false,
        };
        validate_plan(&good).unwrap();

        let mut swapped = good.clone();
        swapped.stages.swap(0, 1);
        assert!(validate_plan(&swapped).is_err());

        let mut dup = good.clone();
        dup.retained = vec![0, 1, 3];
        assert!(validate_plan(&dup).is_err());

        let mut short = good.clone();
        short.requested_k = 3;
        assert!(validate_plan(&short).is_err());

        let mut hole = good.clone();
        hole.retained = vec![0];
        assert!(validate_plan(&hole).is_err());
    }

    fn ridge_field(dirs: &[Subspace], m: usize, seed: u64) -> FieldSamples {
        let d = dirs[0].ambient_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let f = DMatrix::from_fn(m, dirs.len(), |r, i| {
            let t = (x.row(r) * dirs[i].basis())[(0, 0)];
            libm::sin(1.3 * t) + 0.2 * t * t
        });
        FieldSamples::on_chain(x, f).unwrap()
    }

    #[test]
    fn reconstruction_error_conventions() {
        let dirs = great_circle(10, 6, 1.0, 11);
        let train = ridge_field(&dirs, 200, 12);
        let eval = ridge_field(&dirs, 300, 13);
        let models: Vec<NodalRidgeModel> = (0..10)
            .map(|i| NodalRidgeModel::fit(dirs[i].clone(), train.x(), &train.values().column(i).into_owned(), 5).unwrap())
            .collect();
        let all: Vec<usize> = (0..10).collect();

        // Recovered = original: error is the nodal fit residual.
        let same = reconstruction_error(&models, &dirs, &all, &train, &eval, false).unwrap();
        for &(i, e) in &same.per_node {
            let pred = models[i].evaluate_rows(eval.x()).unwrap();
            let direct = normalized_mse(&pred, &eval.values().column(i).into_owned()).unwrap();
            assert!((e - direct).abs() < 1e-14);
        }

        // Sign-flipped recovered directions give the same error without refit.
        let flipped: Vec<Subspace> = dirs.iter().map(|w| Subspace::from_orthonormal(-w.basis()).unwrap()).collect();
        let f = reconstruction_error(&models, &flipped, &all, &train, &eval, false).unwrap();
        assert!((f.epsilon - same.epsilon).abs() < 1e-12);

        let plan = compress(&dirs, 6).unwrap();
        let rec = recover(&plan, &retained_directions(&plan, &dirs).unwrap()).unwrap();
        let missing = plan.missing();
        let plain = reconstruction_error(&models, &rec.directions, &missing, &train, &train, false).unwrap();
        let refit = reconstruction_error(&models, &rec.directions, &missing, &train, &train, true).unwrap();
        for (a, b) in refit.per_node.iter().zip(&plain.per_node) {
            assert!(a.1 <= b.1 + 1e-10, "node {}: refit {} vs {}", a.0, a.1, b.1);
        }
    }

    #[test]
    fn zero_variance_components_are_skipped() {
        let dirs = great_circle(3, 4, 0.5, 14);
        let x = DMatrix::from_fn(30, 4, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let f = DMatrix::from_fn(30, 3, |r, i| if i == 1 { 2.0 } else { x[(r, 0)] + x[(r, i + 1)] });
        let field = FieldSamples::on_chain(x, f).unwrap();
        let models: Vec<NodalRidgeModel> =
            dirs.iter().map(|w| NodalRidgeModel::new(w.clone(), RidgeProfile::from_raw(1, 1, vec![0.0, 1.0]).unwrap()).unwrap()).collect();
        let out = reconstruction_error(&models, &dirs, &[0, 1, 2], &field, &field, false).unwrap();
        assert_eq!(out.skipped, vec![1]);
        assert_eq!(out.per_node.len(), 2);
    }

    #[test]
    fn perturbation_bound_formula() {
        let w = line(&[1.0, 0.0, 0.0]);
        let model = NodalRidgeModel::new(w.clone(), RidgeProfile::from_raw(1, 2, vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        let same = check_perturbation_bound(&model, &w, 2.0, libm::sqrt(1.0 / 3.0), 1000, 1).unwrap();
        assert_eq!(same.epsilon_est, 0.0);
        assert!(same.bound.abs() < 1e-15);

        let t: f64 = 0.1;
        let rotated = line(&[libm::cos(t), libm::sin(t), 0.0]);
        let chk = check_perturbation_bound(&model, &rotated, 2.0, libm::sqrt(1.0 / 3.0), 10, 1).unwrap();
        let exact = 4.0 * (1.0 / 3.0) * (2.0 - 2.0 * libm::cos(t));
        assert!((chk.bound - exact).abs() < 1e-15, "{}", chk.bound);
        // The commonly quoted 0.013316 agrees only to about 1e-5.
        assert!((chk.bound - 0.013316).abs() < 1e-5);
        assert!((chk.theta - t).abs() < 1e-12);
    }

    #[test]
    fn perturbation_estimate_matches_closed_form() {
        // g(u) = u², W = e₁, W̃ = (cos t, sin t, 0):
        // ε = 4[(cos t - 1)² E x⁴ + sin² t (E x²)²] = 4[(c - 1)²/5 + s²/9].
        let w = line(&[1.0, 0.0, 0.0]);
        let model = NodalRidgeModel::new(w, RidgeProfile::from_raw(1, 2, vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        for t in [0.01, 0.05, 0.1] {
            let rotated = line(&[libm::cos(t), libm::sin(t), 0.0]);
            let chk = check_perturbation_bound(&model, &rotated, 2.0, libm::sqrt(1.0 / 3.0), 100_000, 2).unwrap();
            let (c, s) = (libm::cos(t), libm::sin(t));
            let exact = 4.0 * ((c - 1.0).powi(2) / 5.0 + s * s / 9.0);
            assert!((chk.epsilon_est - exact).abs() < 0.03 * exact, "t={t}: {} vs {exact}", chk.epsilon_est);
            assert!(chk.holds(100_000));
            assert!(chk.observed_gradient <= 2.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_plan_validates(n in 3usize..40, d in 2usize..7, frac in 0.1f64..0.9, stride in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs: Vec<Subspace> = (0..n).map(|_| Subspace::random(d, 1, &mut rng).unwrap()).collect();
            let k = ((n as f64 * frac) as usize).clamp(1, n);
            let plans = [
                compress(&dirs, k).unwrap(),
                compress_recursive(&dirs, k, stride).unwrap(),
                kmedoids_compress(&dirs, k, seed).unwrap().plan,
                random_deletion(&dirs, k, seed).unwrap(),
            ];
            for plan in &plans {
                prop_assert!(validate_plan(plan).is_ok(), "{:?}", validate_plan(plan));
                let rec = recover(plan, &retained_directions(plan, &dirs).unwrap()).unwrap();
                for w in &rec.directions {
                    prop_assert!((w.basis().norm() - 1.0).abs() < 1e-12);
                }
                for &i in &plan.retained {
                    prop_assert_eq!(&rec.directions[i], &dirs[i]);
                }
            }
        }

        #[test]
        fn kmedoids_cost_never_increases(n in 4usize..30, k in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs: Vec<Subspace> = (0..n).map(|_| Subspace::random(5, 1, &mut rng).unwrap()).collect();
            let res = kmedoids_compress(&dirs, k.min(n), seed).unwrap();
            prop_assert!(res.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
