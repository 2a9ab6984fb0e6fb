//! JSON and CSV files read and written by the command line.
//!
//! Every JSON document carries `schema_version` and a `kind` tag. Matrices are
//! stored as lists of columns; node indices are 0-based.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ridgekit_core::compression::{CompressionPlan, PlanMethod, PlanStage};
use ridgekit_core::embedded::{EmbeddedRidgeModel, FieldSamples, NodeStatus, QoiRidgeModel, QuadratureWeights};
use ridgekit_core::{Error, NodalRidgeModel, RidgeProfile, Subspace};

pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_DIRECTIONS: &str = "ridge_directions";
pub const KIND_NODE_MODEL: &str = "nodal_model";
pub const KIND_EMBEDDED_MODEL: &str = "embedded_model";
pub const KIND_QOI_MODEL: &str = "qoi_ridge";
pub const KIND_PLAN: &str = "compression_plan";
pub const KIND_COORDS: &str = "node_coords";
pub const KIND_WEIGHTS: &str = "quadrature_weights";

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn from_columns(cols: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    ensure!(!cols.is_empty(), "matrix has no columns");
    let rows = cols[0].len();
    ensure!(cols.iter().all(|c| c.len() == rows), "matrix columns have different lengths");
    Ok(DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i]))
}

fn subspace_from_columns(cols: &[Vec<f64>]) -> anyhow::Result<Subspace> {
    Ok(Subspace::from_orthonormal(from_columns(cols)?)?)
}

fn check_header(version: u32, kind: &str, expected: &str) -> anyhow::Result<()> {
    ensure!(version == SCHEMA_VERSION, "unsupported schema_version {version} (expected {SCHEMA_VERSION})");
    ensure!(kind == expected, "expected a `{expected}` file, found `{kind}`");
    Ok(())
}

/// A list of ridge subspaces, one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionsFile {
    pub schema_version: u32,
    pub kind: String,
    pub ambient_dim: usize,
    /// `directions[i]` is the basis of node `i` as a list of columns.
    pub directions: Vec<Vec<Vec<f64>>>,
    /// Nodes rebuilt by copying a neighbour because the two neighbours cancelled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<usize>,
}

impl DirectionsFile {
    pub fn new(dirs: &[Subspace]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_DIRECTIONS.into(),
            ambient_dim: dirs.first().map_or(0, |w| w.ambient_dim()),
            directions: dirs.iter().map(|w| columns(w.basis())).collect(),
            flagged: Vec::new(),
        }
    }

    pub fn subspaces(&self) -> anyhow::Result<Vec<Subspace>> {
        check_header(self.schema_version, &self.kind, KIND_DIRECTIONS)?;
        self.directions
            .iter()
            .enumerate()
            .map(|(i, cols)| subspace_from_columns(cols).with_context(|| format!("direction {i}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub reduced_dim: usize,
    pub degree: usize,
    /// Coefficients in the scaled variables, graded-lex monomial order.
    pub coefficients: Vec<f64>,
    /// Training range `[lo, hi]` of each reduced coordinate.
    pub bounds: Vec<[f64; 2]>,
}

impl ProfileRecord {
    pub fn new(p: &RidgeProfile) -> Self {
        Self {
            reduced_dim: p.reduced_dim(),
            degree: p.degree(),
            coefficients: p.coefficients().to_vec(),
            bounds: p.bounds().to_vec(),
        }
    }

    pub fn profile(&self) -> anyhow::Result<RidgeProfile> {
        Ok(RidgeProfile::new(self.reduced_dim, self.degree, self.coefficients.clone(), self.bounds.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub directions: Vec<Vec<f64>>,
    pub profile: ProfileRecord,
    pub status: String,
}

impl NodeRecord {
    pub fn new(model: &NodalRidgeModel, status: &NodeStatus) -> Self {
        Self { directions: columns(model.directions().basis()), profile: ProfileRecord::new(model.profile()), status: status.to_string() }
    }

    pub fn model(&self) -> anyhow::Result<NodalRidgeModel> {
        Ok(NodalRidgeModel::new(subspace_from_columns(&self.directions)?, self.profile.profile()?)?)
    }

    pub fn node_status(&self) -> NodeStatus {
        match self.status.as_str() {
            "fitted" => NodeStatus::Fitted { converged: true },
            "not_converged" => NodeStatus::Fitted { converged: false },
            "degenerate" => NodeStatus::Degenerate,
            other => NodeStatus::Failed(Error::InvalidInput(other.trim_start_matches("failed: ").to_string())),
        }
    }
}

/// Output of `fit-node`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModelFile {
    pub schema_version: u32,
    pub kind: String,
    pub node: usize,
    pub fitter: String,
    pub model: NodeRecord,
}

/// Output of `fit-embedded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedModelFile {
    pub schema_version: u32,
    pub kind: String,
    pub ambient_dim: usize,
    pub fitter: String,
    pub weights: Vec<f64>,
    pub node_coords: Vec<Vec<f64>>,
    pub nodes: Vec<NodeRecord>,
}

impl EmbeddedModelFile {
    pub fn new(model: &EmbeddedRidgeModel, fitter: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_EMBEDDED_MODEL.into(),
            ambient_dim: model.input_dim(),
            fitter: fitter.into(),
            weights: model.weights().as_slice().to_vec(),
            node_coords: model.node_coords().row_iter().map(|r| r.iter().copied().collect()).collect(),
            nodes: model.nodes().iter().zip(model.status()).map(|(m, s)| NodeRecord::new(m, s)).collect(),
        }
    }

    pub fn model(&self) -> anyhow::Result<EmbeddedRidgeModel> {
        check_header(self.schema_version, &self.kind, KIND_EMBEDDED_MODEL)?;
        let nodes = self.nodes.iter().map(NodeRecord::model).collect::<anyhow::Result<Vec<_>>>()?;
        let status = self.nodes.iter().map(NodeRecord::node_status).collect();
        let coords = rows_to_matrix(&self.node_coords)?;
        Ok(EmbeddedRidgeModel::new(nodes, status, QuadratureWeights::new(self.weights.clone())?, coords)?)
    }

    pub fn directions(&self) -> anyhow::Result<Vec<Subspace>> {
        self.nodes.iter().map(|n| subspace_from_columns(&n.directions)).collect()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|r| r.len() == ncols), "node coordinate rows have different lengths");
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Output of `extract-qoi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiModelFile {
    pub schema_version: u32,
    pub kind: String,
    pub subspace: Vec<Vec<f64>>,
    pub profile: ProfileRecord,
    /// Spectrum of the gradient covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Normalized MSE on verification samples, when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mse: Option<f64>,
}

impl QoiModelFile {
    pub fn new(q: &QoiRidgeModel, eval_mse: Option<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_QOI_MODEL.into(),
            subspace: columns(q.subspace().basis()),
            profile: ProfileRecord::new(q.profile()),
            eigenvalues: q.spectrum().eigenvalues.clone(),
            eval_mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub missing: Vec<usize>,
    pub neighbors: Vec<[usize; 2]>,
}

/// A compression plan, optionally carrying the stored directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub kind: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub seed: Option<u64>,
    pub num_nodes: usize,
    pub requested_k: usize,
    pub achieved_k: usize,
    pub stalled: bool,
    pub retained: Vec<usize>,
    pub stages: Vec<StageRecord>,
    /// Bases of the retained nodes, in `retained` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_directions: Option<Vec<Vec<Vec<f64>>>>,
}

impl PlanFile {
    pub fn new(plan: &CompressionPlan, retained_dirs: Option<&[Subspace]>) -> Self {
        let stride = match plan.method {
            PlanMethod::Recursive { stride } => Some(stride),
            _ => None,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_PLAN.into(),
            method: plan.method.name().into(),
            stride,
            seed: plan.seed,
            num_nodes: plan.num_nodes,
            requested_k: plan.requested_k,
            achieved_k: plan.achieved_k(),
            stalled: plan.stalled,
            retained: plan.retained.clone(),
            stages: plan
                .stages
                .iter()
                .map(|s| StageRecord { missing: s.missing.clone(), neighbors: s.neighbors.clone() })
                .collect(),
            retained_directions: retained_dirs.map(|d| d.iter().map(|w| columns(w.basis())).collect()),
        }
    }

    pub fn plan(&self) -> anyhow::Result<CompressionPlan> {
        check_header(self.schema_version, &self.kind, KIND_PLAN)?;
        let method = match (self.method.as_str(), self.stride) {
            ("greedy", _) => PlanMethod::Greedy,
            ("recursive", Some(stride)) => PlanMethod::Recursive { stride },
            ("recursive", None) => bail!("recursive plan without a stride"),
            ("kmedoids", _) => PlanMethod::KMedoids,
            ("random", _) => PlanMethod::RandomDeletion,
            (other, _) => bail!("unknown plan method `{other}`"),
        };
        let plan = CompressionPlan {
            num_nodes: self.num_nodes,
            requested_k: self.requested_k,
            retained: self.retained.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| PlanStage { missing: s.missing.clone(), neighbors: s.neighbors.clone() })
                .collect(),
            method,
            seed: self.seed,
            stalled: self.stalled,
        };
        ensure!(
            plan.achieved_k() == self.achieved_k,
            "achieved_k {} disagrees with {} retained nodes",
            self.achieved_k,
            plan.achieved_k()
        );
        Ok(plan)
    }

    pub fn retained_subspaces(&self) -> anyhow::Result<Option<Vec<Subspace>>> {
        self.retained_directions
            .as_ref()
            .map(|dirs| dirs.iter().map(|cols| subspace_from_columns(cols)).collect())
            .transpose()
    }
}

/// Node coordinates sidecar for a samples CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordsFile {
    pub schema_version: u32,
    pub kind: String,
    /// One row per node.
    pub node_coords: Vec<Vec<f64>>,
}

impl CoordsFile {
    pub fn new(coords: &DMatrix<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_COORDS.into(),
            node_coords: coords.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn matrix(&self) -> anyhow::Result<DMatrix<f64>> {
        check_header(self.schema_version, &self.kind, KIND_COORDS)?;
        rows_to_matrix(&self.node_coords)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub schema_version: u32,
    pub kind: String,
    pub weights: Vec<f64>,
}

impl WeightsFile {
    pub fn new(w: &[f64]) -> Self {
        Self { schema_version: SCHEMA_VERSION, kind: KIND_WEIGHTS.into(), weights: w.to_vec() }
    }

    pub fn weights(&self) -> anyhow::Result<QuadratureWeights> {
        check_header(self.schema_version, &self.kind, KIND_WEIGHTS)?;
        Ok(QuadratureWeights::new(self.weights.clone())?)
    }
}

/// The `kind` tag of a JSON document, without parsing the rest.
pub fn json_kind(text: &str) -> anyhow::Result<String> {
    #[derive(Deserialize)]
    struct Header {
        kind: String,
    }
    Ok(serde_json::from_str::<Header>(text).context("not a ridgekit JSON document")?.kind)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn to_json_string<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, to_json_string(value)?).with_context(|| format!("cannot write {}", path.display()))
}

/// Samples CSV: header `x_1..x_d, f_1..f_N`, one row per sample.
pub fn write_samples_csv<W: Write>(out: W, samples: &FieldSamples) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=samples.input_dim())
        .map(|k| format!("x_{k}"))
        .chain((1..=samples.num_nodes()).map(|i| format!("f_{i}")))
        .collect();
    w.write_record(&header)?;
    for r in 0..samples.num_samples() {
        let row: Vec<String> = samples
            .x()
            .row(r)
            .iter()
            .chain(samples.values().row(r).iter())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_samples(path: &Path, samples: &FieldSamples) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    write_samples_csv(BufWriter::new(f), samples)
}

/// Reads a samples CSV. Nodes sit at `0, 1, …` on a line unless `coords` is given.
pub fn read_samples_csv<R: Read>(input: R, coords: Option<DMatrix<f64>>) -> anyhow::Result<FieldSamples> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let d = header.iter().take_while(|h| h.trim().starts_with("x_")).count();
    let n = header.len() - d;
    ensure!(d >= 1, "samples header must start with x_1");
    ensure!(n >= 1, "samples header has no f_ columns");
    for (j, h) in header.iter().enumerate() {
        let expected = if j < d { format!("x_{}", j + 1) } else { format!("f_{}", j - d + 1) };
        ensure!(h.trim() == expected, "column {} is `{h}`, expected `{expected}`", j + 1);
    }
    let mut values = Vec::new();
    let mut m = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == d + n, "row {} has {} fields, expected {}", r + 1, rec.len(), d + n);
        for field in rec.iter() {
            let v: f64 = field.trim().parse().with_context(|| format!("row {}: `{field}` is not a number", r + 1))?;
            values.push(v);
        }
        m += 1;
    }
    ensure!(m >= 1, "samples file has no rows");
    let all = DMatrix::from_row_slice(m, d + n, &values);
    let x = all.columns(0, d).into_owned();
    let f = all.columns(d, n).into_owned();
    let coords = coords.unwrap_or_else(|| DMatrix::from_fn(n, 1, |i, _| i as f64));
    Ok(FieldSamples::new(x, f, coords)?)
}

pub fn load_samples(path: &Path, coords: Option<&Path>) -> anyhow::Result<FieldSamples> {
    let coords = coords.map(|p| read_json::<CoordsFile>(p)?.matrix()).transpose()?;
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_samples_csv(BufReader::new(f), coords).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ridgekit_core::synthetic::{generate_localized_field, SyntheticFieldSpec};

    #[test]
    fn samples_csv_round_trip_is_exact() {
        let (_, samples) = generate_localized_field(SyntheticFieldSpec::new(5, 4, 2, 1), 25, 2).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_1,x_2,x_3,x_4,x_5,f_1,f_2,f_3,f_4\n"));
        let back = read_samples_csv(&buf[..], None).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn bad_csv_headers_are_rejected() {
        assert!(read_samples_csv("f_1,x_1\n1,2\n".as_bytes(), None).is_err());
        assert!(read_samples_csv("x_1,x_3,f_1\n1,2,3\n".as_bytes(), None).is_err());
        assert!(read_samples_csv("x_1,f_1\n1,abc\n".as_bytes(), None).is_err());
        assert!(read_samples_csv("x_1,f_1\n".as_bytes(), None).is_err());
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = CompressionPlan {
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
        let file = PlanFile::new(&plan, None);
        let text = to_json_string(&file).unwrap();
        let back: PlanFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.plan().unwrap(), plan);
        assert_eq!(json_kind(&text).unwrap(), KIND_PLAN);
    }

    #[test]
    fn directions_round_trip_bitwise() {
        let dirs = ridgekit_core::synthetic::LocalizedField::new(SyntheticFieldSpec::new(7, 9, 3, 5)).unwrap();
        let file = DirectionsFile::new(dirs.directions());
        let back: DirectionsFile = serde_json::from_str(&to_json_string(&file).unwrap()).unwrap();
        assert_eq!(back.subspaces().unwrap(), dirs.directions());
    }

    #[test]
    fn wrong_kind_or_version_rejected() {
        let mut f = WeightsFile::new(&[1.0, 2.0]);
        f.kind = KIND_COORDS.into();
        assert!(f.weights().is_err());
        let mut g = WeightsFile::new(&[1.0]);
        g.schema_version = 9;
        assert!(g.weights().is_err());
    }
}
