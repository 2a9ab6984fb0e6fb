//! The `ridgekit` command line.
//!
//! Exit codes: 0 on success, 1 for usage or input errors, 2 when a numerical
//! step fails (including a plan that does not validate).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ridgekit_core::compression::{
    compress_recursive_with_distances, compress_with_distances, kmedoids_with_distances, random_deletion_with_distances,
    recover, retained_directions, validate_plan,
};
use ridgekit_core::embedded::{fit_node, qoi_mse, qoi_ridge_from_covariance, Fitter, NodeFitConfig, QuadratureWeights};
use ridgekit_core::ridge_fit::{MaveConfig, VpConfig};
use ridgekit_core::Subspace;

use crate::experiments::{
    compression_study, recovery_probability_experiment, CompressionMethod, CompressionStudyConfig, FitterKind,
    RecoveryConfig, RecoveryMethod,
};
use crate::formats::{
    json_kind, load_samples, read_json, to_json_string, DirectionsFile, EmbeddedModelFile, NodeModelFile, NodeRecord,
    PlanFile, QoiModelFile, WeightsFile, KIND_DIRECTIONS, KIND_EMBEDDED_MODEL, KIND_NODE_MODEL, SCHEMA_VERSION,
};
use crate::manifest::{manifest_path_for, sha256_bytes, FileDigest, RunManifest};
use crate::parallel::{distance_matrix_parallel, fit_embedded_parallel, gradient_covariance_parallel, resolve_threads, with_threads};

#[derive(Debug, Parser)]
#[command(name = "ridgekit", version, about = "Embedded ridge approximation and ridge compression")]
pub struct Cli {
    /// Seed for every random choice of the run
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (RIDGEKIT_THREADS takes precedence)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Format of tabular output
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Manifest path when no --out is given [default: ./<subcommand>.manifest.json]
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitterArgs {
    /// linear, vp or mave
    #[arg(long, default_value = "vp")]
    pub fitter: FitterKind,
    /// Ridge dimension per node
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    /// Polynomial degree of the VP fit and of the nodal profiles
    #[arg(long, default_value_t = 7)]
    pub degree: usize,
    /// Iteration cap of the fitter
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Random restarts of VP
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    /// Bandwidth multiplier of MAVE
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
}

impl FitterArgs {
    fn node_config(&self, seed: u64) -> NodeFitConfig {
        let fitter = match self.fitter {
            FitterKind::Linear => Fitter::Linear,
            FitterKind::Vp => {
                let base = VpConfig::default();
                Fitter::Vp(VpConfig {
                    reduced_dim: self.r,
                    degree: self.degree,
                    max_iters: self.max_iters.unwrap_or(base.max_iters),
                    n_restarts: self.restarts,
                    rng_seed: seed,
                    ..base
                })
            }
            FitterKind::Mave => {
                let base = MaveConfig::default();
                Fitter::Mave(MaveConfig {
                    reduced_dim: self.r,
                    bandwidth_rule: self.bandwidth,
                    max_iters: self.max_iters.unwrap_or(base.max_iters),
                    rng_seed: seed,
                    ..base
                })
            }
        };
        NodeFitConfig { fitter, reduced_dim: self.r, profile_degree: self.degree }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Embedded,
    Direct,
    Both,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fit a ridge model to one field component
    FitNode {
        #[arg(long)]
        samples: PathBuf,
        /// Node coordinates sidecar
        #[arg(long)]
        coords: Option<PathBuf>,
        /// 0-based component index
        #[arg(long)]
        node: usize,
        #[command(flatten)]
        fit: FitterArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a ridge model to every field component
    FitEmbedded {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        coords: Option<PathBuf>,
        /// Quadrature weights file [default: 1/N at every node]
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        fit: FitterArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dimension-reducing subspace and profile of the weighted qoi
    ExtractQoi {
        #[arg(long)]
        model: PathBuf,
        /// Training samples; the qoi is their field times the model weights
        #[arg(long)]
        samples: PathBuf,
        /// Number of qoi ridge directions
        #[arg(long)]
        k: usize,
        /// Degree of the qoi profile
        #[arg(long, default_value_t = 3)]
        degree: usize,
        /// Verification samples for the normalized MSE
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose which ridge directions to store
    Compress {
        /// Directions file or embedded model
        input: PathBuf,
        /// Number of directions to keep
        #[arg(long)]
        k: usize,
        /// Remove at most this many per stage (implies the recursive method)
        #[arg(long)]
        stride: Option<usize>,
        /// greedy, recursive, kmedoids or random [default: recursive with --stride, else greedy]
        #[arg(long)]
        method: Option<CompressionMethod>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild every direction from a compression plan
    Recover {
        plan: PathBuf,
        /// Stored directions, if the plan does not carry them
        #[arg(long)]
        retained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recovery probability of the analytical three-ridge problem
    ExpRecovery {
        #[arg(long, value_enum, default_value_t = MethodChoice::Both)]
        method: MethodChoice,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Sample sizes, comma separated
        #[arg(long, value_delimiter = ',', default_value = "50,100,150,200,250,300,350,400")]
        m: Vec<usize>,
        #[arg(long, default_value_t = 0.005)]
        threshold: f64,
        /// Nodal fitter of the embedded method
        #[arg(long, default_value = "vp")]
        fitter: FitterKind,
        #[arg(long, default_value_t = 7)]
        degree: usize,
        /// Per-component recovery table
        #[arg(long)]
        components_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction error of compression methods on a synthetic localized field
    ExpCompression {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 30)]
        d: usize,
        /// Inputs influencing each node
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, value_delimiter = ',', default_value = "40,80,120,160")]
        removals: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        stride: usize,
        #[arg(long, value_delimiter = ',', default_value = "recursive,kmedoids,random")]
        methods: Vec<CompressionMethod>,
        #[arg(long, default_value_t = 300)]
        m_train: usize,
        #[arg(long, default_value_t = 500)]
        m_eval: usize,
        #[arg(long, default_value = "vp")]
        fitter: FitterKind,
        #[arg(long, default_value_t = 5)]
        degree: usize,
        /// Number of seeds, starting at --seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the structure of a compression plan
    ValidatePlan { plan: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FitNode { .. } => "fit-node",
            Command::FitEmbedded { .. } => "fit-embedded",
            Command::ExtractQoi { .. } => "extract-qoi",
            Command::Compress { .. } => "compress",
            Command::Recover { .. } => "recover",
            Command::ExpRecovery { .. } => "exp-recovery",
            Command::ExpCompression { .. } => "exp-compression",
            Command::ValidatePlan { .. } => "validate-plan",
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::FitNode { out, .. }
            | Command::FitEmbedded { out, .. }
            | Command::ExtractQoi { out, .. }
            | Command::Compress { out, .. }
            | Command::Recover { out, .. }
            | Command::ExpRecovery { out, .. }
            | Command::ExpCompression { out, .. } => out.as_deref(),
            Command::ValidatePlan { .. } => None,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Numerical(e) => e,
        }
    }
}

trait Classify<T> {
    fn usage(self) -> Result<T, CliError>;
    fn numerical(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
    fn numerical(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Numerical(e.into()))
    }
}

/// What a subcommand produced.
struct Run {
    /// Main output: written to `--out` or stdout.
    body: Vec<u8>,
    extra_outputs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    /// One-line summary for stderr.
    note: Option<String>,
}

impl Run {
    fn new(body: Vec<u8>, inputs: Vec<PathBuf>) -> Self {
        Self { body, extra_outputs: Vec::new(), inputs, note: None }
    }
}

fn table<T: Serialize>(rows: &[T], format: Format) -> anyhow::Result<Vec<u8>> {
    match format {
        Format::Json => Ok(to_json_string(&rows)?.into_bytes()),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            w.into_inner().map_err(|e| anyhow!("{e}"))
        }
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    Ok(to_json_string(value).usage()?.into_bytes())
}

/// Directions from a directions file, a nodal model or an embedded model.
fn load_directions(path: &Path) -> anyhow::Result<Vec<Subspace>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    match json_kind(&text)?.as_str() {
        KIND_DIRECTIONS => serde_json::from_str::<DirectionsFile>(&text)?.subspaces(),
        KIND_EMBEDDED_MODEL => serde_json::from_str::<EmbeddedModelFile>(&text)?.directions(),
        KIND_NODE_MODEL => Ok(vec![serde_json::from_str::<NodeModelFile>(&text)?.model.model()?.directions().clone()]),
        other => bail!("{} holds `{other}`, not ridge directions", path.display()),
    }
}

fn execute(cli: &Cli) -> Result<Run, CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::FitNode { samples, coords, node, fit, out: _ } => {
            let data = load_samples(samples, coords.as_deref()).usage()?;
            if *node >= data.num_nodes() {
                return Err(CliError::Usage(anyhow!("--node {node} but the samples have {} components", data.num_nodes())));
            }
            let cfg = fit.node_config(seed);
            let res = fit_node(data.x(), &data.values().column(*node).into_owned(), &cfg, *node);
            if let ridgekit_core::embedded::NodeStatus::Failed(e) = &res.status {
                return Err(CliError::Numerical(anyhow!("node {node}: {e}")));
            }
            let file = NodeModelFile {
                schema_version: SCHEMA_VERSION,
                kind: KIND_NODE_MODEL.into(),
                node: *node,
                fitter: fit.fitter.to_string(),
                model: NodeRecord::new(&res.model, &res.status),
            };
            let mut run = Run::new(json_bytes(&file)?, inputs(&[Some(samples), coords.as_ref()]));
            run.note = Some(format!("node {node}: {}", res.status));
            Ok(run)
        }
        Command::FitEmbedded { samples, coords, weights, fit, out: _ } => {
            let data = load_samples(samples, coords.as_deref()).usage()?;
            let w = match weights {
                Some(p) => read_json::<WeightsFile>(p).and_then(|f| f.weights()).usage()?,
                None => QuadratureWeights::uniform(data.num_nodes()).usage()?,
            };
            if w.len() != data.num_nodes() {
                return Err(CliError::Usage(anyhow!("{} weights for {} components", w.len(), data.num_nodes())));
            }
            let model = fit_embedded_parallel(&data, w, &fit.node_config(seed)).numerical()?;
            let failed = model.status().iter().filter(|s| s.is_failed()).count();
            let file = EmbeddedModelFile::new(&model, &fit.fitter.to_string());
            let mut run = Run::new(json_bytes(&file)?, inputs(&[Some(samples), coords.as_ref(), weights.as_ref()]));
            run.note = Some(format!("{} nodes fitted, {failed} failed", model.num_nodes()));
            Ok(run)
        }
        Command::ExtractQoi { model, samples, k, degree, eval, out: _ } => {
            let emb = read_json::<EmbeddedModelFile>(model).and_then(|f| f.model()).usage()?;
            let data = load_samples(samples, None).usage()?;
            if data.num_nodes() != emb.num_nodes() || data.input_dim() != emb.input_dim() {
                return Err(CliError::Usage(anyhow!("samples do not match the model's dimensions")));
            }
            let y = data.qoi(emb.weights()).usage()?;
            let cov = gradient_covariance_parallel(&emb, data.x()).numerical()?;
            let q = qoi_ridge_from_covariance(&cov, data.x(), &y, *k, *degree).numerical()?;
            let mse = match eval {
                Some(p) => {
                    let ev = load_samples(p, None).usage()?;
                    let h = ev.qoi(emb.weights()).usage()?;
                    Some(qoi_mse(&q, ev.x(), &h).numerical()?)
                }
                None => None,
            };
            let mut run = Run::new(json_bytes(&QoiModelFile::new(&q, mse))?, inputs(&[Some(model), Some(samples), eval.as_ref()]));
            run.note = mse.map(|e| format!("normalized MSE on verification samples: {e:.6e}"));
            Ok(run)
        }
        Command::Compress { input, k, stride, method, out: _ } => {
            let dirs = load_directions(input).usage()?;
            let method = match (method, stride) {
                (Some(CompressionMethod::Recursive), None) => {
                    return Err(CliError::Usage(anyhow!("the recursive method needs --stride")))
                }
                (Some(m), Some(_)) if *m != CompressionMethod::Recursive => {
                    return Err(CliError::Usage(anyhow!("--stride only applies to the recursive method")))
                }
                (Some(m), _) => *m,
                (None, Some(_)) => CompressionMethod::Recursive,
                (None, None) => CompressionMethod::Greedy,
            };
            if dirs.iter().any(|w| w.dim() != 1) {
                return Err(CliError::Numerical(ridgekit_core::Error::UnsupportedRank { r: dirs[0].dim() }.into()));
            }
            let dist = distance_matrix_parallel(&dirs).numerical()?;
            let plan = match method {
                CompressionMethod::Greedy => compress_with_distances(&dist, *k),
                CompressionMethod::Recursive => compress_recursive_with_distances(&dist, *k, stride.unwrap_or(1)),
                CompressionMethod::Kmedoids => kmedoids_with_distances(&dist, *k, seed).map(|r| r.plan),
                CompressionMethod::Random => random_deletion_with_distances(&dist, *k, seed),
            }
            .map_err(|e| match e {
                ridgekit_core::Error::InvalidK { .. } => CliError::Usage(e.into()),
                e => CliError::Numerical(e.into()),
            })?;
            let kept = retained_directions(&plan, &dirs).numerical()?;
            let mut run = Run::new(json_bytes(&PlanFile::new(&plan, Some(&kept)))?, inputs(&[Some(input)]));
            run.note = Some(format!(
                "kept {} of {} directions (requested {}){}",
                plan.achieved_k(),
                plan.num_nodes,
                plan.requested_k,
                if plan.stalled { ", stalled" } else { "" }
            ));
            Ok(run)
        }
        Command::Recover { plan, retained, out: _ } => {
            let file = read_json::<PlanFile>(plan).usage()?;
            let p = file.plan().usage()?;
            let kept = match retained {
                Some(path) => load_directions(path).usage()?,
                None => file
                    .retained_subspaces()
                    .usage()?
                    .ok_or_else(|| CliError::Usage(anyhow!("plan carries no directions; pass --retained")))?,
            };
            validate_plan(&p).numerical()?;
            let rec = recover(&p, &kept).numerical()?;
            let mut out = DirectionsFile::new(&rec.directions);
            out.flagged = rec.flagged.clone();
            let mut run = Run::new(json_bytes(&out)?, inputs(&[Some(plan), retained.as_ref()]));
            run.note = Some(format!("recovered {} directions, {} flagged", rec.directions.len(), rec.flagged.len()));
            Ok(run)
        }
        Command::ExpRecovery { method, trials, m, threshold, fitter, degree, components_out, out: _ } => {
            if m.is_empty() || *trials == 0 {
                return Err(CliError::Usage(anyhow!("need at least one M and one trial")));
            }
            let methods = match method {
                MethodChoice::Embedded => vec![RecoveryMethod::Embedded],
                MethodChoice::Direct => vec![RecoveryMethod::Direct],
                MethodChoice::Both => vec![RecoveryMethod::Embedded, RecoveryMethod::Direct],
            };
            let cfg = RecoveryConfig {
                methods,
                fitter: *fitter,
                m_grid: m.clone(),
                n_trials: *trials,
                threshold: *threshold,
                degree: *degree,
                seed,
            };
            let res = recovery_probability_experiment(&cfg);
            let mut run = Run::new(table(&res.rows, cli.format).usage()?, Vec::new());
            if let Some(path) = components_out {
                std::fs::write(path, table(&res.components, cli.format).usage()?)
                    .with_context(|| format!("cannot write {}", path.display()))
                    .usage()?;
                run.extra_outputs.push(path.clone());
            }
            Ok(run)
        }
        Command::ExpCompression {
            n,
            d,
            window,
            noise,
            removals,
            stride,
            methods,
            m_train,
            m_eval,
            fitter,
            degree,
            seeds,
            out: _,
        } => {
            let cfg = CompressionStudyConfig {
                d: *d,
                n: *n,
                window_width: *window,
                noise_sd: *noise,
                m_train: *m_train,
                m_eval: *m_eval,
                removals: removals.clone(),
                stride: *stride,
                methods: methods.clone(),
                fitter: *fitter,
                degree: *degree,
                seed,
            };
            if removals.iter().any(|r| *r >= *n) {
                return Err(CliError::Usage(anyhow!("every removal count must be below N = {n}")));
            }
            let mut rows = Vec::new();
            for s in 0..*seeds {
                rows.extend(compression_study(&cfg, seed.wrapping_add(s)).numerical()?);
            }
            Ok(Run::new(table(&rows, cli.format).usage()?, Vec::new()))
        }
        Command::ValidatePlan { plan } => {
            let p = read_json::<PlanFile>(plan).and_then(|f| f.plan()).usage()?;
            validate_plan(&p).numerical()?;
            let mut run = Run::new(Vec::new(), vec![plan.clone()]);
            run.note = Some(format!("valid plan: {} of {} nodes kept in {} stage(s)", p.achieved_k(), p.num_nodes, p.stages.len()));
            Ok(run)
        }
    }
}

fn inputs(paths: &[Option<&PathBuf>]) -> Vec<PathBuf> {
    paths.iter().flatten().map(|p| (*p).clone()).collect()
}

fn finish(cli: &Cli, argv: Vec<String>, threads: usize, run: Run, stdout: &mut dyn Write) -> Result<(), CliError> {
    let name = cli.command.name();
    let format = match cli.format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    let mut manifest = RunManifest::new(name, argv, cli.seed, threads, format);
    manifest.config = serde_json::to_value(&cli.command).usage()?;
    manifest.inputs = run.inputs.iter().map(|p| FileDigest::of(p)).collect::<anyhow::Result<_>>().usage()?;
    let manifest_path = match cli.command.out() {
        Some(out) => {
            std::fs::write(out, &run.body).with_context(|| format!("cannot write {}", out.display())).usage()?;
            manifest.outputs.push(FileDigest::of(out).usage()?);
            manifest_path_for(out)
        }
        None => {
            stdout.write_all(&run.body).usage()?;
            if !run.body.is_empty() {
                manifest.stdout_sha256 = Some(sha256_bytes(&run.body));
            }
            cli.manifest.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.manifest.json")))
        }
    };
    for p in &run.extra_outputs {
        manifest.outputs.push(FileDigest::of(p).usage()?);
    }
    manifest.write(&manifest_path).usage()
}

/// Runs the command line; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = resolve_threads(cli.threads).usage().and_then(|threads| {
        with_threads(threads, || (rayon::current_num_threads(), execute(&cli)))
            .usage()
            .and_then(|(n, r)| r.map(|run| (n, run)))
    });
    let result = result.and_then(|(n, run)| {
        let note = run.note.clone();
        finish(&cli, argv, n, run, stdout)?;
        if let Some(note) = note {
            let _ = writeln!(stderr, "{note}");
        }
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {:#}", e.error());
            e.code()
        }
    }
}
