use std::path::Path;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ridgekit::cli::run;
use ridgekit::formats::{read_json, save_samples, write_json, DirectionsFile, PlanFile};
use ridgekit::manifest::{sha256_file, RunManifest};
use ridgekit_core::synthetic::{generate_localized_field, SyntheticFieldSpec};
use ridgekit_core::Subspace;

fn ridgekit(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ridgekit").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_directions(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dirs: Vec<Subspace> = (0..n).map(|_| Subspace::random(5, 1, &mut rng).unwrap()).collect();
    let path = dir.join("dirs.json");
    write_json(&path, &DirectionsFile::new(&dirs)).unwrap();
    path
}

#[test]
fn exp_recovery_writes_tidy_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.json");
    let (code, out, err) = ridgekit(&[
        "exp-recovery", "--method", "embedded", "--trials", "2", "--m", "60", "--fitter", "linear", "--degree", "3",
        "--manifest", p(&manifest),
    ]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("M,method,recovery_prob"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], ["60", "embedded"]);
    assert!(["0.0", "0.5", "1.0"].contains(&row[2]));
    assert!(lines.next().is_none());

    let m: RunManifest = read_json(&manifest).unwrap();
    assert_eq!(m.subcommand, "exp-recovery");
    assert!(m.stdout_sha256.is_some());
}

#[test]
fn exp_recovery_json_and_component_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rec.json");
    let comp = tmp.path().join("comp.json");
    let (code, _, err) = ridgekit(&[
        "--format", "json", "exp-recovery", "--trials", "1", "--m", "40", "--fitter", "linear", "--degree", "2",
        "--method", "embedded", "--components-out", p(&comp), "--out", p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: serde_json::Value = read_json(&out).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    let comps: serde_json::Value = read_json(&comp).unwrap();
    let names: Vec<&str> = comps.as_array().unwrap().iter().map(|r| r["component"].as_str().unwrap()).collect();
    assert_eq!(names, ["f1", "f2", "f3", "h"]);
    let m: RunManifest = read_json(&tmp.path().join("rec.json.manifest.json")).unwrap();
    assert_eq!(m.outputs.len(), 2);
    assert_eq!(m.outputs[0].sha256, sha256_file(&out).unwrap());
}

#[test]
fn compress_then_recover_keeps_stored_directions_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write_directions(tmp.path(), 12);
    let plan = tmp.path().join("plan.json");
    let rec = tmp.path().join("rec.json");
    let (code, _, err) = ridgekit(&["compress", p(&dirs), "--k", "5", "--stride", "2", "--out", p(&plan)]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = ridgekit(&["recover", p(&plan), "--out", p(&rec)]);
    assert_eq!(code, 0, "{err}");

    let original: DirectionsFile = read_json(&dirs).unwrap();
    let recovered: DirectionsFile = read_json(&rec).unwrap();
    let plan: PlanFile = read_json(&plan).unwrap();
    assert_eq!(plan.method, "recursive");
    assert!(plan.achieved_k >= 5);
    assert_eq!(recovered.directions.len(), 12);
    for &i in &plan.retained {
        assert_eq!(recovered.directions[i], original.directions[i]);
    }
}

#[test]
fn validate_plan_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write_directions(tmp.path(), 10);
    let plan = tmp.path().join("plan.json");
    let manifest = tmp.path().join("v.json");
    assert_eq!(ridgekit(&["compress", p(&dirs), "--k", "4", "--method", "kmedoids", "--out", p(&plan)]).0, 0);
    assert_eq!(ridgekit(&["validate-plan", p(&plan), "--manifest", p(&manifest)]).0, 0);

    let good: PlanFile = read_json(&plan).unwrap();
    let gone = good.stages[0].missing[0];
    let mut self_neighbor = good.clone();
    self_neighbor.stages[0].neighbors[0][0] = gone;
    let mut duplicate = good.clone();
    duplicate.retained.push(gone);
    duplicate.achieved_k += 1;
    for (i, file) in [self_neighbor, duplicate].iter().enumerate() {
        let bad = tmp.path().join(format!("bad{i}.json"));
        write_json(&bad, file).unwrap();
        let (code, _, err) = ridgekit(&["validate-plan", p(&bad), "--manifest", p(&manifest)]);
        assert_eq!(code, 2, "{err}");
        assert!(err.starts_with("error:"));
    }

    // A file whose counts disagree is malformed input rather than a bad plan.
    let mut inconsistent = good.clone();
    inconsistent.achieved_k += 1;
    let bad = tmp.path().join("inconsistent.json");
    write_json(&bad, &inconsistent).unwrap();
    assert_eq!(ridgekit(&["validate-plan", p(&bad), "--manifest", p(&manifest)]).0, 1);

    let missing = tmp.path().join("nope.json");
    assert_eq!(ridgekit(&["validate-plan", p(&missing), "--manifest", p(&manifest)]).0, 1);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write_directions(tmp.path(), 6);
    let out = tmp.path().join("x.json");
    assert_eq!(ridgekit(&["frobnicate"]).0, 1);
    assert_eq!(ridgekit(&["compress", p(&dirs)]).0, 1);
    assert_eq!(ridgekit(&["--threads", "0", "compress", p(&dirs), "--k", "2", "--out", p(&out)]).0, 1);
    assert_eq!(ridgekit(&["compress", p(&dirs), "--k", "2", "--method", "recursive", "--out", p(&out)]).0, 1);
    assert_eq!(ridgekit(&["compress", p(&dirs), "--k", "0", "--out", p(&out)]).0, 1);
    assert_eq!(ridgekit(&["--format", "xml", "validate-plan", "x"]).0, 1);
    let (code, out, _) = ridgekit(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("Usage"));
}

#[test]
fn fit_and_extract_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, samples) = generate_localized_field(SyntheticFieldSpec::new(4, 6, 2, 1), 120, 2).unwrap();
    let csv = tmp.path().join("s.csv");
    save_samples(&csv, &samples).unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    for out in [&a, &b] {
        let (code, _, err) = ridgekit(&[
            "--seed", "5", "fit-embedded", "--samples", p(&csv), "--fitter", "vp", "--degree", "3", "--out", p(out),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let q = tmp.path().join("q.json");
    let (code, _, err) = ridgekit(&[
        "extract-qoi", "--model", p(&a), "--samples", p(&csv), "--k", "2", "--eval", p(&csv), "--out", p(&q),
    ]);
    assert_eq!(code, 0, "{err}");
    let qoi: serde_json::Value = read_json(&q).unwrap();
    assert_eq!(qoi["kind"], "qoi_ridge");
    assert!(qoi["eval_mse"].as_f64().unwrap() < 0.1);

    let node = tmp.path().join("n.json");
    assert_eq!(ridgekit(&["fit-node", "--samples", p(&csv), "--node", "9", "--out", p(&node)]).0, 1);
    assert_eq!(ridgekit(&["fit-node", "--samples", p(&csv), "--node", "2", "--r", "1", "--degree", "3", "--out", p(&node)]).0, 0);
    let (code, _, _) = ridgekit(&["compress", p(&a), "--k", "3", "--out", p(&tmp.path().join("plan.json"))]);
    assert_eq!(code, 0);
}

#[test]
fn binary_honours_thread_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = write_directions(tmp.path(), 8);
    let plan = tmp.path().join("plan.json");
    let bin = env!("CARGO_BIN_EXE_ridgekit");
    let status = Command::new(bin)
        .args(["--threads", "1", "compress", p(&dirs), "--k", "3", "--out", p(&plan)])
        .env("RIDGEKIT_THREADS", "2")
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let m: RunManifest = read_json(&tmp.path().join("plan.json.manifest.json")).unwrap();
    assert_eq!(m.threads, 2);

    let status = Command::new(bin)
        .args(["compress", p(&dirs), "--k", "3", "--out", p(&plan)])
        .env("RIDGEKIT_THREADS", "0")
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
