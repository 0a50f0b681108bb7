use std::fs;
use std::path::{Path, PathBuf};

use poisson_cpca::pipeline::{cmd_pipeline, verify_basis_file, RunConfigPatch, StudySpec};
use poisson_cpca::{ErrorKind, Execution};

fn example_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example")
}

fn example_patch(out: &Path) -> RunConfigPatch {
    let mut patch = RunConfigPatch::from_file(&example_dir().join("run.toml")).unwrap();
    patch.output_dir = Some(out.to_path_buf());
    patch
}

fn read_bundle(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn example_bundle_has_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bundle");
    let cfg = example_patch(&out).resolve().unwrap();
    cmd_pipeline(&cfg, Execution::Parallel).unwrap();
    let names: Vec<String> = read_bundle(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        [
            "basis.csv",
            "eigenvalues.csv",
            "manifest.txt",
            "scores.csv",
            "sigma_cohortA.csv",
            "sigma_cohortB.csv"
        ]
    );
    assert!(verify_basis_file(&out.join("basis.csv")).unwrap() <= 1e-10);

    let eig = fs::read_to_string(out.join("eigenvalues.csv")).unwrap();
    assert_eq!(eig.lines().count(), 3);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with("study,sample_id,cpc_1,cpc_2,cpc_3\n"));
    assert_eq!(scores.lines().count(), 1 + 30 + 24);
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_pipeline(&example_patch(&a).resolve().unwrap(), Execution::Parallel).unwrap();
    cmd_pipeline(&example_patch(&b).resolve().unwrap(), Execution::Sequential).unwrap();
    assert_eq!(read_bundle(&a), read_bundle(&b));
}

#[test]
fn manifest_regenerates_the_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let mut patch = example_patch(&first);
    patch.basis_method = Some(poisson_cpca::cpca::BasisMethod::Msfa);
    patch.msfa_l = Some(vec![0, 0]);
    patch.msfa_restarts = Some(2);
    cmd_pipeline(&patch.resolve().unwrap(), Execution::Parallel).unwrap();

    let manifest = fs::read_to_string(first.join("manifest.txt")).unwrap();
    let second = tmp.path().join("second");
    let mut replay = RunConfigPatch::from_toml(&manifest).unwrap();
    replay.output_dir = Some(second.clone());
    cmd_pipeline(&replay.resolve().unwrap(), Execution::Parallel).unwrap();

    let (a, b) = (read_bundle(&first), read_bundle(&second));
    assert!(a.iter().any(|(n, _)| n == "msfa_phi.csv"));
    assert_eq!(a, b);
}

#[test]
fn msfa_without_l_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let mut patch = example_patch(&out);
    patch.basis_method = Some(poisson_cpca::cpca::BasisMethod::Msfa);
    let err = patch.resolve().unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(!out.exists());
}

#[test]
fn failing_stage_is_named_and_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "sample\tg1\tg2\ns1\t3\t-1\n").unwrap();
    let out = tmp.path().join("out");
    let patch = RunConfigPatch {
        studies: Some(vec![StudySpec {
            path: bad,
            label: "bad".into(),
        }]),
        q: Some(1),
        output_dir: Some(out.clone()),
        ..Default::default()
    };
    let err = cmd_pipeline(&patch.resolve().unwrap(), Execution::Parallel).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().starts_with("ingest:"), "{err}");
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn file_settings_override_flags() {
    let flags = RunConfigPatch {
        q: Some(7),
        seed: Some(99),
        sdc: Some(false),
        ..Default::default()
    };
    let file = RunConfigPatch::from_toml("q = 2\nsdc = true\n").unwrap();
    let merged = flags.overridden_by(file);
    assert_eq!(merged.q, Some(2));
    assert_eq!(merged.sdc, Some(true));
    assert_eq!(merged.seed, Some(99));
}
