use std::fs;
use std::path::Path;

use nelson_core::io::{parse_spec_with, read_columnar, run_experiment, trace, verify_trace, ExperimentSpec};
use nelson_core::Error;

fn small(kind: &str, out: &Path, extra: &[&str]) -> ExperimentSpec {
    let mut sets: Vec<String> = vec![format!("output_dir={:?}", out.display().to_string())];
    sets.extend(extra.iter().map(|s| s.to_string()));
    parse_spec_with(&format!("kind = \"{kind}\"\n"), &sets).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let extra = ["n_traj=3000", "checkpoints=2", "process=\"colored_smoothing\""];
    let mut s1 = small("simulate", a.path(), &extra);
    s1.threads = Some(1);
    let mut s4 = small("simulate", b.path(), &extra);
    s4.threads = Some(4);
    assert_eq!(s1.hash(), s4.hash());
    let r1 = run_experiment(&s1).unwrap();
    let r4 = run_experiment(&s4).unwrap();
    let (f1, f4) = (files(&r1.dir), files(&r4.dir));
    assert_eq!(f1.len(), 5);
    assert_eq!(f1, f4);
}

#[test]
fn every_file_carries_the_spec_hash() {
    let d = tempfile::tempdir().unwrap();
    let s = small("spectrum", d.path(), &["spectrum.realizations=20", "spectrum.grid_n=128", "spectrum.bands=8"]);
    let r = run_experiment(&s).unwrap();
    assert!(r.dir.file_name().unwrap().to_str().unwrap().ends_with(&r.spec_hash[..12]));
    for name in ["spectrum.csv", "poisson.csv"] {
        let c = read_columnar(&r.dir.join(name)).unwrap();
        assert_eq!(c.spec_hash, r.spec_hash);
    }
    let sp = read_columnar(&r.dir.join("spectrum.csv")).unwrap();
    let k = sp.column("k").unwrap();
    let p = sp.column("P").unwrap();
    let i = k.iter().position(|k| *k == 2.0).unwrap();
    assert!((p[i] - 16.0).abs() < 1e-12);
    for pt in sp.column("P_theta").unwrap() {
        assert!((pt - 1.0).abs() < 1e-12);
    }
    let rep = verify_trace(d.path()).unwrap();
    assert_eq!(rep.run_dirs, 1);
    assert_eq!(rep.files_checked, 4);
}

#[test]
fn tracer_flags_foreign_files() {
    let d = tempfile::tempdir().unwrap();
    let s = small("spectrum", d.path(), &["spectrum.realizations=10", "spectrum.grid_n=64", "spectrum.bands=4"]);
    let r = run_experiment(&s).unwrap();
    let other = small("spectrum", d.path(), &["spectrum.realizations=11", "spectrum.grid_n=64", "spectrum.bands=4"]);
    let r2 = run_experiment(&other).unwrap();
    fs::copy(r2.dir.join("poisson.csv"), r.dir.join("poisson.csv")).unwrap();
    let rep = trace(d.path()).unwrap();
    assert_eq!(rep.mismatches.len(), 1, "{:?}", rep.mismatches);
    assert!(matches!(verify_trace(d.path()), Err(Error::Trace(_))));
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let s = small("node_crossing", d.path(), &["n_traj=300", "horizon=1.0", "node.dts=[2e-3, 1e-3]"]);
    let a = files(&run_experiment(&s).unwrap().dir);
    let b = files(&run_experiment(&s).unwrap().dir);
    assert_eq!(a, b);
}

#[test]
fn failed_runs_leave_no_directory() {
    let d = tempfile::tempdir().unwrap();
    let s = small(
        "simulate",
        d.path(),
        &["dt=2.5", "horizon=60.0", "n_traj=500", "estimator.window=5.0", "estimator.delta=5.0"],
    );
    let e = run_experiment(&s).unwrap_err();
    assert!(!e.is_validation(), "{e}");
    assert_eq!(fs::read_dir(d.path()).map(|r| r.count()).unwrap_or(0), 0);
}
