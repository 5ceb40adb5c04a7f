use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adverse_nc::library;
use adverse_nc::solver::NCCertificate;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adverse-nc"))
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("problems/abs_minimax.json")
}

fn run(problem: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(problem).arg("--out").arg(out).args(extra).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_problem_certifies_near_e() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let before = fs::read(bundled()).unwrap();
    let o = run(&bundled(), &out, &["--mode", "hyperrelaxed"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(bundled()).unwrap(), before, "input file changed");

    let cert = NCCertificate::from_json(&fs::read_to_string(out.join("certificate.json")).unwrap()).unwrap();
    assert!((cert.value.unwrap() - 1f64.exp()).abs() < 1e-3);
    for name in ["validation.json", "convergence.csv", "trajectory.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    for j in [5, 10, 20, 40] {
        assert!(out.join(format!("certificate_j{j:03}.json")).exists());
    }
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "j,l0,l1_norm,omega_mass,min_residual,fiber_residual,active_residual");
    assert_eq!(csv.lines().count(), 5);

    let r = bin().arg("report").arg(out.join("certificate.json")).output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("omega      1 atom(s)"), "{text}");
    assert!(!text.contains("!!"), "{text}");
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&bundled(), out, &["--steps", "200", "--j", "5,10,20", "--seed", "3"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn malformed_json_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("bad.json");
    fs::write(&problem, "{ \"name\": \"oops\", ").unwrap();
    let out = dir.path().join("out");
    let o = run(&problem, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_dynamics_name_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled()).unwrap().replace("abs_bilinear\"", "warp_drive\"");
    let problem = dir.path().join("warp.json");
    fs::write(&problem, text).unwrap();
    let out = dir.path().join("out");
    let o = run(&problem, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warp_drive"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&bundled(), &out, &["--j", "10,5"]).status.code(), Some(2));
    assert_eq!(run(&bundled(), &out, &["--steps", "4"]).status.code(), Some(2));
}

#[test]
fn understated_lipschitz_constant_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = serde_json::to_value(library::abs_minimax_data(50)).unwrap();
    data["lipschitz"] = serde_json::json!({ "f_tilde": 0.1 });
    let problem = dir.path().join("p.json");
    fs::write(&problem, serde_json::to_string(&data).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = run(&problem, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("validation.json").exists());
    assert!(!out.join("certificate.json").exists());
}

#[test]
fn flagged_certificate_exits_4_and_reports_1() {
    let dir = tempfile::tempdir().unwrap();
    // the tightened constraint is infeasible at small j
    let mut data = serde_json::to_value(library::kink_crossing_data(50)).unwrap();
    data["h_hat"]["offset"] = serde_json::json!(-5.0);
    let problem = dir.path().join("p.json");
    fs::write(&problem, serde_json::to_string(&data).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = run(&problem, &out, &["--j", "5,10"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(out.join("certificate.json").exists());
    let r = bin().arg("report").arg(out.join("certificate.json")).output().unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stdout).contains("!!"));
}

#[test]
fn report_handles_empty_history_and_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut cert: serde_json::Value = serde_json::from_str(
        &run_small_certificate(dir.path()),
    )
    .unwrap();
    cert["j_history"] = serde_json::json!([]);
    fs::write(&path, serde_json::to_string(&cert).unwrap()).unwrap();
    let r = bin().arg("report").arg(&path).output().unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stdout).contains("no sweep data"));

    fs::write(&path, "not json").unwrap();
    assert_eq!(bin().arg("report").arg(&path).output().unwrap().status.code(), Some(2));
}

fn run_small_certificate(dir: &Path) -> String {
    let out = dir.join("small");
    let o = run(&bundled(), &out, &["--steps", "50", "--j", "5,10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    fs::read_to_string(out.join("certificate.json")).unwrap()
}
