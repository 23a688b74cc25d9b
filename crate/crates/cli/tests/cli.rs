use std::path::Path;
use std::process::{Command, Output};

fn wedgeheat(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wedgeheat"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("WEDGEHEAT_JOBS")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn kernel_eval_half_plane_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = wedgeheat(
        &["kernel", "eval", "--kappa0", "3.14159265", "--t", "1", "--x-r", "1", "--x-theta", "1.5707963", "--y-r", "1", "--y-theta", "1.5707963"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 0.050302).abs() < 1e-6, "{v}");
}

#[test]
fn missing_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wedgeheat(&["kernel", "eval", "--t", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn point_outside_wedge_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wedgeheat(
        &["kernel", "eval", "--kappa0", "1", "--t", "1", "--x-r", "1", "--x-theta", "2", "--y-r", "1", "--y-theta", "0.5"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn proof_integrals_b_zero_prints_pi() {
    let dir = tempfile::tempdir().unwrap();
    let o = wedgeheat(&["verify", "proof-integrals", "--b", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("3.1415926536\n"), "{}", stdout(&o));
    let o = wedgeheat(&["verify", "proof-integrals", "--b", "-2.5", "--exponent", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("divergence detected"));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = wedgeheat(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let h = stdout(&o);
    for flag in ["--jobs", "--out", "--seed", "WEDGEHEAT_JOBS", "[default: 0]", "[default: reports]"] {
        assert!(h.contains(flag), "{flag} missing from\n{h}");
    }
    let o = wedgeheat(&["verify", "proof-integrals", "--help"], dir.path());
    assert!(stdout(&o).contains("[default: 4]"));
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.json", r#"{"schema_version":1,"kappa0_over_pi":2,"p":2,"thetta":1}"#);
    let o = wedgeheat(&["experiment", "sharpness", "--config", &typo], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let ver = write(dir.path(), "ver.json", r#"{"schema_version":9,"kappa0_over_pi":2,"p":2}"#);
    let o = wedgeheat(&["experiment", "sharpness", "--config", &ver], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = wedgeheat(&["experiment", "sharpness", "--config", "/nonexistent.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sharpness_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", r#"{"schema_version":1,"kappa0_over_pi":2,"p":2,"theta_grid":[0.5,0.9,1.0,1.1,1.5]}"#);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = wedgeheat(&["experiment", "sharpness", "--config", &cfg], &a);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS sharpness"));
    wedgeheat(&["experiment", "sharpness", "--config", &cfg], &b);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for n in names {
        let s = n.to_str().unwrap();
        assert!(s.starts_with("sharpness_") && (s.ends_with(".json") || s.ends_with(".csv")));
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
    }
}

#[test]
fn mc_identical_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "mc.json",
        r#"{"schema_version":1,"kappa0_over_pi":1,"t":0.5,"p":2,"probes":[[0.1,0.5]],"n_paths":400}"#,
    );
    let run = |jobs: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = wedgeheat(&["--jobs", jobs, "--seed", "11", "verify", "mc", "--config", &cfg], &out);
        assert_ne!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
        let f = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().unwrap() == "csv").unwrap();
        std::fs::read(f).unwrap()
    };
    assert_eq!(run("1", "j1"), run("3", "j3"));
}

#[test]
fn bound_verdict_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.json",
        r#"{"schema_version":1,"kappa0_over_pi":1,"lambda":0.5,"cloud":{"n_t":3,"n_r":9}}"#,
    );
    let o = wedgeheat(&["verify", "bound", "--config", &cfg, "--lambda", "0.9"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = wedgeheat(&["verify", "bound", "--lambda", "0.9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
