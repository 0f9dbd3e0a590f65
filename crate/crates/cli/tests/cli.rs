use std::path::Path;
use std::process::{Command, Output};

fn metabias(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metabias"));
    c.args(args).env_remove("SOURCE_DATE_EPOCH");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const FIXTURE: &str = "study_id,theta,se\ns1,1,0.1\ns2,2,0.1\ns3,3,0.1\n";

#[test]
fn pool_on_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(tmp.path(), "d.csv", FIXTURE);
    let out = tmp.path().display().to_string();
    let o = metabias(&["pool", "--input", &input, "--out-dir", &out], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pool = json(&tmp.path().join("pool.json"));
    assert!((pool["mu_hat"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    // fewer than four estimates: screen skipped with a warning
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "pool");
    assert!(!m["warnings"].as_array().unwrap().is_empty());
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(metabias(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(metabias(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(metabias(&["bias", "--help"], &[]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let o = metabias(&["pool", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(metabias(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(metabias(&[], &[]).status.code(), Some(1));
}

#[test]
fn validation_errors_exit_one_and_still_write_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(tmp.path(), "d.csv", "study_id,theta,se\na,1,0.1\nb,2,-0.1\n");
    let out = tmp.path().display().to_string();
    let o = metabias(&["pool", "--input", &input, "--out-dir", &out], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("se"));

    let missing = tmp.path().join("nope.csv").display().to_string();
    assert_eq!(metabias(&["pool", "--input", &missing, "--out-dir", &out], &[]).status.code(), Some(1));
}

#[test]
fn collinear_metareg_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("study_id,theta,se,x,x2\n");
    for i in 0..12 {
        let x = i as f64 * 0.5;
        csv += &format!("s{},{},{},{},{}\n", i % 4, 0.1 + 0.02 * x, 0.05 + 0.01 * (i % 3) as f64, x, 2.0 * x);
    }
    let input = write(tmp.path(), "d.csv", &csv);
    let out = tmp.path().display().to_string();
    let o = metabias(&["metareg", "--input", &input, "--out-dir", &out, "--moderators", "x,x2"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collinear"));
}

#[test]
fn simulate_then_metareg_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "sim.json",
        r#"{"mu_true": 0.1, "tau_between": 0.05, "tau_within": 0.02, "weightfn": null, "n_studies": 30,
            "estimates_per_study": [2, 5], "se_range": [0.01, 0.2], "beta_true": {"x": 0.2}, "seed": 3}"#,
    );
    let out = tmp.path().display().to_string();
    assert!(metabias(&["simulate", "--config", &cfg, "--out-dir", &out], &[]).status.success());
    let input = tmp.path().join("dataset.csv").display().to_string();
    let o = metabias(&["metareg", "--input", &input, "--out-dir", &out], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(tmp.path().join("metareg.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("name,estimate,se,z,p,stars"));
    assert!(lines.any(|l| l.starts_with("x,")));
}

#[test]
fn source_date_epoch_makes_manifest_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(tmp.path(), "d.csv", FIXTURE);
    let mut manifests = Vec::new();
    for tag in ["a", "b"] {
        let out = tmp.path().join(tag);
        std::fs::create_dir(&out).unwrap();
        let out = out.display().to_string();
        let o = metabias(&["funnel", "--input", &input, "--out-dir", &out], &[("SOURCE_DATE_EPOCH", "1700000000")]);
        assert!(o.status.success());
        manifests.push(std::fs::read(tmp.path().join(tag).join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    let m: serde_json::Value = serde_json::from_slice(&manifests[0]).unwrap();
    assert_eq!(m["started_at"], "2023-11-14T22:13:20Z");
}

#[test]
fn digest_tracks_settings_and_content_not_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.csv", FIXTURE);
    let b = write(tmp.path(), "b.csv", FIXTURE);
    let digest = |input: &str, seed: &str, tag: &str| {
        let out = tmp.path().join(tag);
        std::fs::create_dir(&out).unwrap();
        let out = out.display().to_string();
        assert!(metabias(&["pool", "--input", input, "--out-dir", &out, "--seed", seed], &[]).status.success());
        json(&tmp.path().join(tag).join("manifest.json"))["config_digest"].clone()
    };
    let d1 = digest(&a, "1", "r1");
    assert_eq!(d1, digest(&b, "1", "r2"));
    assert_ne!(d1, digest(&a, "2", "r3"));
}
