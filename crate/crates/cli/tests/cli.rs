use std::process::Command;

fn storm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_storm"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn validate_echoes_the_resolved_spec() {
    let out = storm()
        .args(["validate", "--preset", "sms-30", "--set", "noise_rate=0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("noise_rate = 0.0\n"));
    assert!(text.contains("batch_size = 32\n"));
    assert!(text.contains("passes = 3\n"));
}

#[test]
fn unknown_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("x.conf");
    std::fs::write(&conf, "gee = 3\n").unwrap();
    let out = storm().arg("validate").arg(&conf).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key: gee"));
}

#[test]
fn run_aggregate_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("exp");
    let set = [
        "seeds=1,2",
        "synthetic_dim=4",
        "synthetic_train=60",
        "synthetic_val=20",
        "synthetic_test=20",
        "max_epochs=2",
        "baseline=none",
    ];
    let mut cmd = storm();
    cmd.arg("run").arg("--set").arg(format!("output_dir={}", out_dir.display()));
    for s in set {
        cmd.args(["--set", s]);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read(out_dir.join("report.json")).unwrap();

    let out = storm().arg("aggregate").arg(&out_dir).output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(out_dir.join("report.json")).unwrap(), report);

    let out = storm().arg("analyze").arg(&out_dir).output().unwrap();
    assert!(out.status.success());
    assert!(out_dir.join("analysis.json").is_file());
    assert!(out_dir.join("storm/seed-1/fold-0/filter_timing.csv").is_file());
}

#[test]
fn failed_seed_gives_nonzero_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = storm()
        .arg("run")
        .arg("--set")
        .arg(format!("output_dir={}", dir.path().join("bad").display()))
        .args(["--set", "seeds=1", "--set", "synthetic_dim=4", "--set", "synthetic_train=40"])
        .args(["--set", "theta_lr=1e300", "--set", "inner_lr=1e300", "--set", "synthetic_separation=1e150"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAILED storm seed 1"));
}
