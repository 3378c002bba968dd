use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpgroups_oracle as oracle;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dpgroups"));
    c.env_remove("DPGROUPS_ALLOW_INSECURE");
    c
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.ledger")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .map(str::to_string)
}

/// ε the golden ledger should produce, pinned with the oracle accountant.
const GOLDEN_EPSILON: f64 = 0.09164449680092225;

/// Independent accounting of the golden ledger: per-round effective z from
/// the recorded (S, σ̃) pairs, oracle RDP summed over rounds.
fn golden_by_oracle() -> f64 {
    let s = |clip: f64, sigma: f64| (clip / sigma).powi(2);
    let per_layer = s(0.5, 4.0) + s(0.5, 4.0) + s(1.0, 12.0);
    let rounds = [
        (0.01, per_layer),
        (0.02, s(1.0, 15.0)),
        (0.01, per_layer),
        (0.05, s(1.2, 60.0) + s(1.0, 80.0)),
        (0.01, per_layer),
    ];
    let delta: f64 = 1e-5;
    oracle::default_orders()
        .into_iter()
        .map(|order| {
            let rdp: f64 = rounds
                .iter()
                .map(|&(q, ss)| oracle::rdp(q, 1.0 / ss.sqrt(), order))
                .sum();
            rdp + (1.0 / delta).ln() / (order - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn golden_ledger_epsilon() {
    let o = bin()
        .args(["account", "--ledger"])
        .arg(golden_path())
        .args(["--delta", "1e-5"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let eps: f64 = field(&out, "epsilon").unwrap().parse().unwrap();
    assert!(
        (eps - GOLDEN_EPSILON).abs() <= 1e-12 * GOLDEN_EPSILON,
        "{eps}"
    );
    let reference = golden_by_oracle();
    assert!(
        (eps - reference).abs() <= 1e-6 * reference,
        "{eps} vs oracle {reference}"
    );
    assert_eq!(field(&out, "delta").unwrap().parse::<f64>().unwrap(), 1e-5);
    assert!(out.contains("caveat: fixed-size sampling"));
    assert!(out.contains("round 3 has no sum queries"));
}

#[test]
fn delta_is_required() {
    let o = bin()
        .args(["account", "--ledger"])
        .arg(golden_path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--delta"));
}

#[test]
fn strict_fixed_size_refuses() {
    let o = bin()
        .args([
            "account",
            "--strict-fixed-size",
            "--delta",
            "1e-5",
            "--ledger",
        ])
        .arg(golden_path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn parse_error_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ledger");
    std::fs::write(
        &p,
        "dpgroups-ledger 1\nsample round=0 q=zz n=1 policy=poisson\n",
    )
    .unwrap();
    let o = bin()
        .args(["account", "--delta", "1e-5", "--ledger"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2, column 18"), "{}", stderr(&o));
}

fn insecure_ledger(dir: &Path) -> PathBuf {
    let p = dir.join("insecure.ledger");
    let o = bin()
        .args([
            "train", "--z", "0", "--q", "1", "--n", "50", "--test-n", "50", "--rounds", "2",
        ])
        .args(["--seed", "00000000000000000000000000000007", "--ledger-out"])
        .arg(&p)
        .arg("--report-out")
        .arg(dir.join("r.json"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

#[test]
fn insecure_round_is_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let p = insecure_ledger(dir.path());
    let o = bin()
        .args(["account", "--delta", "1e-5", "--ledger"])
        .arg(&p)
        .output()
        .unwrap();
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("refused"), "{}", stderr(&o));

    let o = bin()
        .args(["account", "--allow-insecure", "--delta", "1e-5", "--ledger"])
        .arg(&p)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "epsilon").unwrap(), "inf");

    let o = bin()
        .env("DPGROUPS_ALLOW_INSECURE", "1")
        .args(["account", "--delta", "1e-5", "--ledger"])
        .arg(&p)
        .output()
        .unwrap();
    assert!(o.status.success());
}

fn calibrate(args: &[&str]) -> Output {
    bin().arg("calibrate").args(args).output().unwrap()
}

fn account_at(q: f64, z: f64) -> f64 {
    let grid = dpgroups::accountant::OrderGrid::default();
    dpgroups::accountant::epsilon_for_steps(q, z, 1000, 1e-5, &grid)
        .unwrap()
        .epsilon
}

#[test]
fn calibrate_z_then_account() {
    let o = calibrate(&[
        "--target-epsilon",
        "2",
        "--delta",
        "1e-5",
        "--steps",
        "1000",
        "--q",
        "0.01",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let z: f64 = field(&stdout(&o), "z").unwrap().parse().unwrap();
    assert!((account_at(0.01, z) - 2.0).abs() <= 1e-3);
}

#[test]
fn calibrate_q_then_account() {
    let o = calibrate(&[
        "--knob",
        "q",
        "--target-epsilon",
        "2",
        "--delta",
        "1e-5",
        "--steps",
        "1000",
        "--z",
        "1.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q: f64 = field(&stdout(&o), "q").unwrap().parse().unwrap();
    assert!((account_at(q, 1.1) - 2.0).abs() <= 1e-3);
}

#[test]
fn calibrate_infeasible_prints_bracket() {
    let o = calibrate(&[
        "--target-epsilon",
        "0.001",
        "--delta",
        "1e-5",
        "--steps",
        "1000",
        "--q",
        "0.01",
    ]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("epsilon at lower bound"), "{err}");
    assert!(err.contains("epsilon at upper bound"), "{err}");
}

fn train(dir: &Path, tag: &str, extra: &[&str]) -> (Output, PathBuf, PathBuf) {
    let ledger = dir.join(format!("{tag}.ledger"));
    let report = dir.join(format!("{tag}.json"));
    let o = bin()
        .arg("train")
        .args(["--seed", "0123456789abcdef0123456789abcdef", "--ledger-out"])
        .arg(&ledger)
        .arg("--report-out")
        .arg(&report)
        .args(extra)
        .output()
        .unwrap();
    (o, ledger, report)
}

#[test]
fn train_default_matches_account() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let (o, ledger, report) = train(dir.path(), "a", &[]);
    assert!(start.elapsed().as_secs() < 60);
    assert!(o.status.success(), "{}", stderr(&o));
    let eps: f64 = field(&stdout(&o), "epsilon").unwrap().parse().unwrap();
    assert!(eps.is_finite());

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let reported = json["accounting"]["epsilon"].as_f64().unwrap();
    assert_eq!(reported.to_bits(), eps.to_bits());
    assert_eq!(
        json["ledger_path"].as_str().unwrap(),
        ledger.display().to_string()
    );
    assert_eq!(
        json["private_accuracy_per_round"].as_array().unwrap().len(),
        1000
    );

    let o = bin()
        .args(["account", "--delta", "1e-5", "--ledger"])
        .arg(&ledger)
        .output()
        .unwrap();
    let from_disk: f64 = field(&stdout(&o), "epsilon").unwrap().parse().unwrap();
    assert_eq!(from_disk.to_bits(), eps.to_bits());

    let (_, ledger2, report2) = train(dir.path(), "b", &[]);
    assert_eq!(
        std::fs::read(&ledger).unwrap(),
        std::fs::read(&ledger2).unwrap()
    );
    let strip = |p: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["ledger_path"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&report), strip(&report2));
}

#[test]
fn train_disjoint_refuses_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ledger, report) = train(dir.path(), "d", &["--policy", "disjoint", "--rounds", "50"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("disjoint"), "{}", stderr(&o));
    assert!(ledger.exists() && report.exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["accounting"]["status"], "refused");
}
