//! End-to-end checks of the command-line interface: exit codes, output
//! files, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_relqr")
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join("configs")
        .join(name)
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("relqr-cli-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn read_matrix(path: &Path, name: &str) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() == 4 && fields[0] == "matrix" && fields[1] == name {
            let rows: usize = fields[2].parse().unwrap();
            return (0..rows)
                .map(|_| {
                    lines
                        .next()
                        .unwrap()
                        .split(',')
                        .map(|v| v.parse().unwrap())
                        .collect()
                })
                .collect();
        }
    }
    panic!("matrix {name} not found in {}", path.display());
}

#[test]
fn scalar_smoke_run_learns_the_golden_gain() {
    let out = scratch_dir("scalar");
    let started = std::time::Instant::now();
    let status = Command::new(binary())
        .args(["run"])
        .arg(workspace_config("scalar.json"))
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(started.elapsed() < std::time::Duration::from_secs(1));

    let k_star = read_matrix(&out.join("gains.csv"), "K_star");
    let golden = 1.0 + 2.0_f64.sqrt();
    assert!(
        (k_star[0][0] - golden).abs() < 1e-3,
        "K* = {} vs {golden}",
        k_star[0][0]
    );
    for file in [
        "history.csv",
        "figure_data.csv",
        "verify.csv",
        "manifest.txt",
        "plot.gnuplot",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config_sha256=") && manifest.contains("version="));
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn three_agent_run_learns_and_distributes() {
    let out = scratch_dir("three-agent");
    let status = Command::new(binary())
        .args(["run"])
        .arg(workspace_config("three_agent.json"))
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .status()
        .unwrap();
    assert!(status.success());

    // history: terminal damping is exactly zero and the lambda_max tail is
    // nonincreasing once the damping has vanished
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let rows: Vec<Vec<&str>> = history.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let alphas: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(*alphas.last().unwrap(), 0.0);
    let first_zero = alphas.iter().position(|&a| a == 0.0).unwrap();
    let lambdas: Vec<f64> =
        rows[first_zero..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(
        lambdas.windows(2).all(|w| w[1] <= w[0] + 1e-8),
        "lambda_max tail is not nonincreasing: {lambdas:?}"
    );

    // learned gain lands on the known optimum for this benchmark
    let reference = [
        [3.51, 0.86, 3.82, 2.53, 0.62, 0.23],
        [4.36, 0.05, 5.59, 4.34, 1.63, 1.32],
        [1.75, -0.01, 3.17, 3.09, 2.45, 2.18],
    ];
    let k_star = read_matrix(&out.join("gains.csv"), "K_star");
    for (row, reference_row) in k_star.iter().zip(&reference) {
        for (value, reference_value) in row.iter().zip(reference_row) {
            assert!(
                (value - reference_value).abs() < 0.05,
                "gain entry {value} vs {reference_value}"
            );
        }
    }

    // the distributed gain keeps the forbidden corner blocks at exact zero
    let k_d = read_matrix(&out.join("gains.csv"), "K_d");
    for col in 4..6 {
        assert_eq!(k_d[0][col], 0.0);
    }
    for col in 0..2 {
        assert_eq!(k_d[2][col], 0.0);
    }
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn starved_data_exits_with_the_rank_code() {
    // three-agent plant with Z = 5 rows cannot reach rank 39
    let config_text = std::fs::read_to_string(workspace_config("three_agent.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&config_text).unwrap();
    config["data"]["intervals"] = serde_json::json!(5);
    config["data"]["fine_step"] = serde_json::json!(1e-3);
    let out = scratch_dir("starved");
    std::fs::create_dir_all(&out).unwrap();
    let config_path = out.join("starved.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let output = Command::new(binary())
        .args(["run"])
        .arg(&config_path)
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let message = String::from_utf8_lossy(&output.stderr);
    assert!(
        message.contains("rank condition"),
        "diagnostic should name the rank condition: {message}"
    );
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn stalled_damping_exits_with_the_stall_code() {
    let config_text = std::fs::read_to_string(workspace_config("scalar.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&config_text).unwrap();
    config["learner"]["sigma"] = serde_json::json!(1e-9);
    let out = scratch_dir("stalled");
    std::fs::create_dir_all(&out).unwrap();
    let config_path = out.join("stalled.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let output = Command::new(binary())
        .args(["run"])
        .arg(&config_path)
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let message = String::from_utf8_lossy(&output.stderr);
    assert!(message.contains("stalled"), "diagnostic: {message}");
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn broken_config_exits_with_the_config_code() {
    let out = scratch_dir("broken");
    std::fs::create_dir_all(&out).unwrap();
    let config_path = out.join("broken.json");
    std::fs::write(&config_path, "{ \"plant\": {} }").unwrap();
    let status = Command::new(binary())
        .args(["run"])
        .arg(&config_path)
        .arg("--quiet")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn runs_are_bit_identical_for_a_fixed_seed() {
    let out_a = scratch_dir("det-a");
    let out_b = scratch_dir("det-b");
    for out in [&out_a, &out_b] {
        let status = Command::new(binary())
            .args(["run"])
            .arg(workspace_config("scalar.json"))
            .arg("--output")
            .arg(out)
            .arg("--seed")
            .arg("123")
            .arg("--quiet")
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["history.csv", "gains.csv", "figure_data.csv", "verify.csv"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    let _ = std::fs::remove_dir_all(&out_a);
    let _ = std::fs::remove_dir_all(&out_b);
}

#[test]
fn verify_subcommand_reports_the_oracle() {
    let out = scratch_dir("verify");
    // first produce gains.csv, then verify against it
    let status = Command::new(binary())
        .args(["run"])
        .arg(workspace_config("scalar.json"))
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .status()
        .unwrap();
    assert!(status.success());

    let output = Command::new(binary())
        .args(["verify"])
        .arg(workspace_config("scalar.json"))
        .arg("--output")
        .arg(&out)
        .arg("--quiet")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("matrix,K_oracle,1,1"));
    assert!(text.contains("open_loop_abscissa,1.0"));
    // learned gain is read back and its closed loop is stable
    let abscissa_line = text
        .lines()
        .find(|l| l.starts_with("closed_loop_abscissa_K_star"))
        .expect("closed-loop line for the learned gain");
    let value: f64 = abscissa_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!(value < 0.0);
    let _ = std::fs::remove_dir_all(&out);
}
