//! End-to-end checks of the binary: exit codes, file outputs, the g = 1
//! research-mode equivalence, and a two-process socket session whose pooled
//! CSV must match the centralized command byte for byte (headers aside).

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_poolreg")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const MODEL: &str = "baseline on\nterm x\nterm log(z1)\nterm z2\nterm x * z2\n";

fn gen_cohort(dir: &Path, subjects: usize, seed: u64) -> PathBuf {
    let out = dir.join("cohort.csv");
    let status = Command::new(bin())
        .args(["gen-data", "--subjects", &subjects.to_string(), "--seed", &seed.to_string()])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    out
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn pool_fit_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = gen_cohort(dir.path(), 600, 3);
    let model = dir.path().join("model.cfg");
    write(&model, MODEL);
    let out_dir = dir.path().join("out");
    let output = Command::new(bin())
        .args(["pool-fit", "--seed", "11", "--size", "5"])
        .arg("--data")
        .arg(&cohort)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    for file in ["plan.csv", "pooled.csv", "fit.txt", "fit.json"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("converged       true"));
    // Header carries version, seed and config digest.
    let pooled = std::fs::read_to_string(out_dir.join("pooled.csv")).unwrap();
    assert!(pooled.starts_with("# poolreg "));
    assert!(pooled.contains("seed=11"));
    assert!(pooled.contains("config="));
}

#[test]
fn g1_research_mode_matches_standard_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = gen_cohort(dir.path(), 500, 9);
    let model = dir.path().join("model.cfg");
    write(&model, MODEL);

    let pooled_out = dir.path().join("pooled");
    let status = Command::new(bin())
        .args(["pool-fit", "--seed", "1", "--size", "1", "--research"])
        .arg("--data")
        .arg(&cohort)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(&pooled_out)
        .status()
        .unwrap();
    assert!(status.success());

    let fit_out = dir.path().join("standard");
    let status = Command::new(bin())
        .arg("fit")
        .arg("--data")
        .arg(&cohort)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(&fit_out)
        .status()
        .unwrap();
    assert!(status.success());

    let read_fit = |path: PathBuf| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    };
    let pooled = read_fit(pooled_out.join("fit.json"));
    let standard = read_fit(fit_out.join("fit.json"));
    let coef = |v: &serde_json::Value, i: usize| v["fit"]["coefficients"][i].as_f64().unwrap();
    // Slopes agree to 1e-8; intercepts differ by exactly ln(n/m).
    for i in 1..=4 {
        assert!(
            (coef(&pooled, i) - coef(&standard, i)).abs() < 1e-8,
            "slope {i}"
        );
    }
    let n_over_m = {
        let text = std::fs::read_to_string(&cohort).unwrap();
        let mut n = 0f64;
        let mut m = 0f64;
        for line in text.lines().skip(2) {
            match line.split(',').nth(1) {
                Some("1") => n += 1.0,
                Some("0") => m += 1.0,
                _ => {}
            }
        }
        (n / m).ln()
    };
    assert!((coef(&pooled, 0) + n_over_m - coef(&standard, 0)).abs() < 1e-8);
}

#[test]
fn malformed_row_is_a_named_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    write(&data, "subject_id,outcome,x\ns1,1,0.5\ns2,zero,1.0\ns3,0,2.0\n");
    let model = dir.path().join("model.cfg");
    write(&model, "term x\n");
    let output = Command::new(bin())
        .args(["pool-fit", "--seed", "1", "--size", "1", "--research"])
        .arg("--data")
        .arg(&data)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains(":3:"), "stderr: {stderr}");

    // Empty file: also a validation error.
    let empty = dir.path().join("empty.csv");
    write(&empty, "");
    let output = Command::new(bin())
        .arg("fit")
        .arg("--data")
        .arg(&empty)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(dir.path().join("out2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn strict_guard_rejects_power_stack_with_small_pools() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = gen_cohort(dir.path(), 400, 4);
    let model = dir.path().join("model.cfg");
    write(&model, "term x\nterm x^2\nterm x^3\n");
    let output = Command::new(bin())
        .args(["pool-fit", "--seed", "2", "--size", "3", "--strict"])
        .arg("--data")
        .arg(&cohort)
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("privacy"), "stderr: {stderr}");
    // Rejected before aggregation: no pooled dataset was written.
    assert!(!dir.path().join("out").join("pooled.csv").exists());
}

#[test]
fn two_process_session_matches_centralized_pool_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = gen_cohort(dir.path(), 480, 21);
    let model = dir.path().join("model.cfg");
    write(&model, MODEL);

    // Split the cohort across two nodes; the centralized reference runs on
    // the same rows ordered node-first, which is the layout the
    // coordinator's plan addresses.
    let text = std::fs::read_to_string(&cohort).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    let (header, body) = rows.split_first().unwrap();
    let alpha: Vec<&str> = body.iter().copied().step_by(2).collect();
    let beta: Vec<&str> = body.iter().copied().skip(1).step_by(2).collect();
    write(
        &dir.path().join("alpha.csv"),
        &format!("{header}\n{}\n", alpha.join("\n")),
    );
    write(
        &dir.path().join("beta.csv"),
        &format!("{header}\n{}\n", beta.join("\n")),
    );
    write(
        &dir.path().join("combined.csv"),
        &format!("{header}\n{}\n{}\n", alpha.join("\n"), beta.join("\n")),
    );

    let seed = 77;
    let centralized_out = dir.path().join("centralized");
    let status = Command::new(bin())
        .args(["pool-fit", "--seed", &seed.to_string(), "--size", "4"])
        .arg("--data")
        .arg(dir.path().join("combined.csv"))
        .arg("--model")
        .arg(&model)
        .arg("--out-dir")
        .arg(&centralized_out)
        .status()
        .unwrap();
    assert!(status.success());

    // Ephemeral ports chosen by the OS to keep the test parallel-safe.
    let free_port = || {
        std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port()
    };
    let (coord_port, alpha_port, beta_port) = (free_port(), free_port(), free_port());
    write(
        &dir.path().join("coord.toml"),
        &format!(
            "session_id = \"cli-e2e\"\nlisten_addr = \"127.0.0.1:{coord_port}\"\n\
             roster = [\"alpha\", \"beta\"]\nmodel = \"model.cfg\"\n\
             pool_size = \"4\"\nseed = {seed}\ntimeout_secs = 20\nout_dir = \"coord-out\"\n"
        ),
    );
    for (name, port, mask_seed) in [("alpha", alpha_port, 11u64), ("beta", beta_port, 22)] {
        write(
            &dir.path().join(format!("{name}.toml")),
            &format!(
                "session_id = \"cli-e2e\"\nnode_id = \"{name}\"\n\
                 listen_addr = \"127.0.0.1:{port}\"\n\
                 coordinator_addr = \"127.0.0.1:{coord_port}\"\n\
                 data = \"{name}.csv\"\nmask_seed = {mask_seed}\n\
                 timeout_secs = 20\nout_dir = \"{name}-out\"\n"
            ),
        );
    }

    let mut coordinator = Command::new(bin())
        .arg("coordinator")
        .arg("--config")
        .arg(dir.path().join("coord.toml"))
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(200));
    let mut nodes = Vec::new();
    for name in ["alpha", "beta"] {
        nodes.push(
            Command::new(bin())
                .arg("node")
                .arg("--config")
                .arg(dir.path().join(format!("{name}.toml")))
                .spawn()
                .unwrap(),
        );
    }
    assert!(coordinator.wait().unwrap().success());
    for mut node in nodes {
        assert!(node.wait().unwrap().success());
    }

    // Pooled datasets agree to the byte outside the provenance headers.
    let distributed = data_lines(&dir.path().join("coord-out").join("pooled.csv"));
    let centralized = data_lines(&centralized_out.join("pooled.csv"));
    assert_eq!(distributed, centralized);

    // And the fits agree exactly.
    let coord_fit: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("coord-out").join("fit.json")).unwrap(),
    )
    .unwrap();
    let central_fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(centralized_out.join("fit.json")).unwrap())
            .unwrap();
    assert_eq!(coord_fit["fit"], central_fit["fit"]);

    // Transcript exists for auditing.
    assert!(dir.path().join("coord-out").join("transcript.jsonl").exists());
}

#[test]
fn simulate_smoke_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = Command::new(bin())
            .args([
                "simulate", "--reps", "3", "--subjects", "1500", "--sizes", "2,3", "--seed", "6",
            ])
            .arg("--out-dir")
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(out_dir.join("results.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert!(a.contains("model_se"));
}
