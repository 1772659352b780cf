//! CLI acceptance: seeded commands under the simulator produce
//! byte-identical output files across independent runs (the determinism
//! criterion); one PASS line per check with -- --nocapture.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_farsight")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display())));
    format!("{:x}", hasher.finalize())
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        serde_json::json!({
            "seed": 17,
            "providers": {
                "sim": {"suite": "trap", "seed": 17},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            },
            "search": {
                "temperatures": [0.1, 0.3, 0.5, 0.7, 0.9],
                "samples_per_temperature": 6,
                "include_greedy_candidate": true,
                "max_steps": 40,
                "guidance": "value",
                "seed": 17
            },
            "train": {
                "architecture": "tabular",
                "gamma": 0.9,
                "learning_rate": 0.2,
                "batch_size": 16,
                "epochs": 50,
                "shuffle_seed": 3,
                "optimizer": "plain-sgd"
            },
            "data": {
                "responses_per_pair": 16,
                "temperatures": [0.5, 0.7, 0.9, 1.1]
            }
        })
        .to_string(),
    )
    .unwrap();
    path
}

/// Runs the dataset -> train -> search chain into `tag`-suffixed dirs and
/// returns the primary artifact hashes.
fn pipeline_hashes(dir: &Path, config: &str, tag: &str) -> Vec<(String, String)> {
    let ds = format!("ds-{tag}");
    let tv = format!("tv-{tag}");
    let sv = format!("sv-{tag}");

    let out = run(&["build-dataset", "--config", config, "--out", &ds], dir);
    assert_ok(&out, "build-dataset");
    let triplets = dir.join(&ds).join("triplets.jsonl");

    let out = run(
        &[
            "train-value",
            "--config",
            config,
            "--data",
            triplets.to_str().unwrap(),
            "--out",
            &tv,
        ],
        dir,
    );
    assert_ok(&out, "train-value");
    let checkpoint = dir.join(&tv).join("checkpoint.json");
    let curve = dir.join(&tv).join("loss_curve.json");

    let out = run(
        &[
            "search",
            "--config",
            config,
            "--prompt",
            "Describe the image.",
            "--guidance",
            "value",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--out",
            &sv,
        ],
        dir,
    );
    assert_ok(&out, "search");
    let trace = dir.join(&sv).join("trace.json");

    [
        ("triplets.jsonl", triplets),
        ("checkpoint.json", checkpoint),
        ("loss_curve.json", curve),
        ("trace.json", trace),
        ("build manifest", dir.join(&ds).join("manifest.json")),
        ("train manifest", dir.join(&tv).join("manifest.json")),
        ("search manifest", dir.join(&sv).join("manifest.json")),
    ]
    .into_iter()
    .map(|(name, path)| (name.to_string(), sha256(&path)))
    .collect()
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();

    let first = pipeline_hashes(dir.path(), config, "a");
    let second = pipeline_hashes(dir.path(), config, "b");

    for ((name, ha), (_, hb)) in first.iter().zip(&second) {
        assert_eq!(ha, hb, "{name} differs between identical runs");
    }
    println!(
        "ACCEPTANCE determinism: PASS ({} artifacts byte-identical across two runs of build-dataset, train-value, search)",
        first.len()
    );
}
