//! Exit-code contracts and per-command behavior of the binary.

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

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sim_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        serde_json::json!({
            "seed": 5,
            "providers": {
                "sim": {"suite": "random", "seed": 5},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            },
            "train": {
                "architecture": "tabular",
                "learning_rate": 0.2,
                "batch_size": 16,
                "epochs": 7,
                "optimizer": "plain-sgd"
            },
            "data": {"responses_per_pair": 6}
        })
        .to_string(),
    )
    .unwrap();
    path
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

#[test]
fn missing_prompts_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &[
            "build-dataset",
            "--config",
            config.to_str().unwrap(),
            "--prompts",
            "definitely/not/here.txt",
            "--out",
            "ds",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("definitely/not/here.txt"), "{}", stderr(&out));
}

#[test]
fn value_guidance_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &[
            "search",
            "--config",
            config.to_str().unwrap(),
            "--prompt",
            "p",
            "--guidance",
            "value",
            "--out",
            "sv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checkpoint"), "{}", stderr(&out));
}

#[test]
fn unreachable_http_policy_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // reserve a port then close it
    let dead = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let config = dir.path().join("http.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 1,
            "providers": {
                "sim": {"suite": "random", "seed": 1},
                "policy": {"kind": "http", "endpoint_url": dead, "model_id": "m",
                            "timeout_ms": 300, "max_retries": 0, "retry_backoff_ms": 1},
                "embedding": {"kind": "sim"}
            }
        })
        .to_string(),
    )
    .unwrap();
    let images = dir.path().join("images.txt");
    fs::write(&images, "url:http://example.com/a.png\n").unwrap();
    let out = run(
        &[
            "build-dataset",
            "--config",
            config.to_str().unwrap(),
            "--images",
            images.to_str().unwrap(),
            "--out",
            "ds",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn divergent_training_exits_4_with_batch_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &["build-dataset", "--config", config.to_str().unwrap(), "--out", "ds"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let out = run(
        &[
            "train-value",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "ds/triplets.jsonl",
            "--out",
            "tv",
            "--architecture",
            "linear",
            "--learning-rate",
            "1e14",
            "--epochs",
            "60",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("batch"), "{}", stderr(&out));
}

#[test]
fn loss_curve_has_exactly_epochs_entries_and_gamma_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &["build-dataset", "--config", config.to_str().unwrap(), "--out", "ds"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let out = run(
        &[
            "train-value",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "ds/triplets.jsonl",
            "--out",
            "tv",
            "--gamma",
            "0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let curve: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("tv/loss_curve.json")).unwrap())
            .unwrap();
    assert_eq!(curve.as_array().unwrap().len(), 7); // epochs from config

    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("tv/checkpoint.json")).unwrap())
            .unwrap();
    assert_eq!(ckpt["gamma"], serde_json::json!(0.0));
    assert_eq!(ckpt["metadata"]["gamma_override"], serde_json::json!("0"));
}

#[test]
fn evaluate_reproduces_the_fixture_scores() {
    let dir = tempfile::tempdir().unwrap();
    let assets = assets();
    let out = run(
        &[
            "evaluate",
            "--captions",
            assets.join("fixtures/chair_captions.jsonl").to_str().unwrap(),
            "--annotations",
            assets.join("fixtures/chair_annotations.json").to_str().unwrap(),
            "--lexicon",
            assets.join("lexicon_toy.json").to_str().unwrap(),
            "--out",
            "ev",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    // the emitted file validates against the shipped report schema
    let text = fs::read_to_string(dir.path().join("ev/report.json")).unwrap();
    let report: farsight::eval::Report = serde_json::from_str(&text).unwrap();
    assert_eq!(report.format, farsight::eval::REPORT_FORMAT);
    assert_eq!(report.version, farsight::eval::REPORT_VERSION);
    let chair = report.sections.chair.unwrap();
    assert!((chair.chair_i - 2.0 / 7.0).abs() < 1e-9);
    assert!((chair.chair_s - 0.5).abs() < 1e-9);
}

#[test]
fn evaluate_rejects_empty_captions_and_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let assets = assets();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = run(
        &[
            "evaluate",
            "--captions",
            empty.to_str().unwrap(),
            "--annotations",
            assets.join("fixtures/chair_annotations.json").to_str().unwrap(),
            "--lexicon",
            assets.join("lexicon_toy.json").to_str().unwrap(),
            "--out",
            "ev",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no captions"), "{}", stderr(&out));

    let unknown = dir.path().join("unknown.jsonl");
    fs::write(
        &unknown,
        "{\"schema\":\"captions\",\"version\":1}\n{\"image_id\":\"ghost\",\"caption\":\"A dog.\"}\n",
    )
    .unwrap();
    let out = run(
        &[
            "evaluate",
            "--captions",
            unknown.to_str().unwrap(),
            "--annotations",
            assets.join("fixtures/chair_annotations.json").to_str().unwrap(),
            "--lexicon",
            assets.join("lexicon_toy.json").to_str().unwrap(),
            "--out",
            "ev",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ghost"), "{}", stderr(&out));
}

#[test]
fn sweep_emits_four_rows_and_logs_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("trap.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 3,
            "providers": {
                "sim": {"suite": "trap", "seed": 3},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            },
            "search": {
                "temperatures": [0.5],
                "samples_per_temperature": 1,
                "include_greedy_candidate": false,
                "max_steps": 40,
                "guidance": "value",
                "seed": 3
            }
        })
        .to_string(),
    )
    .unwrap();
    let out = run(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--sizes",
            "2,4,8,16",
            "--temperature",
            "0.5",
            "--out",
            "sw",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("return non-decreasing in step size: PASS"), "{}", stdout(&out));

    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sw/sweep.json")).unwrap())
            .unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let sizes: Vec<u64> = rows.iter().map(|r| r["step_size"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![2, 4, 8, 16]);

    let bad = run(
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--sizes",
            "2,oops",
            "--temperature",
            "0.5",
            "--out",
            "sw2",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bon_trace_lists_all_thirty_responses() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &[
            "search",
            "--config",
            config.to_str().unwrap(),
            "--prompt",
            "p",
            "--guidance",
            "bon",
            "--n",
            "30",
            "--out",
            "sb",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sb/bon_trace.json")).unwrap())
            .unwrap();
    assert_eq!(trace["candidates"].as_array().unwrap().len(), 30);
    assert_eq!(trace["selector"], "mean-prm");
}

#[test]
fn export_sft_counts_traces_and_skips_degenerates() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let traces = dir.path().join("traces");
    fs::create_dir_all(&traces).unwrap();

    for (i, guidance) in ["prm", "greedy", "prm"].iter().enumerate() {
        let out_dir = format!("s{i}");
        let out = run(
            &[
                "search",
                "--config",
                config.to_str().unwrap(),
                "--prompt",
                "p",
                "--guidance",
                guidance,
                "--seed",
                &i.to_string(),
                "--out",
                &out_dir,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
        fs::copy(
            dir.path().join(&out_dir).join("trace.json"),
            traces.join(format!("trace-{i}.json")),
        )
        .unwrap();
    }
    // a degenerate (empty-response) trace alongside the real ones
    let mut degenerate: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(traces.join("trace-0.json")).unwrap(),
    )
    .unwrap();
    degenerate["final_response"] = serde_json::json!("");
    degenerate["steps"] = serde_json::json!([]);
    fs::write(traces.join("trace-9-degenerate.json"), degenerate.to_string()).unwrap();

    let out = run(
        &[
            "export-sft",
            "--traces-dir",
            traces.to_str().unwrap(),
            "--out",
            "sft/tuples.jsonl",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("exported 3 tuples") && stdout(&out).contains("1 degenerate"),
        "{}",
        stdout(&out)
    );

    let text = fs::read_to_string(dir.path().join("sft/tuples.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4); // header + 3 tuples
}

#[test]
fn judge_without_endpoint_is_capability_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let sft = dir.path().join("side.jsonl");
    fs::write(
        &sft,
        "{\"schema\":\"sft-tuples\",\"version\":1}\n{\"image\":{\"kind\":\"opaque-sim-id\",\"value\":\"x\"},\"prompt\":\"p\",\"response\":\"A dog.\",\"source_method\":\"greedy\"}\n",
    )
    .unwrap();
    let out = run(
        &[
            "judge",
            "--config",
            config.to_str().unwrap(),
            "--side-a",
            sft.to_str().unwrap(),
            "--side-b",
            sft.to_str().unwrap(),
            "--out",
            "jd",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not configured"), "{}", stderr(&out));
}

#[test]
fn simulate_prints_separation_verdict_and_writes_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--suite", "trap", "--seed", "7", "--out", "sim"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("myopic ≠ value-optimal: PASS"),
        "{}",
        stdout(&out)
    );

    // the emitted fixture is a loadable, valid mdp
    let mdp_path = dir.path().join("sim/mdp.json");
    let text = fs::read_to_string(&mdp_path).unwrap();
    let mdp: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(mdp["states"].as_array().unwrap().len() >= 3);

    let out = run(&["simulate", "--suite", "random", "--seed", "3"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("bellman residual"), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn build_summary_count_matches_a_recount_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &["build-dataset", "--config", config.to_str().unwrap(), "--out", "ds"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let reported: usize = stdout(&out)
        .split_whitespace()
        .nth(1)
        .and_then(|w| w.parse().ok())
        .expect("summary starts with `wrote N records`");
    let lines = fs::read_to_string(dir.path().join("ds/triplets.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(reported, lines - 1); // minus the schema header
}

#[test]
fn training_on_the_chain_reaches_small_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("chain.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 2,
            "providers": {
                "sim": {"suite": "chain", "seed": 2},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            },
            "train": {
                "architecture": "tabular",
                "gamma": 0.9,
                "learning_rate": 0.25,
                "batch_size": 8,
                "epochs": 80,
                "optimizer": "plain-sgd"
            },
            "data": {"responses_per_pair": 12, "temperatures": [0.7]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run(
        &["build-dataset", "--config", config.to_str().unwrap(), "--out", "ds"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(
        &[
            "train-value",
            "--config",
            config.to_str().unwrap(),
            "--data",
            "ds/triplets.jsonl",
            "--out",
            "tv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let curve: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("tv/loss_curve.json")).unwrap())
            .unwrap();
    let final_loss = curve.last().unwrap()["mean_loss"].as_f64().unwrap();
    assert!(final_loss < 1e-3, "final loss {final_loss}");
}

#[test]
fn greedy_search_prints_the_argmax_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    let out = run(
        &[
            "search",
            "--config",
            config.to_str().unwrap(),
            "--prompt",
            "p",
            "--guidance",
            "greedy",
            "--out",
            "sg",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    // independently enumerate the argmax path of the same seeded mdp
    let mdp = farsight::simlab::make_random_mdp(5, 16);
    let mut expected = Vec::new();
    let mut state = farsight::simlab::ROOT;
    while !mdp.is_terminal_state(state) {
        let e = mdp.greedy_edge(state);
        state = mdp.states[state].edges[e].outcomes[0].state;
        expected.push(mdp.token_of(state).to_string());
    }
    assert_eq!(stdout(&out).trim(), expected.join(" "));
}

#[test]
fn exact_value_checkpoint_avoids_the_trap_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = farsight::simlab::make_trap_mdp(21);
    let mdp_path = dir.path().join("mdp.json");
    fs::write(&mdp_path, serde_json::to_string(&mdp).unwrap()).unwrap();

    let config = dir.path().join("config.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 21,
            "providers": {
                "sim": {"mdp_path": mdp_path, "seed": 21},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            },
            "search": {
                "temperatures": [0.1, 0.3, 0.5, 0.7, 0.9],
                "samples_per_temperature": 6,
                "include_greedy_candidate": true,
                "max_steps": 40,
                "guidance": "value",
                "seed": 21
            }
        })
        .to_string(),
    )
    .unwrap();

    // write a checkpoint holding the exact optimal values
    let (_, embedder) = farsight::simlab::sim_as_providers(&mdp, 21);
    let featurizer = farsight::value::Featurizer::new(embedder);
    let head = farsight::simlab::dp_exact_value_head(&mdp, &featurizer).unwrap();
    let ckpt = dir.path().join("exact.json");
    farsight::value::save_checkpoint(&head, mdp.gamma, Default::default(), &ckpt).unwrap();

    let out = run(
        &[
            "search",
            "--config",
            config.to_str().unwrap(),
            "--prompt",
            "p",
            "--guidance",
            "value",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            "sv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    // the committed first step must be the far-sighted root action
    let (myopic, far) = mdp.root_separation();
    assert_ne!(myopic, far);
    let far_state = mdp.states[farsight::simlab::ROOT].edges[far].outcomes[0].state;
    let response = stdout(&out);
    let sentences = farsight::segmenter::split_sentences(
        response.trim(),
        &farsight::segmenter::SegmentationRules::default(),
    );
    assert_eq!(sentences[0], mdp.token_of(far_state));
}

#[test]
fn rerun_with_same_seed_reproduces_dataset_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = sim_config(dir.path());
    for tag in ["x", "y"] {
        let out = run(
            &[
                "build-dataset",
                "--config",
                config.to_str().unwrap(),
                "--seed",
                "99",
                "--out",
                &format!("ds-{tag}"),
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |tag: &str| fs::read(dir.path().join(format!("ds-{tag}/triplets.jsonl"))).unwrap();
    assert_eq!(read("x"), read("y"));
}

#[test]
fn searched_mdp_fixture_round_trips_through_config() {
    let dir = tempfile::tempdir().unwrap();
    // export a trap fixture, then point a config at it by path
    let out = run(&["simulate", "--suite", "trap", "--seed", "12", "--out", "sim"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let config = dir.path().join("byref.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 12,
            "providers": {
                "sim": {"mdp_path": dir.path().join("sim/mdp.json")},
                "policy": {"kind": "sim"},
                "embedding": {"kind": "sim"}
            }
        })
        .to_string(),
    )
    .unwrap();
    let out = run(
        &[
            "search",
            "--config",
            config.to_str().unwrap(),
            "--prompt",
            "p",
            "--guidance",
            "prm",
            "--out",
            "sp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!stdout(&out).trim().is_empty());
}
