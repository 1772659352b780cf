//! Command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use farsight::backends::ImageRef;
use farsight::data::{
    build_pairs, build_triplets, export_sft as export_sft_records, read_jsonl, write_jsonl,
    DataError, TripletRecord, CAPTIONS_SCHEMA, TRIPLET_SCHEMA,
};
use farsight::eval::{
    chair_scores, render_report, AnnotationSet, CaptionRecord, EvalError, ObjectLexicon,
    ReportSections,
};
use farsight::reward::RewardModel;
use farsight::search::{
    best_of_n, guided_search, sweep_step_size, Guidance, MeanPrmMetric, MeanPrmSelector,
    PrmScorer, ResponseMetric, SearchConfig, SearchError, SearchTrace, StepScorer, ValueScorer,
};
use farsight::segmenter::SegmentationRules;
use farsight::simlab::{
    bellman_residual, dp_exact_value_head, dp_values, evaluate_response, make_random_mdp,
    make_trap_mdp, round_robin_episodes, sim_as_providers, DpPolicy, SimMdp,
};
use farsight::value::{
    load_checkpoint, save_checkpoint, train, Featurizer, ValueError, ValueHead,
};

use crate::config::{parse_image_spec, RunConfig, SimSuite};
use crate::manifest::write_manifest;
use crate::CliError;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::other(format!("cannot create {}: {e}", out.display())))
}

fn read_nonempty_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn map_data_error(e: DataError) -> CliError {
    match e {
        DataError::Provider(_) | DataError::AllPairsFailed { .. } => CliError::provider(e),
        DataError::Reward(_) => CliError::provider(e),
        _ => CliError::config(e.to_string()),
    }
}

fn map_eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Provider(_) => CliError::provider(e),
        _ => CliError::config(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// build-dataset
// ---------------------------------------------------------------------------

pub fn build_dataset(
    config_path: Option<PathBuf>,
    images_path: Option<PathBuf>,
    prompts_path: Option<PathBuf>,
    out: PathBuf,
    seed_flag: Option<u64>,
    responses_override: Option<usize>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path.as_deref())?;
    let seed = config.seed(seed_flag);
    let rules = config.segmentation_rules()?;
    let (policy, embedder, mdp) = config.build_providers(seed)?;

    let images: Vec<ImageRef> = match &images_path {
        Some(p) => read_nonempty_lines(p)?.iter().map(|l| parse_image_spec(l)).collect(),
        None => match &mdp {
            Some(m) => vec![m.image()],
            None => {
                return Err(CliError::config(
                    "--images is required when the policy provider is not the simulator",
                ))
            }
        },
    };
    let prompts: Vec<String> = match &prompts_path {
        Some(p) => read_nonempty_lines(p)?,
        None => vec!["Describe the image in detail.".to_string()],
    };
    if prompts.is_empty() {
        return Err(CliError::config(format!(
            "prompts file {} has no entries",
            prompts_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        )));
    }

    let mut build_cfg = config.data.clone().unwrap_or_default().build_config(seed);
    if let Some(r) = responses_override {
        build_cfg.responses_per_pair = r;
    }

    let reward = RewardModel::new(embedder);
    let pairs = build_pairs(&images, &prompts, seed).map_err(map_data_error)?;
    let build =
        build_triplets(&pairs, &build_cfg, policy.as_ref(), &reward, &rules).map_err(map_data_error)?;

    ensure_out_dir(&out)?;
    let triplets_path = out.join("triplets.jsonl");
    write_jsonl(&build.records, &triplets_path, TRIPLET_SCHEMA).map_err(map_data_error)?;

    let rewards: Vec<f64> = build.records.iter().map(|r| r.reward.value()).collect();
    let mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
    let min = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "wrote {} records for {} pairs ({} skipped) to {}",
        build.records.len(),
        pairs.len(),
        build.skipped.len(),
        triplets_path.display()
    );
    println!("reward stats: mean {mean:.6}  min {min:.6}  max {max:.6}");
    for skip in &build.skipped {
        eprintln!("skipped pair {}: {}", skip.pair_id, skip.error);
    }

    write_manifest("build-dataset", &config.config_hash(), seed, &out, &[triplets_path])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-value
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn train_value(
    config_path: Option<PathBuf>,
    data_path: PathBuf,
    out: PathBuf,
    seed_flag: Option<u64>,
    gamma_flag: Option<f64>,
    epochs_flag: Option<usize>,
    lr_flag: Option<f64>,
    batch_flag: Option<usize>,
    arch_flag: Option<String>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path.as_deref())?;
    let seed = config.seed(seed_flag);
    let (_, embedder, _) = config.build_providers(seed)?;

    let records: Vec<TripletRecord> =
        read_jsonl(&data_path, TRIPLET_SCHEMA).map_err(map_data_error)?;
    if records.is_empty() {
        return Err(CliError::config(format!(
            "dataset {} contains no records",
            data_path.display()
        )));
    }

    let featurizer = Featurizer::new(embedder);
    let samples = farsight::data::td_samples_from_records(&records, &featurizer)
        .map_err(CliError::provider)?;

    let mut section = config.train.clone().unwrap_or_default();
    if let Some(a) = &arch_flag {
        section.architecture = a.clone();
    }
    if let Some(g) = gamma_flag {
        section.gamma = g;
    }
    if let Some(e) = epochs_flag {
        section.epochs = e;
    }
    if let Some(lr) = lr_flag {
        section.learning_rate = lr;
    }
    if let Some(b) = batch_flag {
        section.batch_size = b;
    }

    let mut head = match section.architecture.as_str() {
        "tabular" => ValueHead::new_tabular(),
        "linear" => ValueHead::new_linear(featurizer.dim(), section.init_seed),
        "one-hidden-layer" => {
            ValueHead::new_one_hidden(featurizer.dim(), section.hidden_dim, section.init_seed)
        }
        other => {
            return Err(CliError::config(format!(
                "unknown architecture {other:?} (expected tabular, linear, or one-hidden-layer)"
            )))
        }
    };

    let train_cfg = section.train_config();
    let stats = match train(&mut head, &samples, &train_cfg) {
        Ok(s) => s,
        Err(e @ ValueError::NonFiniteLoss { .. }) => return Err(CliError::numerical(e)),
        Err(e) => return Err(CliError::config(e.to_string())),
    };

    ensure_out_dir(&out)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("architecture".to_string(), section.architecture.clone());
    metadata.insert("optimizer".to_string(), format!("{:?}", section.optimizer));
    metadata.insert("epochs".to_string(), section.epochs.to_string());
    metadata.insert("samples".to_string(), samples.len().to_string());
    if let Some(g) = gamma_flag {
        metadata.insert("gamma_override".to_string(), g.to_string());
    }
    let ckpt_path = out.join("checkpoint.json");
    save_checkpoint(&head, train_cfg.gamma, metadata, &ckpt_path)
        .map_err(|e| CliError::other(e.to_string()))?;

    let curve_path = out.join("loss_curve.json");
    let curve = serde_json::to_string_pretty(&stats).expect("stats serialize");
    fs::write(&curve_path, curve + "\n")
        .map_err(|e| CliError::other(format!("cannot write loss curve: {e}")))?;

    let final_loss = stats.last().map(|s| s.mean_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} head on {} samples for {} epochs; final loss {final_loss:.3e}",
        section.architecture,
        samples.len(),
        stats.len()
    );
    println!("checkpoint: {}", ckpt_path.display());

    write_manifest(
        "train-value",
        &config.config_hash(),
        seed,
        &out,
        &[ckpt_path, curve_path],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

fn resolve_image(
    image_flag: &Option<String>,
    mdp: &Option<SimMdp>,
) -> Result<ImageRef, CliError> {
    match image_flag {
        Some(spec) => Ok(parse_image_spec(spec)),
        None => match mdp {
            Some(m) => Ok(m.image()),
            None => Err(CliError::config(
                "--image is required when the policy provider is not the simulator",
            )),
        },
    }
}

fn load_head(checkpoint: &Option<PathBuf>) -> Result<ValueHead, CliError> {
    let path = checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("value guidance requires --checkpoint"))?;
    let ckpt = load_checkpoint(path).map_err(|e| CliError::config(e.to_string()))?;
    Ok(ckpt.head)
}

#[allow(clippy::too_many_arguments)]
pub fn search(
    config_path: Option<PathBuf>,
    prompt: String,
    image_flag: Option<String>,
    guidance: String,
    checkpoint: Option<PathBuf>,
    n: usize,
    out: PathBuf,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path.as_deref())?;
    let seed = config.seed(seed_flag);
    let rules = config.segmentation_rules()?;
    let (policy, embedder, mdp) = config.build_providers(seed)?;
    let image = resolve_image(&image_flag, &mdp)?;

    let mut search_cfg = config.search_config();
    search_cfg.seed = seed;

    ensure_out_dir(&out)?;
    let mut artifacts = Vec::new();

    let response = match guidance.as_str() {
        "value" | "prm" | "greedy" => {
            let reward = RewardModel::new(embedder.clone());
            let featurizer = Featurizer::new(embedder.clone());
            let head;
            let scorer: Box<dyn StepScorer> = match guidance.as_str() {
                "value" => {
                    head = load_head(&checkpoint)?;
                    search_cfg.guidance = Guidance::Value;
                    Box::new(ValueScorer { head: &head, featurizer: &featurizer })
                }
                "prm" => {
                    search_cfg.guidance = Guidance::Prm;
                    Box::new(PrmScorer { reward: &reward })
                }
                _ => {
                    // plain greedy decoding: a single greedy candidate per
                    // step with no scoring
                    search_cfg.guidance = Guidance::None;
                    search_cfg.temperatures = vec![];
                    search_cfg.samples_per_temperature = 1;
                    search_cfg.include_greedy_candidate = true;
                    Box::new(farsight::search::NoGuidance)
                }
            };
            let (response, trace) =
                guided_search(policy.as_ref(), scorer.as_ref(), &prompt, &image, &search_cfg, &rules)
                    .map_err(crate::classify_search_error)?;
            report_step_timings(&trace);
            let trace_path = out.join("trace.json");
            let json = serde_json::to_string_pretty(&trace).expect("trace serializes");
            fs::write(&trace_path, json + "\n")
                .map_err(|e| CliError::other(format!("cannot write trace: {e}")))?;
            artifacts.push(trace_path);
            response
        }
        "bon" => {
            let reward = RewardModel::new(embedder.clone());
            let selector = MeanPrmSelector { reward: &reward };
            let outcome = best_of_n(
                policy.as_ref(),
                &selector,
                &prompt,
                &image,
                n,
                &search_cfg.temperatures.clone(),
                &search_cfg,
                &rules,
            )
            .map_err(crate::classify_search_error)?;
            let trace_path = out.join("bon_trace.json");
            let json = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
            fs::write(&trace_path, json + "\n")
                .map_err(|e| CliError::other(format!("cannot write trace: {e}")))?;
            artifacts.push(trace_path);
            outcome.response
        }
        other => {
            return Err(CliError::config(format!(
                "unknown guidance {other:?} (expected value, prm, greedy, or bon)"
            )))
        }
    };

    println!("{response}");
    write_manifest("search", &config.config_hash(), seed, &out, &artifacts)?;
    Ok(())
}

fn report_step_timings(trace: &SearchTrace) {
    let total: f64 = trace
        .wall_clock_per_step
        .iter()
        .map(|d| d.as_secs_f64() * 1e3)
        .sum();
    eprintln!(
        "search: {} steps, {} provider calls, {total:.1} ms generation+scoring",
        trace.steps.len(),
        trace.provider_calls
    );
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SimReturnMetric {
    mdp: SimMdp,
}

impl ResponseMetric for SimReturnMetric {
    fn name(&self) -> &'static str {
        "discounted-return"
    }
    fn score(&self, sentences: &[String], _image: &ImageRef) -> Result<f64, SearchError> {
        evaluate_response(&self.mdp, sentences).map_err(|e| SearchError::InvalidConfig(e.to_string()))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    config_path: Option<PathBuf>,
    sizes: String,
    temperature: f64,
    prompt_flag: Option<String>,
    image_flag: Option<String>,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path.as_deref())?;
    let seed = config.seed(seed_flag);
    let rules = config.segmentation_rules()?;
    let (policy, embedder, mdp) = config.build_providers(seed)?;

    let step_sizes: Vec<usize> = sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::config(format!("bad step size {s:?}: sizes must be positive integers")))
        })
        .collect::<Result<_, _>>()?;

    let image = resolve_image(&image_flag, &mdp)?;
    let prompt = prompt_flag.unwrap_or_else(|| "Describe the image in detail.".to_string());
    let pairs = vec![(prompt, image)];

    let mut base_cfg = config.search_config();
    base_cfg.seed = seed;

    let reward = RewardModel::new(embedder.clone());
    let featurizer = Featurizer::new(embedder.clone());
    let head;
    let scorer: Box<dyn StepScorer> = match base_cfg.guidance {
        Guidance::Value => {
            head = match &checkpoint {
                Some(_) => load_head(&checkpoint)?,
                // default to the exact table when simulating, so sweeps work
                // out of the box against the oracle
                None => match &mdp {
                    Some(m) => dp_exact_value_head(m, &featurizer)
                        .map_err(|e| CliError::other(e.to_string()))?,
                    None => return Err(CliError::config("value-guided sweep requires --checkpoint")),
                },
            };
            Box::new(ValueScorer { head: &head, featurizer: &featurizer })
        }
        Guidance::Prm => Box::new(PrmScorer { reward: &reward }),
        Guidance::None => {
            return Err(CliError::config("sweep requires guidance value or prm in the config"))
        }
    };

    let sim_metric = mdp.as_ref().map(|m| SimReturnMetric { mdp: m.clone() });
    let prm_metric = MeanPrmMetric { reward: &reward };
    let metric: &dyn ResponseMetric = match &sim_metric {
        Some(m) => m,
        None => &prm_metric,
    };

    let table = sweep_step_size(
        policy.as_ref(),
        scorer.as_ref(),
        &pairs,
        &step_sizes,
        temperature,
        &base_cfg,
        &rules,
        metric,
    )
    .map_err(crate::classify_search_error)?;

    let succeeded = table.rows.iter().filter(|r| r.mean_metric.is_some()).count();
    if succeeded == 0 {
        let first = table
            .rows
            .iter()
            .flat_map(|r| &r.runs)
            .find_map(|r| r.error.clone())
            .unwrap_or_else(|| "no cells produced a metric".to_string());
        return Err(CliError::provider(format!("every sweep cell failed: {first}")));
    }

    ensure_out_dir(&out)?;
    let sweep_path = out.join("sweep.json");
    fs::write(
        &sweep_path,
        serde_json::to_string_pretty(&table).expect("table serializes") + "\n",
    )
    .map_err(|e| CliError::other(format!("cannot write sweep: {e}")))?;

    let mut provenance = BTreeMap::new();
    provenance.insert("config-hash".to_string(), config.config_hash());
    provenance.insert("seed".to_string(), seed.to_string());
    let (report_json, report_txt) = render_report(
        ReportSections {
            sweep: Some(table.clone()),
            ..Default::default()
        },
        provenance,
        &out,
    )
    .map_err(map_eval_error)?;

    for row in &table.rows {
        let mean = row
            .mean_metric
            .map(|m| format!("{m:.6}"))
            .unwrap_or_else(|| "-".to_string());
        println!("size {:>3}: {} {} ({} failures)", row.step_size, table.metric, mean, row.failures);
    }
    if mdp.is_some() {
        let means: Vec<f64> = table.rows.iter().filter_map(|r| r.mean_metric).collect();
        let monotone = means.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        println!(
            "return non-decreasing in step size: {}",
            if monotone { "PASS" } else { "FAIL" }
        );
    }

    write_manifest(
        "sweep",
        &config.config_hash(),
        seed,
        &out,
        &[sweep_path, report_json, report_txt],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn evaluate(
    captions_path: PathBuf,
    annotations_path: PathBuf,
    lexicon_path: PathBuf,
    out: PathBuf,
) -> Result<(), CliError> {
    let lexicon = ObjectLexicon::from_json_file(&lexicon_path).map_err(map_eval_error)?;
    let annotations =
        AnnotationSet::from_json_file(&annotations_path, &lexicon).map_err(map_eval_error)?;
    let records: Vec<CaptionRecord> =
        read_jsonl(&captions_path, CAPTIONS_SCHEMA).map_err(map_data_error)?;
    if records.is_empty() {
        return Err(CliError::config(format!(
            "no captions in {}",
            captions_path.display()
        )));
    }
    let captions: Vec<(String, String)> =
        records.into_iter().map(|r| (r.image_id, r.caption)).collect();

    let report = chair_scores(&captions, &annotations, &lexicon).map_err(map_eval_error)?;
    println!(
        "CHAIR_S = {:.6} ({} of {} captions)",
        report.chair_s, report.captions_with_hallucination, report.caption_count
    );
    println!(
        "CHAIR_I = {:.6} ({} of {} mentions)",
        report.chair_i, report.total_hallucinated, report.total_mentions
    );

    ensure_out_dir(&out)?;
    let mut provenance = BTreeMap::new();
    provenance.insert(
        "captions-sha256".to_string(),
        crate::manifest::sha256_file(&captions_path)?,
    );
    provenance.insert(
        "lexicon-sha256".to_string(),
        crate::manifest::sha256_file(&lexicon_path)?,
    );
    let (report_json, report_txt) = render_report(
        ReportSections {
            chair: Some(report),
            ..Default::default()
        },
        provenance,
        &out,
    )
    .map_err(map_eval_error)?;

    write_manifest("evaluate", "-", 0, &out, &[report_json, report_txt])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export-sft
// ---------------------------------------------------------------------------

pub fn export_sft(traces_dir: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&traces_dir)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", traces_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();

    let mut traces: Vec<SearchTrace> = Vec::new();
    for path in &paths {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        match serde_json::from_str::<SearchTrace>(&text) {
            Ok(trace) => traces.push(trace),
            Err(_) => eprintln!("skipping {}: not a search trace", path.display()),
        }
    }
    if traces.is_empty() {
        return Err(CliError::config(format!(
            "no search traces found in {}",
            traces_dir.display()
        )));
    }

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    let stats = export_sft_records(&traces, &out).map_err(map_data_error)?;
    println!(
        "exported {} tuples to {} ({} degenerate traces skipped)",
        stats.written,
        out.display(),
        stats.skipped_degenerate
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// judge
// ---------------------------------------------------------------------------

pub fn judge(
    config_path: Option<PathBuf>,
    side_a: PathBuf,
    side_b: PathBuf,
    out: PathBuf,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    use farsight::data::{SftRecord, SFT_SCHEMA};
    use farsight::eval::{pairwise_judge, win_rate, NamedWinRate, JUDGE_RUBRIC};

    let config = RunConfig::load(config_path.as_deref())?;
    let seed = config.seed(seed_flag);
    let judge = config
        .build_judge()?
        .ok_or_else(|| CliError::config(EvalError::JudgeNotConfigured.to_string()))?;

    let a: Vec<SftRecord> = read_jsonl(&side_a, SFT_SCHEMA).map_err(map_data_error)?;
    let b: Vec<SftRecord> = read_jsonl(&side_b, SFT_SCHEMA).map_err(map_data_error)?;
    if a.is_empty() || a.len() != b.len() {
        return Err(CliError::config(format!(
            "sides must be non-empty and aligned: {} has {}, {} has {}",
            side_a.display(),
            a.len(),
            side_b.display(),
            b.len()
        )));
    }

    let mut records = Vec::with_capacity(a.len());
    for (i, (ra, rb)) in a.iter().zip(&b).enumerate() {
        let rec = pairwise_judge(
            &ra.response,
            &rb.response,
            &ra.image,
            judge.as_ref(),
            JUDGE_RUBRIC,
            seed.wrapping_add(i as u64),
        )
        .map_err(map_eval_error)?;
        if rec.outcome.is_none() {
            eprintln!("pair {i}: invalid verdict {:?}, excluded", rec.raw_reply);
        }
        records.push(rec);
    }

    let rate = win_rate(&records).map_err(map_eval_error)?;
    println!(
        "A wins {:.1}%  tie {:.1}%  A loses {:.1}%  ({} valid, {} invalid)",
        rate.wins_pct, rate.ties_pct, rate.losses_pct, rate.valid, rate.invalid
    );

    ensure_out_dir(&out)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("config-hash".to_string(), config.config_hash());
    provenance.insert("side-a".to_string(), side_a.display().to_string());
    provenance.insert("side-b".to_string(), side_b.display().to_string());
    let (report_json, report_txt) = render_report(
        ReportSections {
            win_rates: Some(vec![NamedWinRate {
                comparison: "side-a vs side-b".to_string(),
                rate,
            }]),
            ..Default::default()
        },
        provenance,
        &out,
    )
    .map_err(map_eval_error)?;
    write_manifest("judge", &config.config_hash(), seed, &out, &[report_json, report_txt])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct PropertyCheck {
    name: String,
    pass: bool,
    detail: String,
}

fn report_property(results: &mut Vec<PropertyCheck>, name: &str, pass: bool, detail: String) {
    println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    results.push(PropertyCheck {
        name: name.to_string(),
        pass,
        detail,
    });
}

pub fn simulate(suite: SimSuite, seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut results = Vec::new();
    let mut fixture: Option<SimMdp> = None;

    match suite {
        SimSuite::Trap => simulate_trap(seed, &mut results, &mut fixture)?,
        SimSuite::Chain => simulate_chain(&mut results, &mut fixture),
        SimSuite::Random => simulate_random(seed, &mut results, &mut fixture),
    }

    if let Some(dir) = out {
        ensure_out_dir(&dir)?;
        let mut artifacts = Vec::new();
        if let Some(mdp) = &fixture {
            let mdp_path = dir.join("mdp.json");
            fs::write(&mdp_path, serde_json::to_string_pretty(mdp).expect("mdp serializes") + "\n")
                .map_err(|e| CliError::other(format!("cannot write mdp: {e}")))?;
            artifacts.push(mdp_path);
        }
        let results_path = dir.join("results.json");
        let rows: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({"property": r.name, "pass": r.pass, "detail": r.detail})
            })
            .collect();
        fs::write(
            &results_path,
            serde_json::to_string_pretty(&rows).expect("results serialize") + "\n",
        )
        .map_err(|e| CliError::other(format!("cannot write results: {e}")))?;
        artifacts.push(results_path);
        write_manifest("simulate", "-", seed, &dir, &artifacts)?;
    }

    if results.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::numerical("one or more simulation properties failed"))
    }
}

fn simulate_trap(
    seed: u64,
    results: &mut Vec<PropertyCheck>,
    fixture: &mut Option<SimMdp>,
) -> Result<(), CliError> {
    let mdp = make_trap_mdp(seed);
    let values = dp_values(&mdp, None);
    let (myopic, far) = mdp.root_separation();
    report_property(
        results,
        "myopic ≠ value-optimal",
        myopic != far,
        format!("immediate argmax edge {myopic}, value argmax edge {far}"),
    );

    let root_edges = &mdp.states[farsight::simlab::ROOT].edges;
    let v_at = |edge: usize| -> f64 {
        root_edges[edge]
            .outcomes
            .iter()
            .map(|o| o.prob * values[o.state])
            .sum()
    };
    let margin = v_at(far) - v_at(myopic);
    report_property(
        results,
        "value margin over myopic choice",
        margin >= 0.1,
        format!("margin {margin:.4} (threshold 0.1)"),
    );

    let (policy, embedder) = sim_as_providers(&mdp, seed);
    let reward = RewardModel::new(embedder.clone());
    let featurizer = Featurizer::new(embedder);
    let head = dp_exact_value_head(&mdp, &featurizer).map_err(|e| CliError::other(e.to_string()))?;
    let rules = SegmentationRules::default();

    let prm_cfg = SearchConfig {
        samples_per_temperature: 6,
        guidance: Guidance::Prm,
        seed,
        ..SearchConfig::default()
    };
    let prm = PrmScorer { reward: &reward };
    let (prm_resp, _) = guided_search(policy.as_ref(), &prm, "describe", &mdp.image(), &prm_cfg, &rules)
        .map_err(crate::classify_search_error)?;
    let prm_return = evaluate_response(&mdp, &split_response(&prm_resp, &rules))
        .map_err(|e| CliError::other(e.to_string()))?;

    let val_cfg = SearchConfig { guidance: Guidance::Value, ..prm_cfg };
    let val = ValueScorer { head: &head, featurizer: &featurizer };
    let (val_resp, _) = guided_search(policy.as_ref(), &val, "describe", &mdp.image(), &val_cfg, &rules)
        .map_err(crate::classify_search_error)?;
    let val_return = evaluate_response(&mdp, &split_response(&val_resp, &rules))
        .map_err(|e| CliError::other(e.to_string()))?;

    report_property(
        results,
        "value-guided return beats prm-guided return",
        val_return > prm_return,
        format!("value {val_return:.4} vs prm {prm_return:.4}"),
    );

    *fixture = Some(mdp);
    Ok(())
}

fn split_response(response: &str, rules: &SegmentationRules) -> Vec<String> {
    farsight::segmenter::split_sentences(response, rules)
}

fn simulate_chain(results: &mut Vec<PropertyCheck>, fixture: &mut Option<SimMdp>) {
    let gamma: f64 = 0.9;
    let mdp = farsight::simlab::make_chain_mdp(3, 1.0, gamma);
    let values = dp_values(&mdp, None);
    let expected = [gamma.powi(3), gamma.powi(2), gamma, 1.0];
    let worst = values
        .iter()
        .zip(expected)
        .map(|(v, e)| (v - e).abs())
        .fold(0.0f64, f64::max);
    report_property(
        results,
        "chain values match closed form",
        worst < 1e-12,
        format!("max deviation {worst:.2e}"),
    );
    let residual = bellman_residual(&mdp, &values, None);
    report_property(
        results,
        "bellman residual at fixed point",
        residual < 1e-10,
        format!("residual {residual:.2e} < 1e-10"),
    );
    *fixture = Some(mdp);
}

fn simulate_random(seed: u64, results: &mut Vec<PropertyCheck>, fixture: &mut Option<SimMdp>) {
    let mut worst_opt = 0.0f64;
    let mut worst_pol = 0.0f64;
    let mut worst_ret = 0.0f64;
    for offset in 0..5 {
        let mdp = make_random_mdp(seed.wrapping_add(offset), 16);
        let opt = dp_values(&mdp, None);
        worst_opt = worst_opt.max(bellman_residual(&mdp, &opt, None));
        let policy = DpPolicy::Softmax { temperature: 0.8 };
        let on_policy = dp_values(&mdp, Some(&policy));
        worst_pol = worst_pol.max(bellman_residual(&mdp, &on_policy, Some(&policy)));

        for ep in round_robin_episodes(&mdp, 50).expect("deterministic kernel") {
            worst_ret = worst_ret.max((ep.total_return - ep.recompute_return()).abs());
        }
        if offset == 0 {
            *fixture = Some(mdp);
        }
    }
    report_property(
        results,
        "optimal bellman residual",
        worst_opt < 1e-10,
        format!("max residual {worst_opt:.2e} < 1e-10"),
    );
    report_property(
        results,
        "on-policy bellman residual",
        worst_pol < 1e-10,
        format!("max residual {worst_pol:.2e} < 1e-10"),
    );
    report_property(
        results,
        "episode returns recompute from triples",
        worst_ret < 1e-12,
        format!("max deviation {worst_ret:.2e}"),
    );
}
