//! One handler per subcommand.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use smart_core::dataset::{default_motion_epsilon, DEFAULT_ROAD_EPSILON};
use smart_core::diagnostics;
use smart_core::geom::AgentClass;
use smart_core::io::SCHEMA_VERSION;
use smart_core::metrics::{evaluate, HistogramConfig, MetricReport};
use smart_core::model::{read_checkpoint, Model};
use smart_core::rollout::{rollout, RolloutConfig, RolloutSet};
use smart_core::scaling::{fit_power_law, fitted_curve_csv, parse_points_csv};
use smart_core::seed::derive_seed;
use smart_core::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};
use smart_core::tokens::{
    build_motion_vocab_from_tracks, build_road_vocab, split_polylines, tokenize_map, tokenize_scenario, MotionVocabSet, NoiseConfig,
    RoadVocab, TokenizedMap, TokenizedTrack, MAX_SEGMENT_LENGTH, REFINE_ROUNDS,
};
use smart_core::training::{train, TrainConfig, CHECKPOINT_FILE, CURVE_FILE};
use smart_core::{Scenario, Track};

use crate::artifacts::{
    json_files, load_scenario, load_scenarios, load_vocab_files, manifest_beside, read_bytes, sibling, thread_count, write_text,
    Manifest, MANIFEST_FILE,
};
use crate::{
    BuildVocabArgs, Command, ConfigError, EvalArgs, RolloutArgs, ScalingFitArgs, SelftestFailed, SynthGenArgs, TokenizeArgs, TrainArgs,
};

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::SynthGen(a) => synth_gen(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Train(a) => train_model(a),
        Command::Rollout(a) => run_rollout(a),
        Command::Eval(a) => eval(a),
        Command::ScalingFit(a) => scaling_fit(a),
        Command::Selftest => selftest(),
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> anyhow::Error {
    ConfigError::new(field, reason).into()
}

fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let kinds = a.kind.split(',').map(|k| MapKind::from_str(k.trim()).map_err(|e| config_err("kind", e))).collect::<Result<Vec<_>>>()?;
    if a.count == 0 {
        bail!(config_err("count", "must be at least 1"));
    }
    let mut manifest = Manifest::new("synth-gen", a)?;
    for i in 0..a.count {
        let map_spec = MapSpec::new(kinds[i % kinds.len()], a.n_lanes, derive_seed(a.seed, &[i as u64, 0]));
        map_spec.validate().map_err(|e| config_err("n_lanes", e.to_string()))?;
        let mut traffic = TrafficSpec::new(a.n_agents, derive_seed(a.seed, &[i as u64, 1]));
        traffic.n_pedestrians = a.n_pedestrians;
        traffic.n_cyclists = a.n_cyclists;
        traffic.history_steps = a.history;
        traffic.horizon_steps = a.horizon;
        traffic.validate().map_err(|e| config_err("traffic", e.to_string()))?;
        let map = generate_map(&map_spec)?;
        let scenario = generate_scenario(&map, &traffic).with_context(|| format!("generating scenario {i}"))?;
        let path = a.out_dir.join(format!("scenario_{i:05}.json"));
        write_text(&path, &scenario.to_json())?;
        manifest.output(&path);
    }
    manifest.write(&a.out_dir.join(MANIFEST_FILE))?;
    println!("wrote {} scenarios to {}", a.count, a.out_dir.display());
    Ok(())
}

fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    if a.size == 0 {
        bail!(config_err("size", "must be at least 1"));
    }
    let is_road = a.class == RoadVocab::CLASS;
    let class = if is_road { None } else { Some(AgentClass::from_str(&a.class).map_err(|e| config_err("class", e))?) };
    let epsilon = a.epsilon.unwrap_or_else(|| class.map(default_motion_epsilon).unwrap_or(DEFAULT_ROAD_EPSILON));
    if !(epsilon.is_finite() && epsilon > 0.0) {
        bail!(config_err("epsilon", "must be positive"));
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a BuildVocabArgs,
        epsilon: f64,
        refine_rounds: usize,
    }
    let mut manifest = Manifest::new("build-vocab", Resolved { args: a, epsilon, refine_rounds: REFINE_ROUNDS })?;
    let scenarios = load_scenarios(&a.data_dir)?;
    for s in &scenarios {
        manifest.input(&s.path, &s.bytes);
    }
    let (json, size) = match class {
        None => {
            let segments: Vec<_> = scenarios.iter().flat_map(|s| split_polylines(&s.scenario.map, MAX_SEGMENT_LENGTH)).collect();
            let v = build_road_vocab(&segments, a.size, epsilon, a.seed)?;
            (v.to_json(), v.size())
        }
        Some(class) => {
            let tracks: Vec<&Track> = scenarios.iter().flat_map(|s| s.scenario.agents.iter()).filter(|t| t.class == class).collect();
            if tracks.is_empty() {
                bail!(config_err("class", format!("no {} tracks in {}", class.name(), a.data_dir.display())));
            }
            let v = build_motion_vocab_from_tracks(&tracks, class, a.size, epsilon, a.seed, REFINE_ROUNDS)?;
            (v.to_json(), v.size())
        }
    };
    write_text(&a.out, &json)?;
    manifest.output(&a.out);
    manifest.write(&manifest_beside(&a.out))?;
    println!("{} vocabulary with {size} tokens written to {}", a.class, a.out.display());
    Ok(())
}

/// Tokenized form of one scenario.
#[derive(Serialize)]
struct TokenizedScenario {
    schema: u32,
    scenario: String,
    tracks: Vec<TokenizedTrack>,
    map: Option<TokenizedMap>,
}

fn tokenize(a: &TokenizeArgs) -> Result<()> {
    let fields: Vec<(String, PathBuf)> = a.vocab.iter().map(|p| ("vocab".to_string(), p.clone())).collect();
    let vocabs = load_vocab_files(&fields)?;
    if vocabs.motion.is_empty() {
        bail!(config_err("vocab", "no motion vocabulary given"));
    }
    let mut manifest = Manifest::new("tokenize", a)?;
    for (p, b) in &vocabs.files {
        manifest.input(p, b);
    }
    let motion = MotionVocabSet::new(vocabs.motion.clone());
    let single = a.input.is_file();
    let scenarios = if single { vec![load_scenario(&a.input)?] } else { load_scenarios(&a.input)? };
    for s in &scenarios {
        manifest.input(&s.path, &s.bytes);
        let tracks = tokenize_scenario(&motion, &s.scenario, &NoiseConfig::OFF, 0).with_context(|| format!("tokenizing {}", s.path.display()))?;
        let map = match &vocabs.road {
            Some(r) => Some(tokenize_map(r, &s.scenario.map, &NoiseConfig::OFF, 0)?),
            None => None,
        };
        let out = if single { a.out.clone() } else { a.out.join(format!("{}.tokens.json", s.name())) };
        let doc = TokenizedScenario { schema: SCHEMA_VERSION, scenario: s.name(), tracks, map };
        write_text(&out, &serde_json::to_string(&doc)?)?;
        manifest.output(&out);
    }
    let manifest_path = if single { manifest_beside(&a.out) } else { a.out.join(MANIFEST_FILE) };
    manifest.write(&manifest_path)?;
    println!("tokenized {} scenario(s)", scenarios.len());
    Ok(())
}

const VOCAB_KEYS: [&str; 4] = ["vehicle", "pedestrian", "cyclist", "road"];

fn train_model(a: &TrainArgs) -> Result<()> {
    let config_bytes = read_bytes(&a.config)?;
    let mut config: TrainConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| config_err("config", format!("{}: {e}", a.config.display())))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    if config.vocabs.is_empty() {
        bail!(config_err("vocabs", "no vocabulary files configured"));
    }
    let mut vocab_paths = Vec::new();
    for (key, rel) in &config.vocabs {
        if !VOCAB_KEYS.contains(&key.as_str()) {
            bail!(config_err(&format!("vocabs.{key}"), format!("unknown vocabulary class; expected one of {VOCAB_KEYS:?}")));
        }
        let p = Path::new(rel);
        vocab_paths.push((format!("vocabs.{key}"), if p.is_absolute() { p.to_path_buf() } else { a.data_dir.join(p) }));
    }
    let files = load_vocab_files(&vocab_paths)?;
    let mut resolved = config.clone();
    resolved.vocabs = vocab_paths.iter().map(|(k, p)| (k["vocabs.".len()..].to_string(), p.display().to_string())).collect();
    let mut manifest = Manifest::new("train", &resolved)?;
    manifest.input(&a.config, &config_bytes);
    for (p, b) in &files.files {
        manifest.input(p, b);
    }
    let vocabs = files.into_vocabularies("vocabs")?;

    let loaded = load_scenarios(&a.data_dir)?;
    for s in &loaded {
        manifest.input(&s.path, &s.bytes);
    }
    let scenarios: Vec<Scenario> = loaded.into_iter().map(|s| s.scenario).collect();
    let n_val = ((scenarios.len() as f64 * config.val_fraction).round() as usize).min(scenarios.len() - 1);
    let (train_set, val_set) = scenarios.split_at(scenarios.len() - n_val);
    log::info!("training on {} scenarios, validating on {}", train_set.len(), val_set.len());

    let report = train(&config, &vocabs, train_set, val_set, Some(&a.out))?;
    for v in &vocabs.motion.vocabs {
        let p = a.out.join(format!("vocab_{}.json", v.class.name()));
        write_text(&p, &v.to_json())?;
        manifest.output(&p);
    }
    let p = a.out.join(format!("vocab_{}.json", RoadVocab::CLASS));
    write_text(&p, &vocabs.road.to_json())?;
    manifest.output(&p);
    manifest.output(&a.out.join(CHECKPOINT_FILE));
    manifest.output(&a.out.join(CURVE_FILE));
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    let last = report.curve.last();
    println!(
        "trained {} steps ({} parameters); final train {:.4} nats, val {}",
        report.steps.len(),
        report.model.param_count(),
        last.map(|c| c.train_nats).unwrap_or(f64::NAN),
        last.and_then(|c| c.val_nats).map(|v| format!("{v:.4} nats")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn run_rollout(a: &RolloutArgs) -> Result<()> {
    let threads = thread_count()?;
    let ckpt_bytes = read_bytes(&a.ckpt)?;
    let (header, params) = read_checkpoint(&a.ckpt)?;
    let model = Model::from_params(header.config.clone(), params)?;
    let vocab_list: Vec<PathBuf> = if a.vocab.is_empty() {
        let dir = a.ckpt.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        json_files(dir)?
            .into_iter()
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("vocab_")))
            .collect()
    } else {
        a.vocab.clone()
    };
    let files = load_vocab_files(&vocab_list.iter().map(|p| ("vocab".to_string(), p.clone())).collect::<Vec<_>>())?;
    let config = RolloutConfig {
        n_rollouts: a.n,
        top_k: a.top_k,
        temperature: a.temperature,
        history_tokens: a.history_tokens,
        future_tokens: a.future_tokens,
        seed: a.seed,
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: String,
        scenario: String,
        vocab: Vec<String>,
        rollout: &'a RolloutConfig,
        threads: usize,
    }
    let mut manifest = Manifest::new(
        "rollout",
        Resolved {
            checkpoint: a.ckpt.display().to_string(),
            scenario: a.scenario.display().to_string(),
            vocab: vocab_list.iter().map(|p| p.display().to_string()).collect(),
            rollout: &config,
            threads,
        },
    )?;
    manifest.input(&a.ckpt, &ckpt_bytes);
    for (p, b) in &files.files {
        manifest.input(p, b);
    }
    let vocabs = files.into_vocabularies("vocab")?;
    if vocabs.hashes() != header.vocab_hashes {
        bail!(config_err("vocab", "vocabulary files do not match the ones the checkpoint was trained with"));
    }
    let scenario = load_scenario(&a.scenario)?;
    manifest.input(&scenario.path, &scenario.bytes);

    let set = rollout(&model, &scenario.scenario, &vocabs, &config, threads)?;
    write_text(&a.out, &set.to_json())?;
    manifest.output(&a.out);
    #[derive(Serialize)]
    struct Timing<'a> {
        schema: u32,
        threads: usize,
        /// Milliseconds per generated token step, per rollout.
        step_ms: &'a [Vec<f64>],
    }
    let timing_path = sibling(&a.out, ".timing.json");
    write_text(&timing_path, &serde_json::to_string_pretty(&Timing { schema: SCHEMA_VERSION, threads, step_ms: &set.step_ms })?)?;
    manifest.output(&timing_path);
    manifest.write(&manifest_beside(&a.out))?;
    if !set.excluded.is_empty() {
        log::warn!("agents without a warm start were excluded: {:?}", set.excluded);
    }
    println!(
        "{} rollouts of {} agents over {} token steps written to {}",
        set.rollouts.len(),
        set.agent_ids.len(),
        set.future_tokens,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let gt = load_scenario(&a.gt)?;
    let bytes = read_bytes(&a.rollouts)?;
    let set = RolloutSet::from_json(&String::from_utf8_lossy(&bytes)).with_context(|| format!("loading rollouts {}", a.rollouts.display()))?;
    let histogram = HistogramConfig::default();
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a EvalArgs,
        histogram: &'a HistogramConfig,
    }
    let mut manifest = Manifest::new("eval", Resolved { args: a, histogram: &histogram })?;
    manifest.input(&gt.path, &gt.bytes);
    manifest.input(&a.rollouts, &bytes);
    let report = evaluate(&set, &gt.scenario, &histogram)?;
    write_text(&a.out, &serde_json::to_string_pretty(&report)?)?;
    manifest.output(&a.out);
    let csv_path = sibling(&a.out, ".csv");
    write_text(&csv_path, &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row(&gt.name())))?;
    manifest.output(&csv_path);
    manifest.write(&manifest_beside(&a.out))?;
    println!(
        "meta {:.4}  minADE {:.3} m  collision {:.3}  off-road {:.3}",
        report.meta, report.min_ade, report.collision_rate, report.offroad_rate
    );
    Ok(())
}

fn scaling_fit(a: &ScalingFitArgs) -> Result<()> {
    if a.samples < 2 {
        bail!(config_err("samples", "must be at least 2"));
    }
    let bytes = read_bytes(&a.input)?;
    let points = parse_points_csv(&String::from_utf8_lossy(&bytes)).with_context(|| format!("parsing {}", a.input.display()))?;
    let fit = fit_power_law(&points)?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.input.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut manifest = Manifest::new("scaling-fit", a)?;
    manifest.input(&a.input, &bytes);
    #[derive(Serialize)]
    struct FitFile {
        schema: u32,
        beta: f64,
        alpha: f64,
        r2: f64,
        n_points: usize,
    }
    let fit_path = out_dir.join("scaling_fit.json");
    let doc = FitFile { schema: SCHEMA_VERSION, beta: fit.beta, alpha: fit.alpha, r2: fit.r2, n_points: points.len() };
    write_text(&fit_path, &serde_json::to_string_pretty(&doc)?)?;
    let curve_path = out_dir.join("scaling_fit_curve.csv");
    write_text(&curve_path, &fitted_curve_csv(&fit, &points, a.samples))?;
    manifest.output(&fit_path);
    manifest.output(&curve_path);
    manifest.write(&out_dir.join("scaling_fit.manifest.json"))?;
    println!("log(L) = {:.6}·log(x) + {:.6}  (r² = {:.6})", fit.beta, fit.alpha, fit.r2);
    Ok(())
}

fn selftest() -> Result<()> {
    let results = diagnostics::run_all()?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!(SelftestFailed(failed));
    }
    Ok(())
}
