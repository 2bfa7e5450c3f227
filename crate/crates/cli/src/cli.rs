//! The `bpmap` command-line surface.
//!
//! Exit status: 0 on success, 1 when a classify/multilabel run finished
//! but some items carry embedded failures (output is still written), 2 on
//! configuration or parse errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bpmap_core::blueprint::{parse_blueprint, Blueprint, CategoryPath};
use bpmap_core::classify::{
    ClassifierBackend, Mode, MockBackend, MockMultiBackend, MultiLabelBackend, Noise,
};
use bpmap_core::llm::{LlmClient, LlmConfig};
use bpmap_core::metrics::{score_records, ReferenceEntry};
use bpmap_core::pipeline::{
    attach_exemplars, classify_batch, default_level_plan, validate_level_plan,
    ClassificationRecord, LevelConfig,
};
use bpmap_core::sim::{
    mock_backend_factory, run_simulation, BackendChoice, SimulationReport, SimulationSpec,
};

use crate::config::{LlmFileConfig, RunConfigFile};
use crate::io;

#[derive(Parser)]
#[command(
    name = "bpmap",
    version,
    about = "Classify free-text items into a hierarchical assessment blueprint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and lint a blueprint file, printing its shape.
    Validate(ValidateArgs),
    /// Classify a batch of items top-down through a blueprint.
    Classify(Box<ClassifyArgs>),
    /// Run the seeded repeated-subsampling simulation.
    Simulate(SimulateArgs),
    /// Score predicted paths against reference paths.
    Score(ScoreArgs),
    /// Flat multi-label classification with a label cap.
    Multilabel(MultilabelArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Mock,
    Llm,
}

impl From<BackendArg> for BackendChoice {
    fn from(value: BackendArg) -> Self {
        match value {
            BackendArg::Mock => BackendChoice::Mock,
            BackendArg::Llm => BackendChoice::Llm,
        }
    }
}

#[derive(Args)]
struct ValidateArgs {
    /// Blueprint file (JSON or YAML).
    blueprint: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Run-config file (YAML or JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blueprint: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    /// Few-shot training table (CSV with Text,Category columns).
    #[arg(long)]
    exemplars: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Reference paths for the mock backend (CSV: id,Category1..N).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Per-level modes, e.g. "1=few_shot,2=zero_shot".
    #[arg(long)]
    levels: Option<String>,
    /// Maximum number of items classified concurrently.
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mock noise rate in [0,1].
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Comma-separated levels the noise applies to (default: all).
    #[arg(long)]
    noise_levels: Option<String>,
    /// Print per-level candidate counts and the worst-case backend-call
    /// count, without calling any backend.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    llm: LlmFlags,
}

#[derive(Args, Default)]
struct LlmFlags {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Blueprint file; defaults to the shipped animals/plants taxonomy.
    #[arg(long)]
    blueprint: Option<PathBuf>,
    /// Word pool (CSV: word,Category1..N); defaults to the shipped pool.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    sample_size: usize,
    #[arg(long, default_value_t = 100)]
    repetitions: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    noise_levels: Option<String>,
    /// Write the full JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmFlags,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predicted paths (a classify results file, or any id,Category1..N CSV).
    #[arg(long)]
    predictions: PathBuf,
    /// Reference paths (CSV: id,Category1..N).
    #[arg(long)]
    references: PathBuf,
    /// Write the JSON report here as well as printing it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MultilabelArgs {
    /// Candidate categories: a blueprint file whose top-level categories
    /// are the flat label set.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Maximum number of labels per item.
    #[arg(long)]
    max_labels: usize,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    /// Truth table for the mock backend (CSV: id,labels with |-separated labels).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmFlags,
}

/// Parses and runs, printing to stdout. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut stdout = std::io::stdout();
    run_with_output(args, &mut stdout)
}

/// [`run`] against an arbitrary writer, for tests.
pub fn run_with_output<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(&args, out),
        Command::Classify(args) => cmd_classify(&args, out),
        Command::Simulate(args) => cmd_simulate(&args, out),
        Command::Score(args) => cmd_score(&args, out),
        Command::Multilabel(args) => cmd_multilabel(&args, out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn load_blueprint(path: &Path) -> Result<Blueprint> {
    let source = std::fs::read_to_string(path)
        .with_context(|| format!("reading blueprint {}", path.display()))?;
    parse_blueprint(&source).with_context(|| format!("parsing blueprint {}", path.display()))
}

fn cmd_validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<i32> {
    let blueprint = load_blueprint(&args.blueprint)?;
    if !blueprint.title.is_empty() {
        writeln!(out, "title: {}", blueprint.title)?;
    }
    let depth = blueprint.depth();
    writeln!(out, "depth: {depth}")?;
    for level in 1..=depth {
        writeln!(out, "level {level}: {} categories", blueprint.labels_at_level(level)?.len())?;
    }
    writeln!(out, "ok")?;
    Ok(0)
}

fn parse_level_modes(spec: &str) -> Result<Vec<LevelConfig>> {
    let mut levels = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (level, mode) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("level spec {part:?} must look like 1=few_shot"))?;
        let level: usize =
            level.trim().parse().with_context(|| format!("level in {part:?}"))?;
        let mode = match mode.trim() {
            "zero_shot" => Mode::ZeroShot,
            "few_shot" => Mode::FewShot,
            other => bail!("unknown mode {other:?} (expected zero_shot or few_shot)"),
        };
        levels.push(LevelConfig { level, mode });
    }
    Ok(levels)
}

fn parse_noise_levels(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("noise level {s:?}")))
        .collect()
}

fn noise_from(rate: Option<f64>, levels: Option<Vec<u64>>) -> Result<Option<Noise>> {
    let Some(rate) = rate else {
        return Ok(None);
    };
    if !(0.0..=1.0).contains(&rate) {
        bail!("noise rate must lie in [0,1], got {rate}");
    }
    Ok(Some(match levels {
        Some(levels) => Noise::at_levels(rate, levels),
        None => Noise::at_all_levels(rate),
    }))
}

fn resolve_llm_config(file: Option<&LlmFileConfig>, flags: &LlmFlags) -> Result<LlmConfig> {
    let mut cfg = LlmConfig::from_env();
    if let Some(file) = file {
        cfg = file.apply_to(cfg);
    }
    if let Some(url) = &flags.base_url {
        cfg.base_url = url.clone();
    }
    if let Some(model) = &flags.model {
        cfg.model = model.clone();
    }
    if let Some(temperature) = flags.temperature {
        cfg.temperature = temperature;
    }
    if let Some(retries) = flags.max_retries {
        cfg.max_retries = retries;
    }
    if let Some(in_flight) = flags.max_in_flight {
        cfg.max_in_flight = in_flight;
    }
    if let Some(secs) = flags.timeout_secs {
        cfg.timeout = std::time::Duration::from_secs(secs);
    }
    if cfg.api_key.is_empty() {
        bail!(
            "no API key configured: set {} or llm.api_key in the config file",
            bpmap_core::llm::ENV_API_KEY
        );
    }
    Ok(cfg)
}

/// Worst case is one call per item per level; levels whose every decision
/// point offers at most one candidate are auto-selected and cost nothing.
fn estimate_backend_calls(blueprint: &Blueprint, items: usize) -> usize {
    fn widths(nodes: &[bpmap_core::blueprint::BlueprintNode], depth: usize, out: &mut Vec<usize>) {
        for node in nodes {
            if node.children.len() > out[depth] {
                out[depth] = node.children.len();
            }
            widths(&node.children, depth + 1, out);
        }
    }
    let depth = blueprint.depth();
    let mut max_children = vec![0usize; depth + 1];
    max_children[0] = blueprint.roots().len();
    widths(blueprint.roots(), 1, &mut max_children);
    (0..depth).filter(|&level| max_children[level] > 1).count() * items
}

fn cmd_classify(args: &ClassifyArgs, out: &mut dyn Write) -> Result<i32> {
    let file = match &args.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let pick = |flag: &Option<PathBuf>, from_file: &Option<PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| from_file.clone())
            .ok_or_else(|| anyhow!("missing required setting: {name}"))
    };
    let blueprint_path = pick(&args.blueprint, &file.blueprint, "--blueprint")?;
    let items_path = pick(&args.items, &file.items, "--items")?;

    let mut blueprint = load_blueprint(&blueprint_path)?;
    if let Some(path) = args.exemplars.clone().or_else(|| file.exemplars.clone()) {
        let table = io::load_exemplars(&path)?;
        blueprint = attach_exemplars(&blueprint, &table)?;
    }
    let levels = match &args.levels {
        Some(spec) => parse_level_modes(spec)?,
        None => file.levels.clone().unwrap_or_else(|| default_level_plan(&blueprint)),
    };
    validate_level_plan(&blueprint, &levels)?;
    let items = io::load_items(&items_path)?;

    if args.dry_run {
        let depth = blueprint.depth();
        writeln!(out, "depth: {depth}")?;
        for level in 1..=depth {
            writeln!(
                out,
                "level {level}: {} categories",
                blueprint.labels_at_level(level)?.len()
            )?;
        }
        writeln!(out, "items: {}", items.len())?;
        writeln!(
            out,
            "estimated backend calls: <= {}",
            estimate_backend_calls(&blueprint, items.len())
        )?;
        return Ok(0);
    }

    let output = pick(&args.output, &file.output, "--output")?;
    let backend_choice: BackendChoice = args
        .backend
        .map(BackendChoice::from)
        .or(file.backend)
        .unwrap_or(BackendChoice::Mock);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let concurrency = args.concurrency.or(file.concurrency).unwrap_or(4);
    let noise_levels = match &args.noise_levels {
        Some(spec) => Some(parse_noise_levels(spec)?),
        None => file.noise_levels.clone(),
    };
    let noise = noise_from(args.noise_rate.or(file.noise_rate), noise_levels)?;

    let backend: Box<dyn ClassifierBackend> = match backend_choice {
        BackendChoice::Mock => {
            let truth_path = args
                .truth
                .clone()
                .or_else(|| file.truth.clone())
                .ok_or_else(|| anyhow!("--backend mock needs --truth (id,Category1..N CSV)"))?;
            let references = io::load_reference_paths(&truth_path)?;
            let truth = io::truth_by_text(&items, &references);
            let mock = MockBackend::new(truth, seed);
            Box::new(match noise {
                Some(noise) => mock.with_noise(noise),
                None => mock,
            })
        }
        BackendChoice::Llm => {
            let cfg = resolve_llm_config(file.llm.as_ref(), &args.llm)?;
            Box::new(LlmClient::new(cfg)?)
        }
    };

    let records = classify_batch(&blueprint, &items, &levels, backend.as_ref(), concurrency);
    let sidecar = io::write_results(&records, &items, blueprint.depth(), &output)?;

    let failures = records.iter().filter(|r| r.failure.is_some()).count();
    writeln!(out, "classified {} items, {failures} failures", records.len())?;
    writeln!(out, "results: {}", output.display())?;
    writeln!(out, "decisions: {}", sidecar.display())?;
    Ok(if failures > 0 { 1 } else { 0 })
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut spec = SimulationSpec {
        sample_size: args.sample_size,
        repetitions: args.repetitions,
        seed: args.seed,
        backend: args.backend.into(),
        ..SimulationSpec::default()
    };
    if let Some(path) = &args.blueprint {
        spec.blueprint = load_blueprint(path)?;
    }
    if let Some(path) = &args.pool {
        spec.pool = io::load_pool(path)?;
    }
    spec.validate()?;
    let noise_levels = match &args.noise_levels {
        Some(spec) => Some(parse_noise_levels(spec)?),
        None => None,
    };
    let noise = noise_from(args.noise_rate, noise_levels)?;

    let report = match spec.backend {
        BackendChoice::Mock => {
            let factory = mock_backend_factory(&spec.pool, noise);
            run_simulation(&spec, &factory)?
        }
        BackendChoice::Llm => {
            let cfg = resolve_llm_config(None, &args.llm)?;
            let client = Arc::new(LlmClient::new(cfg)?);
            let factory = move |_seed: u64| -> Box<dyn ClassifierBackend> {
                Box::new(Arc::clone(&client))
            };
            run_simulation(&spec, &factory)?
        }
    };

    print_simulation_summary(&report, out)?;
    if let Some(path) = &args.output {
        io::write_atomic(path, report.to_json().as_bytes())?;
        writeln!(out, "report: {}", path.display())?;
    }
    Ok(0)
}

fn print_simulation_summary(report: &SimulationReport, out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "simulation: {} repetitions of {}/{} words (seed {}, backend {})",
        report.spec.repetitions,
        report.spec.sample_size,
        report.spec.pool_size,
        report.spec.seed,
        report.spec.backend,
    )?;
    for (level, f1) in &report.mean_level_weighted_f1 {
        writeln!(
            out,
            "level {level}: mean accuracy {:.4}, mean weighted F1 {f1:.4}",
            report.mean_level_accuracy[level],
        )?;
    }
    writeln!(out, "mean weighted F1 across repetitions: {:.4}", report.mean_weighted_f1)?;
    writeln!(out, "pooled weighted F1: {:.4}", report.pooled_weighted_f1)?;
    Ok(())
}

fn cmd_score(args: &ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let predictions = io::load_reference_paths(&args.predictions)?;
    let references = io::load_reference_paths(&args.references)?;
    if predictions.len() != references.len() {
        bail!(
            "predictions ({}) and references ({}) differ in row count",
            predictions.len(),
            references.len()
        );
    }
    let by_id: HashMap<&str, &ReferenceEntry> =
        references.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut aligned = Vec::with_capacity(predictions.len());
    let mut records = Vec::with_capacity(predictions.len());
    for prediction in &predictions {
        let reference = by_id
            .get(prediction.item_id.as_str())
            .ok_or_else(|| anyhow!("no reference for item {:?}", prediction.item_id))?;
        aligned.push((*reference).clone());
        records.push(ClassificationRecord {
            item_id: prediction.item_id.clone(),
            path: prediction.path.clone(),
            decisions: Vec::new(),
            failure: None,
        });
    }
    let report = score_records(&records, &aligned)?;
    writeln!(out, "{}", report.to_json())?;
    if let Some(path) = &args.output {
        io::write_atomic(path, report.to_json().as_bytes())?;
    }
    Ok(0)
}

fn cmd_multilabel(args: &MultilabelArgs, out: &mut dyn Write) -> Result<i32> {
    let blueprint = load_blueprint(&args.labels)?;
    let candidates = blueprint.children_of(&CategoryPath::empty())?;
    let items = io::load_items(&args.items)?;

    let backend: Box<dyn MultiLabelBackend> = match BackendChoice::from(args.backend) {
        BackendChoice::Mock => {
            let truth_path = args
                .truth
                .clone()
                .ok_or_else(|| anyhow!("--backend mock needs --truth (id,labels CSV)"))?;
            let rows = io::load_multi_truth(&truth_path)?;
            let by_id: HashMap<&str, &Vec<String>> =
                rows.iter().map(|(id, labels)| (id.as_str(), labels)).collect();
            let truth: HashMap<String, Vec<String>> = items
                .iter()
                .filter_map(|item| {
                    by_id
                        .get(item.id.as_str())
                        .map(|labels| (item.combined_text().to_string(), (*labels).clone()))
                })
                .collect();
            Box::new(MockMultiBackend::new(truth))
        }
        BackendChoice::Llm => {
            let cfg = resolve_llm_config(None, &args.llm)?;
            Box::new(LlmClient::new(cfg)?)
        }
    };

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["id", "text", "labels", "dropped", "failure"])?;
    let mut sidecar = String::new();
    let mut failures = 0usize;
    for item in &items {
        match backend.classify_multi(item.combined_text(), &candidates, args.max_labels) {
            Ok(decision) => {
                writer.write_record([
                    item.id.as_str(),
                    item.combined_text(),
                    &decision.chosen.join("|"),
                    &decision.dropped.join("|"),
                    "",
                ])?;
                sidecar.push_str(&serde_json::to_string(&serde_json::json!({
                    "item_id": item.id,
                    "chosen": decision.chosen,
                    "max_labels": decision.max_labels,
                    "raw_output": decision.raw_output,
                    "dropped": decision.dropped,
                }))?);
                sidecar.push('\n');
            }
            Err(e) => {
                failures += 1;
                writer.write_record([
                    item.id.as_str(),
                    item.combined_text(),
                    "",
                    "",
                    &e.to_string(),
                ])?;
                sidecar.push_str(&serde_json::to_string(&serde_json::json!({
                    "item_id": item.id,
                    "failure": e.to_string(),
                }))?);
                sidecar.push('\n');
            }
        }
    }
    io::write_atomic(&args.output, &writer.into_inner()?)?;
    io::write_atomic(&io::sidecar_path(&args.output), sidecar.as_bytes())?;

    writeln!(out, "labeled {} items, {failures} failures", items.len())?;
    writeln!(out, "results: {}", args.output.display())?;
    Ok(if failures > 0 { 1 } else { 0 })
}
