//! Command implementations. Each writes its artifacts plus a run manifest
//! into --out and prints a one-line summary per key result.

use crate::manifest::RunManifest;
use anyhow::{anyhow, Context, Result};
use clap::Args;
use kbedit_core::data::{self, FactWorld};
use kbedit_core::editor::{EditorBundle, HypernetworkKind};
use kbedit_core::eval;
use kbedit_core::model::{MicroLm, ModelConfig};
use kbedit_core::scope::ScopeIndex;
use kbedit_core::train::{self, PretrainOpts, TrainConfig};
use serde::Serialize;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Bad flag combinations exit with code 2; runtime failures with 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

fn load_model(path: &Path) -> Result<Arc<MicroLm>> {
    Ok(Arc::new(MicroLm::load_checkpoint(path).with_context(
        || format!("loading checkpoint {}", path.display()),
    )?))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long, default_value_t = 5)]
    pub relations: usize,
    /// Number of simultaneous edits to derive datasets for.
    #[arg(long, default_value_t = 50)]
    pub edits: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    if args.edits > args.entities {
        return Err(usage(format!(
            "--edits {} exceeds --entities {}",
            args.edits, args.entities
        )));
    }
    if args.entities == 0 || args.relations == 0 || args.edits == 0 {
        return Err(usage("counts must be >= 1"));
    }
    ensure_out_dir(&args.out)?;
    let world = data::generate_world(args.seed, args.entities, args.relations)
        .map_err(|e| match e {
            kbedit_core::KbError::InvalidArgument(m) => usage(m),
            other => anyhow!(other),
        })?;
    let (train_records, eval_records) = data::make_edit_datasets(&world, args.edits, args.seed)?;

    let world_path = args.out.join("world.json");
    let train_path = args.out.join("train.jsonl");
    let eval_path = args.out.join("eval.jsonl");
    world.save(&world_path)?;
    data::save_training(&train_path, &train_records)?;
    data::save_eval(&eval_path, &eval_records)?;

    let mut manifest = RunManifest::new("gen-data", serde_json::json!({
        "seed": args.seed,
        "entities": args.entities,
        "relations": args.relations,
        "edits": args.edits,
    }));
    manifest.seed("world", args.seed);
    manifest.output(&world_path).output(&train_path).output(&eval_path);
    manifest.write(&args.out)?;

    println!(
        "world: {} entities x {} relations = {} facts, {} corpus sentences",
        world.entities.len(),
        world.relations.len(),
        world.n_facts(),
        world.corpus.len()
    );
    println!(
        "datasets: {} training records, {} evaluation records",
        train_records.len(),
        eval_records.len()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// world.json from gen-data.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with partial {"model": {...}, "opts": {...}} overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Greedy-decode this many sampled facts to report held-in accuracy.
    #[arg(long, default_value_t = 200)]
    pub fact_check: usize,
}

#[derive(serde::Deserialize, Default)]
struct PretrainFileConfig {
    #[serde(default)]
    model: serde_json::Value,
    #[serde(default)]
    opts: serde_json::Value,
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    if let (Some(b), Some(o)) = (base.as_object_mut(), overlay.as_object()) {
        for (k, v) in o {
            b.insert(k.clone(), v.clone());
        }
    }
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let world = FactWorld::load(&args.world)
        .with_context(|| format!("loading world {}", args.world.display()))?;
    let tokenizer = world.tokenizer()?;

    let mut model_cfg = serde_json::to_value(ModelConfig::new(4, 128, 4, tokenizer.vocab_size(), 32))?;
    let mut opts_cfg = serde_json::to_value(PretrainOpts::default())?;
    if let Some(path) = &args.config {
        let file: PretrainFileConfig = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| usage(format!("bad --config {}: {e}", path.display())))?;
        merge_json(&mut model_cfg, &file.model);
        merge_json(&mut opts_cfg, &file.opts);
    }
    let over = |v: &mut serde_json::Value, key: &str, val: Option<serde_json::Value>| {
        if let Some(val) = val {
            v[key] = val;
        }
    };
    over(&mut model_cfg, "n_layers", args.layers.map(Into::into));
    over(&mut model_cfg, "d_model", args.d_model.map(Into::into));
    over(&mut model_cfg, "n_heads", args.heads.map(Into::into));
    over(&mut model_cfg, "max_seq", args.max_seq.map(Into::into));
    over(&mut opts_cfg, "steps", args.steps.map(Into::into));
    over(&mut opts_cfg, "batch_size", args.batch_size.map(Into::into));
    over(&mut opts_cfg, "lr", args.lr.map(|v| serde_json::json!(v)));
    over(&mut opts_cfg, "seed", args.seed.map(Into::into));

    let mut config: ModelConfig = serde_json::from_value(model_cfg.clone())
        .map_err(|e| usage(format!("bad model config: {e}")))?;
    config.vocab_size = tokenizer.vocab_size();
    if config.default_edit_layer > config.n_layers {
        config.default_edit_layer = config.n_layers.div_ceil(2);
    }
    let opts: PretrainOpts = serde_json::from_value(opts_cfg.clone())
        .map_err(|e| usage(format!("bad pretrain opts: {e}")))?;
    config.validate().map_err(|e| usage(e.to_string()))?;

    let outcome = train::pretrain_lm(&world.corpus, config, tokenizer, &opts)?;
    let fact_accuracy = held_in_fact_accuracy(&outcome.model, &world, args.fact_check, opts.seed)?;

    let ckpt_path = args.out.join("model.ckpt");
    outcome.model.save_checkpoint(&ckpt_path)?;
    let log_path = args.out.join("pretrain_log.jsonl");
    write_jsonl(&log_path, &outcome.log)?;

    let mut manifest = RunManifest::new("pretrain", serde_json::json!({
        "model": serde_json::to_value(outcome.model.config())?,
        "opts": opts_cfg,
        "fact_check": args.fact_check,
    }));
    manifest.seed("pretrain", opts.seed);
    manifest.input("world", &args.world);
    manifest.output(&ckpt_path).output(&log_path);
    manifest.write(&args.out)?;

    println!(
        "pretrained: train loss {:.4}, holdout loss {:.4} (uniform baseline {:.4})",
        outcome.final_train_loss,
        outcome.holdout_loss,
        (outcome.model.config().vocab_size as f64).ln()
    );
    println!("held-in fact accuracy: {fact_accuracy:.3} over {} sampled facts", args.fact_check);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Greedy-decode sampled true facts and score exact matches.
pub fn held_in_fact_accuracy(
    model: &MicroLm,
    world: &FactWorld,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa4093822299f31d0);
    let mut hits = 0usize;
    let n = samples.max(1);
    for _ in 0..n {
        let e = rng.gen_range(0..world.entities.len());
        let r = rng.gen_range(0..world.relations.len());
        let t = rng.gen_range(0..world.relations[r].templates.len());
        let prompt = world.relations[r].prompt(t, &world.entities[e]);
        let expected = world.fact(e, r);
        let k = model.tokenizer().encode(expected)?.ids.len();
        let got = model.greedy_decode(&prompt, k, None)?;
        if got.trim().eq_ignore_ascii_case(expected.trim()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Training dataset (line-delimited JSON).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Edit layer; defaults to the checkpoint's default edit layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Named hyperparameter preset (see `kbedit train --list-presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON file with partial training-config overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fuzzy scope threshold for the bundle.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_edit: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hypernetwork kind: linear | mlp.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, default_value_t = false)]
    pub list_presets: bool,
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.preset {
        None => TrainConfig::default(),
        Some(name) => train::preset(name)
            .ok_or_else(|| usage(format!("unknown preset {name:?}; try --list-presets")))?,
    };
    if let Some(path) = &args.config {
        let mut value = serde_json::to_value(&config)?;
        let overlay: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| usage(format!("bad --config {}: {e}", path.display())))?;
        merge_json(&mut value, &overlay);
        config = serde_json::from_value(value).map_err(|e| usage(format!("bad config: {e}")))?;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lambda_edit {
        config.lambda_edit = v;
    }
    if let Some(v) = args.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(kind) = &args.kind {
        config.kind = match kind.as_str() {
            "linear" => HypernetworkKind::Linear,
            "mlp" => HypernetworkKind::Mlp,
            other => return Err(usage(format!("unknown hypernetwork kind {other:?}"))),
        };
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    if args.list_presets {
        for name in train::preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    ensure_out_dir(&args.out)?;
    let model = load_model(&args.model)?;
    let records = data::load_training(&args.data)?;
    let config = resolve_train_config(args)?;
    let layer = args.layer.unwrap_or(model.config().default_edit_layer);
    if layer == 0 || layer > model.config().n_layers {
        return Err(usage(format!(
            "--layer {layer} outside 1..={}",
            model.config().n_layers
        )));
    }

    let outcome = train::train(&records, &model, layer, &config)?;
    let scope = match args.threshold {
        None => outcome.scope,
        Some(t) => ScopeIndex::build_with_threshold(records.clone(), t)
            .map_err(|e| usage(e.to_string()))?,
    };
    let bundle = EditorBundle::new(Arc::clone(&model), outcome.hypernetwork, scope)?;

    let bundle_path = args.out.join("edit.bundle");
    bundle.save(&bundle_path)?;
    let log_path = args.out.join("train_log.jsonl");
    write_jsonl(&log_path, &outcome.log)?;

    let mut manifest = RunManifest::new("train", serde_json::json!({
        "config": serde_json::to_value(&config)?,
        "layer": layer,
        "threshold": bundle.scope().threshold(),
        "preset": args.preset,
    }));
    manifest.seed("train", config.seed);
    manifest.input("model", &args.model);
    manifest.input("data", &args.data);
    manifest.output(&bundle_path).output(&log_path);
    manifest.write(&args.out)?;

    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} edits at layer {layer}: {} epochs, total loss {:.4}, edit accuracy {:.3}",
        records.len(),
        outcome.log.len(),
        last.total,
        last.edit_accuracy
    );
    println!("bundle: {}", bundle_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Evaluation dataset (line-delimited JSON).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "json")]
    pub report_format: String,
    /// New tokens to generate when scoring fluency.
    #[arg(long, default_value_t = 20)]
    pub fluency_tokens: usize,
    /// Optional world.json enabling the held-out general-ability check.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub holdout_tasks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    if args.report_format != "json" && args.report_format != "csv" {
        return Err(usage(format!(
            "--report-format must be json or csv, got {:?}",
            args.report_format
        )));
    }
    ensure_out_dir(&args.out)?;
    let model = load_model(&args.model)?;
    let bundle = EditorBundle::load(&args.bundle, Arc::clone(&model))?;
    let evals = data::load_eval(&args.data)?;

    let mut report = eval::evaluate_bundle(&bundle, &evals, args.fluency_tokens)?;
    let gain = eval::info_gain(&model, bundle.hypernetwork(), &evals, bundle.layer())?;
    report.info_gain = vec![eval::LayerGain { layer: bundle.layer(), delta_i: gain }];

    let report_path = args
        .out
        .join(format!("report.{}", args.report_format));
    match args.report_format.as_str() {
        "json" => std::fs::write(&report_path, report.to_json()?)?,
        _ => std::fs::write(&report_path, report.to_csv())?,
    }
    let tsv_path = args.out.join("info_gain.tsv");
    std::fs::write(&tsv_path, report.info_gain_tsv())?;

    let mut general = None;
    if let Some(world_path) = &args.world {
        let world = FactWorld::load(world_path)?;
        let scope_subjects: Vec<String> = bundle
            .scope()
            .records()
            .iter()
            .map(|r| r.subject.clone())
            .collect();
        let tasks = data::make_holdout_tasks(&world, &scope_subjects, args.holdout_tasks, args.seed)?;
        general = Some(eval::general_ability_check(&model, &bundle, &tasks)?);
    }

    let mut manifest = RunManifest::new("eval", serde_json::json!({
        "report_format": args.report_format,
        "fluency_tokens": args.fluency_tokens,
        "holdout_tasks": args.holdout_tasks,
    }));
    manifest.seed("eval", args.seed);
    manifest.input("model", &args.model);
    manifest.input("bundle", &args.bundle);
    manifest.input("data", &args.data);
    manifest.output(&report_path).output(&tsv_path);
    manifest.write(&args.out)?;

    println!(
        "reliability {:.3}  generality {:.3}  locality {:.3}  EP {:.3}  fluency {:.3}  dI@{} {:.4}",
        report.reliability,
        report.generality,
        report.locality,
        report.edit_performance,
        report.fluency,
        bundle.layer(),
        gain
    );
    if let Some((base_acc, edited_acc)) = general {
        println!("general ability (held-out): base {base_acc:.3}, edited {edited_acc:.3}");
    }
    println!("report: {}", report_path.display());
    Ok(())
}

// ── probe ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer to probe; all layers when omitted.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub swap_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct ProbeRow {
    layer: usize,
    probe_accuracy: f64,
    swap_improvement_rate: f64,
}

pub fn probe_cmd(args: &ProbeArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let model = load_model(&args.model)?;
    let world = FactWorld::load(&args.world)?;
    let probes = eval::build_probe_cases(&world, args.pairs, args.seed)?;
    let swaps = eval::build_swap_cases(&world, model.tokenizer(), args.swap_pairs, args.seed)?;

    let layers: Vec<usize> = match args.layer {
        Some(l) => {
            if l == 0 || l > model.config().n_layers {
                return Err(usage(format!(
                    "--layer {l} outside 1..={}",
                    model.config().n_layers
                )));
            }
            vec![l]
        }
        None => (1..=model.config().n_layers).collect(),
    };

    let mut rows = Vec::with_capacity(layers.len());
    for &layer in &layers {
        rows.push(ProbeRow {
            layer,
            probe_accuracy: eval::probe_accuracy(&model, &probes, layer)?,
            swap_improvement_rate: eval::kb_swap_experiment(&model, &swaps, layer)?,
        });
    }

    let json_path = args.out.join("probe_report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&rows)?)?;
    let tsv_path = args.out.join("probe.tsv");
    let mut tsv = String::from("layer\tprobe_accuracy\tswap_improvement_rate\n");
    for r in &rows {
        tsv.push_str(&format!("{}\t{}\t{}\n", r.layer, r.probe_accuracy, r.swap_improvement_rate));
    }
    std::fs::write(&tsv_path, tsv)?;

    let mut manifest = RunManifest::new("probe", serde_json::json!({
        "pairs": args.pairs,
        "swap_pairs": args.swap_pairs,
        "layer": args.layer,
    }));
    manifest.seed("probe", args.seed);
    manifest.input("model", &args.model);
    manifest.input("world", &args.world);
    manifest.output(&json_path).output(&tsv_path);
    manifest.write(&args.out)?;

    for r in &rows {
        println!(
            "layer {}: probe accuracy {:.3}, swap improvement rate {:.3}",
            r.layer, r.probe_accuracy, r.swap_improvement_rate
        );
    }
    Ok(())
}

// ── layer-select ────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct LayerSelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training dataset for the per-layer hypernetworks.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset that information gain is measured on.
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lambda_edit: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn layer_select(args: &LayerSelectArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let model = load_model(&args.model)?;
    let records = data::load_training(&args.data)?;
    let evals = data::load_eval(&args.eval_data)?;

    let train_args = TrainArgs {
        model: args.model.clone(),
        data: args.data.clone(),
        out: args.out.clone(),
        layer: None,
        preset: args.preset.clone(),
        config: args.config.clone(),
        threshold: None,
        seed: args.seed,
        lambda_edit: args.lambda_edit,
        max_epochs: args.max_epochs,
        batch_size: None,
        lr: args.lr,
        kind: None,
        list_presets: false,
    };
    let config = resolve_train_config(&train_args)?;

    let mut gains = Vec::new();
    for layer in 1..=model.config().n_layers {
        let outcome = train::train(&records, &model, layer, &config)?;
        let delta_i = eval::info_gain(&model, &outcome.hypernetwork, &evals, layer)?;
        println!("layer {layer}: information gain {delta_i:.4}");
        gains.push(eval::LayerGain { layer, delta_i });
    }
    let best = gains
        .iter()
        .max_by(|a, b| a.delta_i.partial_cmp(&b.delta_i).unwrap())
        .expect("at least one layer");

    let tsv_path = args.out.join("layer_select.tsv");
    let mut tsv = String::from("layer\tdelta_i\n");
    for g in &gains {
        tsv.push_str(&format!("{}\t{}\n", g.layer, g.delta_i));
    }
    std::fs::write(&tsv_path, tsv)?;
    let json_path = args.out.join("layer_select.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "gains": gains,
            "recommended_layer": best.layer,
        }))?,
    )?;

    let mut manifest = RunManifest::new("layer-select", serde_json::json!({
        "config": serde_json::to_value(&config)?,
    }));
    manifest.seed("train", config.seed);
    manifest.input("model", &args.model);
    manifest.input("data", &args.data);
    manifest.input("eval_data", &args.eval_data);
    manifest.output(&tsv_path).output(&json_path);
    manifest.write(&args.out)?;

    println!("recommended layer: {} (information gain {:.4})", best.layer, best.delta_i);
    Ok(())
}
