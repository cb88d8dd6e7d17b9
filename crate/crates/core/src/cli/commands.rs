use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{from_value, load_json_file, merge_json, resolve_config};
use super::manifest::ManifestBuilder;
use super::{AblateArgs, CliError, CliResult, EvalArgs, GenArgs, TrainArgs};
use crate::data::{
    dataset_paths, generate_synthetic, load_dataset, save_dataset, zero_shot_triplets, Dataset,
    SyntheticConfig, TripletType,
};
use crate::error::{Error, Result};
use crate::losses::{argmax, LabelDistribution};
use crate::metrics::{evaluate, EvalResult};
use crate::mining::{impute_over, refine_label};
use crate::model::forward;
use crate::taxonomy::RelationVocabulary;
use crate::trainer::{
    label_split, log_to_csv, run_ablation, train as train_model, AblationOutcome, AblationRow,
    Checkpoint, TrainConfig, ABLATION_HEADER,
};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn to_pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializes") + "\n"
}

fn profile(name: &str) -> CliResult<TrainConfig> {
    TrainConfig::profile(name)
        .ok_or_else(|| CliError::Usage(format!("unknown profile {name:?} (expected paper or desk)")))
}

fn require_dataset(base: &Path) -> CliResult<()> {
    if dataset_paths(base).header.exists() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::Dataset(format!(
            "no dataset at {} (run `relmine gen` first)",
            base.display()
        ))))
    }
}

pub(super) fn gen(args: &GenArgs, argv: Vec<String>) -> CliResult<()> {
    let config: SyntheticConfig = resolve_config(&SyntheticConfig::default(), args.config.as_deref(), &args.sets)?;
    config.validate()?;
    let mut manifest = ManifestBuilder::new("gen", argv, args.config.as_deref());
    let bench = generate_synthetic(&config)?;
    create_dir(&args.out)?;

    let mut artifacts = Vec::new();
    for (name, ds) in [("train", &bench.train), ("test", &bench.test)] {
        let base = args.out.join(name);
        save_dataset(ds, &base)?;
        let p = dataset_paths(&base);
        artifacts.extend([p.header, p.body, p.embeddings, p.oracle]);
    }
    let zs_path = args.out.join("zero_shot.json");
    write(&zs_path, to_pretty(&zero_shot_json(&bench.zero_shot_types, &bench.train)))?;
    let cfg_path = args.out.join("config.json");
    write(&cfg_path, to_pretty(&config))?;
    artifacts.extend([zs_path, cfg_path]);

    for a in &artifacts {
        manifest.artifact(a);
    }
    manifest.manifest.config = serde_json::to_value(&config).expect("serializes");
    manifest.manifest.seed = Some(config.seed);
    manifest.finish(&args.out)?;
    println!(
        "wrote {} train pairs, {} test pairs, {} zero-shot types to {}",
        bench.train.num_pairs(),
        bench.test.num_pairs(),
        bench.zero_shot_types.len(),
        args.out.display()
    );
    Ok(())
}

fn zero_shot_json(types: &BTreeSet<TripletType>, ds: &Dataset) -> Value {
    let class = |c: usize| ds.object_class_names.get(c).cloned().unwrap_or_default();
    Value::Array(
        types
            .iter()
            .map(|t| {
                json!({
                    "subject_class": class(t.subject_class),
                    "predicate": ds.vocabulary.name(t.predicate_id).unwrap_or(""),
                    "object_class": class(t.object_class),
                })
            })
            .collect(),
    )
}

fn config_echo(c: &TrainConfig) -> String {
    format!(
        "batch_size={} learning_rate={} momentum={} warmup_iterations={} refinement_iterations={} mixup.alpha={}",
        c.batch_size, c.learning_rate, c.momentum, c.warmup_iterations, c.refinement_iterations, c.mixup.alpha
    )
}

pub(super) fn train(args: &TrainArgs, argv: Vec<String>) -> CliResult<()> {
    let config: TrainConfig = resolve_config(&profile(&args.profile)?, args.config.as_deref(), &args.sets)?;
    config.validate()?;
    println!("config: {}", config_echo(&config));
    create_dir(&args.out)?;
    let cfg_path = args.out.join("config.json");
    write(&cfg_path, to_pretty(&config))?;
    if args.dry_run {
        return Ok(());
    }

    let (train_base, val_base) = (args.data.join("train"), args.data.join("test"));
    require_dataset(&train_base)?;
    require_dataset(&val_base)?;
    let mut manifest = ManifestBuilder::new("train", argv, args.config.as_deref());
    manifest.dataset("train", &train_base)?;
    manifest.dataset("val", &val_base)?;
    let train_set = load_dataset(&train_base)?.without_oracle();
    let val = load_dataset(&val_base)?;

    let (checkpoint, log) = train_model(&train_set, &val, &config)?;
    let ckpt_path = args.out.join("checkpoint.rmck");
    checkpoint.save(&ckpt_path)?;
    let log_path = args.out.join("train_log.csv");
    write(&log_path, log_to_csv(&log))?;

    for p in [&cfg_path, &ckpt_path, &log_path] {
        manifest.artifact(p);
    }
    manifest.manifest.config = serde_json::to_value(&config).expect("serializes");
    manifest.manifest.seed = Some(config.seed);
    manifest.finish(&args.out)?;
    if let Some(last) = log.last() {
        println!(
            "iteration {}: val mR@50 {:.4} R@50 {:.4}",
            last.iteration, last.eval.mean_recall[1], last.eval.recall[1]
        );
    }
    Ok(())
}

/// Zero-shot types of `eval` relative to the sibling `train` dataset, if there is one.
fn zero_shot_for(data: &Path, eval: &Dataset) -> Result<BTreeSet<TripletType>> {
    let base = data.join("train");
    if !dataset_paths(&base).header.exists() {
        return Ok(BTreeSet::new());
    }
    zero_shot_triplets(&load_dataset(&base)?, eval)
}

fn write_eval_csvs(dir: &Path, result: &EvalResult, vocabulary: &RelationVocabulary) -> Result<Vec<PathBuf>> {
    let files = [
        ("metrics.csv", result.to_csv()),
        ("per_class.csv", result.per_class_csv(vocabulary)),
        ("subset.csv", result.subset_csv()),
    ];
    files
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            write(&path, text).map(|_| path)
        })
        .collect()
}

pub(super) fn eval(args: &EvalArgs, argv: Vec<String>) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let base = args.data.join(&args.split);
    require_dataset(&base)?;
    let mut manifest = ManifestBuilder::new("eval", argv, None);
    manifest.dataset(&args.split, &base)?;
    let dataset = load_dataset(&base)?;
    checkpoint.check_compatible(&dataset)?;
    let zs = zero_shot_for(&args.data, &dataset)?;
    create_dir(&args.out)?;

    let result = evaluate(&checkpoint.params, &dataset, &zs);
    for p in write_eval_csvs(&args.out, &result, &dataset.vocabulary)? {
        manifest.artifact(&p);
    }
    if args.dump_imputed {
        let path = args.out.join("imputed.jsonl");
        write(&path, dump_imputed(&checkpoint, &dataset)?)?;
        manifest.artifact(&path);
    }
    if let Some(image_id) = &args.export_dot {
        let path = args.out.join(format!("scene_{}.dot", sanitize(image_id)));
        write(&path, export_dot(&checkpoint, &dataset, image_id)?)?;
        manifest.artifact(&path);
    }
    manifest.manifest.config = serde_json::to_value(&checkpoint.config).expect("serializes");
    manifest.manifest.seed = Some(checkpoint.config.seed);
    manifest.finish(&args.out)?;
    print!("{}", result.to_csv());
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn named(dist: &LabelDistribution, vocabulary: &RelationVocabulary) -> serde_json::Map<String, Value> {
    dist.probs()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, p)| (vocabulary.name(i).unwrap_or("?").to_string(), json!(p)))
        .collect()
}

/// One JSON line per pair annotated outside the checkpoint's training labels.
fn dump_imputed(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<String> {
    let (train_labels, holdout) = label_split(&dataset.vocabulary, &checkpoint.config);
    let mut out = String::new();
    for r in dataset.pair_refs() {
        let pair = dataset.pair(r);
        if !holdout.contains(&pair.predicate_id) {
            continue;
        }
        let x = pair.embedding_f64();
        let imputed = impute_over(&checkpoint.params, &x, &train_labels, checkpoint.config.impute_mode)?;
        let annotated = LabelDistribution::one_hot(dataset.vocabulary.len(), pair.predicate_id);
        let refined = refine_label(&annotated, &imputed)?;
        let line = json!({
            "image_id": dataset.images[r.image_index].image_id,
            "pair_index": r.pair_index,
            "annotated": dataset.vocabulary.name(pair.predicate_id),
            "imputed": named(&imputed, &dataset.vocabulary),
            "refined": named(&refined, &dataset.vocabulary),
        });
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph: objects as nodes, each annotated pair as an edge labelled with
/// the top predicted predicate and its annotation.
fn export_dot(checkpoint: &Checkpoint, dataset: &Dataset, image_id: &str) -> Result<String> {
    let image = dataset
        .images
        .iter()
        .find(|i| i.image_id == image_id)
        .ok_or_else(|| Error::Dataset(format!("no image with id {image_id:?}")))?;
    let vocab = &dataset.vocabulary;
    let mut out = format!("digraph \"{}\" {{\n", dot_escape(image_id));
    for o in &image.objects {
        let class = dataset.object_class_names.get(o.class_id).map_or("?", String::as_str);
        let _ = writeln!(out, "  o{} [label=\"{}#{}\"];", o.id, dot_escape(class), o.id);
    }
    for pair in &image.pairs {
        let top = argmax(&forward(&checkpoint.params, &pair.embedding_f64())?);
        let _ = writeln!(
            out,
            "  o{} -> o{} [label=\"{}\", tooltip=\"annotated: {}\"];",
            pair.subject_id,
            pair.object_id,
            dot_escape(vocab.name(top).unwrap_or("?")),
            dot_escape(vocab.name(pair.predicate_id).unwrap_or("?"))
        );
    }
    out.push_str("}\n");
    Ok(out)
}

enum GridEntry {
    Ready(AblationRow),
    Invalid { name: String, hash: String, message: String },
}

fn build_grid(args: &AblateArgs) -> CliResult<Vec<GridEntry>> {
    let grid = load_json_file(&args.grid)?;
    let Value::Array(rows) = grid else {
        return Err(CliError::Usage(format!("{}: grid must be a JSON array", args.grid.display())));
    };
    let mut base = serde_json::to_value(profile(&args.profile)?).expect("serializes");
    for s in &args.sets {
        super::config::apply_set(&mut base, s)?;
    }
    let mut entries = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let Value::Object(mut overrides) = row else {
            return Err(CliError::Usage(format!("grid row {i} is not an object")));
        };
        let name = match overrides.remove("name") {
            Some(Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => format!("row{i}"),
        };
        let mut value = base.clone();
        merge_json(&mut value, Value::Object(overrides));
        let built: CliResult<TrainConfig> = from_value(value.clone());
        entries.push(match built.and_then(|c| c.validate().map(|_| c).map_err(CliError::from)) {
            Ok(config) => GridEntry::Ready(AblationRow::new(name, config)),
            Err(e) => GridEntry::Invalid {
                name,
                hash: crate::taxonomy::hex_digest(value.to_string().as_bytes())[..16].to_string(),
                message: e.to_string(),
            },
        });
    }
    Ok(entries)
}

/// Completed rows of a previous ablation.csv, keyed by config hash.
fn completed_rows(path: &Path) -> HashMap<String, String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return HashMap::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut cells = line.splitn(4, ',');
            let hash = cells.next()?;
            let _name = cells.next()?;
            (cells.next()? == "ok").then(|| (hash.to_string(), line.to_string()))
        })
        .collect()
}

pub(super) fn ablate(args: &AblateArgs, argv: Vec<String>) -> CliResult<()> {
    let entries = build_grid(args)?;
    let (train_base, test_base) = (args.data.join("train"), args.data.join("test"));
    require_dataset(&train_base)?;
    require_dataset(&test_base)?;
    let mut manifest = ManifestBuilder::new("ablate", argv, Some(&args.grid));
    manifest.dataset("train", &train_base)?;
    manifest.dataset("test", &test_base)?;
    let train_set = load_dataset(&train_base)?.without_oracle();
    let test = load_dataset(&test_base)?;
    create_dir(&args.out)?;
    let csv_path = args.out.join("ablation.csv");
    let done = if args.resume { completed_rows(&csv_path) } else { HashMap::new() };

    let pending: Vec<AblationRow> = entries
        .iter()
        .filter_map(|e| match e {
            GridEntry::Ready(row) if !done.contains_key(&row.config.hash()) => Some(row.clone()),
            _ => None,
        })
        .collect();
    let outcomes: BTreeMap<String, AblationOutcome> = run_ablation(&pending, &train_set, &test, &test)
        .into_iter()
        .map(|o| (o.config_hash.clone(), o))
        .collect();

    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    let mut configs = Vec::new();
    for entry in &entries {
        match entry {
            GridEntry::Ready(row) => {
                let hash = row.config.hash();
                configs.push(json!({"name": row.name, "hash": hash, "config": row.config}));
                if let Some(line) = done.get(&hash) {
                    csv.push_str(line);
                } else {
                    let outcome = &outcomes[&hash];
                    csv.push_str(&outcome.csv_row());
                    if let Ok(result) = &outcome.result {
                        let dir = args.out.join("rows").join(&hash);
                        create_dir(&dir)?;
                        write(&dir.join("config.json"), to_pretty(&row.config))?;
                        for p in write_eval_csvs(&dir, result, &test.vocabulary)? {
                            manifest.artifact(&p);
                        }
                    }
                }
            }
            GridEntry::Invalid { name, hash, message } => {
                let failed = AblationOutcome {
                    name: name.clone(),
                    config_hash: hash.clone(),
                    config: TrainConfig::default(),
                    result: Err(message.clone()),
                };
                configs.push(json!({"name": name, "hash": hash, "error": message}));
                csv.push_str(&failed.csv_row());
            }
        }
        csv.push('\n');
    }
    write(&csv_path, &csv)?;
    manifest.artifact(&csv_path);
    manifest.manifest.config = Value::Array(configs);
    manifest.finish(&args.out)?;
    print!("{csv}");
    Ok(())
}
