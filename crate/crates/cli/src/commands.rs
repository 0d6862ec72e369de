use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use promptcode::backbone::{pretrain_mlm, Backbone, Tokenizer};
use promptcode::corpus::{
    balance_binary, build_dialect_datasets, filter_by_length, label_counts, load_examples,
    save_examples, strip_comments, CodeSnippet, DatasetSplit, Label, TaskExample,
};
use promptcode::evalharness::{
    run_ablation, run_protocol, Datasets, Metrics, Protocol, ProtocolKind, RunSetup,
};
use promptcode::tuning::{zero_shot_apply, Checkpoint, ModelHashes, PromptModel};

use crate::config::{self, DialectSection, PrepareConfig, PretrainFile, RawSection, RunFile};
use crate::Failure;

pub struct Context {
    pub config: PathBuf,
    pub root: PathBuf,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn write_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<PathBuf, Failure> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Input(e.into()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

fn input_error(key: &str, path: &Path) -> Failure {
    Failure::Input(anyhow!("{key}: file not found: {}", path.display()))
}

fn partition_file(prefix: &Path, partition: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(format!(".{partition}.jsonl"));
    PathBuf::from(name)
}

fn print_counts(language: &str, split: &DatasetSplit) {
    for (name, part) in split.partitions() {
        let (pos, neg) = label_counts(part);
        println!(
            "{language} {name}: {} examples ({pos} positive, {neg} negative)",
            part.len()
        );
    }
}

fn write_split(ctx: &Context, language: &str, split: &DatasetSplit) -> Result<(), Failure> {
    split.validate()?;
    let prefix = ctx.path(&Path::new("data").join(language));
    fs::create_dir_all(prefix.parent().expect("data dir"))?;
    for (name, part) in split.partitions() {
        save_examples(&partition_file(&prefix, name), part)?;
    }
    print_counts(language, split);
    Ok(())
}

pub fn prepare_data(ctx: &Context) -> Result<(), Failure> {
    let cfg: PrepareConfig = config::load(&ctx.config)?;
    match (&cfg.dialect, &cfg.raw) {
        (Some(d), None) => {
            let data = build_dialect_datasets(&d.spec(), &d.layout)?;
            write_split(ctx, "dialectA", &data.dialect_a)?;
            write_split(ctx, "dialectB", &data.dialect_b)
        }
        (None, Some(raw)) => prepare_raw(ctx, raw),
        _ => Err(Failure::Input(anyhow!(
            "config needs exactly one of [dialect] or [raw]"
        ))),
    }
}

fn prepare_raw(ctx: &Context, raw: &RawSection) -> Result<(), Failure> {
    let input = ctx.path(&raw.input);
    if !input.exists() {
        return Err(input_error("raw.input", &input));
    }
    let mut examples = load_examples(&input)?;
    if raw.strip_comments {
        for e in &mut examples {
            e.text_a = strip_comments(&e.text_a);
            if e.task.text_b_is_code() {
                e.text_b = strip_comments(&e.text_b);
            }
        }
    }
    if raw.min_tokens.is_some() || raw.max_tokens.is_some() {
        let tokenizer = Tokenizer::build(
            examples
                .iter()
                .flat_map(|e| [e.text_a.as_str(), e.text_b.as_str()]),
            &[],
        );
        examples = filter_by_length(
            &examples,
            &tokenizer,
            raw.min_tokens
                .unwrap_or(promptcode::corpus::DEFAULT_MIN_TOKENS),
            raw.max_tokens
                .unwrap_or(promptcode::corpus::DEFAULT_MAX_TOKENS),
        )?;
    }
    let fractions = raw.validation_fraction + raw.test_fraction;
    if !(0.0..1.0).contains(&fractions) || raw.validation_fraction < 0.0 || raw.test_fraction < 0.0
    {
        return Err(Failure::Input(anyhow!(
            "raw.validation_fraction + raw.test_fraction must lie in [0, 1)"
        )));
    }
    let balanced = balance_binary(&examples, raw.seed)?;
    let language = raw
        .language
        .clone()
        .or_else(|| balanced.first().map(|e| e.language.clone()))
        .unwrap_or_else(|| "raw".to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(raw.seed);
    let mut by_label = |label: Label| {
        let mut v: Vec<TaskExample> = balanced
            .iter()
            .filter(|e| e.label == label)
            .cloned()
            .collect();
        v.shuffle(&mut rng);
        v
    };
    let pos = by_label(Label::Positive);
    let neg = by_label(Label::Negative);
    let n = pos.len();
    let n_test = (n as f64 * raw.test_fraction).round() as usize;
    let n_val = (n as f64 * raw.validation_fraction).round() as usize;
    let cut = |from: usize, to: usize| {
        pos[from..to]
            .iter()
            .zip(&neg[from..to])
            .flat_map(|(p, q)| [p.clone(), q.clone()])
            .collect::<Vec<_>>()
    };
    let split = DatasetSplit {
        train: cut(n_test + n_val, n),
        validation: cut(n_test, n_test + n_val),
        test: cut(0, n_test),
        source_language: language.clone(),
        target_language: language.clone(),
    };
    write_split(ctx, &language, &split)
}

fn load_snippets(path: &Path) -> Result<Vec<CodeSnippet>, Failure> {
    let text = fs::read_to_string(path).map_err(|_| input_error("corpus", path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::Input(anyhow!("corpus line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    config: &'a promptcode::backbone::PretrainConfig,
    encoder: promptcode::backbone::EncoderConfig,
    corpus_size: usize,
    initial_heldout_loss: f64,
    final_heldout_loss: f64,
    backbone_hash: String,
    backbone: String,
}

pub fn pretrain(ctx: &Context) -> Result<(), Failure> {
    let cfg: PretrainFile = config::load(&ctx.config)?;
    let corpus = match (&cfg.corpus, &cfg.dialect) {
        (Some(p), None) => load_snippets(&ctx.path(p))?,
        (None, Some(d)) => dialect_pretraining(d)?,
        _ => {
            return Err(Failure::Input(anyhow!(
                "config needs exactly one of `corpus` or [dialect]"
            )))
        }
    };
    let out = pretrain_mlm(&corpus, cfg.encoder.config(), &cfg.pretrain)?;
    let target = ctx.path(&cfg.output);
    if let Some(dir) = target.parent() {
        fs::create_dir_all(dir)?;
    }
    out.backbone.save(&target)?;
    let hash = out.backbone.parameter_hash();
    println!("initial held-out MLM loss: {:.6}", out.initial_heldout_loss);
    println!("final held-out MLM loss:   {:.6}", out.final_heldout_loss);
    println!("backbone hash: {hash}");
    println!("wrote {}", target.display());
    let record = PretrainRecord {
        config: &cfg.pretrain,
        encoder: out.backbone.config().clone(),
        corpus_size: corpus.len(),
        initial_heldout_loss: out.initial_heldout_loss,
        final_heldout_loss: out.final_heldout_loss,
        backbone_hash: hash,
        backbone: target.display().to_string(),
    };
    let mut rel = cfg.output.clone();
    rel.set_extension("json");
    ctx.write_json(&rel, &record)?;
    Ok(())
}

fn dialect_pretraining(d: &DialectSection) -> Result<Vec<CodeSnippet>, Failure> {
    Ok(build_dialect_datasets(&d.spec(), &d.layout)?.pretraining)
}

fn load_backbone(ctx: &Context, rel: &Path) -> Result<Backbone, Failure> {
    let path = ctx.path(rel);
    if !path.exists() {
        return Err(input_error("backbone", &path));
    }
    Ok(Backbone::load(&path)?)
}

/// Reads whichever partition files exist under `prefix`.
fn load_split(ctx: &Context, key: &str, prefix: &Path) -> Result<DatasetSplit, Failure> {
    let prefix = ctx.path(prefix);
    let mut split = DatasetSplit::default();
    let mut found = false;
    for (name, slot) in [
        ("train", &mut split.train),
        ("validation", &mut split.validation),
        ("test", &mut split.test),
    ] {
        let file = partition_file(&prefix, name);
        if file.exists() {
            *slot = load_examples(&file)?;
            found = true;
        }
    }
    if !found {
        return Err(Failure::Input(anyhow!(
            "{key}: no partition files under {}",
            prefix.display()
        )));
    }
    Ok(split)
}

fn load_datasets(ctx: &Context, cfg: &RunFile) -> Result<Datasets, Failure> {
    Ok(Datasets {
        source: load_split(ctx, "data.source", &cfg.data.source)?,
        target: match &cfg.data.target {
            Some(t) => Some(load_split(ctx, "data.target", t)?),
            None => None,
        },
    })
}

pub fn train(ctx: &Context) -> Result<(), Failure> {
    let cfg: RunFile = config::load(&ctx.config)?;
    let backbone = load_backbone(ctx, &cfg.backbone)?;
    let datasets = load_datasets(ctx, &cfg)?;
    let (mut record, model) = run_protocol(&cfg.protocol, &datasets, &backbone, &cfg.setup)?;
    let run_dir = PathBuf::from("runs").join(&record.run_id);
    let ck_rel = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| run_dir.join("checkpoint.bin"));
    let ck_epoch = record.target_best_epoch.unwrap_or(record.source_best_epoch);
    let checkpoint = Checkpoint::capture(
        &model,
        ck_epoch,
        record.source_validation_accuracy,
        cfg.setup
            .train
            .trainable_sets
            .contains(&promptcode::tuning::TrainableSet::Backbone),
    );
    if checkpoint.hash() != record.checkpoint_hash {
        return Err(Failure::Invariant(anyhow!(
            "final model differs from the selected checkpoint"
        )));
    }
    let ck_path = ctx.path(&ck_rel);
    if let Some(dir) = ck_path.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint.save(&ck_path)?;
    record
        .artifacts
        .insert("checkpoint".into(), ck_rel.display().to_string());
    record
        .artifacts
        .insert("backbone".into(), cfg.backbone.display().to_string());
    let path = ctx.write_json(&run_dir.join("record.json"), &record)?;
    println!("run {}", record.run_id);
    println!(
        "source validation accuracy: {:.4} (epoch {})",
        record.source_validation_accuracy, record.source_best_epoch
    );
    println!(
        "{} test accuracy: {:.4} ({} examples)",
        record.protocol.target_language, record.metrics.accuracy, record.metrics.test_size
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    run_id: String,
    protocol: Protocol,
    setup: RunSetup,
    checkpoint: String,
    checkpoint_hash: String,
    backbone_hash: String,
    metrics: Metrics,
    hashes: ModelHashes,
}

pub fn eval(ctx: &Context) -> Result<(), Failure> {
    let cfg: RunFile = config::load(&ctx.config)?;
    cfg.protocol.validate()?;
    let ck_rel = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::Input(anyhow!("checkpoint: required for eval")))?;
    let ck_path = ctx.path(&ck_rel);
    if !ck_path.exists() {
        return Err(input_error("checkpoint", &ck_path));
    }
    let backbone = load_backbone(ctx, &cfg.backbone)?;
    let backbone_hash = backbone.parameter_hash();
    let datasets = load_datasets(ctx, &cfg)?;
    let target = match (&datasets.target, cfg.protocol.kind) {
        (Some(t), _) => t,
        (None, ProtocolKind::Monolingual) => &datasets.source,
        (None, _) => return Err(Failure::Input(anyhow!("data.target: missing"))),
    };
    if target.test.is_empty() {
        return Err(promptcode::Error::MissingSplit("target test".into()).into());
    }
    let mut model = PromptModel::new(
        backbone,
        cfg.setup.template.clone(),
        &cfg.setup.verbalizer,
        &cfg.setup.prompt_init,
        cfg.setup.prompt_seed,
    )?;
    let checkpoint = Checkpoint::load(&ck_path, &model)?;
    checkpoint.restore(&mut model)?;
    let before = model.parameter_hash();
    let predictions = zero_shot_apply(&model, &target.test)?;
    if model.parameter_hash() != before {
        return Err(Failure::Invariant(anyhow!(
            "parameters changed during evaluation"
        )));
    }
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let gold: Vec<Label> = target.test.iter().map(|e| e.label).collect();
    let metrics = Metrics::compute(&labels, &gold)?;
    let checkpoint_hash = checkpoint.hash();
    let run_id = format!("eval-{}", &checkpoint_hash[..16]);
    let record = EvalRecord {
        run_id: run_id.clone(),
        protocol: cfg.protocol.clone(),
        setup: cfg.setup.clone(),
        checkpoint: ck_rel.display().to_string(),
        checkpoint_hash,
        backbone_hash,
        metrics,
        hashes: model.hashes(),
    };
    let path = ctx.write_json(
        &PathBuf::from("evals").join(format!("{run_id}.json")),
        &record,
    )?;
    println!(
        "{} test accuracy: {:.4} ({} examples)",
        cfg.protocol.target_language, record.metrics.accuracy, record.metrics.test_size
    );
    println!("wrote {}", path.display());
    Ok(())
}

pub fn ablate(ctx: &Context) -> Result<(), Failure> {
    let cfg: RunFile = config::load(&ctx.config)?;
    let grid = cfg
        .grid
        .clone()
        .ok_or_else(|| Failure::Input(anyhow!("grid: required for ablate")))?;
    grid.validate()?;
    let backbone = load_backbone(ctx, &cfg.backbone)?;
    let base = load_datasets(ctx, &cfg)?;
    let mut per_language = BTreeMap::new();
    for lang in &grid.source_languages {
        let data = if *lang == cfg.protocol.source_language {
            base.clone()
        } else {
            let prefix = cfg.data.sources.get(lang).ok_or_else(|| {
                Failure::Input(anyhow!("data.sources.{lang}: no dataset for this language"))
            })?;
            Datasets {
                source: load_split(ctx, &format!("data.sources.{lang}"), prefix)?,
                target: base.target.clone(),
            }
        };
        per_language.insert(lang.clone(), data);
    }
    let outcome = run_ablation(&grid, &cfg.protocol, &per_language, &backbone, &cfg.setup)?;
    let dir = PathBuf::from("ablations");
    for record in &outcome.records {
        ctx.write_json(&dir.join(format!("{}.json", record.run_id)), record)?;
    }
    let summary = ctx.path(&dir.join("summary.tsv"));
    fs::write(&summary, &outcome.summary)?;
    print!("{}", outcome.summary);
    println!(
        "wrote {} records and {}",
        outcome.records.len(),
        summary.display()
    );
    Ok(())
}
