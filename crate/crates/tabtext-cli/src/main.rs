//! Pipeline driver: each subcommand reads and writes file artifacts in one
//! workspace directory, so runs compose as
//! synth-data -> serialize -> train-tokenizer -> pretrain -> finetune ->
//! attribute / evaluate / baseline -> compare.

mod artifacts;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use artifacts::{
    create_writer, load_config, model_name, open_reader, pretrained_name, read_json,
    records_name, require, vocab_name, write_json_pretty, write_manifest, MissingArtifact,
};
use tabtext::attribution::{
    attribute_sample, cohort_attribution, render_heat, AttributionRequest, CohortAttribution,
    CohortRecord, Quadrature, SampleAttribution,
};
use tabtext::eval::{
    evaluate, format_auc_ci, format_p, render_aligned_table, two_sample_ttest, write_roc_csv,
    MetricsJson,
};
use tabtext::gbdt::{
    fit, kfold_tune, write_tuning_csv, GbdtConfig, SearchSpace, TreeEnsemble, TuneStrategy,
};
use tabtext::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use tabtext::synth::{self, SplitManifest, SynthConfig};
use tabtext::tabular::{
    extract_features, parse_schema, read_records, serialize_dataset, write_records,
    SerializationVariant, SerializedRecord, TableSchema,
};
use tabtext::tokenizer::{
    map_tokens_to_variables, train_subword, VarSpan, Vocab, CLS, MASK, PAD, SEP, UNK,
};
use tabtext::train::{
    classification_scores, finetune, pretrain, FinetuneConfig, LabeledSequence, PretrainConfig,
};

#[derive(Parser)]
#[command(name = "tabtext", version, about = "Tabular records as text: a desk-scale pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Workspace directory where artifacts are read and written.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file; built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VariantTask {
    /// Serialization variant: values_only, original_columns,
    /// descriptive_columns, or descriptive_columns_text.
    #[arg(long)]
    variant: SerializationVariant,
    /// Prediction task: hospitalization, critical, or reattendance.
    #[arg(long)]
    task: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic ED-visit dataset with known ground truth.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Render the table into text records for one variant and task.
    Serialize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
    },
    /// Learn a subword vocabulary from the training records.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
    },
    /// Masked-language-model pretraining on unlabeled training records.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
    },
    /// Supervised fine-tuning with best-validation-AUC checkpointing.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
        /// Start from the pretrained checkpoint instead of random init.
        #[arg(long)]
        pretrained: bool,
    },
    /// Test-set AUC with a bootstrap confidence interval and ROC points.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
    },
    /// Integrated-gradients attributions: one sample report plus cohort means.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: VariantTask,
    },
    /// Gradient-boosted tree baseline on the raw tabular features.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Prediction task: hospitalization, critical, or reattendance.
        #[arg(long)]
        task: String,
    },
    /// Compare two models on the shared test set (bootstrap + Welch t-test).
    Compare {
        #[command(flatten)]
        common: Common,
        /// Prediction task: hospitalization, critical, or reattendance.
        #[arg(long)]
        task: String,
        /// First model: a serialization variant, or "baseline".
        #[arg(long)]
        a: String,
        /// Second model: a serialization variant, or "baseline".
        #[arg(long)]
        b: String,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::SynthData { common } => run_synth_data(common),
        Cmd::Serialize { common, sel } => run_serialize(common, sel),
        Cmd::TrainTokenizer { common, sel } => run_train_tokenizer(common, sel),
        Cmd::Pretrain { common, sel } => run_pretrain(common, sel),
        Cmd::Finetune {
            common,
            sel,
            pretrained,
        } => run_finetune(common, sel, pretrained),
        Cmd::Evaluate { common, sel } => run_evaluate(common, sel),
        Cmd::Attribute { common, sel } => run_attribute(common, sel),
        Cmd::Baseline { common, task } => run_baseline(common, task),
        Cmd::Compare { common, task, a, b } => run_compare(common, task, a, b),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        let code = if e.downcast_ref::<MissingArtifact>().is_some() {
            2
        } else {
            1
        };
        std::process::exit(code);
    }
}

fn check_task(task: &str) -> Result<()> {
    if synth::task_index(task).is_none() {
        bail!("unknown task {task:?}; expected one of {}", synth::TASKS.join(", "));
    }
    Ok(())
}

fn other_tasks(task: &str) -> Vec<String> {
    synth::TASKS
        .iter()
        .filter(|t| **t != task)
        .map(|t| t.to_string())
        .collect()
}

fn load_schema(path: &std::path::Path) -> Result<TableSchema> {
    let text = fs::read_to_string(path)?;
    Ok(parse_schema(&text)?)
}

fn run_synth_data(common: Common) -> Result<()> {
    let mut cfg: SynthConfig = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&common.out)?;
    let data = synth::generate(&cfg)?;

    let csv_path = common.out.join("dataset.csv");
    data.write_csv(create_writer(&csv_path)?)?;
    let schema_path = common.out.join("schema.toml");
    fs::write(&schema_path, synth::SCHEMA_TOML.trim_start())?;
    let split_path = common.out.join("split.json");
    write_json_pretty(&split_path, &data.split)?;

    #[derive(Serialize)]
    struct GeneratorInfo<'a> {
        config: &'a SynthConfig,
        coefficients: &'a synth::Coefficients,
        bayes_auc: [f64; 3],
    }
    let generator_path = common.out.join("generator.json");
    write_json_pretty(
        &generator_path,
        &GeneratorInfo {
            config: &cfg,
            coefficients: &data.coefficients,
            bayes_auc: data.bayes_auc,
        },
    )?;

    let n = data.visits.len();
    for (t, task) in synth::TASKS.iter().enumerate() {
        let rate = data.labels_for(t).iter().map(|&l| l as f64).sum::<f64>() / n as f64;
        println!(
            "{task}: prevalence {rate:.3}, achievable AUC {:.4}",
            data.bayes_auc[t]
        );
    }
    write_manifest(
        &common.out,
        "synth-data",
        "synth-data".into(),
        &cfg,
        Some(cfg.seed),
        &[],
        &[csv_path, schema_path, split_path, generator_path],
    )
}

fn run_serialize(common: Common, sel: VariantTask) -> Result<()> {
    check_task(&sel.task)?;
    fs::create_dir_all(&common.out)?;
    let schema_path = require(&common.out, "schema.toml", "synth-data")?;
    let csv_path = require(&common.out, "dataset.csv", "synth-data")?;
    let split_path = require(&common.out, "split.json", "synth-data")?;
    let schema = load_schema(&schema_path)?;
    let split: SplitManifest = read_json(&split_path)?;

    let (records, manifest) = serialize_dataset(
        open_reader(&csv_path)?,
        &schema,
        sel.variant,
        Some(&sel.task),
        &other_tasks(&sel.task),
    )?;
    let pick = |indices: &[u32]| -> Result<Vec<SerializedRecord>> {
        indices
            .iter()
            .map(|&i| {
                records
                    .get(i as usize)
                    .cloned()
                    .with_context(|| format!("split index {i} outside {} rows", records.len()))
            })
            .collect()
    };
    let train = pick(&split.train)?;
    let test = pick(&split.test)?;

    let train_path = common.out.join(records_name(sel.variant, &sel.task, "train"));
    let test_path = common.out.join(records_name(sel.variant, &sel.task, "test"));
    write_records(create_writer(&train_path)?, &train)?;
    write_records(create_writer(&test_path)?, &test)?;
    println!(
        "{}: {} train and {} test records (schema {})",
        sel.variant,
        train.len(),
        test.len(),
        &manifest.schema_hash[..12]
    );
    write_manifest(
        &common.out,
        &format!("serialize-{}-{}", sel.variant, sel.task),
        format!("serialize --variant {} --task {}", sel.variant, sel.task),
        &manifest,
        None,
        &[schema_path, csv_path, split_path],
        &[train_path, test_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TokenizerDoc {
    vocab_size: usize,
    split_digits: bool,
}

impl Default for TokenizerDoc {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            split_digits: false,
        }
    }
}

fn run_train_tokenizer(common: Common, sel: VariantTask) -> Result<()> {
    check_task(&sel.task)?;
    let doc: TokenizerDoc = load_config(&common.config)?;
    let train_path = require(
        &common.out,
        &records_name(sel.variant, &sel.task, "train"),
        "serialize",
    )?;
    let records = read_records(open_reader(&train_path)?)?;
    let vocab = train_subword(
        records.iter().map(|r| r.text.as_str()),
        doc.vocab_size,
        doc.split_digits,
    )?;
    let vocab_path = common.out.join(vocab_name(sel.variant));
    fs::write(&vocab_path, vocab.to_json())?;
    println!(
        "{}: learned {} ids ({} merges)",
        sel.variant,
        vocab.len(),
        vocab.merges().len()
    );
    write_manifest(
        &common.out,
        &format!("train-tokenizer-{}", sel.variant),
        format!("train-tokenizer --variant {} --task {}", sel.variant, sel.task),
        &doc,
        None,
        &[train_path],
        &[vocab_path],
    )
}

fn load_vocab(common: &Common, variant: SerializationVariant) -> Result<(PathBuf, Vocab)> {
    let path = require(&common.out, &vocab_name(variant), "train-tokenizer")?;
    let vocab = Vocab::from_json(&fs::read_to_string(&path)?)?;
    Ok((path, vocab))
}

fn load_labeled_records(
    common: &Common,
    sel: &VariantTask,
    split: &str,
) -> Result<(PathBuf, Vec<SerializedRecord>)> {
    let path = require(
        &common.out,
        &records_name(sel.variant, &sel.task, split),
        "serialize",
    )?;
    let records = read_records(open_reader(&path)?)?;
    Ok((path, records))
}

fn encode_ids(records: &[SerializedRecord], vocab: &Vocab, max_len: usize) -> Vec<Vec<u32>> {
    records
        .iter()
        .map(|r| vocab.encode(&r.text, max_len).ids)
        .collect()
}

fn labels_of(records: &[SerializedRecord]) -> Result<Vec<u8>> {
    records
        .iter()
        .map(|r| {
            r.label
                .as_ref()
                .map(|l| l.value)
                .context("records file lacks labels; rerun serialize with --task")
        })
        .collect()
}

fn write_step_logs(path: &std::path::Path, logs: &[tabtext::train::StepLog]) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainDoc {
    model: ModelConfig,
    pretrain: PretrainConfig,
}

fn run_pretrain(common: Common, sel: VariantTask) -> Result<()> {
    check_task(&sel.task)?;
    let mut doc: PretrainDoc = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        doc.model.seed = seed;
        doc.pretrain.seed = seed;
    }
    let (vocab_path, vocab) = load_vocab(&common, sel.variant)?;
    let (train_path, records) = load_labeled_records(&common, &sel, "train")?;
    doc.model.vocab = vocab.len();
    let corpus = encode_ids(&records, &vocab, doc.model.max_len);

    let mut model = Model::new(doc.model.clone())?;
    let logs = pretrain(&mut model, &corpus, &doc.pretrain)?;
    let last = logs.last().context("empty pretraining log")?;

    let ckpt_path = common.out.join(pretrained_name(sel.variant));
    save_checkpoint(create_writer(&ckpt_path)?, &model, last.step, Some(last.loss))?;
    let log_path = common.out.join(format!("pretrain-log-{}.jsonl", sel.variant));
    write_step_logs(&log_path, &logs)?;
    println!(
        "{}: {} steps, final masked-token loss {:.4}",
        sel.variant,
        last.step + 1,
        last.loss
    );
    write_manifest(
        &common.out,
        &format!("pretrain-{}", sel.variant),
        format!("pretrain --variant {} --task {}", sel.variant, sel.task),
        &doc,
        Some(doc.pretrain.seed),
        &[vocab_path, train_path],
        &[ckpt_path, log_path],
    )
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneDoc {
    model: ModelConfig,
    finetune: FinetuneConfig,
}

fn run_finetune(common: Common, sel: VariantTask, pretrained: bool) -> Result<()> {
    check_task(&sel.task)?;
    let mut doc: FinetuneDoc = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        doc.model.seed = seed;
        doc.finetune.seed = seed;
    }
    let (vocab_path, vocab) = load_vocab(&common, sel.variant)?;
    let (train_path, records) = load_labeled_records(&common, &sel, "train")?;
    doc.model.vocab = vocab.len();

    let mut inputs = vec![vocab_path, train_path];
    let model = if pretrained {
        let ckpt_path = require(&common.out, &pretrained_name(sel.variant), "pretrain")?;
        let ckpt = load_checkpoint(open_reader(&ckpt_path)?)?;
        inputs.push(ckpt_path);
        ckpt.model
    } else {
        Model::new(doc.model.clone())?
    };

    let labels = labels_of(&records)?;
    let data: Vec<LabeledSequence> = encode_ids(&records, &vocab, model.config.max_len)
        .into_iter()
        .zip(labels)
        .map(|(ids, label)| LabeledSequence { ids, label })
        .collect();

    let outcome = finetune(model, &data, &doc.finetune)?;
    let ckpt_path = common.out.join(model_name(sel.variant, &sel.task));
    save_checkpoint(
        create_writer(&ckpt_path)?,
        &outcome.model,
        outcome.best_step,
        Some(outcome.best_auc),
    )?;
    let log_path = common
        .out
        .join(format!("finetune-log-{}-{}.jsonl", sel.variant, sel.task));
    write_step_logs(&log_path, &outcome.history)?;
    println!(
        "{} / {}: best validation AUC {:.4} at step {}",
        sel.variant, sel.task, outcome.best_auc, outcome.best_step
    );
    write_manifest(
        &common.out,
        &format!("finetune-{}-{}", sel.variant, sel.task),
        format!(
            "finetune --variant {} --task {}{}",
            sel.variant,
            sel.task,
            if pretrained { " --pretrained" } else { "" }
        ),
        &doc,
        Some(doc.finetune.seed),
        &inputs,
        &[ckpt_path, log_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateDoc {
    bootstrap_b: usize,
    level: f64,
}

impl Default for EvaluateDoc {
    fn default() -> Self {
        Self {
            bootstrap_b: 1000,
            level: 0.95,
        }
    }
}

fn load_model(common: &Common, sel: &VariantTask) -> Result<(PathBuf, Model)> {
    let path = require(&common.out, &model_name(sel.variant, &sel.task), "finetune")?;
    let ckpt = load_checkpoint(open_reader(&path)?)?;
    Ok((path, ckpt.model))
}

fn run_evaluate(common: Common, sel: VariantTask) -> Result<()> {
    check_task(&sel.task)?;
    let doc: EvaluateDoc = load_config(&common.config)?;
    let seed = common.seed.unwrap_or(0);
    let (model_path, model) = load_model(&common, &sel)?;
    let (vocab_path, vocab) = load_vocab(&common, sel.variant)?;
    let (test_path, records) = load_labeled_records(&common, &sel, "test")?;
    let labels = labels_of(&records)?;
    let sequences = encode_ids(&records, &vocab, model.config.max_len);
    let scores = classification_scores(&model, &sequences)?;
    let result = evaluate(&scores, &labels, doc.bootstrap_b, doc.level, seed)?;

    let metrics = MetricsJson {
        task: sel.task.clone(),
        model: "encoder".into(),
        dataset_variant: sel.variant.to_string(),
        auc: result.auc,
        ci: result.ci,
        b: doc.bootstrap_b,
        seed,
    };
    let metrics_path = common
        .out
        .join(format!("metrics-{}-{}.json", sel.variant, sel.task));
    write_json_pretty(&metrics_path, &metrics)?;
    let roc_path = common.out.join(format!("roc-{}-{}.csv", sel.variant, sel.task));
    write_roc_csv(create_writer(&roc_path)?, &result.roc)?;
    println!(
        "{} / {}: AUC {}",
        sel.variant,
        sel.task,
        format_auc_ci(result.auc, result.ci)
    );
    write_manifest(
        &common.out,
        &format!("evaluate-{}-{}", sel.variant, sel.task),
        format!("evaluate --variant {} --task {}", sel.variant, sel.task),
        &doc,
        Some(seed),
        &[model_path, vocab_path, test_path],
        &[metrics_path, roc_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AttributeDoc {
    target: usize,
    n_steps: usize,
    quadrature: Quadrature,
    /// How many test records the cohort average draws on.
    sample_size: usize,
    /// Which test record gets the per-token report.
    sample_index: usize,
}

impl Default for AttributeDoc {
    fn default() -> Self {
        Self {
            target: 1,
            n_steps: 64,
            quadrature: Quadrature::RightEndpoint,
            sample_size: 100,
            sample_index: 0,
        }
    }
}

fn token_display(vocab: &Vocab, id: u32) -> String {
    match id {
        PAD => "[PAD]".into(),
        CLS => "[CLS]".into(),
        SEP => "[SEP]".into(),
        MASK => "[MASK]".into(),
        UNK => "[UNK]".into(),
        _ => vocab
            .token_bytes(id)
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_else(|| format!("[{id}]")),
    }
}

/// Tokenize a record and tag each token with the variable whose value span
/// covers it.
fn cohort_record(
    record: &SerializedRecord,
    vocab: &Vocab,
    max_len: usize,
) -> Result<CohortRecord> {
    let seq = vocab.encode(&record.text, max_len);
    let mut names: Vec<String> = Vec::new();
    let spans: Vec<VarSpan> = record
        .spans
        .iter()
        .map(|s| {
            let id = match names.iter().position(|n| n == &s.variable_id) {
                Some(i) => i,
                None => {
                    names.push(s.variable_id.clone());
                    names.len() - 1
                }
            };
            VarSpan {
                variable_id: id as u32,
                start: s.char_start,
                end: s.char_end,
            }
        })
        .collect();
    let assignment = map_tokens_to_variables(&seq, &record.text, &spans)?;
    Ok(CohortRecord {
        ids: seq.ids,
        variables: assignment
            .iter()
            .map(|v| v.map(|i| names[i as usize].clone()))
            .collect(),
    })
}

fn run_attribute(common: Common, sel: VariantTask) -> Result<()> {
    check_task(&sel.task)?;
    let doc: AttributeDoc = load_config(&common.config)?;
    let seed = common.seed.unwrap_or(0);
    let (model_path, model) = load_model(&common, &sel)?;
    let (vocab_path, vocab) = load_vocab(&common, sel.variant)?;
    let (test_path, records) = load_labeled_records(&common, &sel, "test")?;
    if records.is_empty() {
        bail!("no test records to attribute");
    }
    let request = AttributionRequest {
        target: doc.target,
        n_steps: doc.n_steps,
        quadrature: doc.quadrature,
    };
    let max_len = model.config.max_len;
    let cohort_records: Vec<CohortRecord> = records
        .iter()
        .map(|r| cohort_record(r, &vocab, max_len))
        .collect::<Result<_>>()?;
    let cohort = cohort_attribution(
        &model,
        &cohort_records,
        &request,
        doc.sample_size.min(cohort_records.len()),
        seed,
    )?;

    let idx = doc.sample_index;
    let sample_rec = cohort_records
        .get(idx)
        .with_context(|| format!("sample_index {idx} outside {} records", records.len()))?;
    let tokens: Vec<String> = sample_rec
        .ids
        .iter()
        .map(|&id| token_display(&vocab, id))
        .collect();
    let sample = attribute_sample(
        &model,
        &sample_rec.ids,
        &tokens,
        &sample_rec.variables,
        &request,
    )?;

    #[derive(Serialize)]
    struct AttributionReport<'a> {
        task: &'a str,
        dataset_variant: String,
        cohort: &'a CohortAttribution,
        sample_index: usize,
        sample: &'a SampleAttribution,
    }
    let report_path = common
        .out
        .join(format!("attributions-{}-{}.json", sel.variant, sel.task));
    write_json_pretty(
        &report_path,
        &AttributionReport {
            task: &sel.task,
            dataset_variant: sel.variant.to_string(),
            cohort: &cohort,
            sample_index: idx,
            sample: &sample,
        },
    )?;

    let mut ranked: Vec<(&String, f64)> =
        cohort.means.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    println!("cohort attribution means over {} records:", cohort.sample_count);
    for (name, mean) in ranked.iter().take(8) {
        println!("  {name:<16} {mean:+.4}");
    }
    println!("sample {idx} (p = {:.3}):", sample.prediction);
    println!("  {}", render_heat(&sample.tokens));
    write_manifest(
        &common.out,
        &format!("attribute-{}-{}", sel.variant, sel.task),
        format!("attribute --variant {} --task {}", sel.variant, sel.task),
        &doc,
        Some(seed),
        &[model_path, vocab_path, test_path],
        &[report_path],
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BaselineDoc {
    gbdt: GbdtConfig,
    tune: bool,
    k: usize,
    budget: usize,
    strategy: TuneStrategy,
    space: SearchSpace,
    bootstrap_b: usize,
    level: f64,
}

impl Default for BaselineDoc {
    fn default() -> Self {
        Self {
            gbdt: GbdtConfig::default(),
            tune: false,
            k: 5,
            budget: 16,
            strategy: TuneStrategy::RandomSearch,
            space: SearchSpace::default(),
            bootstrap_b: 1000,
            level: 0.95,
        }
    }
}

fn split_rows<T: Clone>(rows: &[T], indices: &[u32]) -> Result<Vec<T>> {
    indices
        .iter()
        .map(|&i| {
            rows.get(i as usize)
                .cloned()
                .with_context(|| format!("split index {i} outside {} rows", rows.len()))
        })
        .collect()
}

fn run_baseline(common: Common, task: String) -> Result<()> {
    check_task(&task)?;
    let mut doc: BaselineDoc = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        doc.gbdt.seed = seed;
    }
    let seed = doc.gbdt.seed;
    let schema_path = require(&common.out, "schema.toml", "synth-data")?;
    let csv_path = require(&common.out, "dataset.csv", "synth-data")?;
    let split_path = require(&common.out, "split.json", "synth-data")?;
    let schema = load_schema(&schema_path)?;
    let split: SplitManifest = read_json(&split_path)?;
    let (_, rows, labels) =
        extract_features(open_reader(&csv_path)?, &schema, &task, &other_tasks(&task))?;
    let train_x = split_rows(&rows, &split.train)?;
    let train_y = split_rows(&labels, &split.train)?;
    let test_x = split_rows(&rows, &split.test)?;
    let test_y = split_rows(&labels, &split.test)?;

    let mut outputs = Vec::new();
    let config = if doc.tune {
        let tuned = kfold_tune(
            &train_x,
            &train_y,
            &doc.space,
            doc.k,
            doc.budget,
            doc.gbdt.seed,
            doc.strategy,
        )?;
        let csv_out = common.out.join(format!("baseline-tuning-{task}.csv"));
        write_tuning_csv(create_writer(&csv_out)?, &tuned.table)?;
        outputs.push(csv_out);
        println!(
            "tuned over {} candidates: mean CV AUC {:.4}",
            tuned.table.len(),
            tuned.best_mean_auc
        );
        tuned.best
    } else {
        doc.gbdt.clone()
    };
    let fitted = fit(&train_x, &train_y, &config)?;
    let scores = fitted.ensemble.predict_all(&test_x)?;
    let result = evaluate(&scores, &test_y, doc.bootstrap_b, doc.level, seed)?;

    let ensemble_path = common.out.join(format!("baseline-{task}.json"));
    fs::write(&ensemble_path, fitted.ensemble.to_json())?;
    let metrics = MetricsJson {
        task: task.clone(),
        model: "gbdt".into(),
        dataset_variant: "tabular".into(),
        auc: result.auc,
        ci: result.ci,
        b: doc.bootstrap_b,
        seed,
    };
    let metrics_path = common.out.join(format!("baseline-metrics-{task}.json"));
    write_json_pretty(&metrics_path, &metrics)?;
    outputs.extend([ensemble_path, metrics_path]);
    println!(
        "baseline / {task}: AUC {}",
        format_auc_ci(result.auc, result.ci)
    );
    write_manifest(
        &common.out,
        &format!("baseline-{task}"),
        format!("baseline --task {task}"),
        &BaselineDoc { gbdt: config, ..doc },
        Some(seed),
        &[schema_path, csv_path, split_path],
        &outputs,
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareDoc {
    bootstrap_b: usize,
    level: f64,
}

impl Default for CompareDoc {
    fn default() -> Self {
        Self {
            bootstrap_b: 1000,
            level: 0.95,
        }
    }
}

/// Test-set scores and labels for one side of a comparison: either a
/// fine-tuned encoder named by its serialization variant, or "baseline".
fn side_scores(
    common: &Common,
    task: &str,
    name: &str,
) -> Result<(Vec<f64>, Vec<u8>, Vec<PathBuf>)> {
    if name == "baseline" {
        let ensemble_path = require(&common.out, &format!("baseline-{task}.json"), "baseline")?;
        let ensemble = TreeEnsemble::from_json(&fs::read_to_string(&ensemble_path)?)?;
        let schema_path = require(&common.out, "schema.toml", "synth-data")?;
        let schema = load_schema(&schema_path)?;
        let split_path = require(&common.out, "split.json", "synth-data")?;
        let split: SplitManifest = read_json(&split_path)?;
        let csv_path = require(&common.out, "dataset.csv", "synth-data")?;
        let (_, rows, labels) =
            extract_features(open_reader(&csv_path)?, &schema, task, &other_tasks(task))?;
        let test_x = split_rows(&rows, &split.test)?;
        let test_y = split_rows(&labels, &split.test)?;
        let scores = ensemble.predict_all(&test_x)?;
        Ok((scores, test_y, vec![ensemble_path, schema_path, split_path, csv_path]))
    } else {
        let variant: SerializationVariant = name
            .parse()
            .map_err(|e: String| anyhow::anyhow!("{e} (or \"baseline\")"))?;
        let sel = VariantTask {
            variant,
            task: task.to_string(),
        };
        let (model_path, model) = load_model(common, &sel)?;
        let (vocab_path, vocab) = load_vocab(common, variant)?;
        let (test_path, records) = load_labeled_records(common, &sel, "test")?;
        let labels = labels_of(&records)?;
        let sequences = encode_ids(&records, &vocab, model.config.max_len);
        let scores = classification_scores(&model, &sequences)?;
        Ok((scores, labels, vec![model_path, vocab_path, test_path]))
    }
}

fn run_compare(common: Common, task: String, a: String, b: String) -> Result<()> {
    check_task(&task)?;
    let doc: CompareDoc = load_config(&common.config)?;
    let seed = common.seed.unwrap_or(0);
    let (scores_a, labels_a, inputs_a) = side_scores(&common, &task, &a)?;
    let (scores_b, labels_b, mut inputs_b) = side_scores(&common, &task, &b)?;
    let mut inputs = inputs_a;
    inputs_b.retain(|p| !inputs.contains(p));
    inputs.append(&mut inputs_b);
    if labels_a != labels_b {
        bail!("the two models were scored against different test labels");
    }
    let eval_a = evaluate(&scores_a, &labels_a, doc.bootstrap_b, doc.level, seed)?;
    let eval_b = evaluate(&scores_b, &labels_b, doc.bootstrap_b, doc.level, seed)?;
    let cmp = two_sample_ttest(&eval_a.replicates, &eval_b.replicates)?;

    let headers = vec!["Task".to_string(), "Model".to_string(), "AUC (95% CI)".to_string()];
    let rows = vec![
        vec![task.clone(), a.clone(), format_auc_ci(eval_a.auc, eval_a.ci)],
        vec![task.clone(), b.clone(), format_auc_ci(eval_b.auc, eval_b.ci)],
    ];
    let table = render_aligned_table(&headers, &rows);
    let verdict = format!(
        "{} {} {} by {:.3} ({})",
        a,
        if cmp.mean_diff >= 0.0 { "outperforms" } else { "trails" },
        b,
        cmp.mean_diff.abs(),
        format_p(cmp.p)
    );
    let text = format!("{table}\n{verdict}\n");
    print!("{text}");

    let stem = format!("compare-{task}-{a}-vs-{b}");
    let text_path = common.out.join(format!("{stem}.txt"));
    fs::write(&text_path, &text)?;
    #[derive(Serialize)]
    struct CompareReport {
        task: String,
        a: MetricsJson,
        b: MetricsJson,
        mean_diff: f64,
        t: f64,
        p: f64,
        df: f64,
        formatted_p: String,
    }
    let metric = |name: &str, e: &tabtext::eval::EvalResult| MetricsJson {
        task: task.clone(),
        model: if name == "baseline" { "gbdt" } else { "encoder" }.into(),
        dataset_variant: name.to_string(),
        auc: e.auc,
        ci: e.ci,
        b: doc.bootstrap_b,
        seed,
    };
    let json_path = common.out.join(format!("{stem}.json"));
    write_json_pretty(
        &json_path,
        &CompareReport {
            task: task.clone(),
            a: metric(&a, &eval_a),
            b: metric(&b, &eval_b),
            mean_diff: cmp.mean_diff,
            t: cmp.t,
            p: cmp.p,
            df: cmp.df,
            formatted_p: format_p(cmp.p),
        },
    )?;
    write_manifest(
        &common.out,
        &stem,
        format!("compare --task {task} --a {a} --b {b}"),
        &doc,
        Some(seed),
        &inputs,
        &[text_path, json_path],
    )
}
