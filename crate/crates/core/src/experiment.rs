//! Config-driven end-to-end experiment: corpus, split, vocabulary, every
//! model variant, evaluation on the shared validation split, and reports.
//!
//! A run writes everything under one fresh directory
//! `<output_dir>/<UTC timestamp>[-n]`:
//!
//! ```text
//! config.toml     resolved configuration
//! vocab.txt       vocabulary built from the training split
//! train.csv       training split
//! val.csv         validation split
//! log.jsonl       one line per epoch per trained model
//! metrics.json    quality results only (deterministic for fixed seeds)
//! timing.json     training times
//! report.json     full comparison report
//! report.md       the same as markdown tables
//! variants/<slug> checkpoint plus vocab.txt for each variant
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    encode_records, generate_synthetic, load_csv, save_csv, LabeledCorpus, Record, SyntheticConfig,
};
use crate::ensemble::{
    is_ensemble_checkpoint, load_ensemble, predict_ensemble, save_ensemble,
    train_ensemble_with_log, EnsembleConfig, EnsembleModel, Voting,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_report, confusion_matrix, metrics, ComparisonReport, MetricGap, MetricsReport,
    RunSummary, TimingRecord,
};
use crate::model::{load_checkpoint, save_checkpoint, ClassifierModel, MaskingPolicy, ModelConfig};
use crate::tokenizer::{EncodedExample, Vocabulary};
use crate::training::{
    accuracy, pretrain_mlm, split_indices, train_with_log, EpochRecord, TrainConfig,
};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Exactly one of `path` and `synthetic`. A relative `path` is resolved
/// against the config file's directory by [`load_config`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub max_vocab: usize,
    pub min_frequency: usize,
    pub max_seq_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            max_vocab: 5000,
            min_frequency: 1,
            max_seq_len: 64,
        }
    }
}

/// Width settings shared by every variant. Vocabulary size, class count and
/// sequence length come from the data and tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(1, 2);
        ModelSection {
            hidden_dim: desk.hidden_dim,
            num_heads: desk.num_heads,
            ff_dim: desk.ff_dim,
            init_seed: desk.init_seed,
            init_scale: desk.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub shared_init: bool,
    /// Defaults to `train.shuffle_seed + i` for member `i`.
    pub member_shuffle_seeds: Option<Vec<u64>>,
    pub voting: Voting,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            shared_init: true,
            member_shuffle_seeds: None,
            voting: Voting::Majority,
        }
    }
}

/// Masked-language-model phase run on each variant's initial weights before
/// fine-tuning. Off when `epochs` is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = MaskingPolicy::default();
        PretrainSection {
            epochs: 0,
            select_rate: p.select_rate,
            mask_rate: p.mask_rate,
            random_rate: p.random_rate,
            keep_rate: p.keep_rate,
        }
    }
}

impl PretrainSection {
    pub fn policy(&self) -> MaskingPolicy {
        MaskingPolicy {
            select_rate: self.select_rate,
            mask_rate: self.mask_rate,
            random_rate: self.random_rate,
            keep_rate: self.keep_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Single,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub kind: VariantKind,
    /// Depth of a single model, or of each member (default 1).
    pub num_layers: Option<usize>,
    pub n_members: Option<usize>,
    /// Skipped unless optional variants are requested.
    #[serde(default)]
    pub optional: bool,
}

impl Variant {
    pub fn layers(&self) -> usize {
        self.num_layers.unwrap_or(1)
    }

    pub fn slug(&self) -> String {
        let slug: String = self
            .name
            .chars()
            .map(|c| {
                if c.is_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect();
        slug.trim_matches('-').to_string()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(
                    "corpus needs exactly one of `path` and `synthetic`".into(),
                ))
            }
            (None, Some(s)) => s.to_spec().validate()?,
            _ => {}
        }
        if self.tokenizer.max_seq_len < 3 {
            return Err(Error::Config(
                "tokenizer.max_seq_len must be at least 3".into(),
            ));
        }
        self.train.validate()?;
        if self.pretrain.epochs > 0 {
            self.pretrain.policy().validate()?;
            if !self.ensemble.shared_init {
                return Err(Error::Config(
                    "pretraining requires ensemble.shared_init".into(),
                ));
            }
        }
        self.model_config(1, 2, 1).validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("no variants listed".into()));
        }
        let mut names = HashSet::new();
        let mut slugs = HashSet::new();
        for v in &self.variants {
            if v.name.trim().is_empty() || v.slug().is_empty() {
                return Err(Error::Config(format!(
                    "variant name {:?} is unusable",
                    v.name
                )));
            }
            if !names.insert(v.name.as_str()) || !slugs.insert(v.slug()) {
                return Err(Error::Config(format!(
                    "duplicate variant name {:?}",
                    v.name
                )));
            }
            if v.num_layers == Some(0) {
                return Err(Error::Config(format!(
                    "variant {:?}: num_layers must be at least 1",
                    v.name
                )));
            }
            match v.kind {
                VariantKind::Single => {
                    if v.num_layers.is_none() || v.n_members.is_some() {
                        return Err(Error::Config(format!(
                            "single variant {:?} needs num_layers and no n_members",
                            v.name
                        )));
                    }
                }
                VariantKind::Ensemble => {
                    let n = v.n_members.ok_or_else(|| {
                        Error::Config(format!("ensemble variant {:?} needs n_members", v.name))
                    })?;
                    self.ensemble_config(v, 1, 2)?;
                    if n == 0 {
                        return Err(Error::Config(format!(
                            "variant {:?}: n_members must be at least 1",
                            v.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        vocab_size: usize,
        num_classes: usize,
        num_layers: usize,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_dim: self.model.hidden_dim,
            num_layers,
            num_heads: self.model.num_heads,
            ff_dim: self.model.ff_dim,
            max_seq_len: self.tokenizer.max_seq_len,
            num_classes,
            init_seed: self.model.init_seed,
            init_scale: self.model.init_scale,
        }
    }

    pub fn ensemble_config(
        &self,
        variant: &Variant,
        vocab_size: usize,
        num_classes: usize,
    ) -> Result<EnsembleConfig> {
        let n = variant.n_members.unwrap_or(1);
        let mut config = EnsembleConfig::new(
            n,
            self.model_config(vocab_size, num_classes, variant.layers()),
            self.train.shuffle_seed,
        );
        config.shared_init = self.ensemble.shared_init;
        config.voting = self.ensemble.voting;
        if let Some(seeds) = &self.ensemble.member_shuffle_seeds {
            config.member_shuffle_seeds = seeds.clone();
        }
        config
            .validate()
            .map_err(|e| e.context(format!("variant {:?}", variant.name)))?;
        Ok(config)
    }
}

/// Parses and validates a TOML experiment config. Errors carry the line
/// and column of the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = parse_config(&text).map_err(|e| e.context(path.display().to_string()))?;
    if let Some(corpus) = &config.corpus.path {
        if corpus.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            config.corpus.path = Some(base.join(corpus));
        }
    }
    Ok(config)
}

/// Reads a synthetic corpus spec, either as a standalone TOML table of
/// [`SyntheticConfig`] fields or as the `[corpus.synthetic]` section of an
/// experiment config.
pub fn load_synthetic_config(path: impl AsRef<Path>) -> Result<SyntheticConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let located = |e: Error| e.context(path.display().to_string());
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| located(Error::Config(e.to_string())))?;
    let synthetic = if table.contains_key("corpus") {
        parse_config(&text)
            .map_err(located)?
            .corpus
            .synthetic
            .ok_or_else(|| located(Error::Config("no [corpus.synthetic] section".into())))?
    } else {
        toml::from_str::<SyntheticConfig>(&text)
            .map_err(|e| located(Error::Config(e.to_string())))?
    };
    synthetic.to_spec().validate().map_err(located)?;
    Ok(synthetic)
}

/// Overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub include_optional: bool,
    pub parallel_members: bool,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

impl RunOptions {
    pub fn apply(&self, config: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut config = config.clone();
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(epochs) = self.epochs {
            config.train.epochs = epochs;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn load_corpus(source: &CorpusSource) -> Result<LabeledCorpus> {
    match (&source.path, &source.synthetic) {
        (Some(path), None) => load_csv(path),
        (None, Some(synthetic)) => generate_synthetic(&synthetic.to_spec()),
        _ => Err(Error::Config(
            "corpus needs exactly one of `path` and `synthetic`".into(),
        )),
    }
}

/// The split corpus, the vocabulary built from its training half, and both
/// halves encoded.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub num_classes: usize,
    pub train_records: Vec<Record>,
    pub val_records: Vec<Record>,
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

pub fn prepare_data(corpus: &LabeledCorpus, config: &ExperimentConfig) -> Result<PreparedData> {
    let (train_idx, val_idx) = split_indices(
        corpus.len(),
        config.train.split_ratio,
        config.train.split_seed,
    )?;
    let pick = |idx: &[usize]| -> Vec<Record> {
        idx.iter().map(|&i| corpus.records()[i].clone()).collect()
    };
    let train_records = pick(&train_idx);
    let val_records = pick(&val_idx);
    let train_texts: Vec<&str> = train_records.iter().map(|r| r.text.as_str()).collect();
    let vocab = Vocabulary::build(
        &train_texts,
        config.tokenizer.max_vocab,
        config.tokenizer.min_frequency,
    )?;
    let max_len = config.tokenizer.max_seq_len;
    Ok(PreparedData {
        train: encode_records(&train_records, &vocab, max_len)?,
        val: encode_records(&val_records, &vocab, max_len)?,
        num_classes: corpus.num_classes(),
        vocab,
        train_records,
        val_records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord<'a> {
    pub variant: &'a str,
    pub member: Option<usize>,
    #[serde(flatten)]
    pub epoch: EpochRecord,
}

/// Quality results of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub name: String,
    pub kind: VariantKind,
    pub num_layers: usize,
    pub parameter_count: usize,
    pub metrics: MetricsReport,
    /// Per-epoch mean training loss of each trained model.
    pub losses: Vec<Vec<f64>>,
    /// Final validation accuracy of each trained model.
    pub member_accuracies: Vec<f64>,
    pub disagreements: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTiming {
    pub name: String,
    /// Training time as used for the comparison; the members' summed time
    /// for an ensemble.
    pub timing: TimingRecord,
    pub wall_clock_seconds: f64,
    pub summed_member_seconds: f64,
    pub member_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
    pub pretrain_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsPair {
    pub a: String,
    pub b: String,
    pub gaps: Vec<MetricGap>,
    pub largest: Option<MetricGap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub validation_examples: usize,
    pub vocab_size: usize,
    pub variants: Vec<VariantMetrics>,
    pub gaps: Vec<MetricsPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub parallel_members: bool,
    pub variants: Vec<VariantTiming>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub metrics: MetricsSection,
    pub timing: TimingSection,
    pub report: ComparisonReport,
}

enum Trained {
    Single(Box<ClassifierModel<f32>>),
    Ensemble(EnsembleModel<f32>),
}

/// Runs every selected variant and writes the artifacts listed in the
/// module docs.
pub fn run_experiment(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentOutcome> {
    let config = options.apply(config)?;
    let corpus = load_corpus(&config.corpus)?;
    let data = prepare_data(&corpus, &config)?;
    let out = create_run_dir(&config.output_dir)?;

    let resolved = toml::to_string_pretty(&config).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out.join("config.toml"), resolved.as_bytes())?;
    data.vocab.save(out.join(VOCAB_FILE))?;
    save_csv(&data.train_records, out.join("train.csv"))?;
    save_csv(&data.val_records, out.join("val.csv"))?;
    let log_path = out.join("log.jsonl");
    let log = Mutex::new(BufWriter::new(
        File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    ));
    let log_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    let mut variant_metrics = Vec::new();
    let mut variant_timing = Vec::new();
    let mut summaries = Vec::new();
    for variant in config
        .variants
        .iter()
        .filter(|v| options.include_optional || !v.optional)
    {
        let on_epoch = |member: Option<usize>, record: &EpochRecord| {
            let line = serde_json::to_string(&LogRecord {
                variant: &variant.name,
                member,
                epoch: record.clone(),
            })
            .expect("log record serializes");
            if let Err(e) = writeln!(log.lock().unwrap(), "{line}") {
                log_error.lock().unwrap().get_or_insert(e);
            }
            if options.progress {
                let who = member.map_or(String::new(), |m| format!(" member {m}"));
                eprintln!(
                    "{}{who}: epoch {} loss {:.4} val_acc {:.4} ({:.1}s)",
                    variant.name,
                    record.epoch,
                    record.mean_loss,
                    record.val_accuracy,
                    record.elapsed_seconds
                );
            }
        };
        let (m, t, s) = run_variant(&config, options, variant, &data, &out, &on_epoch)
            .map_err(|e| e.context(format!("variant {:?}", variant.name)))?;
        variant_metrics.push(m);
        variant_timing.push(t);
        summaries.push(s);
    }
    log.into_inner()
        .unwrap()
        .flush()
        .map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = log_error.into_inner().unwrap() {
        return Err(Error::io(&log_path, e));
    }

    let report = compare_report(summaries)?;
    let metrics = MetricsSection {
        validation_examples: data.val.len(),
        vocab_size: data.vocab.len(),
        variants: variant_metrics,
        gaps: report
            .pairs
            .iter()
            .map(|p| MetricsPair {
                a: p.a.clone(),
                b: p.b.clone(),
                gaps: p.gaps.clone(),
                largest: p.largest.clone(),
            })
            .collect(),
    };
    let timing = TimingSection {
        parallel_members: options.parallel_members,
        variants: variant_timing,
    };
    write_file(&out.join("metrics.json"), pretty_json(&metrics).as_bytes())?;
    write_file(&out.join("timing.json"), pretty_json(&timing).as_bytes())?;
    write_file(&out.join("report.json"), report.to_json().as_bytes())?;
    write_file(&out.join("report.md"), report.to_markdown().as_bytes())?;
    Ok(ExperimentOutcome {
        output_dir: out,
        metrics,
        timing,
        report,
    })
}

fn pretty_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn run_variant(
    config: &ExperimentConfig,
    options: &RunOptions,
    variant: &Variant,
    data: &PreparedData,
    out: &Path,
    on_epoch: &(dyn Fn(Option<usize>, &EpochRecord) + Sync),
) -> Result<(VariantMetrics, VariantTiming, RunSummary)> {
    let vocab_size = data.vocab.len();
    let model_config = config.model_config(vocab_size, data.num_classes, variant.layers());
    let pretrain = |model: &mut ClassifierModel<f32>| -> Result<f64> {
        if config.pretrain.epochs == 0 {
            return Ok(0.0);
        }
        let start = Instant::now();
        pretrain_mlm(
            model,
            &data.train,
            &data.vocab,
            &config.pretrain.policy(),
            config.pretrain.epochs,
            &config.train,
        )
        .map_err(|e| e.context("pretraining"))?;
        Ok(start.elapsed().as_secs_f64())
    };

    let (trained, runs, wall_clock, summed, pretrain_seconds) = match variant.kind {
        VariantKind::Single => {
            let mut model = ClassifierModel::<f32>::new(model_config)?;
            let pretrain_seconds = pretrain(&mut model)?;
            let run = train_with_log(&mut model, &data.train, &data.val, &config.train, |r| {
                on_epoch(None, r)
            })?;
            let secs = run.total_wall_clock.as_secs_f64();
            (
                Trained::Single(Box::new(model)),
                vec![run],
                secs,
                secs,
                pretrain_seconds,
            )
        }
        VariantKind::Ensemble => {
            let ensemble_config = config.ensemble_config(variant, vocab_size, data.num_classes)?;
            let mut initial = ClassifierModel::<f32>::new(ensemble_config.member_config(0))?;
            let pretrain_seconds = pretrain(&mut initial)?;
            let init = (config.pretrain.epochs > 0).then_some(&initial);
            let trained = train_ensemble_with_log(
                &data.train,
                &data.val,
                &ensemble_config,
                &config.train,
                options.parallel_members,
                init,
                &|m, r| on_epoch(Some(m), r),
            )?;
            (
                Trained::Ensemble(trained.model),
                trained.runs,
                trained.wall_clock.as_secs_f64(),
                trained.summed_member_time.as_secs_f64(),
                pretrain_seconds,
            )
        }
    };

    let actual: Vec<usize> = data.val.iter().map(|e| e.label).collect();
    let checkpoint = out.join("variants").join(variant.slug());
    let (predicted, member_accuracies, disagreements, parameter_count) = match &trained {
        Trained::Single(model) => {
            save_checkpoint(model, &checkpoint)?;
            let predicted = model.predict(&data.val)?;
            (
                predicted,
                vec![accuracy(model, &data.val)?],
                None,
                model.parameter_count(),
            )
        }
        Trained::Ensemble(ensemble) => {
            save_ensemble(ensemble, &checkpoint)?;
            let prediction = predict_ensemble(ensemble, &data.val)?;
            let accuracies = prediction
                .member_labels
                .iter()
                .map(|labels| fraction_correct(labels, &actual))
                .collect();
            let params = ensemble.members().iter().map(|m| m.parameter_count()).sum();
            (
                prediction.labels,
                accuracies,
                Some(prediction.disagreements),
                params,
            )
        }
    };
    data.vocab.save(checkpoint.join(VOCAB_FILE))?;

    let report = metrics(&confusion_matrix(&predicted, &actual, data.num_classes)?)?;
    let timing = TimingRecord::from_seconds(&variant.name, summed, report.accuracy)?;
    let epochs: usize = runs.iter().map(|r| r.epochs.len()).sum();
    let epoch_seconds: f64 = runs
        .iter()
        .flat_map(|r| &r.epochs)
        .map(|e| e.train_seconds)
        .sum();
    Ok((
        VariantMetrics {
            name: variant.name.clone(),
            kind: variant.kind,
            num_layers: variant.layers(),
            parameter_count,
            metrics: report.clone(),
            losses: runs.iter().map(|r| r.losses()).collect(),
            member_accuracies,
            disagreements,
        },
        VariantTiming {
            name: variant.name.clone(),
            timing: timing.clone(),
            wall_clock_seconds: wall_clock,
            summed_member_seconds: summed,
            member_seconds: runs
                .iter()
                .map(|r| r.total_wall_clock.as_secs_f64())
                .collect(),
            mean_epoch_seconds: epoch_seconds / epochs.max(1) as f64,
            pretrain_seconds,
        },
        RunSummary {
            name: variant.name.clone(),
            metrics: report,
            timing,
        },
    ))
}

fn fraction_correct(predicted: &[usize], actual: &[usize]) -> f64 {
    let correct = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    correct as f64 / actual.len() as f64
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates `<root>/<timestamp>`, adding `-1`, `-2`, ... if that exists.
fn create_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    for n in 0.. {
        let name = if n == 0 {
            stamp.clone()
        } else {
            format!("{stamp}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Result of scoring a saved checkpoint on a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub kind: VariantKind,
    pub metrics: MetricsReport,
    pub member_accuracies: Vec<f64>,
    pub disagreements: Option<usize>,
}

impl EvalOutcome {
    pub fn render(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "Accuracy  {:.4}\nPrecision {:.4}{}\nRecall    {:.4}{}\nF1-score  {:.4}{}\n",
            m.accuracy,
            m.precision,
            undefined(m.precision_defined),
            m.recall,
            undefined(m.recall_defined),
            m.f1,
            undefined(m.f1_defined),
        );
        if let Some(cm) = &m.confusion {
            out.push_str("Confusion matrix (rows actual, columns predicted):\n");
            for row in cm.counts() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                out.push_str(&format!("  {}\n", cells.join("\t")));
            }
        }
        if self.kind == VariantKind::Ensemble {
            for (i, acc) in self.member_accuracies.iter().enumerate() {
                out.push_str(&format!("Member {i} accuracy {acc:.4}\n"));
            }
            out.push_str(&format!(
                "Disagreements {}\n",
                self.disagreements.unwrap_or(0)
            ));
        }
        out
    }
}

fn undefined(defined: bool) -> &'static str {
    if defined {
        ""
    } else {
        " (undefined)"
    }
}

/// Scores a single-model or ensemble checkpoint directory on a CSV corpus,
/// using the vocabulary stored next to the checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    corpus_path: impl AsRef<Path>,
) -> Result<EvalOutcome> {
    let dir = checkpoint.as_ref();
    if !dir.is_dir() {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            message: "no such checkpoint directory".into(),
        });
    }
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let corpus = load_csv(corpus_path)?;
    let trained = if is_ensemble_checkpoint(dir) {
        Trained::Ensemble(load_ensemble(dir)?)
    } else {
        Trained::Single(Box::new(load_checkpoint(dir)?))
    };
    let config = match &trained {
        Trained::Single(model) => model.config(),
        Trained::Ensemble(ensemble) => ensemble.members()[0].config(),
    };
    if config.vocab_size != vocab.len() {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            message: format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                config.vocab_size
            ),
        });
    }
    if corpus.num_classes() > config.num_classes {
        return Err(Error::Validation(format!(
            "corpus has labels up to {} but the model predicts {} classes",
            corpus.num_classes() - 1,
            config.num_classes
        )));
    }
    let num_classes = config.num_classes;
    let examples = encode_records(corpus.records(), &vocab, config.max_seq_len)?;
    let actual: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (kind, predicted, member_accuracies, disagreements) = match &trained {
        Trained::Single(model) => {
            let predicted = model.predict(&examples)?;
            let acc = fraction_correct(&predicted, &actual);
            (VariantKind::Single, predicted, vec![acc], None)
        }
        Trained::Ensemble(ensemble) => {
            let prediction = predict_ensemble(ensemble, &examples)?;
            let accs = prediction
                .member_labels
                .iter()
                .map(|labels| fraction_correct(labels, &actual))
                .collect();
            (
                VariantKind::Ensemble,
                prediction.labels,
                accs,
                Some(prediction.disagreements),
            )
        }
    };
    Ok(EvalOutcome {
        kind,
        metrics: metrics(&confusion_matrix(&predicted, &actual, num_classes)?)?,
        member_accuracies,
        disagreements,
    })
}
