use std::fs;
use std::path::Path;

use ensemble_bert::corpus::{generate_synthetic, LabeledCorpus, Provenance, Record};
use ensemble_bert::experiment::{
    evaluate_checkpoint, load_config, parse_config, prepare_data, run_experiment, ExperimentConfig,
    RunOptions, VariantKind,
};
use ensemble_bert::training::split_indices;

const CONFIG: &str = r#"
output_dir = "unused"

[corpus.synthetic]
num_examples = 120
noise_rate = 0.2
seed = 3

[tokenizer]
max_vocab = 500
max_seq_len = 32

[model]
hidden_dim = 16
num_heads = 2
ff_dim = 32
init_seed = 1

[train]
epochs = 2
batch_size = 16
learning_rate = 0.003

[[variants]]
name = "Ensemble"
kind = "ensemble"
n_members = 3

[[variants]]
name = "Deep"
kind = "single"
num_layers = 2

[[variants]]
name = "Deeper"
kind = "single"
num_layers = 3
optional = true
"#;

fn options(dir: &Path) -> RunOptions {
    RunOptions {
        output_dir: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn run_writes_artifacts_and_skips_optional() {
    let tmp = tempfile::tempdir().unwrap();
    let config = parse_config(CONFIG).unwrap();
    let outcome = run_experiment(&config, &options(tmp.path())).unwrap();
    let out = &outcome.output_dir;
    assert!(out.starts_with(tmp.path()));
    for file in [
        "config.toml",
        "vocab.txt",
        "train.csv",
        "val.csv",
        "log.jsonl",
        "metrics.json",
        "timing.json",
        "report.json",
        "report.md",
        "variants/ensemble/ensemble.toml",
        "variants/ensemble/vocab.txt",
        "variants/ensemble/member-2/params.bin",
        "variants/deep/model.toml",
        "variants/deep/vocab.txt",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    assert!(!out.join("variants/deeper").exists());

    let names: Vec<&str> = outcome
        .metrics
        .variants
        .iter()
        .map(|v| v.name.as_str())
        .collect();
    assert_eq!(names, ["Ensemble", "Deep"]);
    assert_eq!(outcome.report.runs.len(), 2);
    let ensemble = &outcome.metrics.variants[0];
    assert_eq!(ensemble.kind, VariantKind::Ensemble);
    assert_eq!(ensemble.member_accuracies.len(), 3);
    assert_eq!(ensemble.losses.len(), 3);
    assert!(ensemble.disagreements.is_some());

    // 3 members x 2 epochs + 1 model x 2 epochs
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0]["variant"], "Ensemble");
    assert_eq!(lines[0]["member"], 0);
    assert_eq!(lines[7]["member"], serde_json::Value::Null);
    assert!(lines[0]["elapsed_seconds"].as_f64().unwrap() > 0.0);

    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("Table 1. Model evaluation for Ensemble"));
    assert!(md.contains("Table 3. Model training time results"));
}

#[test]
fn optional_variants_run_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = parse_config(CONFIG).unwrap();
    config.variants.retain(|v| v.name != "Ensemble");
    let options = RunOptions {
        include_optional: true,
        epochs: Some(1),
        ..options(tmp.path())
    };
    let outcome = run_experiment(&config, &options).unwrap();
    assert_eq!(outcome.metrics.variants.len(), 2);
    assert_eq!(outcome.metrics.variants[1].num_layers, 3);
    assert_eq!(outcome.metrics.variants[1].losses[0].len(), 1);
}

#[test]
fn reruns_reproduce_metrics_in_fresh_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let config = parse_config(CONFIG).unwrap();
    let a = run_experiment(&config, &options(tmp.path())).unwrap();
    let b = run_experiment(&config, &options(tmp.path())).unwrap();
    assert_ne!(a.output_dir, b.output_dir);
    let read = |dir: &Path, f: &str| fs::read(dir.join(f)).unwrap();
    assert_eq!(
        read(&a.output_dir, "metrics.json"),
        read(&b.output_dir, "metrics.json")
    );
    for member in 0..3 {
        let f = format!("variants/ensemble/member-{member}/params.bin");
        assert_eq!(read(&a.output_dir, &f), read(&b.output_dir, &f));
    }
}

#[test]
fn parallel_members_match_sequential_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = parse_config(CONFIG).unwrap();
    config.variants.truncate(1);
    let seq = run_experiment(&config, &options(tmp.path())).unwrap();
    let par = run_experiment(
        &config,
        &RunOptions {
            parallel_members: true,
            ..options(tmp.path())
        },
    )
    .unwrap();
    assert_eq!(seq.metrics, par.metrics);
    assert!(par.timing.parallel_members);
    let t = &par.timing.variants[0];
    assert_eq!(t.member_seconds.len(), 3);
    assert!((t.summed_member_seconds - t.member_seconds.iter().sum::<f64>()).abs() < 1e-9);
}

#[test]
fn vocabulary_ignores_validation_texts() {
    let config = parse_config(CONFIG).unwrap();
    let corpus = generate_synthetic(&config.corpus.synthetic.as_ref().unwrap().to_spec()).unwrap();
    let before = prepare_data(&corpus, &config).unwrap();

    let (_, val_idx) = split_indices(
        corpus.len(),
        config.train.split_ratio,
        config.train.split_seed,
    )
    .unwrap();
    let mut records = corpus.records().to_vec();
    for &i in &val_idx {
        records[i].text = format!("leak{i} {}", records[i].text);
    }
    let mutated = LabeledCorpus::new(
        records,
        corpus.num_classes(),
        Provenance::Derived("mutated".into()),
    )
    .unwrap();
    let after = prepare_data(&mutated, &config).unwrap();
    assert_eq!(before.vocab, after.vocab);
    assert!(after.vocab.tokens().iter().all(|t| !t.starts_with("leak")));
    assert_ne!(before.val_records, after.val_records);
    assert_eq!(before.train_records, after.train_records);
}

#[test]
fn eval_reproduces_recorded_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let config = parse_config(CONFIG).unwrap();
    let outcome = run_experiment(&config, &options(tmp.path())).unwrap();
    let val = outcome.output_dir.join("val.csv");

    let deep = evaluate_checkpoint(outcome.output_dir.join("variants/deep"), &val).unwrap();
    let recorded = &outcome.metrics.variants[1];
    assert_eq!(deep.kind, VariantKind::Single);
    assert!((deep.metrics.accuracy - recorded.member_accuracies[0]).abs() <= 1e-9);
    assert_eq!(deep.metrics, recorded.metrics);

    let ens = evaluate_checkpoint(outcome.output_dir.join("variants/ensemble"), &val).unwrap();
    let recorded = &outcome.metrics.variants[0];
    assert_eq!(ens.kind, VariantKind::Ensemble);
    assert_eq!(ens.member_accuracies, recorded.member_accuracies);
    assert_eq!(ens.disagreements, recorded.disagreements);
    assert!(ens.render().contains("Member 2 accuracy"));
}

#[test]
fn eval_rejects_missing_checkpoint_and_mismatched_vocab() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let csv = tmp.path().join("c.csv");
    ensemble_bert::corpus::save_csv(
        &[
            Record {
                text: "a".into(),
                label: 0,
            },
            Record {
                text: "b".into(),
                label: 1,
            },
        ],
        &csv,
    )
    .unwrap();
    let err = evaluate_checkpoint(&missing, &csv).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");

    let config = parse_config(CONFIG).unwrap();
    let outcome = run_experiment(&config, &options(tmp.path())).unwrap();
    let deep = outcome.output_dir.join("variants/deep");
    fs::write(
        deep.join("vocab.txt"),
        "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\n",
    )
    .unwrap();
    let err = evaluate_checkpoint(&deep, &csv).unwrap_err();
    assert!(err.to_string().contains("vocabulary"), "{err}");
}

#[test]
fn config_errors() {
    let no_variants = CONFIG.split("[[variants]]").next().unwrap();
    assert!(parse_config(no_variants).unwrap_err().is_config());

    let dup =
        format!("{CONFIG}\n[[variants]]\nname = \"Deep\"\nkind = \"single\"\nnum_layers = 1\n");
    assert!(parse_config(&dup)
        .unwrap_err()
        .to_string()
        .contains("duplicate"));

    let unknown = CONFIG.replace("epochs = 2", "epochs = 2\nwarmup = 3");
    let err = parse_config(&unknown).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("line"), "{err}");

    let both = CONFIG.replace(
        "[corpus.synthetic]",
        "[corpus]\npath = \"x.csv\"\n[corpus.synthetic]",
    );
    assert!(parse_config(&both).unwrap_err().is_config());

    let single_without_depth = CONFIG.replace("num_layers = 2\n", "");
    assert!(parse_config(&single_without_depth).is_err());

    let bad_seeds = format!("{CONFIG}\n[ensemble]\nmember_shuffle_seeds = [1, 2]\n");
    assert!(parse_config(&bad_seeds).unwrap_err().is_config());

    let bad_heads = CONFIG.replace("num_heads = 2", "num_heads = 3");
    assert!(parse_config(&bad_heads).unwrap_err().is_config());
}

#[test]
fn relative_corpus_path_resolves_against_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(
        "[corpus.synthetic]\nnum_examples = 120\nnoise_rate = 0.2\nseed = 3",
        "[corpus]\npath = \"data/reviews.csv\"",
    );
    let path = tmp.path().join("exp.toml");
    fs::write(&path, text).unwrap();
    let config: ExperimentConfig = load_config(&path).unwrap();
    assert_eq!(
        config.corpus.path.unwrap(),
        tmp.path().join("data/reviews.csv")
    );
}
