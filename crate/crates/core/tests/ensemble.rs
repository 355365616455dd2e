mod common;

use common::{all_vote_vectors, mode_oracle};
use ensemble_bert::corpus::{encode_records, generate_synthetic, SyntheticConfig};
use ensemble_bert::ensemble::{
    average_vote, is_ensemble_checkpoint, load_ensemble, majority_vote, predict_ensemble,
    save_ensemble, train_ensemble, EnsembleConfig, EnsembleModel, Voting,
};
use ensemble_bert::model::ModelConfig;
use ensemble_bert::tokenizer::{EncodedExample, Vocabulary};
use ensemble_bert::training::{accuracy, split_dataset, TrainConfig};
use proptest::prelude::*;

#[test]
fn majority_matches_exhaustive_oracle() {
    let mut checked = 0;
    for n in 1..=5u32 {
        for classes in 1..=3usize {
            for votes in all_vote_vectors(n, classes) {
                let matrix: Vec<Vec<usize>> = votes.iter().map(|&v| vec![v]).collect();
                assert_eq!(
                    majority_vote(&matrix).unwrap(),
                    vec![mode_oracle(&votes, classes)],
                    "{votes:?}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(
        checked,
        (1..=5)
            .map(|n| 1 + 2usize.pow(n) + 3usize.pow(n))
            .sum::<usize>()
    );
}

fn vote_matrix() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (1usize..7, 1usize..10, 1usize..5).prop_flat_map(|(members, examples, classes)| {
        prop::collection::vec(prop::collection::vec(0..classes, examples), members)
    })
}

fn probability_tensor() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..6, 1usize..8, 2usize..5).prop_flat_map(|(members, examples, classes)| {
        prop::collection::vec(
            prop::collection::vec(
                prop::collection::vec(0.01f64..1.0, classes).prop_map(|row| {
                    let sum: f64 = row.iter().sum();
                    row.into_iter().map(|p| p / sum).collect::<Vec<f64>>()
                }),
                examples,
            ),
            members,
        )
    })
}

proptest! {
    #[test]
    fn majority_is_permutation_invariant(matrix in vote_matrix(), rot in 0usize..7) {
        let mut permuted = matrix.clone();
        permuted.reverse();
        let r = rot % permuted.len();
        permuted.rotate_left(r);
        prop_assert_eq!(majority_vote(&matrix).unwrap(), majority_vote(&permuted).unwrap());
    }

    #[test]
    fn average_is_permutation_invariant(probs in probability_tensor(), rot in 0usize..6) {
        let mut permuted = probs.clone();
        permuted.reverse();
        let r = rot % permuted.len();
        permuted.rotate_left(r);
        prop_assert_eq!(average_vote(&probs).unwrap(), average_vote(&permuted).unwrap());
    }

    #[test]
    fn unanimity_dominates(members in 1usize..6, labels in prop::collection::vec(0usize..4, 1..8)) {
        let matrix = vec![labels.clone(); members];
        prop_assert_eq!(majority_vote(&matrix).unwrap(), labels.clone());
        let probs: Vec<Vec<Vec<f64>>> = (0..members)
            .map(|m| {
                labels
                    .iter()
                    .map(|&c| {
                        let mut row = vec![0.1 / 3.0; 4];
                        row[c] = 0.9 - 0.01 * m as f64;
                        let rest = (1.0 - row[c]) / 3.0;
                        row.iter_mut().enumerate().filter(|(k, _)| *k != c).for_each(|(_, p)| *p = rest);
                        row
                    })
                    .collect()
            })
            .collect();
        prop_assert_eq!(average_vote(&probs).unwrap(), labels);
    }

    #[test]
    fn odd_binary_votes_never_tie(half in 0usize..4, labels in prop::collection::vec(0usize..2, 1..40)) {
        let n = 2 * half + 1;
        let matrix: Vec<Vec<usize>> = (0..n)
            .map(|m| labels.iter().enumerate().map(|(i, &l)| (l + (i * 7 + m) % 3 / 2) % 2).collect())
            .collect();
        let decided = majority_vote(&matrix).unwrap();
        for (i, &label) in decided.iter().enumerate() {
            let ones = matrix.iter().filter(|v| v[i] == 1).count();
            prop_assert_ne!(2 * ones, n);
            prop_assert_eq!(label, usize::from(2 * ones > n));
        }
    }
}

struct Data {
    train: Vec<EncodedExample>,
    val: Vec<EncodedExample>,
    vocab_size: usize,
}

fn data(n: usize, noise: f64, seed: u64) -> Data {
    let corpus = generate_synthetic(&SyntheticConfig::new(n, noise, seed).to_spec()).unwrap();
    let (train, val) = split_dataset(corpus.records(), 0.8, seed).unwrap();
    let texts: Vec<&str> = train.iter().map(|r| r.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 1000, 1).unwrap();
    Data {
        train: encode_records(&train, &vocab, 32).unwrap(),
        val: encode_records(&val, &vocab, 32).unwrap(),
        vocab_size: vocab.len(),
    }
}

fn member_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 32,
        max_seq_len: 32,
        num_classes: 2,
        init_seed: 5,
        init_scale: 0.02,
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 3e-3,
        ..Default::default()
    }
}

#[test]
fn single_member_ensemble_equals_member() {
    let d = data(80, 0.2, 1);
    let config = EnsembleConfig::new(1, member_config(d.vocab_size), 9);
    let trained =
        train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), false).unwrap();
    let member = &trained.model.members()[0];
    let prediction = predict_ensemble(&trained.model, &d.val).unwrap();
    assert_eq!(prediction.labels, member.predict(&d.val).unwrap());
    assert_eq!(prediction.disagreements, 0);

    let averaged = EnsembleModel::new(
        trained.model.members().to_vec(),
        EnsembleConfig {
            voting: Voting::AverageProbability,
            ..config
        },
    )
    .unwrap();
    assert_eq!(averaged.predict(&d.val).unwrap().labels, prediction.labels);
}

#[test]
fn identical_seeds_give_identical_members() {
    let d = data(60, 0.2, 2);
    let mut config = EnsembleConfig::new(3, member_config(d.vocab_size), 0);
    config.member_shuffle_seeds = vec![4, 4, 4];
    let trained =
        train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), false).unwrap();
    let members = trained.model.members();
    assert_eq!(members[0], members[1]);
    assert_eq!(members[1], members[2]);
    let prediction = predict_ensemble(&trained.model, &d.val).unwrap();
    assert_eq!(prediction.disagreements, 0);
    assert_eq!(prediction.labels, members[0].predict(&d.val).unwrap());
}

#[test]
fn distinct_seeds_diversify_members() {
    let d = data(300, 0.0, 3);
    let config = EnsembleConfig::new(3, member_config(d.vocab_size), 20);
    let trained =
        train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(3), false).unwrap();
    let members = trained.model.members();
    assert_ne!(members[0], members[1]);
    assert_ne!(members[1], members[2]);
    assert_eq!(trained.runs.len(), 3);

    let prediction = predict_ensemble(&trained.model, &d.val).unwrap();
    assert_eq!(
        prediction.labels,
        majority_vote(&prediction.member_labels).unwrap()
    );
    let ensemble_accuracy = prediction
        .labels
        .iter()
        .zip(&d.val)
        .filter(|(p, e)| **p == e.label)
        .count() as f64
        / d.val.len() as f64;
    let worst = members
        .iter()
        .map(|m| accuracy(m, &d.val).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(ensemble_accuracy >= worst, "{ensemble_accuracy} < {worst}");
    assert!(trained.summed_member_time <= trained.wall_clock);
}

#[test]
fn parallel_training_matches_sequential() {
    let d = data(60, 0.2, 4);
    let config = EnsembleConfig::new(2, member_config(d.vocab_size), 1);
    let seq = train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), false).unwrap();
    let par = train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), true).unwrap();
    assert_eq!(seq.model, par.model);
    assert_eq!(
        seq.runs.iter().map(|r| r.losses()).collect::<Vec<_>>(),
        par.runs.iter().map(|r| r.losses()).collect::<Vec<_>>()
    );
}

#[test]
fn member_failure_names_index() {
    let d = data(40, 0.2, 5);
    let mut config = EnsembleConfig::new(2, member_config(d.vocab_size), 1);
    config.member_model_config.vocab_size = 6;
    let err =
        train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), false).unwrap_err();
    assert!(err.to_string().contains("ensemble member 0"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let d = data(40, 0.2, 6);
    let mut config = EnsembleConfig::new(3, member_config(d.vocab_size), 1);
    config.shared_init = false;
    config.voting = Voting::AverageProbability;
    let trained =
        train_ensemble::<f32>(&d.train, &d.val, &config, &train_config(1), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(&trained.model, dir.path()).unwrap();
    assert!(is_ensemble_checkpoint(dir.path()));
    let loaded = load_ensemble(dir.path()).unwrap();
    assert_eq!(loaded, trained.model);
    assert_eq!(loaded.members()[2].config().init_seed, 7);

    std::fs::remove_dir_all(dir.path().join("member-1")).unwrap();
    assert!(load_ensemble(dir.path()).is_err());
}
