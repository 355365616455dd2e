//! N independently fine-tuned members combined by voting.
//!
//! Members start from identical weights by default and differ only in the
//! order they see training batches. Ties between classes go to the lowest
//! class index under both voting rules.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, load_checkpoint, save_checkpoint, ClassifierModel, ModelConfig};
use crate::tensor::Scalar;
use crate::tokenizer::EncodedExample;
use crate::training::{train_with_log, EpochRecord, TrainConfig, TrainRun};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.toml";
const FORMAT: &str = "ensemble-bert-ensemble";
const VERSION: u32 = 1;
const PROBABILITY_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    Majority,
    AverageProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub member_model_config: ModelConfig,
    /// All members start from the weights drawn with
    /// `member_model_config.init_seed`. When false, member `i` uses
    /// `init_seed + i`.
    pub shared_init: bool,
    pub member_shuffle_seeds: Vec<u64>,
    pub voting: Voting,
}

impl EnsembleConfig {
    /// Shared init, majority voting, shuffle seeds `base_seed + i`.
    pub fn new(n_members: usize, member_model_config: ModelConfig, base_seed: u64) -> Self {
        EnsembleConfig {
            n_members,
            member_model_config,
            shared_init: true,
            member_shuffle_seeds: (0..n_members as u64)
                .map(|i| base_seed.wrapping_add(i))
                .collect(),
            voting: Voting::Majority,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 {
            return Err(Error::Config(
                "an ensemble needs at least one member".into(),
            ));
        }
        if self.member_shuffle_seeds.len() != self.n_members {
            return Err(Error::Config(format!(
                "{} shuffle seeds given for {} members",
                self.member_shuffle_seeds.len(),
                self.n_members
            )));
        }
        self.member_model_config.validate()
    }

    pub fn member_config(&self, index: usize) -> ModelConfig {
        let mut config = self.member_model_config.clone();
        if !self.shared_init {
            config.init_seed = config.init_seed.wrapping_add(index as u64);
        }
        config
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel<T = f32> {
    members: Vec<ClassifierModel<T>>,
    config: EnsembleConfig,
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn new(members: Vec<ClassifierModel<T>>, config: EnsembleConfig) -> Result<Self> {
        config.validate()?;
        if members.len() != config.n_members {
            return Err(Error::Validation(format!(
                "{} members given, config says {}",
                members.len(),
                config.n_members
            )));
        }
        for (i, member) in members.iter().enumerate() {
            let mut expected = config.member_model_config.clone();
            expected.init_seed = member.config().init_seed;
            if *member.config() != expected {
                return Err(Error::Validation(format!(
                    "member {i} has a different model shape from the ensemble config"
                )));
            }
        }
        Ok(EnsembleModel { members, config })
    }

    pub fn members(&self) -> &[ClassifierModel<T>] {
        &self.members
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn predict(&self, examples: &[EncodedExample]) -> Result<EnsemblePrediction> {
        predict_ensemble(self, examples)
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleTraining<T = f32> {
    pub model: EnsembleModel<T>,
    pub runs: Vec<TrainRun>,
    /// Time from the first member starting to the last one finishing.
    pub wall_clock: Duration,
    /// Sum of the members' own training times; equals `wall_clock` up to
    /// bookkeeping when members run one after another.
    pub summed_member_time: Duration,
}

pub fn train_ensemble<T: Scalar>(
    train_set: &[EncodedExample],
    validation_set: &[EncodedExample],
    config: &EnsembleConfig,
    train_config: &TrainConfig,
    parallel: bool,
) -> Result<EnsembleTraining<T>> {
    train_ensemble_with_log(
        train_set,
        validation_set,
        config,
        train_config,
        parallel,
        None,
        &|_, _| {},
    )
}

/// Trains every member on the same split with its own shuffle seed.
/// `initial` replaces the seeded shared starting weights, e.g. after
/// pretraining; it requires `shared_init`. `on_epoch` receives the member
/// index with each epoch record.
pub fn train_ensemble_with_log<T: Scalar>(
    train_set: &[EncodedExample],
    validation_set: &[EncodedExample],
    config: &EnsembleConfig,
    train_config: &TrainConfig,
    parallel: bool,
    initial: Option<&ClassifierModel<T>>,
    on_epoch: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<EnsembleTraining<T>> {
    config.validate()?;
    train_config.validate()?;
    let shared = match (initial, config.shared_init) {
        (Some(model), true) => Some(model.clone()),
        (Some(_), false) => {
            return Err(Error::Config(
                "explicit initial weights require shared_init".into(),
            ))
        }
        (None, true) => Some(ClassifierModel::<T>::new(
            config.member_model_config.clone(),
        )?),
        (None, false) => None,
    };
    let initial = |i: usize| match &shared {
        Some(model) => Ok(model.clone()),
        None => ClassifierModel::<T>::new(config.member_config(i)),
    };
    let run_member = |i: usize, mut model: ClassifierModel<T>| {
        let member_config = TrainConfig {
            shuffle_seed: config.member_shuffle_seeds[i],
            ..train_config.clone()
        };
        train_with_log(&mut model, train_set, validation_set, &member_config, |r| {
            on_epoch(i, r)
        })
        .map(|run| (model, run))
        .map_err(|e| e.context(format!("ensemble member {i}")))
    };

    let start = Instant::now();
    let results: Vec<Result<(ClassifierModel<T>, TrainRun)>> = if parallel {
        let initials = (0..config.n_members)
            .map(initial)
            .collect::<Result<Vec<_>>>()?;
        std::thread::scope(|scope| {
            let handles: Vec<_> = initials
                .into_iter()
                .enumerate()
                .map(|(i, model)| {
                    let run_member = &run_member;
                    scope.spawn(move || run_member(i, model))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ensemble member thread panicked"))
                .collect()
        })
    } else {
        (0..config.n_members)
            .map(|i| run_member(i, initial(i)?))
            .collect()
    };
    let wall_clock = start.elapsed();

    let mut members = Vec::with_capacity(config.n_members);
    let mut runs = Vec::with_capacity(config.n_members);
    for result in results {
        let (model, run) = result?;
        members.push(model);
        runs.push(run);
    }
    let summed_member_time = runs.iter().map(|r| r.total_wall_clock).sum();
    Ok(EnsembleTraining {
        model: EnsembleModel::new(members, config.clone())?,
        runs,
        wall_clock,
        summed_member_time,
    })
}

/// Most-voted class per example; ties go to the lowest class index.
/// `member_labels[m][i]` is member `m`'s label for example `i`.
pub fn majority_vote(member_labels: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = check_rectangular(member_labels, "majority_vote")?;
    let classes = member_labels.iter().flatten().max().map_or(1, |&c| c + 1);
    let mut counts = vec![0usize; classes];
    Ok((0..n)
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for votes in member_labels {
                counts[votes[i]] += 1;
            }
            argmax(&counts)
        })
        .collect())
}

/// Argmax of the mean probability vector per example, lowest index on
/// ties. `member_probabilities[m][i]` is member `m`'s distribution for
/// example `i`; each must sum to 1 within 1e-5. The mean is independent of
/// member order.
pub fn average_vote(member_probabilities: &[Vec<Vec<f64>>]) -> Result<Vec<usize>> {
    let n = check_rectangular(member_probabilities, "average_vote")?;
    let classes = member_probabilities[0].first().map_or(0, Vec::len);
    for (m, rows) in member_probabilities.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes || classes == 0 {
                return Err(Error::Validation(format!(
                    "average_vote: member {m} example {i} has {} classes, expected {classes}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE
                || row.iter().any(|p| p.is_nan() || *p < 0.0)
            {
                return Err(Error::Validation(format!(
                    "average_vote: member {m} example {i} is not a probability vector (sum {sum})"
                )));
            }
        }
    }
    let members = member_probabilities.len() as f64;
    let mut column = Vec::with_capacity(member_probabilities.len());
    Ok((0..n)
        .map(|i| {
            let mean: Vec<f64> = (0..classes)
                .map(|c| {
                    column.clear();
                    column.extend(member_probabilities.iter().map(|rows| rows[i][c]));
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / members
                })
                .collect();
            argmax(&mean)
        })
        .collect())
}

fn check_rectangular<R>(matrix: &[Vec<R>], op: &str) -> Result<usize> {
    let first = matrix
        .first()
        .ok_or_else(|| Error::Validation(format!("{op}: no members")))?;
    if let Some((m, row)) = matrix
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != first.len())
    {
        return Err(Error::Validation(format!(
            "{op}: member {m} voted on {} examples, member 0 on {}",
            row.len(),
            first.len()
        )));
    }
    Ok(first.len())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub member_labels: Vec<Vec<usize>>,
    /// Examples on which the members were not unanimous.
    pub disagreements: usize,
}

pub fn predict_ensemble<T: Scalar>(
    ensemble: &EnsembleModel<T>,
    examples: &[EncodedExample],
) -> Result<EnsemblePrediction> {
    let mut member_labels = Vec::with_capacity(ensemble.len());
    let mut member_probabilities = Vec::with_capacity(ensemble.len());
    for member in ensemble.members() {
        match ensemble.config.voting {
            Voting::Majority => member_labels.push(member.predict(examples)?),
            Voting::AverageProbability => {
                let probs: Vec<Vec<f64>> = member
                    .predict_proba(examples)?
                    .into_iter()
                    .map(|row| row.into_iter().map(|p| p.as_f64()).collect())
                    .collect();
                member_labels.push(probs.iter().map(|row| argmax(row)).collect());
                member_probabilities.push(probs);
            }
        }
    }
    let labels = match ensemble.config.voting {
        Voting::Majority => majority_vote(&member_labels)?,
        Voting::AverageProbability => average_vote(&member_probabilities)?,
    };
    let disagreements = (0..examples.len())
        .filter(|&i| {
            member_labels
                .iter()
                .any(|votes| votes[i] != member_labels[0][i])
        })
        .count();
    Ok(EnsemblePrediction {
        labels,
        member_labels,
        disagreements,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: EnsembleConfig,
    members: Vec<String>,
}

fn member_dir(index: usize) -> String {
    format!("member-{index}")
}

/// Writes `ensemble.toml` and one model checkpoint per member under `dir`.
pub fn save_ensemble<T: Scalar>(ensemble: &EnsembleModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let members: Vec<String> = (0..ensemble.len()).map(member_dir).collect();
    for (member, name) in ensemble.members().iter().zip(&members) {
        save_checkpoint(member, dir.join(name))?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: ensemble.config().clone(),
        members,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("cannot serialize ensemble manifest: {e}"),
    })?;
    let path = dir.join(ENSEMBLE_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<EnsembleModel<f32>> {
    let dir = dir.as_ref();
    let bad = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let path = dir.join(ENSEMBLE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| bad(format!("bad ensemble manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.members.len() != manifest.config.n_members {
        return Err(bad(format!(
            "manifest lists {} members, config says {}",
            manifest.members.len(),
            manifest.config.n_members
        )));
    }
    let members = manifest
        .members
        .iter()
        .map(|name| load_checkpoint(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(members, manifest.config).map_err(|e| bad(e.to_string()))
}

/// True when `dir` holds an ensemble checkpoint rather than a single model.
pub fn is_ensemble_checkpoint(dir: impl AsRef<Path>) -> bool {
    dir.as_ref().join(ENSEMBLE_MANIFEST).is_file()
}
