//! Labeled corpora: two-column CSV files and a synthetic generator.
//!
//! CSV files are UTF-8 with a `text,label` header and standard quoting;
//! labels are nonnegative integers and the class count is `max label + 1`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{segment_text, EncodedExample, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    File(PathBuf),
    Synthetic(SyntheticSpec),
    Derived(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    records: Vec<Record>,
    num_classes: usize,
    provenance: Provenance,
}

impl LabeledCorpus {
    /// Checks that every label is below `num_classes`, every class occurs,
    /// and no text is blank.
    pub fn new(records: Vec<Record>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("corpus has no records".into()));
        }
        let mut seen = vec![false; num_classes];
        for (i, r) in records.iter().enumerate() {
            if r.label >= num_classes {
                return Err(Error::Validation(format!(
                    "record {i}: label {} out of range for {num_classes} classes",
                    r.label
                )));
            }
            if r.text.trim().is_empty() {
                return Err(Error::Validation(format!("record {i}: empty text")));
            }
            seen[r.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("class {missing} has no records")));
        }
        Ok(LabeledCorpus {
            records,
            num_classes,
            provenance,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Reads a `text,label` CSV file. Row numbers in errors count the header as
/// row 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let malformed = |row: usize, message: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        message,
    };

    let mut rows = reader.records();
    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(malformed(1, e.to_string())),
        None => {
            return Err(Error::EmptyData {
                path: path.to_path_buf(),
            })
        }
    };
    let names: Vec<&str> = header
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').trim())
        .collect();
    if names != ["text", "label"] {
        return Err(malformed(
            1,
            format!("expected header `text,label`, found {names:?}"),
        ));
    }

    let mut records = Vec::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| malformed(row_no, e.to_string()))?;
        if row.len() != 2 {
            return Err(malformed(
                row_no,
                format!("expected 2 columns, found {}", row.len()),
            ));
        }
        let text = &row[0];
        if text.trim().is_empty() {
            return Err(malformed(row_no, "empty text".into()));
        }
        let label = row[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidLabel {
                path: path.to_path_buf(),
                row: row_no,
                value: row[1].to_string(),
            })?;
        records.push(Record {
            text: text.to_string(),
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyData {
            path: path.to_path_buf(),
        });
    }
    let num_classes = records.iter().map(|r| r.label).max().unwrap() + 1;
    LabeledCorpus::new(records, num_classes, Provenance::File(path.to_path_buf()))
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn save_csv(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["text", "label"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        writer
            .write_record([r.text.as_str(), &r.label.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

/// A fully specified synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_examples: usize,
    /// One token pool per class; pools are pairwise disjoint.
    pub class_token_pools: Vec<Vec<String>>,
    /// Tokens shared by all classes, used for noise.
    pub shared_pool: Vec<String>,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Fraction of each text's tokens (rounded down) drawn from the shared
    /// pool.
    pub noise_rate: f64,
    pub seed: u64,
}

/// The on-disk form of a synthetic corpus request. Pools are generated as
/// runs of distinct CJK ideographs unless given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_examples: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_pool_size")]
    pub shared_pool_size: usize,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub class_token_pools: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub shared_pool: Option<Vec<String>>,
}

fn default_classes() -> usize {
    2
}
fn default_pool_size() -> usize {
    40
}
fn default_min_tokens() -> usize {
    8
}
fn default_max_tokens() -> usize {
    24
}

impl SyntheticConfig {
    pub fn new(num_examples: usize, noise_rate: f64, seed: u64) -> Self {
        SyntheticConfig {
            num_examples,
            num_classes: default_classes(),
            pool_size: default_pool_size(),
            shared_pool_size: default_pool_size(),
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
            noise_rate,
            seed,
            class_token_pools: None,
            shared_pool: None,
        }
    }

    pub fn to_spec(&self) -> SyntheticSpec {
        let ideograph = |i: usize| char::from_u32(0x4E00 + i as u32).unwrap().to_string();
        let class_token_pools = self.class_token_pools.clone().unwrap_or_else(|| {
            (0..self.num_classes)
                .map(|c| {
                    (0..self.pool_size)
                        .map(|i| ideograph(c * self.pool_size + i))
                        .collect()
                })
                .collect()
        });
        let shared_pool = self.shared_pool.clone().unwrap_or_else(|| {
            let base = self.num_classes * self.pool_size;
            (0..self.shared_pool_size)
                .map(|i| ideograph(base + i))
                .collect()
        });
        SyntheticSpec {
            num_examples: self.num_examples,
            class_token_pools,
            shared_pool,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let classes = self.class_token_pools.len();
        if classes < 2 {
            return Err(Error::Config(
                "synthetic corpus needs at least 2 classes".into(),
            ));
        }
        if self.num_examples < classes {
            return Err(Error::Config(format!(
                "{} examples cannot cover {classes} classes",
                self.num_examples
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} not in [0, 1)",
                self.noise_rate
            )));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "bad token count range {}..={}",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.noise_rate > 0.0 && self.shared_pool.is_empty() {
            return Err(Error::Config(
                "noise requires a nonempty shared pool".into(),
            ));
        }
        let mut seen = HashSet::new();
        for token in self
            .class_token_pools
            .iter()
            .flatten()
            .chain(&self.shared_pool)
        {
            if segment_text(token) != [token.as_str()] {
                return Err(Error::Config(format!(
                    "pool token {token:?} is not a single token"
                )));
            }
            if !seen.insert(token) {
                return Err(Error::Config(format!(
                    "token {token:?} appears in more than one pool"
                )));
            }
        }
        if self.class_token_pools.iter().any(Vec::is_empty) {
            return Err(Error::Config("empty class pool".into()));
        }
        Ok(())
    }
}

/// Generates a balanced corpus whose texts draw from their class pool, with
/// `floor(noise_rate * len)` tokens per text from the shared pool.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledCorpus> {
    spec.validate()?;
    let classes = spec.class_token_pools.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records: Vec<Record> = (0..spec.num_examples)
        .map(|i| {
            let label = i % classes;
            let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let noisy = (spec.noise_rate * len as f64).floor() as usize;
            let mut is_noise: Vec<bool> = (0..len).map(|p| p < noisy).collect();
            is_noise.shuffle(&mut rng);
            let pool = &spec.class_token_pools[label];
            let tokens: Vec<&str> = is_noise
                .iter()
                .map(|&noise| {
                    let source = if noise { &spec.shared_pool } else { pool };
                    source[rng.random_range(0..source.len())].as_str()
                })
                .collect();
            Record {
                text: tokens.join(" "),
                label,
            }
        })
        .collect();
    records.shuffle(&mut rng);
    LabeledCorpus::new(records, classes, Provenance::Synthetic(spec.clone()))
}

/// Encodes every record with `vocab`, truncating to `max_seq_len`.
pub fn encode_records(
    records: &[Record],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<Vec<EncodedExample>> {
    records
        .iter()
        .map(|r| vocab.encode(&r.text, max_seq_len, r.label))
        .collect()
}
