use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClassifierModel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::tokenizer::{EncodedExample, TokenId, Vocabulary, MASK_ID, NUM_SPECIAL, PAD_ID};

/// How positions are chosen and corrupted for masked-language-model
/// pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingPolicy {
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
}

impl Default for MaskingPolicy {
    /// 15% of eligible positions; of those 80% `[MASK]`, 10% a random
    /// token, 10% left unchanged.
    fn default() -> Self {
        MaskingPolicy {
            select_rate: 0.15,
            mask_rate: 0.80,
            random_rate: 0.10,
            keep_rate: 0.10,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.select_rate,
            self.mask_rate,
            self.random_rate,
            self.keep_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "masking rates must lie in [0, 1]: {self:?}"
            )));
        }
        let total = self.mask_rate + self.random_rate + self.keep_rate;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mask, random and keep rates sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

/// Masked copies of a batch and the originals to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// The corrupted examples (segment ids and attention masks unchanged).
    pub inputs: Vec<EncodedExample>,
    /// `(example index, position)` of every selected token.
    pub target_positions: Vec<(usize, usize)>,
    /// Original token id at each target position.
    pub target_ids: Vec<TokenId>,
}

impl MaskedBatch {
    pub fn input_ids(&self, example: usize) -> &[TokenId] {
        &self.inputs[example].token_ids
    }
}

/// Selects and corrupts positions for MLM. Special tokens and padding are
/// never selected. Deterministic for a given seed.
pub fn apply_mlm_mask(
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<MaskedBatch> {
    policy.validate()?;
    if vocab.len() <= NUM_SPECIAL {
        return Err(Error::Config(
            "vocabulary has no ordinary tokens to use as random replacements".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = examples.to_vec();
    let mut target_positions = Vec::new();
    let mut target_ids = Vec::new();
    for (ei, example) in inputs.iter_mut().enumerate() {
        for (pos, id) in example.token_ids.iter_mut().enumerate() {
            if (*id as usize) < NUM_SPECIAL || *id == PAD_ID {
                continue;
            }
            if rng.random::<f64>() >= policy.select_rate {
                continue;
            }
            target_positions.push((ei, pos));
            target_ids.push(*id);
            let action: f64 = rng.random();
            if action < policy.mask_rate {
                *id = MASK_ID;
            } else if action < policy.mask_rate + policy.random_rate {
                *id = rng.random_range(NUM_SPECIAL as TokenId..vocab.len() as TokenId);
            }
        }
    }
    Ok(MaskedBatch {
        inputs,
        target_positions,
        target_ids,
    })
}

/// Mean cross-entropy of predicting the original tokens at the target
/// positions. Vocabulary logits come from the final hidden states times the
/// transposed word-embedding table.
///
/// An empty target set yields a constant zero loss that carries no gradient.
pub fn mlm_pretrain_loss<T: Scalar>(
    model: &ClassifierModel<T>,
    g: &mut Graph<T>,
    vars: &super::ModelVars,
    batch: &MaskedBatch,
) -> Result<Var> {
    if batch.target_positions.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let refs: Vec<&EncodedExample> = batch.inputs.iter().collect();
    let (hidden, segments) = model.encode_batch(g, vars, &refs)?;
    let mut rows = Vec::with_capacity(batch.target_positions.len());
    for &(ei, pos) in &batch.target_positions {
        let seg = segments
            .get(ei)
            .ok_or_else(|| Error::Validation(format!("target example {ei} out of range")))?;
        if pos >= seg.len {
            return Err(Error::Validation(format!(
                "target position {pos} of example {ei} is padding"
            )));
        }
        rows.push(seg.offset + pos);
    }
    let picked = g.gather_rows(hidden, &rows)?;
    let decoder = g.transpose(vars.word)?;
    let logits = g.matmul(picked, decoder)?;
    let labels: Vec<usize> = batch.target_ids.iter().map(|&id| id as usize).collect();
    g.cross_entropy(logits, &labels)
}
