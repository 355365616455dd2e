//! The BERT-style classifier.
//!
//! Input embeddings are the sum of word, segment and position tables. They
//! pass through a stack of post-layer-norm encoder layers, and the final
//! hidden state of the `[CLS]` position feeds a two-layer MLP head
//! (`tanh` hidden layer, linear output).

mod checkpoint;
mod forward;
mod mlm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, MODEL_MANIFEST, MODEL_PARAMS};
pub use forward::{argmax, encoder_layer, EncoderLayerOutput, HeadVars, LayerVars, ModelVars};
pub use mlm::{apply_mlm_mask, mlm_pretrain_loss, MaskedBatch, MaskingPolicy};

/// Epsilon inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Additive attention bias for padded key positions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub init_seed: u64,
    /// Standard deviation of the normal weight init.
    pub init_scale: f64,
}

impl ModelConfig {
    /// The small default used for CPU experiments: width 64, two heads,
    /// feed-forward 256, sequences of 64, one layer.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 64,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 256,
            max_seq_len: 64,
            num_classes,
            init_seed: 0,
            init_scale: 0.02,
        }
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!("bad init_scale {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Parameters in one encoder layer.
    pub fn layer_parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let f = self.ff_dim;
        4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h
    }

    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let embeddings = (self.vocab_size + 2 + self.max_seq_len) * h;
        let head = (h * h + h) + (h * self.num_classes + self.num_classes);
        embeddings + self.num_layers * self.layer_parameter_count() + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T = f32> {
    pub query: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub attention_output: Tensor<T>,
    pub attention_output_bias: Tensor<T>,
    pub attention_norm_gain: Tensor<T>,
    pub attention_norm_bias: Tensor<T>,
    pub ff_in: Tensor<T>,
    pub ff_in_bias: Tensor<T>,
    pub ff_out: Tensor<T>,
    pub ff_out_bias: Tensor<T>,
    pub output_norm_gain: Tensor<T>,
    pub output_norm_bias: Tensor<T>,
}

impl<T: Scalar> EncoderLayerParams<T> {
    fn new(h: usize, f: usize, init: &mut Init) -> Self {
        EncoderLayerParams {
            query: init.weight([h, h]),
            query_bias: Tensor::zeros([h]),
            key: init.weight([h, h]),
            key_bias: Tensor::zeros([h]),
            value: init.weight([h, h]),
            value_bias: Tensor::zeros([h]),
            attention_output: init.weight([h, h]),
            attention_output_bias: Tensor::zeros([h]),
            attention_norm_gain: Tensor::ones([h]),
            attention_norm_bias: Tensor::zeros([h]),
            ff_in: init.weight([h, f]),
            ff_in_bias: Tensor::zeros([f]),
            ff_out: init.weight([f, h]),
            ff_out_bias: Tensor::zeros([h]),
            output_norm_gain: Tensor::ones([h]),
            output_norm_bias: Tensor::zeros([h]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("query", &self.query),
            ("query_bias", &self.query_bias),
            ("key", &self.key),
            ("key_bias", &self.key_bias),
            ("value", &self.value),
            ("value_bias", &self.value_bias),
            ("attention_output", &self.attention_output),
            ("attention_output_bias", &self.attention_output_bias),
            ("attention_norm_gain", &self.attention_norm_gain),
            ("attention_norm_bias", &self.attention_norm_bias),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
            ("output_norm_gain", &self.output_norm_gain),
            ("output_norm_bias", &self.output_norm_bias),
        ]
    }

    fn all_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.attention_output,
            &mut self.attention_output_bias,
            &mut self.attention_norm_gain,
            &mut self.attention_norm_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.output_norm_gain,
            &mut self.output_norm_bias,
        ]
    }
}

/// Two affine layers over the `[CLS]` state: `tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = f32> {
    pub hidden: Tensor<T>,
    pub hidden_bias: Tensor<T>,
    pub output: Tensor<T>,
    pub output_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<T = f32> {
    config: ModelConfig,
    pub word_embeddings: Tensor<T>,
    pub segment_embeddings: Tensor<T>,
    pub position_embeddings: Tensor<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub head: HeadParams<T>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight<T: Scalar>(&mut self, shape: [usize; 2]) -> Tensor<T> {
        let data = (0..shape[0] * shape[1])
            .map(|_| T::lit(self.normal.sample(&mut self.rng)))
            .collect();
        Tensor::new(shape, data).unwrap()
    }
}

impl<T: Scalar> ClassifierModel<T> {
    /// Seeded initialization: weights from `normal(0, init_scale)`, biases
    /// zero, layer-norm gains one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            normal: Normal::new(0.0, config.init_scale)
                .map_err(|e| Error::Config(format!("init_scale: {e}")))?,
        };
        let h = config.hidden_dim;
        let word_embeddings = init.weight([config.vocab_size, h]);
        let segment_embeddings = init.weight([2, h]);
        let position_embeddings = init.weight([config.max_seq_len, h]);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayerParams::new(h, config.ff_dim, &mut init))
            .collect();
        let head = HeadParams {
            hidden: init.weight([h, h]),
            hidden_bias: Tensor::zeros([h]),
            output: init.weight([h, config.num_classes]),
            output_bias: Tensor::zeros([config.num_classes]),
        };
        Ok(ClassifierModel {
            config,
            word_embeddings,
            segment_embeddings,
            position_embeddings,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embeddings.word".to_string(), &self.word_embeddings),
            ("embeddings.segment".to_string(), &self.segment_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(name, t)| (format!("layers.{i}.{name}"), t)),
            );
        }
        out.extend([
            ("head.hidden".to_string(), &self.head.hidden),
            ("head.hidden_bias".to_string(), &self.head.hidden_bias),
            ("head.output".to_string(), &self.head.output),
            ("head.output_bias".to_string(), &self.head.output_bias),
        ]);
        out
    }

    /// Mutable parameters in the same order as [`Self::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.word_embeddings,
            &mut self.segment_embeddings,
            &mut self.position_embeddings,
        ];
        for layer in &mut self.layers {
            out.extend(layer.all_mut());
        }
        out.extend([
            &mut self.head.hidden,
            &mut self.head.hidden_bias,
            &mut self.head.output,
            &mut self.head.output_bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        let layer = |l: &EncoderLayerParams<T>| EncoderLayerParams {
            query: l.query.cast(),
            query_bias: l.query_bias.cast(),
            key: l.key.cast(),
            key_bias: l.key_bias.cast(),
            value: l.value.cast(),
            value_bias: l.value_bias.cast(),
            attention_output: l.attention_output.cast(),
            attention_output_bias: l.attention_output_bias.cast(),
            attention_norm_gain: l.attention_norm_gain.cast(),
            attention_norm_bias: l.attention_norm_bias.cast(),
            ff_in: l.ff_in.cast(),
            ff_in_bias: l.ff_in_bias.cast(),
            ff_out: l.ff_out.cast(),
            ff_out_bias: l.ff_out_bias.cast(),
            output_norm_gain: l.output_norm_gain.cast(),
            output_norm_bias: l.output_norm_bias.cast(),
        };
        ClassifierModel {
            config: self.config.clone(),
            word_embeddings: self.word_embeddings.cast(),
            segment_embeddings: self.segment_embeddings.cast(),
            position_embeddings: self.position_embeddings.cast(),
            layers: self.layers.iter().map(layer).collect(),
            head: HeadParams {
                hidden: self.head.hidden.cast(),
                hidden_bias: self.head.hidden_bias.cast(),
                output: self.head.output.cast(),
                output_bias: self.head.output_bias.cast(),
            },
        }
    }
}
