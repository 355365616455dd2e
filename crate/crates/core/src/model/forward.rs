use super::{ClassifierModel, EncoderLayerParams, LAYER_NORM_EPS, MASK_BIAS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::tokenizer::EncodedExample;

/// Graph handles for one encoder layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub query: Var,
    pub query_bias: Var,
    pub key: Var,
    pub key_bias: Var,
    pub value: Var,
    pub value_bias: Var,
    pub attention_output: Var,
    pub attention_output_bias: Var,
    pub attention_norm_gain: Var,
    pub attention_norm_bias: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
    pub output_norm_gain: Var,
    pub output_norm_bias: Var,
    pub num_heads: usize,
}

impl LayerVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &EncoderLayerParams<T>, num_heads: usize) -> Self {
        LayerVars {
            query: g.param(p.query.clone()),
            query_bias: g.param(p.query_bias.clone()),
            key: g.param(p.key.clone()),
            key_bias: g.param(p.key_bias.clone()),
            value: g.param(p.value.clone()),
            value_bias: g.param(p.value_bias.clone()),
            attention_output: g.param(p.attention_output.clone()),
            attention_output_bias: g.param(p.attention_output_bias.clone()),
            attention_norm_gain: g.param(p.attention_norm_gain.clone()),
            attention_norm_bias: g.param(p.attention_norm_bias.clone()),
            ff_in: g.param(p.ff_in.clone()),
            ff_in_bias: g.param(p.ff_in_bias.clone()),
            ff_out: g.param(p.ff_out.clone()),
            ff_out_bias: g.param(p.ff_out_bias.clone()),
            output_norm_gain: g.param(p.output_norm_gain.clone()),
            output_norm_bias: g.param(p.output_norm_bias.clone()),
            num_heads,
        }
    }

    fn all(&self) -> [Var; 16] {
        [
            self.query,
            self.query_bias,
            self.key,
            self.key_bias,
            self.value,
            self.value_bias,
            self.attention_output,
            self.attention_output_bias,
            self.attention_norm_gain,
            self.attention_norm_bias,
            self.ff_in,
            self.ff_in_bias,
            self.ff_out,
            self.ff_out_bias,
            self.output_norm_gain,
            self.output_norm_bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub hidden: Var,
    pub hidden_bias: Var,
    pub output: Var,
    pub output_bias: Var,
}

/// All parameters of a [`ClassifierModel`] registered on one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub word: Var,
    pub segment: Var,
    pub position: Var,
    pub layers: Vec<LayerVars>,
    pub head: HeadVars,
}

impl ModelVars {
    /// Parameter handles in [`ClassifierModel::named_parameters`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.word, self.segment, self.position];
        for layer in &self.layers {
            out.extend(layer.all());
        }
        out.extend([
            self.head.hidden,
            self.head.hidden_bias,
            self.head.output,
            self.head.output_bias,
        ]);
        out
    }

    /// Gradients of every parameter after a backward pass, zero-filled for
    /// parameters the loss did not reach.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.all()
            .into_iter()
            .map(|v| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
            })
            .collect()
    }
}

/// A contiguous block of rows belonging to one sequence.
#[derive(Clone, Debug)]
pub(crate) struct Segment {
    pub offset: usize,
    pub len: usize,
    pub mask: Vec<u8>,
}

impl Segment {
    fn has_masked(&self) -> bool {
        self.mask.contains(&0)
    }
}

pub struct EncoderLayerOutput {
    pub output: Var,
    /// Attention probabilities, one `[len x len]` matrix per sequence and
    /// head, sequence-major.
    pub attention: Vec<Var>,
}

/// One encoder layer over a single `[seq x hidden]` sequence:
///
/// ```text
/// h   = LN(x + MultiHeadAttention(x, mask))
/// out = LN(h + W2 gelu(W1 h + b1) + b2)
/// ```
///
/// Scores are scaled by `1/sqrt(head_dim)` and key positions with mask 0
/// get an additive bias of `-1e9` before the softmax.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    attention_mask: &[u8],
    layer: &LayerVars,
) -> Result<EncoderLayerOutput> {
    let (rows, _) = g.value(x).dims2()?;
    if attention_mask.len() != rows {
        return Err(Error::shape(
            "encoder_layer",
            g.shape(x),
            &[attention_mask.len()],
        ));
    }
    let segment = Segment {
        offset: 0,
        len: rows,
        mask: attention_mask.to_vec(),
    };
    encoder_layer_segments(g, x, &[segment], layer)
}

pub(crate) fn encoder_layer_segments<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    segments: &[Segment],
    layer: &LayerVars,
) -> Result<EncoderLayerOutput> {
    let (_, hidden) = g.value(x).dims2()?;
    if hidden % layer.num_heads != 0 {
        return Err(Error::Config(format!(
            "hidden width {hidden} not divisible by {} heads",
            layer.num_heads
        )));
    }
    let head_dim = hidden / layer.num_heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();

    let q = affine(g, x, layer.query, layer.query_bias)?;
    let k = affine(g, x, layer.key, layer.key_bias)?;
    let v = affine(g, x, layer.value, layer.value_bias)?;

    let mut attention = Vec::with_capacity(segments.len() * layer.num_heads);
    let mut contexts = Vec::with_capacity(segments.len());
    for seg in segments {
        let qs = g.slice_rows(q, seg.offset, seg.len)?;
        let ks = g.slice_rows(k, seg.offset, seg.len)?;
        let vs = g.slice_rows(v, seg.offset, seg.len)?;
        let bias = seg.has_masked().then(|| {
            let row: Vec<T> = seg
                .mask
                .iter()
                .map(|&m| if m == 0 { T::lit(MASK_BIAS) } else { T::zero() })
                .collect();
            let data = row
                .iter()
                .copied()
                .cycle()
                .take(seg.len * seg.len)
                .collect();
            g.constant(Tensor::new([seg.len, seg.len], data).unwrap())
        });
        let mut heads = Vec::with_capacity(layer.num_heads);
        for h in 0..layer.num_heads {
            let qh = g.slice_cols(qs, h * head_dim, head_dim)?;
            let kh = g.slice_cols(ks, h * head_dim, head_dim)?;
            let vh = g.slice_cols(vs, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(bias) = bias {
                scores = g.add(scores, bias)?;
            }
            let probs = g.softmax(scores, 1)?;
            attention.push(probs);
            heads.push(g.matmul(probs, vh)?);
        }
        contexts.push(if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        });
    }
    let context = if contexts.len() == 1 {
        contexts[0]
    } else {
        g.concat_rows(&contexts)?
    };

    let eps = T::lit(LAYER_NORM_EPS);
    let attended = affine(
        g,
        context,
        layer.attention_output,
        layer.attention_output_bias,
    )?;
    let residual = g.add(x, attended)?;
    let h = g.layer_norm(
        residual,
        layer.attention_norm_gain,
        layer.attention_norm_bias,
        eps,
    )?;

    let inner = affine(g, h, layer.ff_in, layer.ff_in_bias)?;
    let inner = g.gelu(inner);
    let ff = affine(g, inner, layer.ff_out, layer.ff_out_bias)?;
    let residual = g.add(h, ff)?;
    let output = g.layer_norm(
        residual,
        layer.output_norm_gain,
        layer.output_norm_bias,
        eps,
    )?;
    Ok(EncoderLayerOutput { output, attention })
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_row_bias(y, bias)
}

impl<T: Scalar> ClassifierModel<T> {
    /// Registers every parameter on `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        let heads = self.config().num_heads;
        ModelVars {
            word: g.param(self.word_embeddings.clone()),
            segment: g.param(self.segment_embeddings.clone()),
            position: g.param(self.position_embeddings.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars::bind(g, l, heads))
                .collect(),
            head: HeadVars {
                hidden: g.param(self.head.hidden.clone()),
                hidden_bias: g.param(self.head.hidden_bias.clone()),
                output: g.param(self.head.output.clone()),
                output_bias: g.param(self.head.output_bias.clone()),
            },
        }
    }

    fn check_example(&self, e: &EncodedExample) -> Result<()> {
        let n = e.token_ids.len();
        if n == 0 || e.segment_ids.len() != n || e.attention_mask.len() != n {
            return Err(Error::Validation("ragged or empty encoded example".into()));
        }
        if n > self.config().max_seq_len {
            return Err(Error::Validation(format!(
                "sequence of {n} exceeds max_seq_len {}",
                self.config().max_seq_len
            )));
        }
        Ok(())
    }

    /// Summed word + segment + position embeddings for the given rows of
    /// each example. With `trim`, trailing masked positions are left out.
    pub(crate) fn embed_segments(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        examples: &[&EncodedExample],
        trim: bool,
    ) -> Result<(Var, Vec<Segment>)> {
        if examples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut words = Vec::new();
        let mut segs = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(examples.len());
        for e in examples {
            self.check_example(e)?;
            let len = if trim {
                e.content_len().max(1)
            } else {
                e.len()
            };
            segments.push(Segment {
                offset: words.len(),
                len,
                mask: e.attention_mask[..len].to_vec(),
            });
            words.extend(e.token_ids[..len].iter().map(|&id| id as usize));
            segs.extend(e.segment_ids[..len].iter().map(|&s| s as usize));
            positions.extend(0..len);
        }
        let w = g.gather_rows(vars.word, &words)?;
        let s = g.gather_rows(vars.segment, &segs)?;
        let p = g.gather_rows(vars.position, &positions)?;
        let ws = g.add(w, s)?;
        Ok((g.add(ws, p)?, segments))
    }

    /// Final hidden states of all kept rows, plus their segment layout.
    pub(crate) fn encode_batch(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        examples: &[&EncodedExample],
    ) -> Result<(Var, Vec<Segment>)> {
        // Padded keys get exp(-1e9) = 0 attention weight, so dropping
        // trailing padding leaves every kept row unchanged.
        let (mut x, segments) = self.embed_segments(g, vars, examples, true)?;
        for layer in &vars.layers {
            x = encoder_layer_segments(g, x, &segments, layer)?.output;
        }
        Ok((x, segments))
    }

    /// Classification logits `[batch x num_classes]` recorded on `g`.
    pub fn logits(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        examples: &[&EncodedExample],
    ) -> Result<Var> {
        let (hidden, segments) = self.encode_batch(g, vars, examples)?;
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.offset).collect();
        let cls = g.gather_rows(hidden, &cls_rows)?;
        let pooled = affine(g, cls, vars.head.hidden, vars.head.hidden_bias)?;
        let pooled = g.tanh(pooled);
        affine(g, pooled, vars.head.output, vars.head.output_bias)
    }

    /// Mean cross-entropy of the batch against its labels.
    pub fn classification_loss(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        examples: &[&EncodedExample],
    ) -> Result<Var> {
        let logits = self.logits(g, vars, examples)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        g.cross_entropy(logits, &labels)
    }

    /// Summed input embeddings `[seq x hidden]` of one example.
    pub fn embed(&self, example: &EncodedExample) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (x, _) = self.embed_segments(&mut g, &vars, &[example], false)?;
        Ok(g.value(x).clone())
    }

    /// Logits `[batch x num_classes]` for a batch, without gradients.
    pub fn forward_batch(&self, examples: &[EncodedExample]) -> Result<Tensor<T>> {
        let refs: Vec<&EncodedExample> = examples.iter().collect();
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let logits = self.logits(&mut g, &vars, &refs)?;
        Ok(g.value(logits).clone())
    }

    /// Logits `[num_classes]` for one example.
    pub fn forward_classify(&self, example: &EncodedExample) -> Result<Tensor<T>> {
        let logits = self.forward_batch(std::slice::from_ref(example))?;
        Tensor::new([self.config().num_classes], logits.into_data())
    }

    /// Class probabilities per example.
    pub fn predict_proba(&self, examples: &[EncodedExample]) -> Result<Vec<Vec<T>>> {
        let mut rows = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let probs = self.forward_batch(chunk)?.softmax(1)?;
            rows.extend(
                probs
                    .data()
                    .chunks(self.config().num_classes)
                    .map(<[T]>::to_vec),
            );
        }
        Ok(rows)
    }

    /// Argmax label per example; ties go to the lowest class index.
    pub fn predict(&self, examples: &[EncodedExample]) -> Result<Vec<usize>> {
        let mut labels = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let logits = self.forward_batch(chunk)?;
            labels.extend(logits.data().chunks(self.config().num_classes).map(argmax));
        }
        Ok(labels)
    }
}

const PREDICT_CHUNK: usize = 64;

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
