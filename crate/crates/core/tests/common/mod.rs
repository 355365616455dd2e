//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use ensemble_bert::model::{ClassifierModel, ModelConfig};
use ensemble_bert::tensor::{Graph, Tensor, Var};
use ensemble_bert::tokenizer::{EncodedExample, CLS_ID, PAD_ID, SEP_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// Passes when the two values agree to `REL_TOL` relative error, or to
/// `ABS_FLOOR` absolutely.
pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central difference of `f` with respect to each coordinate of `x`.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut point = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = point[i];
            point[i] = orig + FD_STEP;
            let plus = f(&point);
            point[i] = orig - FD_STEP;
            let minus = f(&point);
            point[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Compares backward-pass gradients of a scalar-valued graph with central
/// differences, for every element of every input. `build` receives the
/// inputs as parameter leaves and returns the loss.
pub fn check_op_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Result<usize, String> {
    let eval = |tensors: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs);
    g.backward(loss).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = central_differences(input.data(), |point| {
            let mut perturbed = inputs.to_vec();
            perturbed[k] = Tensor::new(input.shape().to_vec(), point.to_vec()).unwrap();
            let (g, _, loss) = eval(&perturbed);
            g.value(loss).item().unwrap()
        });
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            if !close(a, n) {
                return Err(format!(
                    "input {k} element {i}: analytic {a} vs numeric {n}"
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Reduces a tensor to a scalar with fixed random weights, so every output
/// element contributes a distinct amount to the loss.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(x, w).unwrap();
    g.sum(prod)
}

pub fn encoded(content: &[u32], len: usize, label: usize) -> EncodedExample {
    let mut ids = vec![CLS_ID];
    ids.extend_from_slice(content);
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(len, PAD_ID);
    EncodedExample {
        token_ids: ids,
        segment_ids: vec![0; len],
        attention_mask: (0..len).map(|i| u8::from(i < real)).collect(),
        label,
    }
}

pub fn random_encoded(
    rng: &mut ChaCha8Rng,
    vocab: u32,
    len: usize,
    classes: usize,
) -> EncodedExample {
    let n = rng.random_range(1..=len - 2);
    let content: Vec<u32> = (0..n).map(|_| rng.random_range(5..vocab)).collect();
    encoded(&content, len, rng.random_range(0..classes))
}

/// The tiny configuration used for whole-model gradient checks.
pub fn gradcheck_config(seed: u64, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        hidden_dim: 8,
        num_layers: layers,
        num_heads: 2,
        ff_dim: 16,
        max_seq_len: 8,
        num_classes: 2,
        init_seed: seed,
        init_scale: 0.5,
    }
}

/// Checks every parameter gradient of `loss_fn` on `model` against central
/// differences. Returns the number of scalars compared.
pub fn check_model_gradients(
    model: &ClassifierModel<f64>,
    loss_fn: impl Fn(&ClassifierModel<f64>, &mut Graph<f64>, &ensemble_bert::model::ModelVars) -> Var,
) -> Result<usize, String> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = loss_fn(model, &mut g, &vars);
    g.backward(loss).map_err(|e| e.to_string())?;
    let grads = vars.grads(&g);

    let value = |m: &ClassifierModel<f64>| {
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let loss = loss_fn(m, &mut g, &vars);
        g.value(loss).item().unwrap()
    };
    let names: Vec<String> = model
        .named_parameters()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut checked = 0;
    let mut probe = model.clone();
    for (p, analytic) in grads.iter().enumerate() {
        for (i, &expected) in analytic.iter().enumerate() {
            let orig = probe.parameters_mut()[p].data()[i];
            probe.parameters_mut()[p].data_mut()[i] = orig + FD_STEP;
            let plus = value(&probe);
            probe.parameters_mut()[p].data_mut()[i] = orig - FD_STEP;
            let minus = value(&probe);
            probe.parameters_mut()[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !close(expected, numeric) {
                return Err(format!(
                    "{} element {i}: analytic {} vs numeric {numeric}",
                    names[p], expected
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Mode of `votes`, lowest class among tied counts; written independently
/// of the library's counting loop.
pub fn mode_oracle(votes: &[usize], classes: usize) -> usize {
    let tally = |c: usize| votes.iter().filter(|&&v| v == c).count();
    let best = (0..classes).map(tally).max().unwrap();
    (0..classes).find(|&c| tally(c) == best).unwrap()
}

/// Every vote vector with `n` members over `classes` classes, in base-`classes`
/// counting order.
pub fn all_vote_vectors(n: u32, classes: usize) -> Vec<Vec<usize>> {
    (0..classes.pow(n))
        .map(|code| (0..n).map(|k| code / classes.pow(k) % classes).collect())
        .collect()
}

/// Runs a finite-difference check on each graph operation in isolation with
/// inputs drawn from `seed`. Returns `(op name, scalars checked or failure)`.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, Result<usize, String>)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape);
    let (a34, b34, b42) = (t(&[3, 4]), t(&[3, 4]), t(&[4, 2]));
    let (row4, table, extra) = (t(&[1, 4]), t(&[5, 4]), t(&[2, 4]));
    let (sm, ln_x, gain, bias, logits) = (t(&[3, 5]), t(&[3, 6]), t(&[6]), t(&[6]), t(&[4, 3]));
    let model = ClassifierModel::<f64>::new(gradcheck_config(seed, 1)).unwrap();
    let hidden = t(&[5, 8]);

    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;
    let unary = |f: fn(&mut Graph<f64>, Var) -> Var| -> Build {
        Box::new(move |g, v| {
            let y = f(g, v[0]);
            weighted_sum(g, y, seed)
        })
    };
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "matmul",
            vec![a34.clone(), b42],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "transpose",
            vec![a34.clone()],
            unary(|g, x| g.transpose(x).unwrap()),
        ),
        (
            "add",
            vec![a34.clone(), b34.clone()],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "mul",
            vec![a34.clone(), b34],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "add_row_bias",
            vec![a34.clone(), row4],
            Box::new(move |g, v| {
                let y = g.add_row_bias(v[0], v[1]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        ("scale", vec![a34.clone()], unary(|g, x| g.scale(x, 0.7))),
        ("gelu", vec![a34.clone()], unary(|g, x| g.gelu(x))),
        ("tanh", vec![a34.clone()], unary(|g, x| g.tanh(x))),
        ("sum", vec![a34.clone()], Box::new(|g, v| g.sum(v[0]))),
        (
            "gather_rows",
            vec![table.clone()],
            unary(|g, x| g.gather_rows(x, &[4, 0, 4, 2]).unwrap()),
        ),
        (
            "slice_rows",
            vec![table.clone()],
            unary(|g, x| g.slice_rows(x, 1, 3).unwrap()),
        ),
        (
            "slice_cols",
            vec![table.clone()],
            unary(|g, x| g.slice_cols(x, 1, 2).unwrap()),
        ),
        (
            "concat_rows",
            vec![table.clone(), extra],
            Box::new(move |g, v| {
                let y = g.concat_rows(&[v[1], v[0]]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "concat_cols",
            vec![a34.clone(), a34],
            Box::new(move |g, v| {
                let left = g.slice_cols(v[0], 0, 3).unwrap();
                let y = g.concat_cols(&[v[1], left]).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "softmax(axis 0)",
            vec![sm.clone()],
            unary(|g, x| g.softmax(x, 0).unwrap()),
        ),
        (
            "softmax(axis 1)",
            vec![sm],
            unary(|g, x| g.softmax(x, 1).unwrap()),
        ),
        (
            "layer_norm",
            vec![ln_x, gain, bias],
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-12).unwrap();
                weighted_sum(g, y, seed)
            }),
        ),
        (
            "cross_entropy",
            vec![logits],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()),
        ),
        (
            "masked attention layer",
            vec![hidden],
            Box::new(move |g, v| {
                let vars = model.bind(g);
                let out =
                    ensemble_bert::model::encoder_layer(g, v[0], &[1, 1, 1, 0, 0], &vars.layers[0])
                        .unwrap();
                weighted_sum(g, out.output, seed)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| (name, check_op_gradients(&inputs, build)))
        .collect()
}

/// Whole-classifier gradient check on the tiny configuration with a random
/// batch of two padded examples.
pub fn classifier_gradient_check(seed: u64, layers: usize) -> Result<usize, String> {
    let model = ClassifierModel::<f64>::new(gradcheck_config(seed, layers)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
    let batch = [
        random_encoded(&mut r, 20, 8, 2),
        random_encoded(&mut r, 20, 8, 2),
    ];
    let refs: Vec<_> = batch.iter().collect();
    let n = check_model_gradients(&model, |m, g, vars| {
        m.classification_loss(g, vars, &refs).unwrap()
    })?;
    if n != model.parameter_count() {
        return Err(format!(
            "checked {n} of {} parameters",
            model.parameter_count()
        ));
    }
    Ok(n)
}

/// Observed outcome counts of the masking procedure.
#[derive(Debug, Default)]
pub struct MaskTally {
    pub eligible: usize,
    pub selected: usize,
    pub masked: usize,
    pub replaced: usize,
    pub unchanged: usize,
}

/// Applies the default masking policy to `batches` random batches and tallies
/// what happened to every eligible position.
pub fn tally_masking(batches: u64, vocab_tokens: usize) -> MaskTally {
    use ensemble_bert::model::{apply_mlm_mask, MaskingPolicy};
    use ensemble_bert::tokenizer::{Vocabulary, MASK_ID, NUM_SPECIAL};
    let words: Vec<String> = (0..vocab_tokens).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(&[words.join(" ")], vocab_tokens + NUM_SPECIAL, 1).unwrap();
    let vocab_len = vocab.len() as u32;
    let policy = MaskingPolicy::default();
    let mut tally = MaskTally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for b in 0..batches {
        let examples: Vec<EncodedExample> = (0..32)
            .map(|_| random_encoded(&mut rng, vocab_len, 64, 2))
            .collect();
        let out = apply_mlm_mask(&examples, &vocab, &policy, b).unwrap();
        tally.eligible += examples
            .iter()
            .flat_map(|e| &e.token_ids)
            .filter(|&&id| id as usize >= NUM_SPECIAL)
            .count();
        tally.selected += out.target_positions.len();
        for (&(ei, pos), &original) in out.target_positions.iter().zip(&out.target_ids) {
            let now = out.inputs[ei].token_ids[pos];
            if now == MASK_ID {
                tally.masked += 1;
            } else if now != original {
                tally.replaced += 1;
            } else {
                tally.unchanged += 1;
            }
        }
    }
    tally
}
