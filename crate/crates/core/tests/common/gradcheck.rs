//! Central-difference checks for every differentiable operation and for a
//! tiny full model, shared by the gradient and acceptance suites.

use super::{check_gradients, random_array, relative_error, STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sedkit_core::corpus::{LabelVector, Tag};
use sedkit_core::frontend::{AugmentPolicy, FeatureMatrix};
use sedkit_core::network::{Model, ModelConfig, Session};
use sedkit_core::numerics::{Activation, Array, ConvMode, Graph, Var};
use sedkit_core::trainer::{bce_with_logits_grad, focal_loss_grad, LossBatch};

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> sedkit_core::Result<Var>>;

/// Inputs drawn uniformly from [-2, 2].
fn arrays(seed: u64, shapes: &[&[usize]]) -> Vec<Array<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_array(&mut rng, s, 2.0)).collect()
}

/// Worst relative error per graph operation.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let x = arrays(1, &[&[3, 4], &[3, 4], &[4, 5], &[4], &[5]]);
    let cases: Vec<(&str, Build)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", Box::new(|g, v| g.scale(v[0], -1.7))),
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[2]))),
        ("transpose", Box::new(|g, v| g.transpose(v[0]))),
        ("add_row", Box::new(|g, v| g.add_row(v[0], v[3]))),
        ("linear", Box::new(|g, v| g.linear(v[0], v[2], v[4]))),
        ("matmul_chain", Box::new(|g, v| {
            let t = g.transpose(v[2])?;
            let y = g.matmul(v[0], v[2])?;
            g.matmul(y, t)
        })),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 2))),
        ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("row", Box::new(|g, v| g.row(v[0], 2))),
        ("mean_rows", Box::new(|g, v| g.mean_rows(v[0]))),
        ("reshape", Box::new(|g, v| g.reshape(v[0], vec![2, 6]))),
        ("sum", Box::new(|g, v| g.sum(v[0]))),
        ("mean", Box::new(|g, v| g.mean(v[1]))),
    ];
    for (name, f) in cases {
        out.push((name.to_string(), check_gradients(&x, 11, |g, v| f(g, v))));
    }

    let a = arrays(2, &[&[3, 6]]);
    for act in [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Swish,
        Activation::Relu,
        Activation::Glu,
        Activation::Softmax,
    ] {
        out.push((format!("{act:?}"), check_gradients(&a, 3, |g, v| g.activation(v[0], act))));
    }

    let n = arrays(3, &[&[4, 5], &[5], &[5]]);
    out.push(("layer_norm".into(), check_gradients(&n, 4, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))));

    let c = arrays(4, &[&[2, 9, 7], &[3, 2, 3, 3], &[3]]);
    for (stride, pad) in [(1, 0), (2, 0), (2, 1)] {
        let err = check_gradients(&c, 5, |g, v| g.convolution(v[0], v[1], Some(v[2]), ConvMode::Conv2d, stride, pad));
        out.push((format!("conv2d stride {stride} pad {pad}"), err));
    }
    let d = arrays(5, &[&[8, 4], &[4, 3], &[4]]);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let err =
            check_gradients(&d, 6, |g, v| g.convolution(v[0], v[1], Some(v[2]), ConvMode::Depthwise1d, stride, pad));
        out.push((format!("depthwise stride {stride} pad {pad}"), err));
    }
    let p = arrays(6, &[&[5, 4], &[4, 6], &[6]]);
    let err = check_gradients(&p, 7, |g, v| g.convolution(v[0], v[1], Some(v[2]), ConvMode::Pointwise1d, 1, 0));
    out.push(("pointwise".into(), err));
    let ct = arrays(7, &[&[3, 4, 5]]);
    out.push(("channels_to_frames".into(), check_gradients(&ct, 8, |g, v| g.channels_to_frames(v[0]))));

    let dr = arrays(8, &[&[4, 6]]);
    let err = check_gradients(&dr, 9, |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        g.dropout(v[0], 0.3, true, &mut rng)
    });
    out.push(("dropout".into(), err));
    out
}

fn loss_gradient_error(grad_fn: impl Fn(&LossBatch) -> (f64, Vec<f64>), batch: &LossBatch) -> f64 {
    let (_, analytic) = grad_fn(batch);
    let mut worst: f64 = 0.0;
    for i in 0..batch.logits.len() {
        let mut plus = batch.clone();
        plus.logits[i] += STEP;
        let mut minus = batch.clone();
        minus.logits[i] -= STEP;
        let numeric = (grad_fn(&plus).0 - grad_fn(&minus).0) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Loss derivatives with respect to the logits.
pub fn loss_errors() -> Vec<(String, f64)> {
    let targets = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let logits = vec![0.3, -1.5, 2.2, -0.7, 4.0, 0.01];
    let batch = LossBatch::new(3, 2, targets, logits, vec![1.0, 3.5]).unwrap();
    let mut out = vec![("bce".to_string(), loss_gradient_error(|b| bce_with_logits_grad(b).unwrap(), &batch))];
    for (gamma, alpha) in [(0.0, None), (2.0, Some(0.25)), (1.5, Some(0.8)), (3.0, None)] {
        let err = loss_gradient_error(|b| focal_loss_grad(b, gamma, alpha).unwrap(), &batch);
        out.push((format!("focal gamma {gamma} alpha {alpha:?}"), err));
    }
    out
}

/// N=1, d=16, 2 heads, LSTM hidden 8, with perturbed gains and biases so
/// every path carries gradient.
pub fn tiny_model() -> Model<f64> {
    let cfg = ModelConfig {
        num_blocks: 1,
        d_model: 16,
        attention_heads: 2,
        ff_expansion: 2,
        conv_kernel: 3,
        subsample_channels: 2,
        lstm_layers: 1,
        lstm_hidden: 8,
        proj_dim: 8,
        num_mel_bins: 10,
        dropout_p: 0.0,
        spec_augment: AugmentPolicy::disabled(),
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..model.params.len() {
        if model.params.value(i).rank() == 1 {
            let shape = model.params.value(i).shape().to_vec();
            let noise = random_array(&mut rng, &shape, 0.3);
            for (p, n) in model.params.value_mut(i).data_mut().iter_mut().zip(noise.data()) {
                *p += n;
            }
        }
    }
    model
}

fn model_loss(model: &Model<f64>, f: &FeatureMatrix, labels: &LabelVector) -> (f64, Vec<Array<f64>>) {
    let mut s = Session::new(model, false, 0);
    let logits = s.logits(f).unwrap();
    let values = s.graph().value(logits).to_f64_vec();
    let weights = [1.0, 2.0, 1.0, 1.5, 1.0];
    let batch = LossBatch::from_labels(&Tag::ALL, model.config.head_mode, &[*labels], values, &weights).unwrap();
    let (loss, grad) = bce_with_logits_grad(&batch).unwrap();
    let node = s.graph_mut().loss_from_entries(logits, loss, grad).unwrap();
    let mut grads = s.graph().backward(node).unwrap();
    (loss, s.param_grads(&mut grads))
}

/// Worst relative error over every parameter of the tiny model on a
/// 12-frame input.
pub fn end_to_end_error() -> f64 {
    let mut model = tiny_model();
    let t = 12;
    let data: Vec<f32> = (0..t * 10).map(|i| ((i * 37 % 23) as f32 / 7.0).sin() * 3.0).collect();
    let f = FeatureMatrix::new(data, t, 10).unwrap();
    let labels = LabelVector::from_bits([1, 0, 1, 0, 1]);
    let (_, analytic) = model_loss(&model, &f, &labels);
    let mut worst: f64 = 0.0;
    for k in 0..model.params.len() {
        for i in 0..model.params.value(k).len() {
            let orig = model.params.value(k).data()[i];
            model.params.value_mut(k).data_mut()[i] = orig + STEP;
            let plus = model_loss(&model, &f, &labels).0;
            model.params.value_mut(k).data_mut()[i] = orig - STEP;
            let minus = model_loss(&model, &f, &labels).0;
            model.params.value_mut(k).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Input gradient of a session-level layer, reduced with fixed weights.
fn layer_input_error(x: &Array<f64>, layer: impl Fn(&mut Session<f64>, Var) -> Var) -> f64 {
    let model = tiny_model();
    let weights = {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut s = Session::new(&model, false, 0);
        let leaf = s.graph_mut().leaf(x.clone(), true);
        let y = layer(&mut s, leaf);
        random_array(&mut rng, s.graph().shape(y), 1.0)
    };
    let eval = |x: &Array<f64>| -> (f64, Array<f64>) {
        let mut s = Session::new(&model, false, 0);
        let leaf = s.graph_mut().leaf(x.clone(), true);
        let y = layer(&mut s, leaf);
        let w = s.input(weights.clone());
        let p = s.graph_mut().mul(y, w).unwrap();
        let m = s.graph_mut().sum(p).unwrap();
        let v = s.graph().value(m).data()[0];
        let mut grads = s.graph().backward(m).unwrap();
        (v, grads.take(leaf).unwrap())
    };
    let (_, analytic) = eval(x);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

pub fn conformer_block_error() -> f64 {
    let x = arrays(9, &[&[6, 16]]).remove(0);
    layer_input_error(&x, |s, v| s.conformer_block(v, 0).unwrap())
}

pub fn bilstm_error() -> f64 {
    let x = arrays(12, &[&[5, 16]]).remove(0);
    layer_input_error(&x, |s, v| s.bilstm_layer(v, 0).unwrap())
}

/// Every check, labelled.
pub fn all_errors() -> Vec<(String, f64)> {
    let mut out = op_errors();
    out.extend(loss_errors());
    out.push(("conformer block input".into(), conformer_block_error()));
    out.push(("bilstm input".into(), bilstm_error()));
    out.push(("tiny model parameters".into(), end_to_end_error()));
    out
}
