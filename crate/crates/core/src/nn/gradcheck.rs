//! Central finite-difference checks of the backward passes, in f64.
//!
//! Every check returns the largest relative error it saw, so callers pick
//! their own tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Layer;
use super::loss::softmax_cross_entropy;
use super::{make_model, Mode, Model, ModelSpec, Param, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Largest trunk (all parameters except the 256-way head) checked in full.
pub const MAX_TRUNK_PARAMS: usize = 500;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).expect("shape")
}

fn param(shape: &[usize], rng: &mut ChaCha8Rng) -> Param<f64> {
    Param::new(random_tensor(shape, rng))
}

/// `sum(r * layer(x))` with the layer's randomness pinned.
fn objective(layer: &Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (y, _) = layer.forward(x.clone(), true, &mut rng);
    y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

/// Checks every parameter and input gradient of one layer in training mode.
pub fn layer_error(mut layer: Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
    let mut fwd = ChaCha8Rng::seed_from_u64(77);
    let (y, cache) = layer.forward(x.clone(), true, &mut fwd);
    let r = random_tensor(&y.shape, &mut ChaCha8Rng::seed_from_u64(seed));
    layer.params_mut().into_iter().for_each(|p| p.zero_grad());
    let gx = layer.backward(cache, r.clone(), true).expect("input gradient");

    let mut worst: f64 = 0.0;
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
    for (pi, g) in grads.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let mut plus = layer.clone();
            plus.params_mut()[pi].value.data[j] += STEP;
            let mut minus = layer.clone();
            minus.params_mut()[pi].value.data[j] -= STEP;
            let num = (objective(&plus, x, &r) - objective(&minus, x, &r)) / (2.0 * STEP);
            worst = worst.max(rel_err(gj, num));
        }
    }
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp.data[j] += STEP;
        let mut xm = x.clone();
        xm.data[j] -= STEP;
        let num = (objective(&layer, &xp, &r) - objective(&layer, &xm, &r)) / (2.0 * STEP);
        worst = worst.max(rel_err(gx.data[j], num));
    }
    worst
}

fn model_loss(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    model.reseed(11);
    let (logits, _) = model.forward_logits(x.clone(), Mode::Train);
    softmax_cross_entropy(&logits, labels).0
}

/// Cross-entropy gradient check of a whole model. Parameters wider than 300
/// (the output head) are sampled at a stride of 37; everything else and
/// every input element is checked.
pub fn model_error(mut model: Model<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    model.reseed(11);
    model.zero_grad();
    let (logits, caches) = model.forward_logits(x.clone(), Mode::Train);
    let (_, g) = softmax_cross_entropy(&logits, labels);
    let gx = model.backward(caches, g, true).expect("input gradient");
    let grads: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let stride = if g.len() > 300 { 37 } else { 1 };
        for j in (0..g.len()).step_by(stride) {
            let orig = model.params_mut()[pi].value.data[j];
            model.params_mut()[pi].value.data[j] = orig + STEP;
            let lp = model_loss(&mut model, x, labels);
            model.params_mut()[pi].value.data[j] = orig - STEP;
            let lm = model_loss(&mut model, x, labels);
            model.params_mut()[pi].value.data[j] = orig;
            worst = worst.max(rel_err(g[j], (lp - lm) / (2.0 * STEP)));
        }
    }
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp.data[j] += STEP;
        let mut xm = x.clone();
        xm.data[j] -= STEP;
        let num = (model_loss(&mut model, &xp, labels) - model_loss(&mut model, &xm, labels)) / (2.0 * STEP);
        worst = worst.max(rel_err(gx.data[j], num));
    }
    worst
}

/// Parameters outside the final linear layer.
pub fn trunk_params(model: &mut Model<f64>) -> usize {
    let head: usize = model.params_mut().iter().rev().take(2).map(|p| p.value.len()).sum();
    model.param_count() - head
}

fn bn(n: usize, rng: &mut ChaCha8Rng) -> Layer<f64> {
    Layer::BatchNorm {
        gamma: param(&[n], rng),
        beta: param(&[n], rng),
        running_mean: vec![0.0; n],
        running_var: vec![1.0; n],
        momentum: 0.1,
        eps: 1e-5,
    }
}

/// One case per layer type.
pub fn layer_cases() -> Vec<(&'static str, Layer<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = Vec::new();
    let linear = Layer::Linear {
        weight: param(&[4, 5], &mut rng),
        bias: param(&[4], &mut rng),
    };
    cases.push(("linear", linear, random_tensor(&[3, 5], &mut rng)));
    let conv = Layer::Conv2d {
        weight: param(&[3, 2, 3, 3], &mut rng),
        bias: param(&[3], &mut rng),
    };
    cases.push(("conv2d", conv, random_tensor(&[2, 2, 5, 4], &mut rng)));
    let b = bn(3, &mut rng);
    cases.push(("batch_norm_dense", b, random_tensor(&[6, 3], &mut rng)));
    let b = bn(2, &mut rng);
    cases.push(("batch_norm_spatial", b, random_tensor(&[3, 2, 3, 3], &mut rng)));
    let mut x = random_tensor(&[4, 6], &mut rng);
    x.data[0] = 3.0;
    x.data[1] = -6.0;
    cases.push(("mish", Layer::Mish, x));
    cases.push(("dropout", Layer::Dropout { rate: 0.3 }, random_tensor(&[5, 8], &mut rng)));
    cases.push(("avg_pool_odd", Layer::AvgPool2, random_tensor(&[2, 2, 5, 7], &mut rng)));
    cases.push(("flatten", Layer::Flatten, random_tensor(&[2, 3, 2, 2], &mut rng)));
    let st = Layer::Standardize {
        mean: vec![0.1, -0.2, 0.3],
        inv_std: vec![2.0, 0.5, 1.5],
    };
    cases.push(("standardize", st, random_tensor(&[4, 3], &mut rng)));
    cases
}

/// Name, model, input batch and labels.
pub type ModelCase = (&'static str, Model<f64>, Tensor<f64>, Vec<u8>);

/// Micro MLP, CNN and logistic regression with inputs and labels.
pub fn model_cases() -> Vec<ModelCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);

    let mut spec = ModelSpec::mlp(4);
    spec.mlp_hidden = vec![3, 3];
    let mut mlp = make_model::<f64>(&spec, 21).expect("mlp");
    let x = random_tensor(&[5, 4], &mut rng);
    mlp.fit_standardizer(&x.data);
    let mut cases = vec![("micro_mlp", mlp, x, vec![0, 7, 255, 7, 100])];

    let mut spec = ModelSpec::cnn(8, 8);
    spec.conv_channels = vec![2, 2, 2];
    spec.dense_hidden = vec![3, 3];
    let cnn = make_model::<f64>(&spec, 23).expect("cnn");
    cases.push(("micro_cnn", cnn, random_tensor(&[3, 1, 8, 8], &mut rng), vec![1, 2, 3]));

    let lr = make_model::<f64>(&ModelSpec::lr(3), 25).expect("lr");
    cases.push(("logistic_regression", lr, random_tensor(&[4, 3], &mut rng), vec![9, 9, 0, 200]));
    cases
}
