use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer};
use super::loss::{softmax, softmax_cross_entropy};
use super::tensor::{Param, Scalar, Tensor};
use crate::{exec, Error, Result};

/// Every model predicts one of the 256 S-box output values.
pub const NUM_CLASSES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lr,
    Mlp,
    Cnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lr => "LR",
            ModelKind::Mlp => "MLP",
            ModelKind::Cnn => "CNN",
        })
    }
}

fn default_mlp_hidden() -> Vec<usize> {
    vec![20, 20]
}
fn default_conv_channels() -> Vec<usize> {
    vec![64, 32, 16]
}
fn default_dense_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_dropout() -> f64 {
    0.2
}
fn default_momentum() -> f64 {
    0.1
}
fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[d]` for LR/MLP, `[H, W]` for the CNN.
    pub input_shape: Vec<usize>,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: Vec<usize>,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_dense_hidden")]
    pub dense_hidden: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_epsilon: f64,
}

impl ModelSpec {
    fn base(kind: ModelKind, input_shape: Vec<usize>) -> Self {
        ModelSpec {
            kind,
            input_shape,
            mlp_hidden: default_mlp_hidden(),
            conv_channels: default_conv_channels(),
            dense_hidden: default_dense_hidden(),
            dropout_rate: default_dropout(),
            bn_momentum: default_momentum(),
            bn_epsilon: default_bn_eps(),
        }
    }

    pub fn lr(input_dim: usize) -> Self {
        Self::base(ModelKind::Lr, vec![input_dim])
    }

    pub fn mlp(input_dim: usize) -> Self {
        Self::base(ModelKind::Mlp, vec![input_dim])
    }

    pub fn cnn(height: usize, width: usize) -> Self {
        Self::base(ModelKind::Cnn, vec![height, width])
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial size after the three pooling stages (floor division).
    pub fn cnn_feature_map(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[0], self.input_shape[1]);
        for _ in 0..self.conv_channels.len() {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("empty input shape {:?}", self.input_shape));
        }
        match self.kind {
            ModelKind::Lr | ModelKind::Mlp => {
                if self.input_shape.len() != 1 {
                    return bad(format!("{} expects a flat input, got {:?}", self.kind, self.input_shape));
                }
            }
            ModelKind::Cnn => {
                if self.input_shape.len() != 2 {
                    return bad(format!("CNN expects an [H, W] input, got {:?}", self.input_shape));
                }
                let (h, w) = self.cnn_feature_map();
                if h == 0 || w == 0 {
                    return bad(format!(
                        "input {:?} vanishes after {} pooling stages",
                        self.input_shape,
                        self.conv_channels.len()
                    ));
                }
            }
        }
        if self
            .mlp_hidden
            .iter()
            .chain(&self.conv_channels)
            .chain(&self.dense_hidden)
            .any(|&d| d == 0)
        {
            return bad("hidden sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Param<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Param::new(Tensor::from_vec(shape, data).unwrap())
}

fn zeros<T: Scalar>(n: usize) -> Param<T> {
    Param::new(Tensor::zeros(&[n]))
}

fn linear<T: Scalar>(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    Layer::Linear {
        weight: kaiming_uniform(&[out, inp], inp, rng),
        bias: zeros(out),
    }
}

fn conv<T: Scalar>(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    Layer::Conv2d {
        weight: kaiming_uniform(&[out, inp, 3, 3], inp * 9, rng),
        bias: zeros(out),
    }
}

fn batch_norm<T: Scalar>(n: usize, spec: &ModelSpec) -> Layer<T> {
    Layer::BatchNorm {
        gamma: Param::new(Tensor::from_vec(&[n], vec![T::one(); n]).unwrap()),
        beta: zeros(n),
        running_mean: vec![T::zero(); n],
        running_var: vec![T::one(); n],
        momentum: T::of(spec.bn_momentum),
        eps: T::of(spec.bn_epsilon),
    }
}

/// Builds a freshly initialized model. The input standardizer starts as the
/// identity; fit it with [`Model::fit_standardizer`].
pub fn make_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_len();
    let mut layers = vec![Layer::Standardize {
        mean: vec![T::zero(); d],
        inv_std: vec![T::one(); d],
    }];
    let dropout = || Layer::Dropout {
        rate: T::of(spec.dropout_rate),
    };
    match spec.kind {
        // zero start: the convex problem needs no symmetry breaking and the
        // untrained model scores exactly ln(256)
        ModelKind::Lr => layers.push(Layer::Linear {
            weight: Param::new(Tensor::zeros(&[NUM_CLASSES, d])),
            bias: zeros(NUM_CLASSES),
        }),
        ModelKind::Mlp => {
            let mut width = d;
            for &hdim in &spec.mlp_hidden {
                layers.push(linear(width, hdim, &mut rng));
                layers.push(batch_norm(hdim, spec));
                layers.push(Layer::Mish);
                layers.push(dropout());
                width = hdim;
            }
            layers.push(linear(width, NUM_CLASSES, &mut rng));
        }
        ModelKind::Cnn => {
            let mut ch = 1;
            for &c in &spec.conv_channels {
                layers.push(conv(ch, c, &mut rng));
                layers.push(batch_norm(c, spec));
                layers.push(Layer::Mish);
                layers.push(Layer::AvgPool2);
                ch = c;
            }
            layers.push(Layer::Flatten);
            let (h, w) = spec.cnn_feature_map();
            let mut width = ch * h * w;
            for &hdim in &spec.dense_hidden {
                layers.push(linear(width, hdim, &mut rng));
                layers.push(batch_norm(hdim, spec));
                layers.push(Layer::Mish);
                layers.push(dropout());
                width = hdim;
            }
            layers.push(linear(width, NUM_CLASSES, &mut rng));
        }
    }
    Ok(Model {
        spec: spec.clone(),
        layers,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d209),
    })
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from explicit layers; used for isolated layer checks.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer<T>>, seed: u64) -> Self {
        Model {
            spec,
            layers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    fn batch_shape(&self, rows: usize) -> Vec<usize> {
        match self.spec.kind {
            ModelKind::Cnn => vec![rows, 1, self.spec.input_shape[0], self.spec.input_shape[1]],
            _ => vec![rows, self.spec.input_len()],
        }
    }

    /// Wraps `rows` flat samples into a batch tensor of the model's shape.
    pub fn batch(&self, data: Vec<T>) -> Result<Tensor<T>> {
        let d = self.spec.input_len();
        if data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form samples of {d} features",
                data.len()
            )));
        }
        Tensor::from_vec(&self.batch_shape(data.len() / d), data)
    }

    /// Per-feature standardization with training-set statistics; constant
    /// features are centred but not scaled.
    pub fn fit_standardizer(&mut self, inputs: &[T]) {
        let d = self.spec.input_len();
        let n = inputs.len() / d;
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for row in inputs.chunks(d) {
            for (i, &v) in row.iter().enumerate() {
                mean[i] += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in inputs.chunks(d) {
            for (i, &v) in row.iter().enumerate() {
                sq[i] += (v.f64() - mean[i]).powi(2);
            }
        }
        if let Some(Layer::Standardize { mean: m, inv_std }) = self.layers.first_mut() {
            for i in 0..d {
                let sd = (sq[i] / n as f64).sqrt();
                m[i] = T::of(mean[i]);
                inv_std[i] = T::of(if sd > 1e-12 { 1.0 / sd } else { 1.0 });
            }
        }
    }

    /// Raw logits plus the per-layer caches of a forward pass.
    pub fn forward_logits(&mut self, x: Tensor<T>, mode: Mode) -> (Tensor<T>, Vec<Cache<T>>) {
        let train = mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in self.layers.iter_mut() {
            let (out, cache) = layer.forward(h, train, &mut self.rng);
            if train {
                layer.commit(&cache);
            }
            caches.push(cache);
            h = out;
        }
        (h, caches)
    }

    /// Class probabilities, `[B, 256]`.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval {
            return self.predict(x);
        }
        softmax(&self.forward_logits(x, mode).0)
    }

    /// Eval-mode logits without touching model state.
    pub fn eval_logits(&self, x: Tensor<T>) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(h, false, &mut rng).0;
        }
        h
    }

    /// Eval-mode probabilities without touching model state.
    pub fn predict(&self, x: Tensor<T>) -> Tensor<T> {
        softmax(&self.eval_logits(x))
    }

    /// Eval-mode mean cross-entropy over many flat samples.
    pub fn mean_loss(&self, inputs: &[T], labels: &[u8]) -> Result<f64> {
        const CHUNK: usize = 256;
        let d = self.spec.input_len();
        if inputs.len() != labels.len() * d {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} samples of width {d}",
                inputs.len(),
                labels.len()
            )));
        }
        let n = labels.len();
        let sums = exec::map_indexed(n.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let x = self.batch(inputs[lo * d..hi * d].to_vec()).expect("shape checked");
            let (loss, _) = softmax_cross_entropy(&self.eval_logits(x), &labels[lo..hi]);
            loss * (hi - lo) as f64
        });
        Ok(sums.iter().sum::<f64>() / n as f64)
    }

    /// Eval-mode probabilities for many flat samples, in chunks.
    pub fn predict_many(&self, inputs: &[T]) -> Result<Vec<T>> {
        const CHUNK: usize = 256;
        let d = self.spec.input_len();
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch(format!("{} values for input width {d}", inputs.len())));
        }
        let n = inputs.len() / d;
        let chunks = exec::map_indexed(n.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let x = self.batch(inputs[lo * d..hi * d].to_vec()).expect("shape checked");
            self.predict(x).data
        });
        Ok(chunks.concat())
    }

    /// Backpropagates `grad` through the layers, accumulating parameter
    /// gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, caches: Vec<Cache<T>>, grad: Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let first_param = if need_input_grad {
            0
        } else {
            self.layers.iter().position(|l| !l.params().is_empty()).unwrap_or(0)
        };
        let mut g = grad;
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            if i < first_param {
                break;
            }
            let need = need_input_grad || i > first_param;
            {
                let next = layer.backward(cache, g, need)?;
                g = next
            }
        }
        Some(g)
    }

    /// Zeroes gradients, runs a training-mode pass and accumulates the
    /// gradient of the mean cross-entropy. Returns the loss.
    pub fn loss_and_grad(&mut self, x: Tensor<T>, labels: &[u8]) -> f64 {
        self.zero_grad();
        let (logits, caches) = self.forward_logits(x, Mode::Train);
        let (loss, grad) = softmax_cross_entropy(&logits, labels);
        self.backward(caches, grad, false);
        loss
    }

    /// Copies learned parameters and batch-norm statistics from `other`
    /// (same architecture). The input standardizer stays as is.
    pub fn transfer_from(&mut self, other: &Model<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("transfer between different architectures".into()));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            match (dst, src) {
                (Layer::Standardize { .. }, Layer::Standardize { .. }) => {}
                (d, s) => {
                    if std::mem::discriminant(d) != std::mem::discriminant(s) {
                        return Err(Error::ShapeMismatch("layer kinds differ".into()));
                    }
                    let shapes_match = d.params().iter().zip(s.params()).all(|(a, b)| a.value.shape == b.value.shape);
                    if !shapes_match {
                        return Err(Error::ShapeMismatch("layer shapes differ".into()));
                    }
                    let keep = d.params().iter().map(|p| p.grad.len()).collect::<Vec<_>>();
                    *d = s.clone();
                    for (p, n) in d.params_mut().into_iter().zip(keep) {
                        p.grad = vec![T::zero(); n];
                    }
                }
            }
        }
        Ok(())
    }

    /// Named tensors in checkpoint order: per layer, standardizer
    /// `mean, inv_std`; linear/conv `weight, bias`; batch norm
    /// `gamma, beta, running_mean, running_var`.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Standardize { mean, inv_std } => {
                    out.push((format!("{i}.mean"), vec![mean.len()], mean.clone()));
                    out.push((format!("{i}.inv_std"), vec![inv_std.len()], inv_std.clone()));
                }
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => {
                    out.push((format!("{i}.weight"), weight.value.shape.clone(), weight.value.data.clone()));
                    out.push((format!("{i}.bias"), bias.value.shape.clone(), bias.value.data.clone()));
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let n = running_mean.len();
                    out.push((format!("{i}.gamma"), vec![n], gamma.value.data.clone()));
                    out.push((format!("{i}.beta"), vec![n], beta.value.data.clone()));
                    out.push((format!("{i}.running_mean"), vec![n], running_mean.clone()));
                    out.push((format!("{i}.running_var"), vec![n], running_var.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Flat concatenation of [`Model::state`].
    pub fn state_vector(&self) -> Vec<T> {
        self.state().into_iter().flat_map(|(_, _, v)| v).collect()
    }

    pub fn load_state_vector(&mut self, values: &[T]) -> Result<()> {
        let expect: usize = self.state().iter().map(|(_, _, v)| v.len()).sum();
        if values.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "state has {} values, model expects {expect}",
                values.len()
            )));
        }
        let mut it = values.iter().cloned();
        let mut fill = |dst: &mut [T]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for l in self.layers.iter_mut() {
            match l {
                Layer::Standardize { mean, inv_std } => {
                    fill(mean);
                    fill(inv_std);
                }
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => {
                    fill(&mut weight.value.data);
                    fill(&mut bias.value.data);
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    fill(&mut gamma.value.data);
                    fill(&mut beta.value.data);
                    fill(running_mean);
                    fill(running_var);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self, seed: u64) -> Model<U> {
        let mut m = make_model::<U>(&self.spec, seed).expect("spec was valid");
        let v: Vec<U> = self.state_vector().iter().map(|x| U::of(x.f64())).collect();
        m.load_state_vector(&v).expect("same architecture");
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let m = make_model::<f32>(&ModelSpec::mlp(10), 0).unwrap();
        // linear(10,20) + bn(20) + linear(20,20) + bn(20) + linear(20,256)
        let expect = (10 * 20 + 20) + 2 * 20 + (20 * 20 + 20) + 2 * 20 + (20 * 256 + 256);
        assert_eq!(m.param_count(), expect);
        assert_eq!(expect, 6096);
    }

    #[test]
    fn lr_is_one_matrix_and_bias() {
        let m = make_model::<f32>(&ModelSpec::lr(7), 0).unwrap();
        let params: Vec<_> = m.layers.iter().flat_map(|l| l.params()).collect();
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].value.shape, vec![256, 7]);
        assert_eq!(params[1].value.shape, vec![256]);
    }

    #[test]
    fn cnn_pooling_floors() {
        let spec = ModelSpec::cnn(201, 201);
        assert_eq!(spec.cnn_feature_map(), (25, 25));
        let m = make_model::<f32>(&spec, 0).unwrap();
        let conv = 9 * 64 + 64 + 64 * 9 * 32 + 32 + 32 * 9 * 16 + 16;
        let bn = 2 * (64 + 32 + 16) + 2 * (64 + 64);
        let dense = (16 * 25 * 25 * 64 + 64) + (64 * 64 + 64) + (64 * 256 + 256);
        assert_eq!(m.param_count(), conv + bn + dense);

        let spec = ModelSpec::cnn(64, 64);
        assert_eq!(spec.cnn_feature_map(), (8, 8));
        assert!(make_model::<f32>(&spec, 0).is_ok());
        assert!(make_model::<f32>(&ModelSpec::cnn(7, 7), 0).is_err());
        let mut flat = ModelSpec::cnn(16, 16);
        flat.input_shape = vec![256];
        assert!(make_model::<f32>(&flat, 0).is_err());
    }

    #[test]
    fn probabilities_are_normalized_and_eval_is_deterministic() {
        let mut spec = ModelSpec::cnn(12, 12);
        spec.conv_channels = vec![2, 2, 2];
        spec.dense_hidden = vec![8, 8];
        let mut m = make_model::<f32>(&spec, 3).unwrap();
        let data: Vec<f32> = (0..4 * 144).map(|i| ((i * 7919) % 97) as f32 / 10.0).collect();
        let x = m.batch(data.clone()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let p = m.forward(x.clone(), mode);
            for r in 0..4 {
                let s: f64 = p.row(r).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }
        let a = m.forward(x.clone(), Mode::Eval);
        let b = m.forward(x, Mode::Eval);
        assert_eq!(a, b);
        assert_eq!(m.predict_many(&data).unwrap(), a.data);
    }

    #[test]
    fn state_round_trip_and_transfer() {
        let mut a = make_model::<f64>(&ModelSpec::mlp(5), 1).unwrap();
        let b = make_model::<f64>(&ModelSpec::mlp(5), 2).unwrap();
        assert_ne!(a.state_vector(), b.state_vector());
        a.fit_standardizer(&[1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 2.0, 1.0, 0.0, -1.0]);
        let stdz = a.state()[..2].to_vec();
        a.transfer_from(&b).unwrap();
        assert_eq!(a.state()[..2], stdz[..]);
        assert_eq!(a.state()[2..], b.state()[2..]);
        let v = b.state_vector();
        let mut c = make_model::<f64>(&ModelSpec::mlp(5), 9).unwrap();
        c.load_state_vector(&v).unwrap();
        assert_eq!(c.state_vector(), v);
        assert!(c.load_state_vector(&v[1..]).is_err());
        let lr = make_model::<f64>(&ModelSpec::lr(5), 0).unwrap();
        assert!(a.transfer_from(&lr).is_err());
    }
}
