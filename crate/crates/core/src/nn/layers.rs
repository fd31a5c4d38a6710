//! Layers with explicit forward/backward passes.
//!
//! Activations are `[B, F]` for dense layers and `[B, C, H, W]` for
//! convolutional ones. `forward` takes `&self`; batch-norm running statistics
//! are folded in afterwards through [`Layer::commit`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{axpy, dot, Param, Scalar, Tensor};
use crate::exec;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// Per-feature `(x - mean) * inv_std`; buffers fitted on training data.
    Standardize {
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    /// `y = x W^T + b`, weight `[out, in]`.
    Linear {
        weight: Param<T>,
        bias: Param<T>,
    },
    /// 3x3 convolution, stride 1, zero padding 1; weight `[out, in, 3, 3]`.
    Conv2d {
        weight: Param<T>,
        bias: Param<T>,
    },
    /// Per-feature (2-D input) or per-channel (4-D input) batch norm.
    BatchNorm {
        gamma: Param<T>,
        beta: Param<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        momentum: T,
        eps: T,
    },
    Mish,
    Dropout {
        rate: T,
    },
    /// 2x2 average pooling, stride 2; odd trailing rows/columns are dropped.
    AvgPool2,
    Flatten,
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Empty,
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Mask(Vec<T>),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        count: usize,
    },
}

fn channels_and_spatial(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("batch norm expects a 2-D or 4-D input, got {shape:?}"),
    }
}

fn transposed<T: Scalar>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// Mish and its derivative from a single exponential:
/// `tanh(softplus(x)) = n / (n + 2)` with `n = e^x (e^x + 2)`.
#[inline]
pub fn mish<T: Scalar>(x: T) -> (T, T) {
    if x > T::of(20.0) {
        return (x, T::one());
    }
    let e = x.exp();
    let n = e * (e + T::of(2.0));
    let t = n / (n + T::of(2.0));
    let sig = e / (T::one() + e);
    (x * t, t + x * (T::one() - t * t) * sig)
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn forward(&self, x: Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Standardize { mean, inv_std } => {
                let mut y = x;
                let f = mean.len();
                assert_eq!(y.row_len(), f, "standardizer width");
                for row in y.data.chunks_mut(f) {
                    for ((v, &m), &s) in row.iter_mut().zip(mean).zip(inv_std) {
                        *v = (*v - m) * s;
                    }
                }
                (y, Cache::Empty)
            }
            Layer::Linear { weight, bias } => {
                let (out, inp) = (weight.value.shape[0], weight.value.shape[1]);
                assert_eq!(x.row_len(), inp, "linear input width");
                let b = x.rows();
                let wt = transposed(&weight.value.data, out, inp);
                let mut y = Tensor::zeros(&[b, out]);
                for (xr, yr) in x.data.chunks(inp).zip(y.data.chunks_mut(out)) {
                    yr.copy_from_slice(&bias.value.data);
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi != T::zero() {
                            axpy(xi, &wt[i * out..(i + 1) * out], yr);
                        }
                    }
                }
                (y, Cache::Input(x))
            }
            Layer::Conv2d { weight, bias } => {
                let y = conv_forward(&x, &weight.value, &bias.value.data);
                (y, Cache::Input(x))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let (b, c, s) = channels_and_spatial(&x.shape);
                let mut y = x;
                if !train {
                    for bi in 0..b {
                        for ci in 0..c {
                            let inv = T::one() / (running_var[ci] + *eps).sqrt();
                            let (g, be, m) = (gamma.value.data[ci], beta.value.data[ci], running_mean[ci]);
                            for v in &mut y.data[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                                *v = g * (*v - m) * inv + be;
                            }
                        }
                    }
                    return (y, Cache::Empty);
                }
                let count = b * s;
                let nf = T::of(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for (ci, m) in mean.iter_mut().enumerate() {
                        let seg = &y.data[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                        *m += seg.iter().cloned().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                for bi in 0..b {
                    for ci in 0..c {
                        let seg = &y.data[(bi * c + ci) * s..(bi * c + ci + 1) * s];
                        var[ci] += seg.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); y.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                        let (g, be) = (gamma.value.data[ci], beta.value.data[ci]);
                        for (v, xh) in y.data[r.clone()].iter_mut().zip(&mut xhat[r]) {
                            *xh = (*v - mean[ci]) * inv_std[ci];
                            *v = g * *xh + be;
                        }
                    }
                }
                (
                    y,
                    Cache::Norm {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        count,
                    },
                )
            }
            Layer::Mish => {
                let y = Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|&v| mish(v).0).collect(),
                };
                (y, Cache::Input(x))
            }
            Layer::Dropout { rate } => {
                if !train || *rate == T::zero() {
                    return (x, Cache::Empty);
                }
                let keep = T::one() - *rate;
                let scale = T::one() / keep;
                let p = rate.f64();
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() >= p { scale } else { T::zero() })
                    .collect();
                let mut y = x;
                y.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                (y, Cache::Mask(mask))
            }
            Layer::AvgPool2 => {
                let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (h2, w2) = (h / 2, w / 2);
                let mut y = Tensor::zeros(&[b, c, h2, w2]);
                let q = T::of(0.25);
                for plane in 0..b * c {
                    let src = &x.data[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut y.data[plane * h2 * w2..(plane + 1) * h2 * w2];
                    for oy in 0..h2 {
                        let r0 = &src[2 * oy * w..];
                        let r1 = &src[(2 * oy + 1) * w..];
                        for ox in 0..w2 {
                            dst[oy * w2 + ox] = q * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
                        }
                    }
                }
                (y, Cache::Shape(x.shape))
            }
            Layer::Flatten => {
                let shape = x.shape.clone();
                let b = x.rows();
                let f = x.row_len();
                (
                    Tensor {
                        shape: vec![b, f],
                        data: x.data,
                    },
                    Cache::Shape(shape),
                )
            }
        }
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates (unbiased variance, exponential moving average).
    pub fn commit(&mut self, cache: &Cache<T>) {
        if let (
            Layer::BatchNorm {
                running_mean,
                running_var,
                momentum,
                ..
            },
            Cache::Norm {
                batch_mean,
                batch_var,
                count,
                ..
            },
        ) = (self, cache)
        {
            let n = *count as f64;
            let unbias = if n > 1.0 { T::of(n / (n - 1.0)) } else { T::one() };
            let keep = T::one() - *momentum;
            for i in 0..running_mean.len() {
                running_mean[i] = keep * running_mean[i] + *momentum * batch_mean[i];
                running_var[i] = keep * running_var[i] + *momentum * batch_var[i] * unbias;
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, cache: Cache<T>, g: Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        match self {
            Layer::Standardize { inv_std, .. } => {
                if !need_input_grad {
                    return None;
                }
                let mut dx = g;
                let f = inv_std.len();
                for row in dx.data.chunks_mut(f) {
                    row.iter_mut().zip(inv_std.iter()).for_each(|(v, &s)| *v *= s);
                }
                Some(dx)
            }
            Layer::Linear { weight, bias } => {
                let Cache::Input(x) = cache else { unreachable!("linear cache") };
                let (out, inp) = (weight.value.shape[0], weight.value.shape[1]);
                // accumulate in [in, out] layout so every inner loop is contiguous
                let mut gwt = vec![T::zero(); inp * out];
                let wt = need_input_grad.then(|| transposed(&weight.value.data, out, inp));
                let mut dx = need_input_grad.then(|| Tensor::zeros(&x.shape));
                for (bi, gr) in g.data.chunks(out).enumerate() {
                    axpy(T::one(), gr, &mut bias.grad);
                    for (i, &xi) in x.row(bi).iter().enumerate() {
                        if xi != T::zero() {
                            axpy(xi, gr, &mut gwt[i * out..(i + 1) * out]);
                        }
                    }
                    if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
                        for (i, d) in dx.data[bi * inp..(bi + 1) * inp].iter_mut().enumerate() {
                            *d = dot(gr, &wt[i * out..(i + 1) * out]);
                        }
                    }
                }
                for o in 0..out {
                    for i in 0..inp {
                        weight.grad[o * inp + i] += gwt[i * out + o];
                    }
                }
                dx
            }
            Layer::Conv2d { weight, bias } => {
                let Cache::Input(x) = cache else { unreachable!("conv cache") };
                conv_backward(&x, &g, weight, bias, need_input_grad)
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                let Cache::Norm { xhat, inv_std, count, .. } = cache else {
                    unreachable!("batch norm backward needs a training-mode cache")
                };
                let (b, c, s) = channels_and_spatial(&g.shape);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                        for (&gv, &xh) in g.data[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * xh;
                        }
                    }
                }
                for ci in 0..c {
                    gamma.grad[ci] += sum_gx[ci];
                    beta.grad[ci] += sum_g[ci];
                }
                if !need_input_grad {
                    return None;
                }
                let m = T::of(count as f64);
                let mut dx = g;
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                        let k = gamma.value.data[ci] * inv_std[ci] / m;
                        for (v, &xh) in dx.data[r.clone()].iter_mut().zip(&xhat[r]) {
                            *v = k * (m * *v - sum_g[ci] - xh * sum_gx[ci]);
                        }
                    }
                }
                Some(dx)
            }
            Layer::Mish => {
                let Cache::Input(x) = cache else { unreachable!("mish cache") };
                let mut dx = g;
                dx.data.iter_mut().zip(&x.data).for_each(|(v, &xi)| *v *= mish(xi).1);
                Some(dx)
            }
            Layer::Dropout { .. } => {
                let mut dx = g;
                if let Cache::Mask(mask) = cache {
                    dx.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                }
                Some(dx)
            }
            Layer::AvgPool2 => {
                let Cache::Shape(shape) = cache else { unreachable!("pool cache") };
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (h2, w2) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(&shape);
                let q = T::of(0.25);
                for plane in 0..b * c {
                    let src = &g.data[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            let v = q * src[oy * w2 + ox];
                            dst[2 * oy * w + 2 * ox] = v;
                            dst[2 * oy * w + 2 * ox + 1] = v;
                            dst[(2 * oy + 1) * w + 2 * ox] = v;
                            dst[(2 * oy + 1) * w + 2 * ox + 1] = v;
                        }
                    }
                }
                Some(dx)
            }
            Layer::Flatten => {
                let Cache::Shape(shape) = cache else {
                    unreachable!("flatten cache")
                };
                Some(Tensor { shape, data: g.data })
            }
        }
    }
}

/// Index range of output columns `x` such that `x + dx` stays in `0..w`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
    (lo, hi.max(lo))
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Tensor<T> {
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let co = weight.shape[0];
    assert_eq!(weight.shape[1], ci, "conv input channels");
    let hw = h * w;
    let mut y = Tensor::zeros(&[b, co, h, w]);
    exec::for_each_chunk_mut(&mut y.data, co * hw, |bi, out| {
        let inp = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
        for o in 0..co {
            let out_o = &mut out[o * hw..(o + 1) * hw];
            out_o.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..ci {
                let in_c = &inp[c * hw..(c + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = weight.data[((o * ci + c) * 3 + ky) * 3 + kx];
                        for yy in y0..y1 {
                            let iy = (yy as isize + dy) as usize;
                            let src = &in_c[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                            axpy(wv, src, &mut out_o[yy * w + x0..yy * w + x1]);
                        }
                    }
                }
            }
        }
    });
    y
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    weight: &mut Param<T>,
    bias: &mut Param<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let co = weight.value.shape[0];
    let hw = h * w;
    let wdata = &weight.value.data;
    // per-sample partial gradients, reduced below in sample order
    let parts = exec::map_indexed(b, |bi| {
        let inp = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
        let gs = &g.data[bi * co * hw..(bi + 1) * co * hw];
        let mut dw = vec![T::zero(); co * ci * 9];
        let mut db = vec![T::zero(); co];
        let mut dx = if need_input_grad { vec![T::zero(); ci * hw] } else { Vec::new() };
        for o in 0..co {
            let g_o = &gs[o * hw..(o + 1) * hw];
            db[o] = g_o.iter().cloned().sum();
            for c in 0..ci {
                let in_c = &inp[c * hw..(c + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..3 {
                        let dxo = kx as isize - 1;
                        let (x0, x1) = valid_range(w, dxo);
                        let widx = ((o * ci + c) * 3 + ky) * 3 + kx;
                        let wv = wdata[widx];
                        let mut acc = T::zero();
                        for yy in y0..y1 {
                            let iy = (yy as isize + dy) as usize;
                            let s0 = iy * w + (x0 as isize + dxo) as usize;
                            let s1 = iy * w + (x1 as isize + dxo) as usize;
                            let grow = &g_o[yy * w + x0..yy * w + x1];
                            acc += dot(grow, &in_c[s0..s1]);
                            if need_input_grad {
                                axpy(wv, grow, &mut dx[c * hw + s0..c * hw + s1]);
                            }
                        }
                        dw[widx] = acc;
                    }
                }
            }
        }
        (dw, db, dx)
    });
    let mut dx_all = need_input_grad.then(|| Tensor::zeros(&x.shape));
    for (bi, (dw, db, dx)) in parts.into_iter().enumerate() {
        weight.grad.iter_mut().zip(&dw).for_each(|(a, &v)| *a += v);
        bias.grad.iter_mut().zip(&db).for_each(|(a, &v)| *a += v);
        if let Some(all) = dx_all.as_mut() {
            all.data[bi * ci * hw..(bi + 1) * ci * hw].copy_from_slice(&dx);
        }
    }
    dx_all
}
