//! Ranger: rectified Adam with Lookahead slow weights.

use serde::{Deserialize, Serialize};

use super::tensor::{Param, Scalar};

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_k() -> usize {
    6
}
fn d_alpha() -> f64 {
    0.5
}
fn d_threshold() -> f64 {
    5.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangerConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Lookahead synchronization period.
    #[serde(default = "d_k")]
    pub lookahead_k: usize,
    /// Lookahead blend factor.
    #[serde(default = "d_alpha")]
    pub lookahead_alpha: f64,
    /// The rectified step is used once the SMA length exceeds this.
    #[serde(default = "d_threshold")]
    pub rectify_threshold: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        RangerConfig {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            lookahead_k: d_k(),
            lookahead_alpha: d_alpha(),
            rectify_threshold: d_threshold(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ranger<T> {
    pub cfg: RangerConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    slow: Vec<Vec<T>>,
}

impl<T: Scalar> Ranger<T> {
    /// Moments start at zero and the slow weights at the current parameters.
    pub fn new(params: &[&mut Param<T>], lr: f64, cfg: RangerConfig) -> Self {
        Ranger {
            cfg,
            lr,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            slow: params.iter().map(|p| p.value.data.clone()).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for another model");
        self.step += 1;
        let t = self.step as f64;
        let RangerConfig { beta1, beta2, eps, .. } = self.cfg;
        let bias1 = 1.0 - beta1.powf(t);
        let b2t = beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rectified = rho_t > self.cfg.rectify_threshold;
        let step_size = if rectified {
            let r = ((1.0 - b2t) * (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            self.lr * r / bias1
        } else {
            self.lr / bias1
        };
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (c1, c2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (ss, e) = (T::of(step_size), T::of(eps));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.grad.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + c1 * g;
                v[j] = b2 * v[j] + c2 * g * g;
                let upd = if rectified { m[j] / (v[j].sqrt() + e) } else { m[j] };
                p.value.data[j] -= ss * upd;
            }
        }
        let k = self.cfg.lookahead_k.max(1) as u64;
        if self.step.is_multiple_of(k) {
            let a = T::of(self.cfg.lookahead_alpha);
            for (p, slow) in params.iter_mut().zip(self.slow.iter_mut()) {
                for (w, s) in p.value.data.iter_mut().zip(slow.iter_mut()) {
                    *s += a * (*w - *s);
                    *w = *s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn scalar(v: f64) -> Param<f64> {
        Param::new(Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    /// Reference RAdam + Lookahead on one scalar, written directly from the
    /// update equations.
    fn reference(theta0: f64, grad: f64, lr: f64, k: u64, alpha: f64, steps: u64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut m, mut v, mut theta, mut slow) = (0.0, 0.0, theta0, theta0);
        let mut out = vec![];
        for t in 1..=steps {
            let tf = t as f64;
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let rho = rho_inf - 2.0 * tf * b2.powi(t as i32) / (1.0 - b2.powi(t as i32));
            if rho > 5.0 {
                let l = (1.0 - b2.powi(t as i32)).sqrt() / (v.sqrt() + eps);
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                theta -= lr * m_hat * r * l;
            } else {
                theta -= lr * m_hat;
            }
            if t % k == 0 {
                slow += alpha * (theta - slow);
                theta = slow;
            }
            out.push(theta);
        }
        out
    }

    #[test]
    fn matches_reference_on_constant_gradient() {
        for (k, alpha) in [(6, 0.5), (1, 1.0), (3, 0.25)] {
            let cfg = RangerConfig {
                lookahead_k: k,
                lookahead_alpha: alpha,
                ..Default::default()
            };
            let mut p = scalar(1.5);
            let mut opt = Ranger::new(&[&mut p], 0.01, cfg);
            let expect = reference(1.5, 0.3, 0.01, k as u64, alpha, 40);
            for e in expect {
                p.grad[0] = 0.3;
                opt.step(&mut [&mut p]);
                assert!((p.value.data[0] - e).abs() < 1e-12, "k={k}: {} vs {e}", p.value.data[0]);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(-2.0);
        let mut opt = Ranger::new(&[&mut p], 0.1, RangerConfig::default());
        for _ in 0..20 {
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.value.data[0], -2.0);
    }

    #[test]
    fn lookahead_with_unit_blend_is_a_no_op() {
        let cfg = RangerConfig {
            lookahead_k: 1,
            lookahead_alpha: 1.0,
            ..Default::default()
        };
        let off = RangerConfig {
            lookahead_k: usize::MAX,
            ..Default::default()
        };
        let (mut a, mut b) = (scalar(0.7), scalar(0.7));
        let mut oa = Ranger::new(&[&mut a], 0.05, cfg);
        let mut ob = Ranger::new(&[&mut b], 0.05, off);
        for i in 0..30 {
            let g = (i as f64 * 0.37).sin();
            a.grad[0] = g;
            b.grad[0] = g;
            oa.step(&mut [&mut a]);
            ob.step(&mut [&mut b]);
            assert_eq!(a.value.data[0], b.value.data[0]);
        }
    }

    #[test]
    fn warmup_uses_momentum_step() {
        // first step: rho_1 = 1 <= 5, so theta -= lr * m_hat = lr * g
        let mut p = scalar(0.0);
        let mut opt = Ranger::new(&[&mut p], 0.1, RangerConfig::default());
        p.grad[0] = 2.0;
        opt.step(&mut [&mut p]);
        assert!((p.value.data[0] + 0.2).abs() < 1e-12);
    }
}
