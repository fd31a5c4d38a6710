use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::{Ranger, RangerConfig};
use super::tensor::Scalar;
use crate::{Error, Result};

fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    1000
}
fn d_patience() -> usize {
    100
}
fn d_min_delta() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Epochs without improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Improvement means `val_loss < best - min_delta`.
    #[serde(default = "d_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub optimizer: RangerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            batch_size: d_batch(),
            learning_rate: d_lr(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            min_delta: d_min_delta(),
            optimizer: RangerConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Labelled samples, row-major `[n, input_len]`.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a, T> {
    pub inputs: &'a [T],
    pub labels: &'a [u8],
}

impl<T> Samples<'_, T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience-based stopping rule on a loss sequence.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Progress {
        self.epoch += 1;
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss; 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // a single-sample batch has no batch statistics
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Mini-batch training with Ranger and early stopping on validation loss.
/// Starts from the model's current weights (pass a transferred model to
/// fine-tune) and leaves the best-validation weights in place.
pub fn train<T: Scalar>(model: &mut Model<T>, train: Samples<T>, val: Samples<T>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
    }
    let d = model.spec.input_len();
    if train.inputs.len() != train.len() * d || val.inputs.len() != val.len() * d {
        return Err(Error::ShapeMismatch(format!("samples do not match model input width {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.reseed(cfg.seed ^ 0xd40f_0a7d);
    let mut opt = {
        let params = model.params_mut();
        Ranger::new(&params, cfg.learning_rate, cfg.optimizer)
    };
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best_state = model.state_vector();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut xbuf: Vec<T> = Vec::new();
    let mut ybuf: Vec<u8> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            xbuf.clear();
            ybuf.clear();
            for &i in batch {
                xbuf.extend_from_slice(&train.inputs[i * d..(i + 1) * d]);
                ybuf.push(train.labels[i]);
            }
            let x = model.batch(std::mem::take(&mut xbuf))?;
            let loss = model.loss_and_grad(x, &ybuf);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            let mut params = model.params_mut();
            opt.step(&mut params);
        }
        let val_loss = model.mean_loss(val.inputs, val.labels)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        history.train_loss.push(total / train.len() as f64);
        history.val_loss.push(val_loss);
        match stopper.observe(val_loss) {
            Progress::Improved => best_state = model.state_vector(),
            Progress::Stalled => {}
            Progress::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.load_state_vector(&best_state)?;
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best();
    Ok(history)
}
