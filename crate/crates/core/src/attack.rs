//! Profiled per-byte attacks, the iterative transfer-learning (ITL) chain
//! and the correlation baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aes::{hamming_weight, sbox, KeyBytes};
use crate::dataset::{ensure_dir, read_json, write_json, PermutationStream, FORMAT_VERSION};
use crate::keyrank::{self, MtdResult, RankCurve};
use crate::nn::{self, checkpoint, make_model, History, Model, ModelKind, ModelSpec, Samples, TrainConfig};
use crate::preprocess::{gather, pixel_std_map, top_k_pixels, FeatureBundle, Stage};
use crate::sim::Modality;
use crate::{exec, Error, Result};

/// Which view of a trace a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStage {
    Top200,
    Ranked50,
    Selected10,
    FullMap,
}

impl InputStage {
    /// CNNs see the whole map, MLP with ITL the selected pixels, everything
    /// else the screened top-200.
    pub fn default_for(kind: ModelKind, itl: bool) -> Self {
        match (kind, itl) {
            (ModelKind::Cnn, _) => InputStage::FullMap,
            (ModelKind::Mlp, true) => InputStage::Selected10,
            _ => InputStage::Top200,
        }
    }

    fn feature_stage(self) -> Option<Stage> {
        match self {
            InputStage::Top200 => Some(Stage::Top200),
            InputStage::Ranked50 => Some(Stage::Ranked50),
            InputStage::Selected10 => Some(Stage::Selected10),
            InputStage::FullMap => None,
        }
    }
}

fn d_mlp_hidden() -> Vec<usize> {
    vec![20, 20]
}
fn d_conv() -> Vec<usize> {
    vec![64, 32, 16]
}
fn d_dense() -> Vec<usize> {
    vec![64, 64]
}
fn d_dropout() -> f64 {
    0.2
}
fn d_momentum() -> f64 {
    0.1
}
fn d_bn_eps() -> f64 {
    1e-5
}

/// Layer sizes shared by every byte's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "d_mlp_hidden")]
    pub mlp_hidden: Vec<usize>,
    #[serde(default = "d_conv")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "d_dense")]
    pub dense_hidden: Vec<usize>,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "d_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "d_bn_eps")]
    pub bn_epsilon: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            mlp_hidden: d_mlp_hidden(),
            conv_channels: d_conv(),
            dense_hidden: d_dense(),
            dropout_rate: d_dropout(),
            bn_momentum: d_momentum(),
            bn_epsilon: d_bn_eps(),
        }
    }
}

impl Architecture {
    pub fn spec(&self, kind: ModelKind, input_shape: Vec<usize>) -> ModelSpec {
        ModelSpec {
            kind,
            input_shape,
            mlp_hidden: self.mlp_hidden.clone(),
            conv_channels: self.conv_channels.clone(),
            dense_hidden: self.dense_hidden.clone(),
            dropout_rate: self.dropout_rate,
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
        }
    }
}

fn d_order() -> Vec<usize> {
    (0..16).collect()
}
fn d_iterations() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub model: ModelKind,
    /// Defaults to [`InputStage::default_for`].
    #[serde(default)]
    pub input: Option<InputStage>,
    #[serde(default)]
    pub architecture: Architecture,
    /// Bytes to attack, in chain order for ITL.
    #[serde(default = "d_order")]
    pub byte_order: Vec<usize>,
    #[serde(default)]
    pub itl: bool,
    #[serde(default = "d_iterations")]
    pub itl_iterations: usize,
    pub train: TrainConfig,
    /// Base of the per-byte initialization seeds.
    pub seed: u64,
}

impl AttackPlan {
    pub fn new(model: ModelKind, seed: u64) -> Self {
        AttackPlan {
            model,
            input: None,
            architecture: Architecture::default(),
            byte_order: d_order(),
            itl: false,
            itl_iterations: d_iterations(),
            train: TrainConfig::new(seed),
            seed,
        }
    }

    pub fn input_stage(&self) -> InputStage {
        self.input.unwrap_or(InputStage::default_for(self.model, self.itl))
    }

    pub fn validate(&self) -> Result<()> {
        if self.itl_iterations == 0 {
            return Err(Error::Config("itl_iterations must be >= 1".into()));
        }
        if self.byte_order.is_empty() {
            return Err(Error::Config("byte_order is empty".into()));
        }
        let mut seen = [false; 16];
        for &b in &self.byte_order {
            if b >= 16 || std::mem::replace(&mut seen[b], true) {
                return Err(Error::Config(format!(
                    "byte_order {:?} is not a list of distinct bytes 0..15",
                    self.byte_order
                )));
            }
        }
        if self.model == ModelKind::Cnn && self.input_stage() != InputStage::FullMap {
            return Err(Error::Config("the CNN takes full maps".into()));
        }
        if self.model != ModelKind::Cnn && self.input_stage() == InputStage::FullMap {
            return Err(Error::Config("full-map input needs the CNN".into()));
        }
        self.train.validate()
    }

    /// Weight-init seed of byte `b`.
    pub fn init_seed(&self, b: usize) -> u64 {
        self.seed ^ b as u64
    }

    /// Shuffle/dropout seed of byte `b` in ITL iteration `it` (1-based);
    /// iteration 1 uses the same seed as independent training.
    pub fn train_seed(&self, b: usize, it: usize) -> u64 {
        (self.train.seed ^ b as u64).wrapping_add((it as u64 - 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Traces (already filtered where applicable) with their labels and the
/// row sets of a split.
#[derive(Clone, Copy, Debug)]
pub struct AttackData<'a> {
    pub maps: &'a [f32],
    pub height: usize,
    pub width: usize,
    /// `[N, 16]`
    pub labels: &'a [u8],
    /// `[N, 16]`
    pub plaintexts: &'a [u8],
    pub features: Option<&'a FeatureBundle>,
    pub train_rows: &'a [usize],
    pub val_rows: &'a [usize],
}

impl AttackData<'_> {
    fn map_len(&self) -> usize {
        self.height * self.width
    }

    /// Pixel indices fed to the model for byte `b`; `None` for full maps.
    pub fn pixels(&self, stage: InputStage, b: usize) -> Result<Option<Vec<usize>>> {
        let Some(s) = stage.feature_stage() else {
            return Ok(None);
        };
        let f = self
            .features
            .ok_or_else(|| Error::InvalidInput(format!("{stage:?} input needs a feature bundle")))?;
        let set = f
            .bytes
            .iter()
            .find(|x| x.top200.byte == b)
            .ok_or_else(|| Error::InvalidInput(format!("feature bundle has no entry for byte {b}")))?;
        if (f.height, f.width) != (self.height, self.width) {
            return Err(Error::ShapeMismatch("feature bundle grid differs from the dataset".into()));
        }
        Ok(Some(set.stage(s).indices(self.width)))
    }

    /// Row-major model inputs for the given rows.
    pub fn inputs(&self, pixels: Option<&[usize]>, rows: &[usize]) -> Vec<f32> {
        match pixels {
            Some(p) => gather(self.maps, self.map_len(), rows, p),
            None => {
                let l = self.map_len();
                let mut out = Vec::with_capacity(rows.len() * l);
                for &r in rows {
                    out.extend_from_slice(&self.maps[r * l..(r + 1) * l]);
                }
                out
            }
        }
    }

    pub fn byte_labels(&self, rows: &[usize], b: usize) -> Vec<u8> {
        rows.iter().map(|&r| self.labels[r * 16 + b]).collect()
    }

    pub fn byte_plaintexts(&self, rows: &[usize], b: usize) -> Vec<u8> {
        rows.iter().map(|&r| self.plaintexts[r * 16 + b]).collect()
    }

    fn input_shape(&self, pixels: Option<&[usize]>) -> Vec<usize> {
        match pixels {
            Some(p) => vec![p.len()],
            None => vec![self.height, self.width],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Fresh {
        seed: u64,
    },
    /// Weights of `from_byte`'s model trained in ITL iteration `iteration`.
    Transfer {
        from_byte: usize,
        iteration: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub byte: usize,
    pub iteration: usize,
    pub init: Init,
}

/// One trained byte model, or the reason there is none.
#[derive(Clone, Debug)]
pub struct ByteModel {
    pub byte: usize,
    pub model: Option<Model<f32>>,
    pub history: Option<History>,
    pub provenance: Provenance,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ByteModelSet {
    pub plan: AttackPlan,
    /// Final model per attacked byte, ascending byte index.
    pub models: Vec<ByteModel>,
    /// Every training run in execution order (all ITL iterations).
    pub log: Vec<Provenance>,
}

impl ByteModelSet {
    pub fn get(&self, b: usize) -> Option<&ByteModel> {
        self.models.iter().find(|m| m.byte == b)
    }

    pub fn bytes(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.byte).collect()
    }
}

/// Trains one byte's model, optionally starting from `init`'s weights.
pub fn train_byte(
    plan: &AttackPlan,
    data: &AttackData,
    b: usize,
    init: Option<&Model<f32>>,
    train_seed: u64,
) -> Result<(Model<f32>, History)> {
    let stage = plan.input_stage();
    let pixels = data.pixels(stage, b)?;
    let spec = plan.architecture.spec(plan.model, data.input_shape(pixels.as_deref()));
    let mut model = make_model::<f32>(&spec, plan.init_seed(b))?;
    if let Some(src) = init {
        model.transfer_from(src)?;
    }
    let tx = data.inputs(pixels.as_deref(), data.train_rows);
    let ty = data.byte_labels(data.train_rows, b);
    let vx = data.inputs(pixels.as_deref(), data.val_rows);
    let vy = data.byte_labels(data.val_rows, b);
    model.fit_standardizer(&tx);
    let cfg = TrainConfig {
        seed: train_seed,
        ..plan.train.clone()
    };
    let hist = nn::train(
        &mut model,
        Samples { inputs: &tx, labels: &ty },
        Samples { inputs: &vx, labels: &vy },
        &cfg,
    )?;
    Ok((model, hist))
}

fn finish(plan: &AttackPlan, mut models: Vec<ByteModel>, log: Vec<Provenance>) -> ByteModelSet {
    models.sort_by_key(|m| m.byte);
    ByteModelSet {
        plan: plan.clone(),
        models,
        log,
    }
}

fn outcome(b: usize, provenance: Provenance, r: Result<(Model<f32>, History)>) -> ByteModel {
    match r {
        Ok((model, history)) => {
            log::info!("byte {b}: best epoch {} val loss {:.4}", history.best_epoch, history.best_val_loss);
            ByteModel {
                byte: b,
                model: Some(model),
                history: Some(history),
                provenance,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("byte {b}: training failed: {e}");
            ByteModel {
                byte: b,
                model: None,
                history: None,
                provenance,
                error: Some(e.to_string()),
            }
        }
    }
}

/// One freshly initialized model per byte; bytes train in parallel.
pub fn train_independent(plan: &AttackPlan, data: &AttackData) -> Result<ByteModelSet> {
    plan.validate()?;
    let order = &plan.byte_order;
    let models = exec::map_indexed(order.len(), |i| {
        let b = order[i];
        let prov = Provenance {
            byte: b,
            iteration: 1,
            init: Init::Fresh { seed: plan.init_seed(b) },
        };
        outcome(b, prov, train_byte(plan, data, b, None, plan.train_seed(b, 1)))
    });
    let log = models.iter().map(|m| m.provenance.clone()).collect();
    Ok(finish(plan, models, log))
}

/// ITL: each byte starts from the previous byte's trained weights, along
/// `byte_order`, for `itl_iterations` passes. The chain is sequential.
pub fn train_itl(plan: &AttackPlan, data: &AttackData) -> Result<ByteModelSet> {
    plan.validate()?;
    log::info!(
        "ITL: {} iteration(s) over bytes {:?}, trained sequentially",
        plan.itl_iterations,
        plan.byte_order
    );
    let mut last: Option<(usize, usize, Model<f32>)> = None;
    let mut current: BTreeMap<usize, ByteModel> = BTreeMap::new();
    let mut log = Vec::new();
    for it in 1..=plan.itl_iterations {
        for &b in &plan.byte_order {
            let init = match &last {
                Some((from_byte, iteration, _)) => Init::Transfer {
                    from_byte: *from_byte,
                    iteration: *iteration,
                },
                None => Init::Fresh { seed: plan.init_seed(b) },
            };
            let prov = Provenance {
                byte: b,
                iteration: it,
                init,
            };
            log::info!("ITL iteration {it}, byte {b}: init {:?}", prov.init);
            log.push(prov.clone());
            let src = last.as_ref().map(|(_, _, m)| m);
            let r = train_byte(plan, data, b, src, plan.train_seed(b, it));
            let entry = outcome(b, prov, r);
            if let Some(m) = &entry.model {
                last = Some((b, it, m.clone()));
            }
            current.insert(b, entry);
        }
    }
    Ok(finish(plan, current.into_values().collect(), log))
}

pub fn train_set(plan: &AttackPlan, data: &AttackData) -> Result<ByteModelSet> {
    if plan.itl {
        train_itl(plan, data)
    } else {
        train_independent(plan, data)
    }
}

/// Eval-mode probabilities `[rows, 256]` for every byte with a model.
pub fn predict_probs(set: &ByteModelSet, data: &AttackData, rows: &[usize]) -> Result<BTreeMap<usize, Vec<f32>>> {
    let stage = set.plan.input_stage();
    let mut out = BTreeMap::new();
    for m in &set.models {
        if let Some(model) = &m.model {
            let pixels = data.pixels(stage, m.byte)?;
            let x = data.inputs(pixels.as_deref(), rows);
            out.insert(m.byte, model.predict_many(&x)?);
        }
    }
    Ok(out)
}

/// Key-rank evaluation of a model set on `rows`. Bytes without a model rank
/// last (255) at every trace count, so they come out N/A.
pub fn evaluate_set(
    set: &ByteModelSet,
    probs: &BTreeMap<usize, Vec<f32>>,
    data: &AttackData,
    rows: &[usize],
    key: &KeyBytes,
    stream: &PermutationStream,
) -> Result<MtdResult> {
    let bytes = set.bytes();
    let mut tables = BTreeMap::new();
    for (&b, p) in probs {
        tables.insert(b, keyrank::log_likelihood_table(p, &data.byte_plaintexts(rows, b))?);
    }
    keyrank::evaluate_with(&bytes, rows.len(), stream, |b, perm| {
        Ok(match tables.get(&b) {
            Some(t) => keyrank::rank_curve_from_table(t, perm, b, key[b]),
            None => RankCurve {
                byte: b,
                ranks: vec![255; perm.len()],
                tie_degenerate: false,
            },
        })
    })
}

#[derive(Serialize, Deserialize)]
struct SetManifest {
    format_version: u32,
    plan: AttackPlan,
    config_hash: Option<String>,
    log: Vec<Provenance>,
    bytes: Vec<ByteEntry>,
}

#[derive(Serialize, Deserialize)]
struct ByteEntry {
    byte: usize,
    provenance: Provenance,
    checkpoint: Option<String>,
    history: Option<History>,
    error: Option<String>,
}

/// `models.json` plus a checkpoint pair per trained byte.
pub fn save_set(dir: &Path, set: &ByteModelSet, config_hash: Option<String>) -> Result<()> {
    ensure_dir(dir)?;
    let mut entries = Vec::new();
    for m in &set.models {
        let name = format!("byte{:02}", m.byte);
        let ckpt = match (&m.model, &m.history) {
            (Some(model), Some(h)) => {
                let mut metrics = BTreeMap::new();
                metrics.insert("best_val_loss".to_string(), h.best_val_loss);
                metrics.insert("epochs".to_string(), h.epochs() as f64);
                checkpoint::save(
                    &dir.join(&name),
                    model,
                    set.plan.init_seed(m.byte),
                    h.best_epoch,
                    metrics,
                    config_hash.clone(),
                )?;
                Some(name)
            }
            _ => None,
        };
        entries.push(ByteEntry {
            byte: m.byte,
            provenance: m.provenance.clone(),
            checkpoint: ckpt,
            history: m.history.clone(),
            error: m.error.clone(),
        });
    }
    write_json(
        &dir.join("models.json"),
        &SetManifest {
            format_version: FORMAT_VERSION,
            plan: set.plan.clone(),
            config_hash,
            log: set.log.clone(),
            bytes: entries,
        },
    )
}

pub fn load_set(dir: &Path) -> Result<ByteModelSet> {
    let man: SetManifest = read_json(&dir.join("models.json"))?;
    if man.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: man.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let mut models = Vec::new();
    for e in man.bytes {
        let model = match &e.checkpoint {
            Some(name) => Some(checkpoint::load::<f32>(&dir.join(name))?.0),
            None => None,
        };
        models.push(ByteModel {
            byte: e.byte,
            model,
            history: e.history,
            provenance: e.provenance,
            error: e.error,
        });
    }
    Ok(ByteModelSet {
        plan: man.plan,
        models,
        log: man.log,
    })
}

/// Pixels correlated by the CPA baseline: the top-`k` std pixels for
/// thermal maps, every pixel that varies for power maps. Computed on the
/// training rows.
pub fn cpa_region(modality: Modality, maps: &[f32], map_len: usize, width: usize, rows: &[usize], k: usize) -> Result<Vec<usize>> {
    let std = pixel_std_map(maps, map_len, rows)?;
    Ok(match modality {
        Modality::Thermal => top_k_pixels(&std, width, k).into_iter().map(|(p, _)| p.index(width)).collect(),
        Modality::Power => (0..map_len).filter(|&i| std[i] > 0.0).collect(),
    })
}

/// Incremental Pearson statistics for every (hypothesis, pixel) pair.
struct CpaState {
    n: f64,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    sy: [f64; 256],
    syy: [f64; 256],
    /// `[256, region]`
    sxy: Vec<f64>,
    inv_vx: Vec<f64>,
}

impl CpaState {
    fn new(r: usize) -> Self {
        CpaState {
            n: 0.0,
            sx: vec![0.0; r],
            sxx: vec![0.0; r],
            sy: [0.0; 256],
            syy: [0.0; 256],
            sxy: vec![0.0; 256 * r],
            inv_vx: vec![0.0; r],
        }
    }

    fn push(&mut self, x: &[f64], pt: u8) {
        let r = x.len();
        self.n += 1.0;
        for (i, &v) in x.iter().enumerate() {
            self.sx[i] += v;
            self.sxx[i] += v * v;
        }
        for k in 0..256 {
            let h = hamming_weight(sbox(pt ^ k as u8)) as f64;
            self.sy[k] += h;
            self.syy[k] += h * h;
            if h != 0.0 {
                for (s, &v) in self.sxy[k * r..(k + 1) * r].iter_mut().zip(x) {
                    *s += h * v;
                }
            }
        }
    }

    /// `max_p |corr(p, k)|` for every hypothesis; 0 where undefined.
    fn scores(&mut self, out: &mut [f64]) {
        let n = self.n;
        let r = self.sx.len();
        for i in 0..r {
            let vx = n * self.sxx[i] - self.sx[i] * self.sx[i];
            self.inv_vx[i] = if vx > 0.0 { 1.0 / vx } else { 0.0 };
        }
        for (k, o) in out.iter_mut().enumerate() {
            let vy = n * self.syy[k] - self.sy[k] * self.sy[k];
            if vy <= 0.0 {
                *o = 0.0;
                continue;
            }
            let sy = self.sy[k];
            let mut best = 0.0f64;
            for ((&sxy, &sx), &iv) in self.sxy[k * r..(k + 1) * r].iter().zip(&self.sx).zip(&self.inv_vx) {
                let num = n * sxy - sx * sy;
                best = best.max(num * num * iv);
            }
            *o = (best / vy).sqrt().min(1.0);
        }
    }
}

/// Per-pixel values of `region` for `rows`, shifted by the first row's
/// values (Pearson is shift invariant; the shift keeps sums small).
fn cpa_columns(maps: &[f32], map_len: usize, region: &[usize], rows: &[usize]) -> Vec<f64> {
    let origin: Vec<f64> = match rows.first() {
        Some(&r0) => region.iter().map(|&p| maps[r0 * map_len + p] as f64).collect(),
        None => vec![],
    };
    let mut out = Vec::with_capacity(rows.len() * region.len());
    for &r in rows {
        out.extend(region.iter().zip(&origin).map(|(&p, o)| maps[r * map_len + p] as f64 - o));
    }
    out
}

/// Score trajectory `[rows, 256]`: row `i - 1` holds every hypothesis'
/// score after the first `i` rows, in the given order.
pub fn cpa_trajectory(maps: &[f32], map_len: usize, region: &[usize], rows: &[usize], plaintexts: &[u8]) -> Vec<f64> {
    let cols = cpa_columns(maps, map_len, region, rows);
    let r = region.len();
    let mut st = CpaState::new(r);
    let mut out = vec![0.0; rows.len() * 256];
    for (i, &pt) in plaintexts.iter().enumerate().take(rows.len()) {
        st.push(&cols[i * r..(i + 1) * r], pt);
        st.scores(&mut out[i * 256..(i + 1) * 256]);
    }
    out
}

/// CPA key-rank evaluation of every byte over the permutation stream.
#[allow(clippy::too_many_arguments)]
pub fn cpa_evaluate(
    maps: &[f32],
    map_len: usize,
    regions: &BTreeMap<usize, Vec<usize>>,
    plaintexts: &[u8],
    rows: &[usize],
    key: &KeyBytes,
    stream: &PermutationStream,
) -> Result<MtdResult> {
    let bytes: Vec<usize> = regions.keys().copied().collect();
    let cols: BTreeMap<usize, Vec<f64>> = regions.iter().map(|(&b, reg)| (b, cpa_columns(maps, map_len, reg, rows))).collect();
    keyrank::evaluate_with(&bytes, rows.len(), stream, |b, perm| {
        let r = regions[&b].len();
        let c = &cols[&b];
        let mut st = CpaState::new(r);
        let mut scores = [0.0f64; 256];
        let mut ranks = Vec::with_capacity(perm.len());
        let mut tie = false;
        for &j in perm {
            st.push(&c[j * r..(j + 1) * r], plaintexts[rows[j] * 16 + b]);
            st.scores(&mut scores);
            let one = keyrank::rank_curve_from_scores(&scores, b, key[b]);
            ranks.push(one.ranks[0]);
            tie = one.tie_degenerate;
        }
        Ok(RankCurve {
            byte: b,
            ranks,
            tie_degenerate: tie,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_dataset, SimConfig};

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            0.0
        } else {
            cov / (vx * vy).sqrt()
        }
    }

    #[test]
    fn cpa_matches_direct_pearson() {
        let mut cfg = SimConfig::new(16, 60, Modality::Power, 5);
        cfg.noise_std_power = 1.0;
        let ds = gen_dataset(&cfg).unwrap();
        let region = vec![ds.pois[2].index(16), 0, 17];
        let rows: Vec<usize> = (0..60).collect();
        let pts: Vec<u8> = rows.iter().map(|&r| ds.plaintext_byte(r, 2)).collect();
        let traj = cpa_trajectory(&ds.traces, 256, &region, &rows, &pts);
        for i in [1usize, 2, 7, 60] {
            for k in [0u8, 0x22, 0x99, 0xff] {
                let y: Vec<f64> = pts[..i].iter().map(|&p| hamming_weight(sbox(p ^ k)) as f64).collect();
                let expect = region
                    .iter()
                    .map(|&px| {
                        let x: Vec<f64> = rows[..i].iter().map(|&r| ds.trace(r)[px] as f64).collect();
                        pearson(&x, &y).abs()
                    })
                    .fold(0.0, f64::max);
                let got = traj[(i - 1) * 256 + k as usize];
                assert!((got - expect).abs() < 1e-9, "i={i} k={k}: {got} vs {expect}");
            }
        }
        assert!(traj[..256].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn noiseless_poi_gives_unit_correlation() {
        let cfg = SimConfig::new(16, 200, Modality::Power, 6);
        let ds = gen_dataset(&cfg).unwrap();
        let b = 5;
        let rows: Vec<usize> = (0..200).collect();
        let pts: Vec<u8> = rows.iter().map(|&r| ds.plaintext_byte(r, b)).collect();
        let traj = cpa_trajectory(&ds.traces, 256, &[ds.pois[b].index(16)], &rows, &pts);
        let k = cfg.key[b] as usize;
        assert!((traj[199 * 256 + k] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cpa_is_affine_invariant() {
        let mut cfg = SimConfig::new(16, 80, Modality::Thermal, 8);
        cfg.noise_std_thermal = 0.3;
        let ds = gen_dataset(&cfg).unwrap();
        let scaled: Vec<f32> = ds.traces.iter().map(|&v| -3.0 * v + 7.5).collect();
        let rows: Vec<usize> = (0..80).collect();
        let pts: Vec<u8> = rows.iter().map(|&r| ds.plaintext_byte(r, 0)).collect();
        let region: Vec<usize> = (0..256).step_by(5).collect();
        let a = cpa_trajectory(&ds.traces, 256, &region, &rows, &pts);
        let b = cpa_trajectory(&scaled, 256, &region, &rows, &pts);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn true_key_score_grows_on_noiseless_power() {
        for seed in 0..5 {
            let mut cfg = SimConfig::new(16, 1000, Modality::Power, seed);
            cfg.background_density = 0.1;
            cfg.background_scale = 1.0;
            let ds = gen_dataset(&cfg).unwrap();
            let rows: Vec<usize> = (0..1000).collect();
            let region = cpa_region(Modality::Power, &ds.traces, 256, 16, &rows, 200).unwrap();
            let pts: Vec<u8> = rows.iter().map(|&r| ds.plaintext_byte(r, 3)).collect();
            let traj = cpa_trajectory(&ds.traces, 256, &region, &rows, &pts);
            let k = cfg.key[3] as usize;
            let at = |i: usize| traj[(i - 1) * 256 + k];
            assert!(at(100) <= at(500) + 1e-12 && at(500) <= at(1000) + 1e-12);
            assert!((at(1000) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn seeds_and_stages() {
        let mut plan = AttackPlan::new(ModelKind::Mlp, 40);
        assert_eq!(plan.init_seed(3), 43);
        assert_eq!(plan.train_seed(3, 1), 43);
        assert_ne!(plan.train_seed(3, 2), 43);
        assert_eq!(plan.input_stage(), InputStage::Top200);
        plan.itl = true;
        assert_eq!(plan.input_stage(), InputStage::Selected10);
        assert_eq!(InputStage::default_for(ModelKind::Cnn, false), InputStage::FullMap);
        plan.byte_order = vec![1, 1];
        assert!(plan.validate().is_err());
        plan.byte_order = vec![3, 0];
        plan.itl_iterations = 0;
        assert!(plan.validate().is_err());
    }
}
