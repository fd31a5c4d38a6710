//! Point-of-interest selection: decoupling filter, standard-deviation
//! screening, univariate ranking and sequential forward selection.
//!
//! Selection scores are validation cross-entropies of small logistic
//! regressions trained with the regular [`nn::train`] loop on a reduced
//! budget ([`LrBudget`]).

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::nn::{self, make_model, ModelSpec, Samples, TrainConfig};
use crate::sim::{Modality, Pixel};
use crate::{exec, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    None,
    #[default]
    Laplacian,
    Sobel,
    Prewitt,
}

impl FilterKind {
    /// Thermal maps are filtered, power maps are used as is.
    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Thermal => FilterKind::Laplacian,
            Modality::Power => FilterKind::None,
        }
    }
}

type Kernel = [[f64; 3]; 3];

const LAPLACIAN: Kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const SOBEL_X: Kernel = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const PREWITT_X: Kernel = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];

fn transpose(k: &Kernel) -> Kernel {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in k.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

/// 3x3 correlation with zero padding.
fn correlate3(map: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (dr, krow) in k.iter().enumerate() {
                let rr = r + dr;
                if rr == 0 || rr > h {
                    continue;
                }
                for (dc, &kv) in krow.iter().enumerate() {
                    let cc = c + dc;
                    if kv == 0.0 || cc == 0 || cc > w {
                        continue;
                    }
                    acc += kv * map[(rr - 1) * w + cc - 1];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn gradient_magnitude(map: &[f64], h: usize, w: usize, kx: &Kernel) -> Vec<f64> {
    let gx = correlate3(map, h, w, kx);
    let gy = correlate3(map, h, w, &transpose(kx));
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

pub fn laplacian_filter(map: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    apply_filter(FilterKind::Laplacian, map, h, w)
}

pub fn apply_filter(kind: FilterKind, map: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if map.len() != h * w {
        return Err(Error::ShapeMismatch(format!("{} values for a {h}x{w} map", map.len())));
    }
    if kind != FilterKind::None && (h < 3 || w < 3) {
        return Err(Error::InvalidInput(format!("{h}x{w} map is smaller than the 3x3 kernel")));
    }
    Ok(match kind {
        FilterKind::None => map.to_vec(),
        FilterKind::Laplacian => correlate3(map, h, w, &LAPLACIAN),
        FilterKind::Sobel => gradient_magnitude(map, h, w, &SOBEL_X),
        FilterKind::Prewitt => gradient_magnitude(map, h, w, &PREWITT_X),
    })
}

/// Filters every trace of a dataset (computed in f64, stored as f32).
pub fn filter_maps(ds: &Dataset, kind: FilterKind) -> Result<Vec<f32>> {
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    if kind == FilterKind::None {
        return Ok(ds.traces.clone());
    }
    apply_filter(kind, &vec![0.0; h * w], h, w)?;
    let mut out = vec![0f32; ds.traces.len()];
    exec::for_each_chunk_mut(&mut out, h * w, |i, dst| {
        let src: Vec<f64> = ds.trace(i).iter().map(|&v| v as f64).collect();
        let f = apply_filter(kind, &src, h, w).expect("shape checked");
        dst.iter_mut().zip(f).for_each(|(d, v)| *d = v as f32);
    });
    Ok(out)
}

/// Population standard deviation of every pixel over the maps in `rows`.
pub fn pixel_std_map(maps: &[f32], map_len: usize, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 traces for a std map".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; map_len];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(&maps[r * map_len..(r + 1) * map_len]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; map_len];
    for &r in rows {
        for ((s, &v), m) in var.iter_mut().zip(&maps[r * map_len..(r + 1) * map_len]).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    Ok(var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// The `k` highest-std pixels, descending; ties by ascending (row, col).
pub fn top_k_pixels(std_map: &[f64], width: usize, k: usize) -> Vec<(Pixel, f64)> {
    let mut idx: Vec<usize> = (0..std_map.len()).collect();
    idx.sort_by(|&a, &b| std_map[b].total_cmp(&std_map[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (Pixel::from_index(i, width), std_map[i])).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Top200,
    Ranked50,
    Selected10,
}

/// Ordered pixels for one byte and stage with their selection scores
/// (std for `top200`, validation cross-entropy otherwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub byte: usize,
    pub stage: Stage,
    pub pixels: Vec<Pixel>,
    pub scores: Vec<f64>,
}

impl FeatureSet {
    pub fn indices(&self, width: usize) -> Vec<usize> {
        self.pixels.iter().map(|p| p.index(width)).collect()
    }
}

/// Training budget for the logistic regressions used as selection criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrBudget {
    /// Leading training rows used (the split is already shuffled).
    pub max_train: usize,
    pub max_val: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for LrBudget {
    fn default() -> Self {
        LrBudget {
            max_train: 2000,
            max_val: 1000,
            epochs: 8,
            learning_rate: 1.0,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default)]
    pub filter: Option<FilterKind>,
    pub top_k: usize,
    pub rank_keep: usize,
    pub sfs_target: usize,
    #[serde(default)]
    pub budget: LrBudget,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(seed: u64) -> Self {
        SelectionConfig {
            filter: None,
            top_k: 200,
            rank_keep: 50,
            sfs_target: 10,
            budget: LrBudget::default(),
            seed,
        }
    }
}

/// Maps (already filtered) plus the rows and byte labels of one split pair.
#[derive(Clone, Copy, Debug)]
pub struct SelectionData<'a> {
    pub maps: &'a [f32],
    pub map_len: usize,
    pub width: usize,
    pub train_rows: &'a [usize],
    pub val_rows: &'a [usize],
    /// Label byte per trace, indexed by trace number.
    pub labels: &'a [u8],
}

/// Row-major `[rows, pixels]` feature matrix.
pub fn gather(maps: &[f32], map_len: usize, rows: &[usize], pixels: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * pixels.len());
    for &r in rows {
        let m = &maps[r * map_len..(r + 1) * map_len];
        out.extend(pixels.iter().map(|&p| m[p]));
    }
    out
}

struct Cols {
    train: Vec<f32>,
    train_y: Vec<u8>,
    val: Vec<f32>,
    val_y: Vec<u8>,
}

impl SelectionData<'_> {
    fn columns(&self, pixels: &[usize], budget: &LrBudget) -> Cols {
        let tr = &self.train_rows[..self.train_rows.len().min(budget.max_train)];
        let va = &self.val_rows[..self.val_rows.len().min(budget.max_val)];
        Cols {
            train: gather(self.maps, self.map_len, tr, pixels),
            train_y: tr.iter().map(|&r| self.labels[r]).collect(),
            val: gather(self.maps, self.map_len, va, pixels),
            val_y: va.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

fn has_variance(x: &[f32], d: usize) -> bool {
    (0..d).all(|j| {
        let first = x[j];
        x.iter().skip(j).step_by(d).any(|&v| v != first)
    })
}

/// Validation cross-entropy of a logistic regression on the given pixels;
/// `+inf` when any pixel is constant on the training rows.
pub fn lr_criterion(data: &SelectionData, pixels: &[usize], budget: &LrBudget, seed: u64) -> Result<f64> {
    let d = pixels.len();
    let cols = data.columns(pixels, budget);
    if cols.train_y.len() < 2 || cols.val_y.is_empty() {
        return Err(Error::InvalidInput("selection needs training and validation rows".into()));
    }
    if !has_variance(&cols.train, d) {
        return Ok(f64::INFINITY);
    }
    let mut model = make_model::<f32>(&ModelSpec::lr(d), seed)?;
    model.fit_standardizer(&cols.train);
    let cfg = TrainConfig {
        batch_size: budget.batch_size,
        learning_rate: budget.learning_rate,
        max_epochs: budget.epochs,
        patience: budget.epochs,
        ..TrainConfig::new(seed)
    };
    let hist = nn::train(
        &mut model,
        Samples {
            inputs: &cols.train,
            labels: &cols.train_y,
        },
        Samples {
            inputs: &cols.val,
            labels: &cols.val_y,
        },
        &cfg,
    )?;
    Ok(hist.best_val_loss)
}

fn by_score_then_pixel(a: &(Pixel, f64), b: &(Pixel, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

fn byte_seed(seed: u64, byte: usize) -> u64 {
    seed ^ (byte as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Scores each candidate alone and keeps the `keep` best.
pub fn one_pass_ranking(
    candidates: &[Pixel],
    data: &SelectionData,
    byte: usize,
    keep: usize,
    budget: &LrBudget,
    seed: u64,
) -> Result<FeatureSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate pixels".into()));
    }
    let seed = byte_seed(seed, byte);
    let scores = exec::map_indexed(candidates.len(), |i| {
        lr_criterion(data, &[candidates[i].index(data.width)], budget, seed)
    });
    let mut scored = Vec::with_capacity(candidates.len());
    for (p, s) in candidates.iter().zip(scores) {
        scored.push((*p, s?));
    }
    scored.sort_by(by_score_then_pixel);
    scored.truncate(keep);
    Ok(FeatureSet {
        byte,
        stage: Stage::Ranked50,
        pixels: scored.iter().map(|x| x.0).collect(),
        scores: scored.iter().map(|x| x.1).collect(),
    })
}

/// Greedy forward selection; `scores[i]` is the criterion after the
/// `i+1`-th addition, as measured when it was chosen.
pub fn sequential_forward_selection(
    ranked: &FeatureSet,
    data: &SelectionData,
    target: usize,
    budget: &LrBudget,
    seed: u64,
) -> Result<FeatureSet> {
    if ranked.pixels.len() < target {
        return Err(Error::InvalidInput(format!(
            "{} ranked pixels, {target} requested",
            ranked.pixels.len()
        )));
    }
    let seed = byte_seed(seed, ranked.byte);
    let mut chosen: Vec<Pixel> = Vec::with_capacity(target);
    let mut remaining = ranked.pixels.clone();
    let mut curve = Vec::with_capacity(target);
    while chosen.len() < target {
        let base: Vec<usize> = chosen.iter().map(|p| p.index(data.width)).collect();
        let scores = exec::map_indexed(remaining.len(), |i| {
            let mut set = base.clone();
            set.push(remaining[i].index(data.width));
            lr_criterion(data, &set, budget, seed)
        });
        let mut best: Option<(usize, (Pixel, f64))> = None;
        for (i, s) in scores.into_iter().enumerate() {
            let cand = (remaining[i], s?);
            if best.as_ref().is_none_or(|(_, b)| by_score_then_pixel(&cand, b).is_lt()) {
                best = Some((i, cand));
            }
        }
        let (i, (p, s)) = best.expect("remaining is non-empty");
        remaining.remove(i);
        chosen.push(p);
        curve.push(s);
    }
    Ok(FeatureSet {
        byte: ranked.byte,
        stage: Stage::Selected10,
        pixels: chosen,
        scores: curve,
    })
}

/// All three stages for one byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByteFeatures {
    pub top200: FeatureSet,
    pub ranked50: FeatureSet,
    pub selected10: FeatureSet,
}

impl ByteFeatures {
    pub fn stage(&self, s: Stage) -> &FeatureSet {
        match s {
            Stage::Top200 => &self.top200,
            Stage::Ranked50 => &self.ranked50,
            Stage::Selected10 => &self.selected10,
        }
    }
}

/// Selection output for all bytes of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub format_version: u32,
    pub modality: Modality,
    pub filter: FilterKind,
    pub height: usize,
    pub width: usize,
    pub config: SelectionConfig,
    pub bytes: Vec<ByteFeatures>,
}

/// Top-k screening on the training rows shared by every byte.
pub fn screen(maps: &[f32], map_len: usize, width: usize, train_rows: &[usize], k: usize, byte: usize) -> Result<FeatureSet> {
    let std = pixel_std_map(maps, map_len, train_rows)?;
    let top = top_k_pixels(&std, width, k);
    Ok(FeatureSet {
        byte,
        stage: Stage::Top200,
        pixels: top.iter().map(|x| x.0).collect(),
        scores: top.iter().map(|x| x.1).collect(),
    })
}

/// Ranking and forward selection for one byte from its screened candidates.
pub fn select_byte(top: FeatureSet, data: &SelectionData, cfg: &SelectionConfig) -> Result<ByteFeatures> {
    let ranked = one_pass_ranking(&top.pixels, data, top.byte, cfg.rank_keep, &cfg.budget, cfg.seed)?;
    let selected = sequential_forward_selection(&ranked, data, cfg.sfs_target.min(ranked.pixels.len()), &cfg.budget, cfg.seed)?;
    Ok(ByteFeatures {
        top200: top,
        ranked50: ranked,
        selected10: selected,
    })
}

/// Full selection for the listed bytes: filter, screen on the training
/// rows, then rank and select per byte.
pub fn run_pipeline(
    ds: &Dataset,
    train_rows: &[usize],
    val_rows: &[usize],
    bytes: &[usize],
    cfg: &SelectionConfig,
) -> Result<FeatureBundle> {
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    if cfg.top_k == 0 || cfg.top_k > h * w || cfg.rank_keep == 0 || cfg.sfs_target == 0 {
        return Err(Error::Config("selection stage sizes must be in 1..=H*W".into()));
    }
    if let Some(&b) = bytes.iter().find(|&&b| b >= 16) {
        return Err(Error::InvalidInput(format!("byte index {b} out of range")));
    }
    let filter = cfg.filter.unwrap_or(FilterKind::for_modality(ds.manifest.modality));
    let maps = filter_maps(ds, filter)?;
    let top = screen(&maps, h * w, w, train_rows, cfg.top_k, 0)?;
    let out = exec::map_indexed(bytes.len(), |i| {
        let b = bytes[i];
        let labels: Vec<u8> = (0..ds.n()).map(|t| ds.label_byte(t, b)).collect();
        let data = SelectionData {
            maps: &maps,
            map_len: h * w,
            width: w,
            train_rows,
            val_rows,
            labels: &labels,
        };
        let top = FeatureSet { byte: b, ..top.clone() };
        let r = select_byte(top, &data, cfg);
        if let Ok(f) = &r {
            log::info!("byte {b}: selected {:?}", f.selected10.pixels);
        }
        r
    });
    Ok(FeatureBundle {
        format_version: crate::dataset::FORMAT_VERSION,
        modality: ds.manifest.modality,
        filter,
        height: h,
        width: w,
        config: cfg.clone(),
        bytes: out.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(map: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for r in 0..h {
            for c in 0..w {
                padded[r + 1][c + 1] = map[r * w + c];
            }
        }
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += k[i][j] * padded[r + i][c + j];
                    }
                }
                out[r * w + c] = s;
            }
        }
        out
    }

    #[test]
    fn laplacian_matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let map: Vec<f64> = (0..81).map(|_| rng.random_range(-10.0..10.0)).collect();
            let fast = laplacian_filter(&map, 9, 9).unwrap();
            for (a, b) in fast.iter().zip(brute(&map, 9, 9, &LAPLACIAN)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_kills_constants_and_ramps_inside() {
        let (h, w) = (7, 8);
        let cases: Vec<Vec<f64>> = vec![
            vec![3.5; h * w],
            (0..h * w).map(|i| 2.0 * (i / w) as f64 - 0.5 * (i % w) as f64 + 1.0).collect(),
        ];
        for map in cases {
            let f = laplacian_filter(&map, h, w).unwrap();
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    assert!(f[r * w + c].abs() < 1e-12);
                }
            }
        }
        // corner of a constant map sees two zero-padded neighbours
        let f = laplacian_filter(&[1.0; 9], 3, 3).unwrap();
        assert_eq!(f[0], -2.0);
        assert_eq!(f[1], -1.0);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn laplacian_impulse_response() {
        let mut map = vec![0.0; 25];
        map[12] = 1.0;
        let f = laplacian_filter(&map, 5, 5).unwrap();
        assert_eq!(f[12], -4.0);
        for i in [7, 11, 13, 17] {
            assert_eq!(f[i], 1.0);
        }
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 5);
    }

    #[test]
    fn gradient_filters_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (kind, kx) in [(FilterKind::Sobel, SOBEL_X), (FilterKind::Prewitt, PREWITT_X)] {
            let f = apply_filter(kind, &map, 5, 6).unwrap();
            let gx = brute(&map, 5, 6, &kx);
            let gy = brute(&map, 5, 6, &transpose(&kx));
            for i in 0..30 {
                assert!((f[i] - (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_maps_are_rejected() {
        assert!(laplacian_filter(&[0.0; 4], 2, 2).is_err());
        assert!(apply_filter(FilterKind::None, &[0.0; 4], 2, 2).is_ok());
    }

    #[test]
    fn population_std() {
        let maps = vec![0.0f32, 5.0, 2.0, 5.0];
        let s = pixel_std_map(&maps, 2, &[0, 1]).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        assert!(pixel_std_map(&maps, 2, &[0]).is_err());
    }

    #[test]
    fn top_k_order_and_ties() {
        let std = vec![0.5, 2.0, 0.5, 0.5, 1.0, 0.5];
        let top = top_k_pixels(&std, 3, 4);
        let px: Vec<_> = top.iter().map(|x| x.0).collect();
        assert_eq!(px, vec![Pixel::new(0, 1), Pixel::new(1, 1), Pixel::new(0, 0), Pixel::new(0, 2)]);
        let flat = top_k_pixels(&[1.0; 6], 3, 3);
        assert_eq!(flat.iter().map(|x| x.0.index(3)).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    /// Three pixel columns: 0 = HW(label) + small noise, 1 = noise,
    /// 2 = copy of 0, 3 = a second independent view of the label's low bit,
    /// 4 = constant.
    fn toy(n: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y: u8 = rng.random();
            let hw = y.count_ones() as f32;
            let a = hw + rng.random_range(-0.1..0.1);
            maps.extend([a, rng.random_range(-1.0..1.0), a, (y & 1) as f32 + rng.random_range(-0.8..0.8), 7.0]);
            labels.push(y);
        }
        (maps, labels)
    }

    fn toy_data<'a>(maps: &'a [f32], labels: &'a [u8], tr: &'a [usize], va: &'a [usize]) -> SelectionData<'a> {
        SelectionData {
            maps,
            map_len: 5,
            width: 5,
            train_rows: tr,
            val_rows: va,
            labels,
        }
    }

    fn quick() -> LrBudget {
        LrBudget {
            max_train: 1500,
            max_val: 500,
            epochs: 10,
            learning_rate: 0.3,
            batch_size: 128,
        }
    }

    #[test]
    fn ranking_prefers_leaky_pixel_and_sinks_constants() {
        let (maps, labels) = toy(2000, 1);
        let tr: Vec<usize> = (0..1500).collect();
        let va: Vec<usize> = (1500..2000).collect();
        let data = toy_data(&maps, &labels, &tr, &va);
        let cands = [Pixel::new(0, 4), Pixel::new(0, 1), Pixel::new(0, 0)];
        let r = one_pass_ranking(&cands, &data, 3, 10, &quick(), 7).unwrap();
        assert_eq!(r.pixels, vec![Pixel::new(0, 0), Pixel::new(0, 1), Pixel::new(0, 4)]);
        assert!(r.scores[2].is_infinite());
        assert_eq!(r.byte, 3);
        let r1 = one_pass_ranking(&cands, &data, 3, 1, &quick(), 7).unwrap();
        assert_eq!(r1.pixels, vec![Pixel::new(0, 0)]);
    }

    #[test]
    fn forward_selection_skips_duplicate_feature() {
        let (maps, labels) = toy(2000, 2);
        let tr: Vec<usize> = (0..1500).collect();
        let va: Vec<usize> = (1500..2000).collect();
        let data = toy_data(&maps, &labels, &tr, &va);
        let ranked = FeatureSet {
            byte: 0,
            stage: Stage::Ranked50,
            pixels: vec![Pixel::new(0, 0), Pixel::new(0, 2), Pixel::new(0, 3), Pixel::new(0, 1)],
            scores: vec![0.0; 4],
        };
        let one = sequential_forward_selection(&ranked, &data, 1, &quick(), 5).unwrap();
        // columns 0 and 2 tie exactly; the tie goes to the smaller pixel
        assert_eq!(one.pixels, vec![Pixel::new(0, 0)]);
        assert_eq!(one.scores[0], lr_criterion(&data, &[0], &quick(), byte_seed(5, 0)).unwrap());
        let two = sequential_forward_selection(&ranked, &data, 2, &quick(), 5).unwrap();
        assert_eq!(two.pixels[0], Pixel::new(0, 0));
        assert_eq!(two.pixels[1], Pixel::new(0, 3), "{two:?}");
        assert!(two.scores[1] < two.scores[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn laplacian_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            x in prop::collection::vec(-5.0f64..5.0, 42),
            y in prop::collection::vec(-5.0f64..5.0, 42),
        ) {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = laplacian_filter(&mix, 6, 7).unwrap();
            let fx = laplacian_filter(&x, 6, 7).unwrap();
            let fy = laplacian_filter(&y, 6, 7).unwrap();
            for i in 0..42 {
                prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn top_k_is_sorted_and_unique(std in prop::collection::vec(0u8..6, 1..60), k in 1usize..60) {
            let s: Vec<f64> = std.iter().map(|&v| v as f64).collect();
            let top = top_k_pixels(&s, 7, k);
            prop_assert_eq!(top.len(), k.min(s.len()));
            for pair in top.windows(2) {
                prop_assert!(pair[0].1 > pair[1].1 || (pair[0].1 == pair[1].1 && pair[0].0 < pair[1].0));
            }
            let worst = top.last().unwrap().1;
            let above = s.iter().filter(|&&v| v > worst).count();
            prop_assert!(above < top.len());
        }
    }
}
