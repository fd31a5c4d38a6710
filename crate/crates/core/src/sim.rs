//! Parametric stand-in for a physical power/thermal simulator.
//!
//! Power maps are sparse: a fixed set of background cells carries
//! data-independent activity and each of the 16 points of interest carries
//! the leakage of one S-box output. Thermal maps smear a power map with a
//! Gaussian kernel, add an ambient offset and per-pixel sensor noise.
//!
//! The background model is a plausible placeholder; nothing about the spatial
//! statistics of real non-POI activity is implied.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aes::{first_round_labels, KeyBytes, LabelBytes, PlaintextBytes};
use crate::dataset::{Dataset, Manifest, Source};
use crate::{exec, Error, Result};

/// Stream index reserved for the per-dataset floorplan draw.
const FLOORPLAN_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Power,
    Thermal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageModel {
    /// `alpha * HW(label) + beta`
    #[default]
    HammingWeight,
    /// `alpha * label + beta`
    Identity,
}

/// Grid location, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }

    pub fn index(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    pub fn from_index(idx: usize, width: usize) -> Self {
        Pixel::new(idx / width, idx % width)
    }

    pub fn chebyshev(&self, other: &Pixel) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

fn default_grid() -> usize {
    64
}
fn default_gain() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_ambient() -> f64 {
    25.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    pub n_traces: usize,
    #[serde(default)]
    pub key: KeyBytes,
    /// Defaults to a 4x4 lattice in the top-right quadrant.
    #[serde(default)]
    pub poi_coords: Option<Vec<Pixel>>,
    #[serde(default)]
    pub leakage_model: LeakageModel,
    /// Watts per leakage unit.
    #[serde(default = "default_gain")]
    pub leak_gain: f64,
    #[serde(default)]
    pub leak_offset: f64,
    #[serde(default)]
    pub noise_std_power: f64,
    #[serde(default)]
    pub background_density: f64,
    #[serde(default)]
    pub background_scale: f64,
    pub modality: Modality,
    #[serde(default = "default_sigma")]
    pub diffusion_sigma: f64,
    #[serde(default = "default_scale")]
    pub thermal_scale: f64,
    #[serde(default = "default_ambient")]
    pub ambient_temp: f64,
    #[serde(default)]
    pub noise_std_thermal: f64,
    pub rng_seed: u64,
}

impl SimConfig {
    /// Noiseless single-trace configuration, mostly useful as a starting point.
    pub fn new(grid_size: usize, n_traces: usize, modality: Modality, rng_seed: u64) -> Self {
        SimConfig {
            grid_size,
            n_traces,
            key: KeyBytes::default(),
            poi_coords: None,
            leakage_model: LeakageModel::HammingWeight,
            leak_gain: 1.0,
            leak_offset: 0.0,
            noise_std_power: 0.0,
            background_density: 0.0,
            background_scale: 0.0,
            modality,
            diffusion_sigma: 1.0,
            thermal_scale: 1.0,
            ambient_temp: 25.0,
            noise_std_thermal: 0.0,
            rng_seed,
        }
    }

    pub fn pois(&self) -> Vec<Pixel> {
        match &self.poi_coords {
            Some(p) => p.clone(),
            None => default_pois(self.grid_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.grid_size;
        if h < 8 {
            return Err(Error::Config(format!("grid_size must be >= 8, got {h}")));
        }
        if self.n_traces == 0 {
            return Err(Error::Config("n_traces must be positive".into()));
        }
        let pois = self.pois();
        if pois.len() != 16 {
            return Err(Error::Config(format!("expected 16 POIs, got {}", pois.len())));
        }
        for (i, p) in pois.iter().enumerate() {
            if p.row >= h || p.col >= h {
                return Err(Error::Config(format!("POI {i} at {p:?} is outside the grid")));
            }
            if pois[..i].contains(p) {
                return Err(Error::Config(format!("POI {i} at {p:?} duplicates another POI")));
            }
        }
        let nonneg = [
            ("noise_std_power", self.noise_std_power),
            ("noise_std_thermal", self.noise_std_thermal),
            ("background_scale", self.background_scale),
            ("background_density", self.background_density),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.background_density > 1.0 {
            return Err(Error::Config("background_density must be <= 1".into()));
        }
        if !(self.diffusion_sigma > 0.0 && self.diffusion_sigma.is_finite()) {
            return Err(Error::Config("diffusion_sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// 4x4 lattice of POIs in the top-right quadrant, byte `b` at lattice cell
/// `(b / 4, b % 4)`. The pitch is `grid / 8`, so on grids divisible by 8 each
/// POI sits at the centre of its own cell after three 2x poolings.
pub fn default_pois(grid: usize) -> Vec<Pixel> {
    let pitch = (grid / 8).max(1);
    let off = pitch / 2;
    (0..16)
        .map(|b| Pixel::new(off + (b / 4) * pitch, grid / 2 + off + (b % 4) * pitch))
        .collect()
}

/// One simulated reading, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl LeakageMap {
    pub fn zeros(height: usize, width: usize, modality: Modality) -> Self {
        LeakageMap {
            height,
            width,
            values: vec![0.0; height * width],
            modality,
        }
    }

    pub fn at(&self, p: Pixel) -> f64 {
        self.values[p.index(self.width)]
    }
}

/// Per-dataset structure: the background activity mask and the POIs.
#[derive(Clone, Debug)]
pub struct Floorplan {
    pub pois: Vec<Pixel>,
    pub background: Vec<usize>,
}

impl Floorplan {
    pub fn from_config(cfg: &SimConfig) -> Self {
        let pois = cfg.pois();
        let n = cfg.grid_size * cfg.grid_size;
        let poi_idx: Vec<usize> = pois.iter().map(|p| p.index(cfg.grid_size)).collect();
        let free: Vec<usize> = (0..n).filter(|i| !poi_idx.contains(i)).collect();
        let count = (cfg.background_density * free.len() as f64).floor() as usize;
        let mut rng = trace_rng(cfg.rng_seed, FLOORPLAN_STREAM);
        let mut background: Vec<usize> = sample(&mut rng, free.len(), count.min(free.len()))
            .into_iter()
            .map(|i| free[i])
            .collect();
        background.sort_unstable();
        Floorplan { pois, background }
    }
}

/// Independent random stream for trace `index`.
pub fn trace_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn leakage_value(cfg: &SimConfig, label: u8) -> f64 {
    let x = match cfg.leakage_model {
        LeakageModel::HammingWeight => label.count_ones() as f64,
        LeakageModel::Identity => label as f64,
    };
    cfg.leak_gain * x + cfg.leak_offset
}

/// Power map for one encryption. Draws the POI noise first, then the
/// background amplitudes, from `rng`.
pub fn gen_power_map<R: Rng>(labels: &LabelBytes, cfg: &SimConfig, floorplan: &Floorplan, rng: &mut R) -> LeakageMap {
    let g = cfg.grid_size;
    let mut map = LeakageMap::zeros(g, g, Modality::Power);
    for (b, p) in floorplan.pois.iter().enumerate() {
        let noise: f64 = rng.sample(StandardNormal);
        map.values[p.index(g)] = leakage_value(cfg, labels[b]) + cfg.noise_std_power * noise;
    }
    for &idx in &floorplan.background {
        let a: f64 = rng.sample(StandardNormal);
        map.values[idx] = cfg.background_scale * a.abs();
    }
    map
}

/// Normalized 1-D Gaussian taps with radius `ceil(4 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable zero-padded convolution with a symmetric 1-D kernel.
pub fn separable_blur(values: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < width {
                    acc += w * row[sx as usize];
                }
            }
            *o = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for (t, &w) in taps.iter().enumerate() {
        for y in 0..height {
            let sy = y as isize + t as isize - r;
            if sy < 0 || sy as usize >= height {
                continue;
            }
            let src = &tmp[sy as usize * width..(sy as usize + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Thermal map from a power map: ambient + scale * blur(power) + noise.
pub fn gen_thermal_map<R: Rng>(power: &LeakageMap, cfg: &SimConfig, rng: &mut R) -> Result<LeakageMap> {
    if power.modality != Modality::Power {
        return Err(Error::InvalidInput("thermal maps are derived from power maps".into()));
    }
    let taps = gaussian_taps(cfg.diffusion_sigma);
    let blurred = separable_blur(&power.values, power.height, power.width, &taps);
    let values = blurred
        .into_iter()
        .map(|v| {
            let n: f64 = if cfg.noise_std_thermal > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            cfg.ambient_temp + cfg.thermal_scale * v + cfg.noise_std_thermal * n
        })
        .collect();
    Ok(LeakageMap {
        height: power.height,
        width: power.width,
        values,
        modality: Modality::Thermal,
    })
}

/// One full trace: plaintext, labels and the map of the configured modality,
/// all drawn from the stream of trace `index`.
pub fn gen_trace(cfg: &SimConfig, floorplan: &Floorplan, index: u64) -> (PlaintextBytes, LabelBytes, LeakageMap) {
    let mut rng = trace_rng(cfg.rng_seed, index);
    let mut pt = [0u8; 16];
    rng.fill(&mut pt);
    let pt = PlaintextBytes(pt);
    let labels = first_round_labels(&pt, &cfg.key);
    let power = gen_power_map(&labels, cfg, floorplan, &mut rng);
    let map = match cfg.modality {
        Modality::Power => power,
        Modality::Thermal => gen_thermal_map(&power, cfg, &mut rng).expect("power input"),
    };
    (pt, labels, map)
}

/// Generates `cfg.n_traces` traces. Each trace depends only on
/// `(rng_seed, index)`, so the result is independent of the worker count.
pub fn gen_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let floorplan = Floorplan::from_config(cfg);
    let g = cfg.grid_size;
    let traces_per = exec::map_indexed(cfg.n_traces, |i| {
        let (pt, labels, map) = gen_trace(cfg, &floorplan, i as u64);
        let vals: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
        (pt, labels, vals)
    });
    let mut traces = Vec::with_capacity(cfg.n_traces * g * g);
    let mut plaintexts = Vec::with_capacity(cfg.n_traces * 16);
    let mut labels = Vec::with_capacity(cfg.n_traces * 16);
    for (pt, lb, v) in traces_per {
        plaintexts.extend_from_slice(&pt.0);
        labels.extend_from_slice(&lb.0);
        traces.extend_from_slice(&v);
    }
    let manifest = Manifest::new(cfg.n_traces, g, g, cfg.modality, Source::Simulated { sim: cfg.clone() });
    Ok(Dataset {
        manifest,
        traces,
        plaintexts,
        labels,
        pois: floorplan.pois,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_all(v: u8) -> LabelBytes {
        LabelBytes([v; 16])
    }

    fn noiseless(modality: Modality) -> SimConfig {
        SimConfig::new(32, 10, modality, 5)
    }

    #[test]
    fn default_pois_are_valid_for_many_grids() {
        for g in [8, 9, 16, 32, 64, 201] {
            let cfg = SimConfig::new(g, 1, Modality::Power, 0);
            cfg.validate().unwrap_or_else(|e| panic!("grid {g}: {e}"));
        }
        let pois = default_pois(64);
        assert!(pois.iter().all(|p| p.row < 32 && p.col >= 32));
        let mut cells: Vec<(usize, usize)> = pois.iter().map(|p| (p.row / 8, p.col / 8)).collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 16);
    }

    #[test]
    fn duplicate_pois_are_rejected() {
        let mut cfg = noiseless(Modality::Power);
        let mut pois = default_pois(32);
        pois[3] = pois[7];
        cfg.poi_coords = Some(pois);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn negative_noise_is_rejected() {
        let mut cfg = noiseless(Modality::Power);
        cfg.noise_std_power = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = noiseless(Modality::Power);
        cfg.grid_size = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn power_poi_values() {
        let cfg = noiseless(Modality::Power);
        let fp = Floorplan::from_config(&cfg);
        let mut rng = trace_rng(0, 0);

        let m = gen_power_map(&labels_all(0x00), &cfg, &fp, &mut rng);
        assert!(m.values.iter().all(|&v| v == 0.0));

        let m = gen_power_map(&labels_all(0xff), &cfg, &fp, &mut rng);
        assert_eq!(m.values.iter().filter(|&&v| v != 0.0).count(), 16);
        assert!(fp.pois.iter().all(|&p| m.at(p) == 8.0));

        let mut cfg = cfg;
        cfg.leak_offset = 0.5;
        let m = gen_power_map(&labels_all(0x0f), &cfg, &fp, &mut rng);
        assert!(fp.pois.iter().all(|&p| m.at(p) == 4.5));
    }

    #[test]
    fn identity_leakage() {
        let mut cfg = noiseless(Modality::Power);
        cfg.leakage_model = LeakageModel::Identity;
        let fp = Floorplan::from_config(&cfg);
        let m = gen_power_map(&labels_all(0x0f), &cfg, &fp, &mut trace_rng(0, 0));
        assert_eq!(m.at(fp.pois[0]), 15.0);
    }

    #[test]
    fn power_sparsity_bound() {
        let mut cfg = noiseless(Modality::Power);
        cfg.background_density = 0.1;
        cfg.background_scale = 2.0;
        cfg.noise_std_power = 0.3;
        let fp = Floorplan::from_config(&cfg);
        let n = (cfg.grid_size * cfg.grid_size) as f64;
        for i in 0..20 {
            let m = gen_power_map(&labels_all(0x5a), &cfg, &fp, &mut trace_rng(1, i));
            let zeros = m.values.iter().filter(|&&v| v == 0.0).count() as f64;
            assert!(zeros / n >= 1.0 - cfg.background_density - 16.0 / n);
        }
    }

    #[test]
    fn zero_power_gives_ambient() {
        let cfg = noiseless(Modality::Thermal);
        let p = LeakageMap::zeros(32, 32, Modality::Power);
        let t = gen_thermal_map(&p, &cfg, &mut trace_rng(0, 0)).unwrap();
        assert!(t.values.iter().all(|&v| v == 25.0));
    }

    #[test]
    fn thermal_needs_power_input() {
        let cfg = noiseless(Modality::Thermal);
        let t = LeakageMap::zeros(32, 32, Modality::Thermal);
        assert!(gen_thermal_map(&t, &cfg, &mut trace_rng(0, 0)).is_err());
    }

    // Brute-force 2-D convolution with the outer-product kernel.
    fn brute_blur(values: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
        let r = (taps.len() / 2) as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y - dy, x - dx);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += taps[(dy + r) as usize] * taps[(dx + r) as usize] * values[sy as usize * w + sx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn impulse_response_is_a_unit_mass_gaussian() {
        // odd grid so that sigma = H/8 keeps the whole kernel on the map
        let g = 33;
        let c = 16 * g + 16;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let mut cfg = SimConfig::new(g, 1, Modality::Thermal, 0);
            cfg.ambient_temp = 0.0;
            cfg.diffusion_sigma = sigma;
            let mut p = LeakageMap::zeros(g, g, Modality::Power);
            p.values[c] = 1.0;
            let t = gen_thermal_map(&p, &cfg, &mut trace_rng(0, 0)).unwrap();
            let sum: f64 = t.values.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sigma {sigma}: mass {sum}");
            let brute = brute_blur(&p.values, g, g, &gaussian_taps(sigma));
            for (a, b) in t.values.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12);
            }
            let max = t.values.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(t.values[c], max);
        }
    }

    #[test]
    fn blur_matches_brute_force_near_borders() {
        let mut rng = trace_rng(9, 9);
        let vals: Vec<f64> = (0..12 * 10).map(|_| rng.random::<f64>()).collect();
        let taps = gaussian_taps(1.3);
        let fast = separable_blur(&vals, 12, 10, &taps);
        let brute = brute_blur(&vals, 12, 10, &taps);
        for (a, b) in fast.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn thermal_mass_tracks_power_mass() {
        let mut cfg = SimConfig::new(64, 1, Modality::Thermal, 3);
        cfg.thermal_scale = 2.5;
        cfg.ambient_temp = 30.0;
        cfg.poi_coords = Some((0..16).map(|b| Pixel::new(20 + (b / 4) * 6, 20 + (b % 4) * 6)).collect());
        let fp = Floorplan::from_config(&cfg);
        let power = gen_power_map(&labels_all(0xa7), &cfg, &fp, &mut trace_rng(0, 0));
        let thermal = gen_thermal_map(&power, &cfg, &mut trace_rng(0, 0)).unwrap();
        let pmass: f64 = power.values.iter().sum();
        let tmass: f64 = thermal.values.iter().map(|v| v - 30.0).sum();
        assert!((tmass - 2.5 * pmass).abs() < 1e-9 * pmass.max(1.0));
    }

    #[test]
    fn thermal_locality() {
        let mut cfg = SimConfig::new(48, 1, Modality::Thermal, 3);
        cfg.diffusion_sigma = 2.0;
        cfg.ambient_temp = 0.0;
        let center = Pixel::new(24, 24);
        let mut p = LeakageMap::zeros(48, 48, Modality::Power);
        p.values[center.index(48)] = 3.0;
        let t = gen_thermal_map(&p, &cfg, &mut trace_rng(0, 0)).unwrap();
        let mut ring_max = [0.0f64; 24];
        for idx in 0..48 * 48 {
            let d = Pixel::from_index(idx, 48).chebyshev(&center);
            if d < 24 {
                ring_max[d] = ring_max[d].max(t.values[idx]);
            }
        }
        for d in 1..24 {
            assert!(ring_max[d] <= ring_max[d - 1], "ring {d}");
        }
    }

    #[test]
    fn noiseless_poi_correlates_perfectly_with_hw() {
        let mut cfg = SimConfig::new(16, 1000, Modality::Power, 11);
        cfg.leak_gain = 0.7;
        cfg.leak_offset = 0.2;
        let ds = gen_dataset(&cfg).unwrap();
        for b in [0usize, 9, 15] {
            let p = ds.pois[b].index(16);
            let xs: Vec<f64> = (0..ds.n()).map(|i| ds.trace(i)[p] as f64).collect();
            let hs: Vec<f64> = (0..ds.n()).map(|i| ds.labels_of(i)[b].count_ones() as f64).collect();
            let r = pearson(&xs, &hs);
            assert!((r - 1.0).abs() < 1e-9, "byte {b}: r = {r}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn dataset_is_deterministic_and_labelled() {
        let mut cfg = SimConfig::new(16, 50, Modality::Thermal, 21);
        cfg.noise_std_power = 0.5;
        cfg.noise_std_thermal = 0.1;
        cfg.background_density = 0.05;
        cfg.background_scale = 1.0;
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.plaintexts, b.plaintexts);
        for i in 0..a.n() {
            let pt = PlaintextBytes::try_from(a.plaintexts_of(i)).unwrap();
            assert_eq!(&first_round_labels(&pt, &cfg.key).0[..], a.labels_of(i));
        }
        cfg.rng_seed = 22;
        let c = gen_dataset(&cfg).unwrap();
        assert_ne!(a.traces, c.traces);
    }
}
