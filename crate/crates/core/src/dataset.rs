//! On-disk dataset format, seeded splits and test-set permutation streams.
//!
//! A dataset directory holds:
//!
//! | file            | content                                              |
//! |-----------------|------------------------------------------------------|
//! | `manifest.json` | UTF-8 JSON [`Manifest`]                               |
//! | `traces.f32`    | little-endian `f32`, row-major `[N, H, W]`            |
//! | `plaintexts.u8` | row-major `[N, 16]`                                   |
//! | `labels.u8`     | row-major `[N, 16]`                                   |
//! | `pois.txt`      | 16 lines `row col`, byte order                        |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aes::{key_from_label, sbox, KeyBytes};
use crate::sim::{Modality, Pixel, SimConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Simulated { sim: SimConfig },
    External { tag: String, key: Option<KeyBytes> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n_traces: usize,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Manifest {
    pub fn new(n_traces: usize, height: usize, width: usize, modality: Modality, source: Source) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            n_traces,
            height,
            width,
            modality,
            source,
            config_hash: None,
        }
    }

    pub fn key(&self) -> Option<KeyBytes> {
        match &self.source {
            Source::Simulated { sim } => Some(sim.key),
            Source::External { key, .. } => *key,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub traces: Vec<f32>,
    pub plaintexts: Vec<u8>,
    pub labels: Vec<u8>,
    pub pois: Vec<Pixel>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.manifest.n_traces
    }

    pub fn map_len(&self) -> usize {
        self.manifest.height * self.manifest.width
    }

    pub fn trace(&self, i: usize) -> &[f32] {
        let m = self.map_len();
        &self.traces[i * m..(i + 1) * m]
    }

    pub fn plaintexts_of(&self, i: usize) -> &[u8] {
        &self.plaintexts[i * 16..(i + 1) * 16]
    }

    pub fn labels_of(&self, i: usize) -> &[u8] {
        &self.labels[i * 16..(i + 1) * 16]
    }

    pub fn plaintext_byte(&self, i: usize, b: usize) -> u8 {
        self.plaintexts[i * 16 + b]
    }

    pub fn label_byte(&self, i: usize, b: usize) -> u8 {
        self.labels[i * 16 + b]
    }

    /// Key from the manifest, or recovered from the first labelled trace.
    pub fn true_key(&self) -> Option<KeyBytes> {
        self.manifest.key().or_else(|| {
            if self.n() == 0 {
                return None;
            }
            let mut k = [0u8; 16];
            for (b, kb) in k.iter_mut().enumerate() {
                *kb = key_from_label(self.plaintext_byte(0, b), self.label_byte(0, b));
            }
            Some(KeyBytes(k))
        })
    }

    /// Number of label bytes that disagree with `sbox(pt ^ key)`; `None` when
    /// the key is withheld.
    pub fn label_mismatches(&self) -> Option<usize> {
        let key = self.manifest.key()?;
        let bad = self
            .plaintexts
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(i, (&p, &l))| sbox(p ^ key.0[i % 16]) != l)
            .count();
        Some(bad)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let n = m.n_traces;
        if self.traces.len() != n * m.height * m.width {
            return Err(Error::ShapeMismatch(format!(
                "{} trace values for N={n}, H={}, W={}",
                self.traces.len(),
                m.height,
                m.width
            )));
        }
        if self.plaintexts.len() != n * 16 || self.labels.len() != n * 16 {
            return Err(Error::ShapeMismatch("plaintext/label matrices must be N x 16".into()));
        }
        if self.pois.len() != 16 {
            return Err(Error::ShapeMismatch(format!("{} POIs, expected 16", self.pois.len())));
        }
        if let Some(p) = self.pois.iter().find(|p| p.row >= m.height || p.col >= m.width) {
            return Err(Error::ShapeMismatch(format!("POI {p:?} outside the grid")));
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_file(path)?;
    serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingComponent(path.into())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let raw = read_file(path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("{} bytes is not a whole number of f32 values", raw.len()),
        });
    }
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), &ds.manifest)?;
    write_f32_le(&dir.join("traces.f32"), &ds.traces)?;
    let p = dir.join("plaintexts.u8");
    fs::write(&p, &ds.plaintexts).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("labels.u8");
    fs::write(&p, &ds.labels).map_err(|e| Error::io(&p, e))?;
    let text: String = ds.pois.iter().map(|p| format!("{} {}\n", p.row, p.col)).collect();
    let p = dir.join("pois.txt");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn parse_pois(path: &Path) -> Result<Vec<Pixel>> {
    let raw = read_file(path)?;
    let text = String::from_utf8(raw).map_err(|_| Error::Corrupt {
        path: path.into(),
        reason: "not UTF-8".into(),
    })?;
    let corrupt = |line: usize| Error::Corrupt {
        path: path.into(),
        reason: format!("line {line}: expected `row col`"),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(r)), Some(Ok(c)), None) => Ok(Pixel::new(r, c)),
                _ => Err(corrupt(i + 1)),
            }
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let n = manifest.n_traces;
    let traces_path = dir.join("traces.f32");
    let traces = read_f32_le(&traces_path)?;
    let expect = n * manifest.height * manifest.width;
    if traces.len() != expect {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} values, manifest implies {expect}",
            traces_path.display(),
            traces.len()
        )));
    }
    let mut mats = Vec::with_capacity(2);
    for name in ["plaintexts.u8", "labels.u8"] {
        let p = dir.join(name);
        let m = read_file(&p)?;
        if m.len() != n * 16 {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} bytes, manifest implies {}",
                p.display(),
                m.len(),
                n * 16
            )));
        }
        mats.push(m);
    }
    let labels = mats.pop().unwrap();
    let plaintexts = mats.pop().unwrap();
    let pois = parse_pois(&dir.join("pois.txt"))?;
    let ds = Dataset {
        manifest,
        traces,
        plaintexts,
        labels,
        pois,
    };
    ds.validate()?;
    if let Some(bad) = ds.label_mismatches().filter(|&b| b > 0) {
        log::warn!("{}: {bad} label bytes disagree with plaintexts and manifest key", dir.display());
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub shuffle_seed: u64,
}

/// Disjoint index sets into a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let total = spec.n_train + spec.n_val + spec.n_test;
    if total > n {
        return Err(Error::Config(format!("split needs {total} traces but the dataset has {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    // test and validation come first so that growing n_train keeps them
    // fixed and yields nested training sets
    let test = idx[..spec.n_test].to_vec();
    let val = idx[spec.n_test..spec.n_test + spec.n_val].to_vec();
    let train = idx[spec.n_test + spec.n_val..total].to_vec();
    Ok(Split { train, val, test })
}

fn default_perms() -> usize {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationStream {
    #[serde(default = "default_perms")]
    pub n_perms: usize,
    pub base_seed: u64,
}

impl PermutationStream {
    pub fn new(base_seed: u64) -> Self {
        PermutationStream {
            n_perms: default_perms(),
            base_seed,
        }
    }

    /// Permutation `index` of `0..n`, derived from `(base_seed, index)` only.
    pub fn permutation(&self, n: usize, index: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(index as u64);
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    }
}

pub fn permutations(n_test: usize, stream: &PermutationStream) -> Vec<Vec<usize>> {
    (0..stream.n_perms).map(|i| stream.permutation(n_test, i)).collect()
}

/// Path helper used by the stores in other modules.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::gen_dataset;

    fn small() -> Dataset {
        let mut cfg = SimConfig::new(12, 30, Modality::Thermal, 3);
        cfg.noise_std_thermal = 0.2;
        gen_dataset(&cfg).unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let size = fs::metadata(dir.path().join("traces.f32")).unwrap().len();
        assert_eq!(size as usize, 4 * 30 * 12 * 12);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.label_mismatches(), Some(0));
    }

    #[test]
    fn rejects_future_version() {
        let mut ds = small();
        ds.manifest.format_version = 2;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::VersionMismatch { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn truncated_traces_are_a_shape_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("traces.f32");
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 4 * 12]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::ShapeMismatch(_))));
        fs::write(&p, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_pois_is_distinct() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("pois.txt")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::MissingComponent(p)) => assert!(p.ends_with("pois.txt")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_labels_are_detected() {
        let mut ds = small();
        ds.labels[5] ^= 1;
        ds.labels[40] ^= 0x80;
        assert_eq!(ds.label_mismatches(), Some(2));
        // still readable: the warning is advisory
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().label_mismatches(), Some(2));
    }

    #[test]
    fn key_recovered_when_withheld() {
        let mut ds = small();
        let key = ds.manifest.key().unwrap();
        ds.manifest.source = Source::External {
            tag: "bench".into(),
            key: None,
        };
        assert_eq!(ds.label_mismatches(), None);
        assert_eq!(ds.true_key(), Some(key));
    }

    #[test]
    fn paper_split_sizes() {
        let spec = SplitSpec {
            n_train: 13_600,
            n_val: 3_400,
            n_test: 3_000,
            shuffle_seed: 1,
        };
        let s = split(20_000, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (13_600, 3_400, 3_000));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20_000);
        assert_eq!(split(20_000, &spec).unwrap(), s);
        assert!(split(19_999, &spec).is_err());
        let small = split(20_000, &SplitSpec { n_train: 2_000, ..spec }).unwrap();
        assert_eq!((&small.val, &small.test), (&s.val, &s.test));
        assert_eq!(small.train[..], s.train[..2_000]);
    }

    #[test]
    fn permutation_stream() {
        let stream = PermutationStream::new(42);
        assert_eq!(stream.n_perms, 100);
        let one = permutations(1, &stream);
        assert!(one.iter().all(|p| p == &vec![0]));
        let perms = permutations(50, &stream);
        for p in &perms {
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..50).collect::<Vec<_>>());
        }
        assert_eq!(PermutationStream::new(42).permutation(50, 7), perms[7]);
        assert_ne!(perms[7], perms[8]);
    }
}
