//! Key rank and measurements-to-disclosure (MTD).
//!
//! `rank_i` counts the key hypotheses whose accumulated score over the
//! first `i` traces is strictly greater than the true key's; ties go to the
//! true key. `MTD` is the smallest `i` from which the rank stays at 0.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aes::{hypothesis_class, KeyBytes};
use crate::dataset::{ensure_dir, write_json, PermutationStream};
use crate::{exec, Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const P_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCurve {
    pub byte: usize,
    /// `ranks[i - 1]` is the rank after `i` traces.
    pub ranks: Vec<u8>,
    /// Some wrong hypothesis ties the true key after the last trace.
    pub tie_degenerate: bool,
}

impl RankCurve {
    pub fn final_rank(&self) -> Option<u8> {
        self.ranks.last().copied()
    }
}

/// Strictly-better count and whether any other hypothesis ties.
fn rank_of(scores: &[f64], truth: u8) -> (u8, bool) {
    let t = scores[truth as usize];
    let mut better = 0u32;
    let mut tie = false;
    for (k, &s) in scores.iter().enumerate() {
        if s > t {
            better += 1;
        } else if s == t && k != truth as usize {
            tie = true;
        }
    }
    (better as u8, tie)
}

/// `[n, 256]` table of `ln max(p_j[class(pt_j, k)], P_FLOOR)` per trace `j`
/// and key hypothesis `k`.
pub fn log_likelihood_table(probs: &[f32], plaintexts: &[u8]) -> Result<Vec<f64>> {
    let n = plaintexts.len();
    if probs.len() != n * 256 {
        return Err(Error::ShapeMismatch(format!("{} probabilities for {n} traces", probs.len())));
    }
    let mut out = vec![0.0; n * 256];
    for (j, (row, &pt)) in probs.chunks(256).zip(plaintexts).enumerate() {
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::InvalidInput(format!("probability row {j} is not normalized (sum {sum})")));
        }
        let dst = &mut out[j * 256..(j + 1) * 256];
        for (k, d) in dst.iter_mut().enumerate() {
            let p = row[hypothesis_class(pt, k as u8) as usize] as f64;
            *d = p.max(P_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Rank curve from a per-trace score table, accumulated in `perm` order.
pub fn rank_curve_from_table(table: &[f64], perm: &[usize], byte: usize, true_key: u8) -> RankCurve {
    let mut acc = [0.0f64; 256];
    let mut ranks = Vec::with_capacity(perm.len());
    let mut tie = false;
    for &j in perm {
        for (a, &v) in acc.iter_mut().zip(&table[j * 256..(j + 1) * 256]) {
            *a += v;
        }
        let (r, t) = rank_of(&acc, true_key);
        ranks.push(r);
        tie = t;
    }
    RankCurve {
        byte,
        ranks,
        tie_degenerate: tie,
    }
}

/// Ranks from an already accumulated trajectory: `scores[i - 1]` holds the
/// 256 hypothesis scores after `i` traces.
pub fn rank_curve_from_scores(scores: &[f64], byte: usize, true_key: u8) -> RankCurve {
    let mut ranks = Vec::with_capacity(scores.len() / 256);
    let mut tie = false;
    for row in scores.chunks(256) {
        let (r, t) = rank_of(row, true_key);
        ranks.push(r);
        tie = t;
    }
    RankCurve {
        byte,
        ranks,
        tie_degenerate: tie,
    }
}

/// Rank curve of model probabilities `[n, 256]` for one byte.
pub fn rank_curve(probs: &[f32], plaintexts: &[u8], byte: usize, true_key: u8, perm: &[usize]) -> Result<RankCurve> {
    check_perm(perm, plaintexts.len())?;
    let table = log_likelihood_table(probs, plaintexts)?;
    Ok(rank_curve_from_table(&table, perm, byte, true_key))
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidInput(format!("permutation of length {} for {n} traces", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidInput("not a permutation".into()));
        }
    }
    Ok(())
}

/// Smallest `i` (1-based) with `rank_j = 0` for every `j >= i`.
pub fn mtd(ranks: &[u8]) -> Option<usize> {
    match ranks.iter().rposition(|&r| r != 0) {
        None if ranks.is_empty() => None,
        None => Some(1),
        Some(p) if p + 1 == ranks.len() => None,
        Some(p) => Some(p + 2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByteMtd {
    pub byte: usize,
    /// Mean over the permutations with a defined MTD; `None` if there are none.
    pub mean_mtd: Option<f64>,
    pub na_permutations: usize,
    /// Mean of the last rank over permutations.
    pub final_rank: f64,
    pub tie_degenerate: bool,
    /// Curve of the first permutation.
    #[serde(skip)]
    pub curve: Vec<u8>,
    /// Rank at each `i` averaged over permutations.
    #[serde(skip)]
    pub mean_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtdResult {
    pub n_test: usize,
    pub n_permutations: usize,
    pub bytes: Vec<ByteMtd>,
    /// `None` when any byte is N/A.
    pub average_mtd: Option<f64>,
    pub worst_mtd: Option<f64>,
    pub average_rank: f64,
}

impl MtdResult {
    pub fn cracked_bytes(&self) -> usize {
        self.bytes.iter().filter(|b| b.mean_mtd.is_some()).count()
    }

    pub fn all_na(&self) -> bool {
        self.cracked_bytes() == 0
    }
}

/// Runs `curve(byte, perm)` for every byte and permutation and aggregates.
pub fn evaluate_with<F>(bytes: &[usize], n_test: usize, stream: &PermutationStream, curve: F) -> Result<MtdResult>
where
    F: Fn(usize, &[usize]) -> Result<RankCurve> + Sync,
{
    if stream.n_perms == 0 || n_test == 0 || bytes.is_empty() {
        return Err(Error::InvalidInput("evaluation needs traces, bytes and permutations".into()));
    }
    let perms: Vec<Vec<usize>> = (0..stream.n_perms).map(|i| stream.permutation(n_test, i)).collect();
    let np = perms.len();
    let curves = exec::map_indexed(bytes.len() * np, |t| curve(bytes[t / np], &perms[t % np]));
    let mut per_byte = Vec::with_capacity(bytes.len());
    let mut it = curves.into_iter();
    for &b in bytes {
        let mut mtds = Vec::new();
        let mut na = 0;
        let mut final_sum = 0.0;
        let mut tie = false;
        let mut first = Vec::new();
        let mut mean_curve = vec![0.0; n_test];
        for p in 0..np {
            let c = it.next().expect("one curve per pair")?;
            if c.ranks.len() != n_test {
                return Err(Error::ShapeMismatch(format!(
                    "curve of length {} for {n_test} traces",
                    c.ranks.len()
                )));
            }
            match mtd(&c.ranks) {
                Some(m) => mtds.push(m as f64),
                None => na += 1,
            }
            final_sum += c.final_rank().unwrap_or(0) as f64;
            tie |= c.tie_degenerate;
            for (m, &r) in mean_curve.iter_mut().zip(&c.ranks) {
                *m += r as f64;
            }
            if p == 0 {
                first = c.ranks;
            }
        }
        mean_curve.iter_mut().for_each(|m| *m /= np as f64);
        per_byte.push(ByteMtd {
            byte: b,
            mean_mtd: (!mtds.is_empty()).then(|| mtds.iter().sum::<f64>() / mtds.len() as f64),
            na_permutations: na,
            final_rank: final_sum / np as f64,
            tie_degenerate: tie,
            curve: first,
            mean_curve,
        });
    }
    let defined: Option<Vec<f64>> = per_byte.iter().map(|b| b.mean_mtd).collect();
    let average_rank = per_byte.iter().map(|b| b.final_rank).sum::<f64>() / per_byte.len() as f64;
    Ok(MtdResult {
        n_test,
        n_permutations: np,
        average_mtd: defined.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
        worst_mtd: defined.map(|v| v.into_iter().fold(f64::NEG_INFINITY, f64::max)),
        average_rank,
        bytes: per_byte,
    })
}

/// Evaluates per-byte probability matrices. `probs[i]` belongs to
/// `bytes[i]`; `plaintexts` is the `[n_test, 16]` plaintext matrix.
pub fn evaluate(bytes: &[usize], probs: &[Vec<f32>], plaintexts: &[u8], key: &KeyBytes, stream: &PermutationStream) -> Result<MtdResult> {
    if probs.len() != bytes.len() {
        return Err(Error::InvalidInput(format!("{} matrices for {} bytes", probs.len(), bytes.len())));
    }
    let n = plaintexts.len() / 16;
    let tables = bytes
        .iter()
        .zip(probs)
        .map(|(&b, p)| {
            let pts: Vec<u8> = (0..n).map(|j| plaintexts[j * 16 + b]).collect();
            log_likelihood_table(p, &pts)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_with(bytes, n, stream, |b, perm| {
        let i = bytes.iter().position(|&x| x == b).expect("listed byte");
        Ok(rank_curve_from_table(&tables[i], perm, b, key[b]))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub format_version: u32,
    pub method: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub n_train: Option<usize>,
    pub result: MtdResult,
}

/// `report.json` plus one `curve_byteNN.csv` (`i,rank,mean_rank`) per byte.
pub fn write_report(dir: &Path, report: &RankReport) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("report.json"), report)?;
    for b in &report.result.bytes {
        let mut csv = String::from("i,rank,mean_rank\n");
        for (i, (r, m)) in b.curve.iter().zip(&b.mean_curve).enumerate() {
            writeln!(csv, "{},{},{}", i + 1, r, m).expect("string write");
        }
        let path = dir.join(format!("curve_byte{:02}.csv", b.byte));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
