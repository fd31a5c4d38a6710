//! The pipeline stages behind each subcommand. Every stage computes its
//! result in memory first and touches the output directory only on success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use itlsca::aes::KeyBytes;
use itlsca::attack::{self, AttackData, AttackPlan, InputStage};
use itlsca::dataset::{self, read_dataset, read_json, write_dataset, write_json, Dataset, Split};
use itlsca::keyrank::{self, MtdResult, RankReport};
use itlsca::nn::ModelKind;
use itlsca::preprocess::{filter_maps, run_pipeline, FeatureBundle, FilterKind};
use itlsca::sim::gen_dataset;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const FEATURES_FILE: &str = "features.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
}

fn stamp(out: &Path, command: &str, hash: &str) -> Result<(), CliError> {
    let p = Provenance {
        command: command.into(),
        config_hash: hash.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&out.join(PROVENANCE_FILE), &p)?;
    Ok(())
}

/// Per-run overrides of the attack plan taken from the command line.
#[derive(Clone, Debug, Default)]
pub struct PlanOverrides {
    pub model: Option<ModelKind>,
    pub itl: bool,
    pub itl_iterations: Option<usize>,
    pub byte_order: Option<Vec<usize>>,
}

impl PlanOverrides {
    pub fn apply(&self, plan: &AttackPlan) -> Result<AttackPlan, CliError> {
        let mut p = plan.clone();
        if let Some(m) = self.model {
            if m != p.model {
                // the configured stage belonged to the configured model
                p.input = None;
            }
            p.model = m;
        }
        p.itl |= self.itl;
        if let Some(n) = self.itl_iterations {
            p.itl_iterations = n;
        }
        if let Some(order) = &self.byte_order {
            p.byte_order = order.clone();
        }
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }
}

pub fn method_name(plan: &AttackPlan) -> String {
    let base = plan.model;
    if plan.itl {
        format!("{base} with ITL")
    } else {
        base.to_string()
    }
}

struct Loaded {
    ds: Dataset,
    split: Split,
}

fn load(cfg: &ExperimentConfig, dataset_dir: &Path) -> Result<Loaded, CliError> {
    let ds = read_dataset(dataset_dir)?;
    let split = dataset::split(ds.n(), &cfg.split).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Loaded { ds, split })
}

fn true_key(ds: &Dataset) -> Result<KeyBytes, CliError> {
    ds.true_key()
        .ok_or_else(|| CliError::Data("the dataset does not record its key".into()))
}

fn filter_for(cfg: &ExperimentConfig, ds: &Dataset, features: Option<&FeatureBundle>) -> FilterKind {
    match features {
        Some(f) => f.filter,
        None => cfg.preprocess.filter.unwrap_or(FilterKind::for_modality(ds.manifest.modality)),
    }
}

fn read_features(path: Option<&Path>, stage: InputStage) -> Result<Option<FeatureBundle>, CliError> {
    if stage == InputStage::FullMap {
        return Ok(None);
    }
    let dir = path.ok_or_else(|| CliError::Config(format!("input stage {stage:?} needs --features")))?;
    let file = if dir.is_dir() { dir.join(FEATURES_FILE) } else { dir.to_path_buf() };
    Ok(Some(read_json(&file)?))
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset, CliError> {
    let hash = cfg.hash();
    let mut ds = gen_dataset(&cfg.sim)?;
    ds.manifest.config_hash = Some(hash.clone());
    write_dataset(&ds, out)?;
    stamp(out, "simulate", &hash)?;
    log::info!("wrote {} traces to {}", ds.n(), out.display());
    Ok(ds)
}

pub fn select_features(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<FeatureBundle, CliError> {
    let Loaded { ds, split } = load(cfg, dataset_dir)?;
    let bytes: Vec<usize> = (0..16).collect();
    let fb = run_pipeline(&ds, &split.train, &split.val, &bytes, &cfg.preprocess)?;
    dataset::ensure_dir(out)?;
    write_json(&out.join(FEATURES_FILE), &fb)?;
    stamp(out, "select-features", &cfg.hash())?;
    Ok(fb)
}

pub fn train(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    features: Option<&Path>,
    out: &Path,
    overrides: &PlanOverrides,
) -> Result<attack::ByteModelSet, CliError> {
    let plan = overrides.apply(&cfg.attack)?;
    let Loaded { ds, split } = load(cfg, dataset_dir)?;
    let fb = read_features(features, plan.input_stage())?;
    let maps = filter_maps(&ds, filter_for(cfg, &ds, fb.as_ref()))?;
    let data = attack_data(&ds, &maps, &split, fb.as_ref());
    let set = attack::train_set(&plan, &data)?;
    if set.models.iter().all(|m| m.model.is_none()) {
        let msgs: Vec<String> = set.models.iter().filter_map(|m| m.error.clone()).collect();
        return Err(CliError::Divergence(msgs.join("; ")));
    }
    attack::save_set(out, &set, Some(cfg.hash()))?;
    stamp(out, "train", &cfg.hash())?;
    Ok(set)
}

fn attack_data<'a>(ds: &'a Dataset, maps: &'a [f32], split: &'a Split, fb: Option<&'a FeatureBundle>) -> AttackData<'a> {
    AttackData {
        maps,
        height: ds.manifest.height,
        width: ds.manifest.width,
        labels: &ds.labels,
        plaintexts: &ds.plaintexts,
        features: fb,
        train_rows: &split.train,
        val_rows: &split.val,
    }
}

fn finish_report(out: &Path, command: &str, cfg: &ExperimentConfig, report: RankReport) -> Result<RankReport, CliError> {
    keyrank::write_report(out, &report)?;
    stamp(out, command, &cfg.hash())?;
    if report.result.all_na() {
        return Err(CliError::AllNa(format!(
            "{}: no byte reached rank 0 within {} traces",
            report.method, report.result.n_test
        )));
    }
    Ok(report)
}

/// Key-rank evaluation of a trained model set on the test rows. The report
/// is written even when every byte is N/A; that case still exits nonzero.
pub fn evaluate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    models: &Path,
    features: Option<&Path>,
    out: &Path,
) -> Result<RankReport, CliError> {
    let set = attack::load_set(models)?;
    let Loaded { ds, split } = load(cfg, dataset_dir)?;
    let fb = read_features(features, set.plan.input_stage())?;
    let maps = filter_maps(&ds, filter_for(cfg, &ds, fb.as_ref()))?;
    let data = attack_data(&ds, &maps, &split, fb.as_ref());
    let key = true_key(&ds)?;
    let probs = attack::predict_probs(&set, &data, &split.test)?;
    let result = attack::evaluate_set(&set, &probs, &data, &split.test, &key, &cfg.eval.stream())?;
    let report = RankReport {
        format_version: dataset::FORMAT_VERSION,
        method: cfg.name.clone().unwrap_or_else(|| method_name(&set.plan)),
        config_hash: Some(cfg.hash()),
        n_train: Some(split.train.len()),
        result,
    };
    finish_report(out, "evaluate", cfg, report)
}

/// CPA over the configured bytes, plus `cpa_byteNN.csv` score trajectories
/// (true-key score and best wrong-key score) on the unpermuted test rows.
pub fn cpa(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<RankReport, CliError> {
    let Loaded { ds, split } = load(cfg, dataset_dir)?;
    let key = true_key(&ds)?;
    let maps = filter_maps(&ds, filter_for(cfg, &ds, None))?;
    let (map_len, width) = (ds.map_len(), ds.manifest.width);
    let region = attack::cpa_region(ds.manifest.modality, &maps, map_len, width, &split.train, cfg.eval.cpa_top_k)?;
    let regions: BTreeMap<usize, Vec<usize>> = cfg.attack.byte_order.iter().map(|&b| (b, region.clone())).collect();
    let result: MtdResult = attack::cpa_evaluate(&maps, map_len, &regions, &ds.plaintexts, &split.test, &key, &cfg.eval.stream())?;

    let mut trajectories = Vec::new();
    for &b in regions.keys() {
        let pts: Vec<u8> = split.test.iter().map(|&r| ds.plaintext_byte(r, b)).collect();
        let scores = attack::cpa_trajectory(&maps, map_len, &region, &split.test, &pts);
        let mut csv = String::from("i,true_key,best_wrong_key\n");
        for (i, row) in scores.chunks(256).enumerate() {
            let k = key[b] as usize;
            let wrong = row.iter().enumerate().filter(|&(h, _)| h != k).map(|(_, &s)| s).fold(0.0, f64::max);
            writeln!(csv, "{},{},{}", i + 1, row[k], wrong).expect("string write");
        }
        trajectories.push((b, csv));
    }
    let report = RankReport {
        format_version: dataset::FORMAT_VERSION,
        method: cfg.name.clone().unwrap_or_else(|| "CPA".into()),
        config_hash: Some(cfg.hash()),
        n_train: Some(split.train.len()),
        result,
    };
    dataset::ensure_dir(out)?;
    for (b, csv) in trajectories {
        let path = out.join(format!("cpa_byte{b:02}.csv"));
        std::fs::write(&path, csv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    finish_report(out, "cpa", cfg, report)
}
