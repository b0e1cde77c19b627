//! Reproducible experiments: a seed × fold grid of training runs with all
//! artifacts written under one output directory.

mod config;
mod gradcheck;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{apply_override, DatasetSource, DirectorySource, ExperimentConfig, MethodSpec, ModelSettings};
pub use gradcheck::{gradcheck_suite, BlockReport, BLOCKS};

use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
use crate::encoders::{ImageEncoderConfig, MetadataEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, stratified_holdout, stratified_kfold, FoldSplit};
use crate::params::ParamStore;
use crate::stats::{compare_methods, CompareOptions, ComparisonReport, FoldResultTable};
use crate::structures::{Model, ModelConfig};
use crate::training::{checkpoint, predict_scores, train, TrainConfig};

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub run: String,
    pub bac: f64,
    pub acc: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub method: String,
    pub run: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub bac_mean: f64,
    pub bac_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: usize,
    pub failures: Vec<FailedRun>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<FailedRun>,
    pub summary: Vec<MethodSummary>,
    pub out: PathBuf,
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn mean_bac(&self, method: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method).map(|s| s.bac_mean)
    }
}

pub fn run_id(seed: u64, fold: usize) -> String {
    format!("s{seed}-f{fold}")
}

/// Seed used for initialization and training of one grid cell. Every method
/// in the cell shares it.
pub fn cell_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(fold as u64)
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        DatasetSource::Directory(d) => Dataset::load(&d.path, d.channels, d.height, d.width),
    }
}

/// Writes a synthetic dataset in the standard directory layout.
pub fn cmd_generate(spec: &SyntheticSpec, out: &Path) -> Result<Dataset> {
    let data = generate_synthetic(spec)?;
    data.save(out)?;
    Ok(data)
}

pub fn model_config(settings: &ModelSettings, method: &MethodSpec, data: &Dataset) -> ModelConfig {
    let (channels, height, width) = data.image_shape();
    ModelConfig {
        structure: method.structure,
        fusion: method.fusion,
        classes: data.classes(),
        image: ImageEncoderConfig {
            channels,
            height,
            width,
            block_channels: settings.conv_channels.clone(),
            kernel: settings.kernel,
            d_img: settings.d_img,
        },
        meta: MetadataEncoderConfig {
            input_width: data.schema.encoded_width(),
            hidden: settings.meta_hidden.clone(),
            d_meta: settings.d_meta,
        },
        heads: settings.heads,
        literal_eq7: settings.literal_eq7,
    }
}

struct Cell {
    seed: u64,
    fold: usize,
    method: usize,
}

struct CellResult {
    rows: Vec<ResultRow>,
    failure: Option<FailedRun>,
}

fn run_cell(cfg: &ExperimentConfig, data: &Dataset, split: &FoldSplit, cell: &Cell) -> Result<Vec<ResultRow>> {
    let method = &cfg.methods[cell.method];
    let run = run_id(cell.seed, cell.fold);
    let test_idx = &split.folds[cell.fold];
    let rest = split.complement(cell.fold);
    let seed = cell_seed(cell.seed, cell.fold);
    let (train_idx, val_idx) = stratified_holdout(&rest, &data.labels, cfg.val_fraction, seed)?;

    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(model_config(&cfg.model, method, data), &mut ps, &mut rng)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let outcome = train(&model, &ps, data, &train_idx, &val_idx, &train_cfg, method.stopping_report())?;

    let dir = cfg.out.join("runs").join(&run).join(method.slug());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    outcome.log.write_csv(&dir.join("trainlog.csv"))?;
    if cfg.save_checkpoints {
        checkpoint::save(&outcome.params, &dir.join("model"))?;
    }

    let y = data.label_batch(test_idx);
    let mut rows = Vec::new();
    for (name, report) in method.variants() {
        let scores = predict_scores(&model, &outcome.params, data, test_idx, report)?;
        let (metrics, cm) = evaluate(&scores, &y)?;
        cm.write_csv(&dir.join(format!("confusion-{}.csv", name.to_lowercase())))?;
        log::info!("{name} {run}: BAC {:.4}", metrics.bac);
        rows.push(ResultRow {
            method: name,
            run: run.clone(),
            bac: metrics.bac,
            acc: metrics.acc,
            auc: metrics.auc,
        });
    }
    Ok(rows)
}

/// Trains and evaluates every method on every (seed, fold) cell, using at
/// most `jobs` worker threads. A failing cell is recorded and the rest
/// continue. Results are ordered by method, then fold, then seed.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let splits: Vec<FoldSplit> = cfg
        .seeds
        .iter()
        .map(|&s| stratified_kfold(&data.labels, cfg.folds, s))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for method in 0..cfg.methods.len() {
        for fold in 0..cfg.folds {
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                cells.push((si, Cell { seed, fold, method }));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(si, cell)| match run_cell(cfg, &data, &splits[*si], cell) {
                Ok(rows) => CellResult { rows, failure: None },
                Err(e) => {
                    let method = cfg.methods[cell.method].slug();
                    let run = run_id(cell.seed, cell.fold);
                    log::error!("{method} {run} failed: {e}");
                    CellResult {
                        rows: Vec::new(),
                        failure: Some(FailedRun {
                            method,
                            run,
                            error: e.to_string(),
                        }),
                    }
                }
            })
            .collect()
    });

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        rows.extend(r.rows);
        failures.extend(r.failure);
    }
    // variants of one method were emitted together; regroup by name
    let order: Vec<String> = cfg.methods.iter().flat_map(|m| m.variants()).map(|(n, _)| n).collect();
    rows.sort_by_key(|r| order.iter().position(|n| *n == r.method));

    write_results(&cfg.out.join("results.csv"), &rows)?;
    let summary = summarize(&order, &rows);
    write_summary(&cfg.out.join("summary.csv"), &summary)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rows: rows.len(),
        failures: failures.clone(),
    };
    let path = cfg.out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentOutcome {
        rows,
        failures,
        summary,
        out: cfg.out.clone(),
    })
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("method,run,bac,acc,auc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.run, r.bac, r.acc, r.auc);
    }
    out
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    std::fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per method.
pub fn summarize(order: &[String], rows: &[ResultRow]) -> Vec<MethodSummary> {
    order
        .iter()
        .filter_map(|m| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| &r.method == m).collect();
            if mine.is_empty() {
                return None;
            }
            let col = |f: fn(&ResultRow) -> f64| mean_std(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (bac_mean, bac_std) = col(|r| r.bac);
            let (acc_mean, acc_std) = col(|r| r.acc);
            let (auc_mean, auc_std) = col(|r| r.auc);
            Some(MethodSummary {
                method: m.clone(),
                runs: mine.len(),
                bac_mean,
                bac_std,
                acc_mean,
                acc_std,
                auc_mean,
                auc_std,
            })
        })
        .collect()
}

fn write_summary(path: &Path, summary: &[MethodSummary]) -> Result<()> {
    let mut out = String::from("method,runs,bac_mean,bac_std,acc_mean,acc_std,auc_mean,auc_std\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.method, s.runs, s.bac_mean, s.bac_std, s.acc_mean, s.acc_std, s.auc_mean, s.auc_std
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a results CSV, runs the omnibus and pairwise tests and writes
/// `comparison.json` and `comparison.md` into `out`.
pub fn cmd_compare(results: &Path, metric: &str, opts: &CompareOptions, out: &Path) -> Result<ComparisonReport> {
    let table = FoldResultTable::read_csv(results, metric)?;
    let report = compare_methods(&table, opts)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("comparison.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let md = out.join("comparison.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}
