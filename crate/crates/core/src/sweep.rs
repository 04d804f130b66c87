//! Hyperparameter sensitivity sweeps.
//!
//! Grid points that share `(seed, tau, K)` share one clustering pass, points
//! that also share `(mu_f, mu_b)` share one set of maps, and only the seed
//! thresholding is repeated per `bg_threshold`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::lpcam::{generate_maps, LpcamMode, MapKind, MapRequest};
use crate::pipeline::{cluster_all, evaluate_maps, select_bank, ClusterCache};
use crate::types::ClassifierWeights;

/// Values to sweep. Omitted axes take the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Option<Vec<f64>>,
    pub mu_f: Option<Vec<f64>>,
    pub mu_b: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub bg_threshold: Option<Vec<f64>>,
    pub seed: Option<Vec<u64>>,
    #[serde(default)]
    pub kind: MapKind,
    pub mode: Option<LpcamMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mu_f: f64,
    pub mu_b: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub bg_threshold: f64,
    pub seed: u64,
    pub miou: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Number of dataset-wide clustering passes executed.
    pub clustering_passes: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "tau",
    "mu_f",
    "mu_b",
    "K",
    "bg_threshold",
    "seed",
    "miou",
    "fp",
    "fn",
    "precision",
    "recall",
];

fn axis<T: Clone>(values: &Option<Vec<T>>, base: T) -> Vec<T> {
    match values {
        Some(v) if !v.is_empty() => v.clone(),
        _ => vec![base],
    }
}

/// Runs every grid point. Rows are ordered by
/// `tau, mu_f, mu_b, K, bg_threshold, seed`, each following grid order.
pub fn run_sweep(
    dataset: &Dataset,
    weights: &ClassifierWeights,
    base: &PipelineConfig,
    grid: &SweepGrid,
    workers: usize,
    cache: Option<&ClusterCache>,
) -> Result<SweepOutcome> {
    let taus = axis(&grid.tau, base.tau);
    let mu_fs = axis(&grid.mu_f, base.mu_f);
    let mu_bs = axis(&grid.mu_b, base.mu_b);
    let ks = axis(&grid.k, base.k);
    let thresholds = axis(&grid.bg_threshold, base.bg_threshold);
    let seeds = axis(&grid.seed, base.seed);
    let mode = grid.mode.unwrap_or(base.mode);

    let mut keyed: Vec<([usize; 6], SweepRow)> = Vec::new();
    let mut passes = 0;

    let mut push_rows = |config: &PipelineConfig, idx: [usize; 5], maps: &[crate::lpcam::ImageMaps]| -> Result<()> {
        for (it, &t) in thresholds.iter().enumerate() {
            let report = evaluate_maps(dataset, maps, t)?;
            keyed.push((
                [idx[0], idx[1], idx[2], idx[3], it, idx[4]],
                SweepRow {
                    tau: config.tau,
                    mu_f: config.mu_f,
                    mu_b: config.mu_b,
                    k: config.k,
                    bg_threshold: t,
                    seed: config.seed,
                    miou: report.miou,
                    fp: report.fp,
                    fn_: report.fn_,
                    precision: report.precision,
                    recall: report.recall,
                },
            ));
        }
        Ok(())
    };

    if grid.kind == MapKind::Cam {
        let request = MapRequest {
            weights,
            bank: None,
            kind: MapKind::Cam,
            mode,
        };
        let maps = generate_maps(dataset, &request, workers)?;
        for (is, &seed) in seeds.iter().enumerate() {
            for (it, &tau) in taus.iter().enumerate() {
                for (ik, &k) in ks.iter().enumerate() {
                    for (ifg, &mu_f) in mu_fs.iter().enumerate() {
                        for (ibg, &mu_b) in mu_bs.iter().enumerate() {
                            let config = PipelineConfig { tau, k, mu_f, mu_b, seed, mode, ..base.clone() };
                            push_rows(&config, [it, ifg, ibg, ik, is], &maps)?;
                        }
                    }
                }
            }
        }
    } else {
        for (is, &seed) in seeds.iter().enumerate() {
            for (it, &tau) in taus.iter().enumerate() {
                for (ik, &k) in ks.iter().enumerate() {
                    let cluster_config = PipelineConfig { tau, k, seed, mode, ..base.clone() };
                    let clusters = cluster_all(dataset, weights, &cluster_config, cache)?;
                    passes += 1;
                    for (ifg, &mu_f) in mu_fs.iter().enumerate() {
                        for (ibg, &mu_b) in mu_bs.iter().enumerate() {
                            let config = PipelineConfig { mu_f, mu_b, ..cluster_config.clone() };
                            config.validate()?;
                            let bank = select_bank(&clusters, weights, &config)?;
                            let request = MapRequest {
                                weights,
                                bank: Some(&bank),
                                kind: MapKind::Lpcam,
                                mode,
                            };
                            let maps = generate_maps(dataset, &request, workers)?;
                            push_rows(&config, [it, ifg, ibg, ik, is], &maps)?;
                        }
                    }
                }
            }
        }
    }

    keyed.sort_by_key(|(idx, _)| *idx);
    Ok(SweepOutcome {
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
        clustering_passes: passes,
    })
}

pub fn write_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::error::Error::io("<csv>", e))?;
    Ok(())
}
