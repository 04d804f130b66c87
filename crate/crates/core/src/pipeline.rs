//! End-to-end stages: clustering every class, building the prototype bank,
//! and turning maps into evaluated seed masks.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{collect_class_features, kmeans, ClusterResult};
use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{accumulate, finalize, ConfusionAccumulator, MetricsReport};
use crate::lpcam::ImageMaps;
use crate::prototypes::{select_prototypes, BankMeta, PrototypeBank};
use crate::seedmask::seed_for_image;
use crate::types::{ClassifierWeights, SeedMask};

/// Foreground and background clusters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub class_id: usize,
    pub fg: ClusterResult,
    /// `None` when every local feature of the class fell in the foreground.
    pub bg: Option<ClusterResult>,
    pub images: Vec<String>,
}

fn cluster_bag(
    bag: &crate::types::LocalFeatures,
    config: &PipelineConfig,
    class_id: usize,
    side: &str,
) -> Result<ClusterResult> {
    let mut clustering = config.clustering();
    if bag.len() < clustering.k {
        warn!(
            "class {class_id}: only {} {side} features for K={}; clustering with K={}",
            bag.len(),
            clustering.k,
            bag.len()
        );
        clustering.k = bag.len();
    }
    kmeans(bag, &clustering)
}

pub fn cluster_class(
    dataset: &Dataset,
    weights: &ClassifierWeights,
    class_id: usize,
    config: &PipelineConfig,
) -> Result<ClassClusters> {
    let features = collect_class_features(
        dataset,
        weights,
        class_id,
        config.tau,
        config.sample_cap,
        config.seed,
    )?;
    if features.foreground.is_empty() {
        return Err(Error::Dataset(format!(
            "class {class_id}: no local feature reached tau = {} in any image",
            config.tau
        )));
    }
    let fg = cluster_bag(&features.foreground, config, class_id, "foreground")?;
    let bg = if features.background.is_empty() {
        None
    } else {
        Some(cluster_bag(&features.background, config, class_id, "background")?)
    };
    Ok(ClassClusters {
        class_id,
        fg,
        bg,
        images: features.images,
    })
}

/// On-disk cache of per-class clusters, keyed by everything clustering reads.
#[derive(Debug, Clone)]
pub struct ClusterCache {
    dir: PathBuf,
}

impl ClusterCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache key covering the manifest, the weights, the feature files' size
    /// and modification time, and every clustering hyperparameter.
    pub fn key(
        dataset: &Dataset,
        weights: &ClassifierWeights,
        config: &PipelineConfig,
        class_id: usize,
    ) -> Result<String> {
        let mut h = Sha256::new();
        let manifest = serde_json::to_vec(dataset.manifest())
            .map_err(|e| Error::json("<manifest>", e))?;
        h.update(&manifest);
        for v in weights.values() {
            h.update(v.to_le_bytes());
        }
        for r in dataset.records() {
            let path = dataset.resolve(&r.feature_path);
            let meta = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            h.update(meta.len().to_le_bytes());
            if let Ok(t) = meta.modified() {
                if let Ok(d) = t.duration_since(std::time::UNIX_EPOCH) {
                    h.update(d.as_nanos().to_le_bytes());
                }
            }
        }
        let params = serde_json::to_vec(&(config.clustering(), config.tau, class_id))
            .map_err(|e| Error::json("<config>", e))?;
        h.update(&params);
        Ok(hex::encode(h.finalize()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("clusters-{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<ClassClusters> {
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, clusters: &ClassClusters) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let text = serde_json::to_string(clusters).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Clusters every class present in the manifest, in class order.
pub fn cluster_all(
    dataset: &Dataset,
    weights: &ClassifierWeights,
    config: &PipelineConfig,
    cache: Option<&ClusterCache>,
) -> Result<Vec<ClassClusters>> {
    config.validate()?;
    dataset.check_weights(weights)?;
    dataset
        .manifest()
        .present_classes()
        .into_par_iter()
        .map(|class_id| {
            let key = match cache {
                Some(_) => Some(ClusterCache::key(dataset, weights, config, class_id)?),
                None => None,
            };
            if let (Some(c), Some(k)) = (cache, &key) {
                if let Some(hit) = c.get(k) {
                    info!("class {class_id}: clusters loaded from cache");
                    return Ok(hit);
                }
            }
            let clusters = cluster_class(dataset, weights, class_id, config)?;
            if let (Some(c), Some(k)) = (cache, &key) {
                c.put(k, &clusters)?;
            }
            Ok(clusters)
        })
        .collect()
}

/// Scores and selects prototypes from precomputed clusters.
pub fn select_bank(
    clusters: &[ClassClusters],
    weights: &ClassifierWeights,
    config: &PipelineConfig,
) -> Result<PrototypeBank> {
    let classes = clusters
        .iter()
        .map(|c| {
            let fg = c.fg.prototype_vectors();
            let bg = c.bg.as_ref().map(|b| b.prototype_vectors()).unwrap_or_default();
            let entry = select_prototypes(&fg, &bg, weights, c.class_id, config.mu_f, config.mu_b)?;
            Ok((c.class_id, entry))
        })
        .collect::<Result<_>>()?;
    Ok(PrototypeBank {
        meta: BankMeta {
            k: config.k,
            tau: config.tau,
            mu_f: config.mu_f,
            mu_b: config.mu_b,
            sample_cap: config.sample_cap,
            metric: config.metric,
            seed: config.seed,
            channels: weights.channels(),
            num_classes: weights.num_classes(),
        },
        classes,
    })
}

pub fn build_bank(
    dataset: &Dataset,
    weights: &ClassifierWeights,
    config: &PipelineConfig,
    cache: Option<&ClusterCache>,
) -> Result<PrototypeBank> {
    let clusters = cluster_all(dataset, weights, config, cache)?;
    select_bank(&clusters, weights, config)
}

pub fn seeds_from_maps(images: &[ImageMaps], bg_threshold: f64) -> Result<Vec<SeedMask>> {
    images
        .par_iter()
        .map(|img| seed_for_image(img, bg_threshold))
        .collect()
}

/// Accumulates every seed that has a ground-truth mask.
pub fn evaluate_seeds(dataset: &Dataset, seeds: &[SeedMask]) -> Result<MetricsReport> {
    let by_id: HashMap<&str, usize> = dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let n = dataset.num_classes();
    let deltas = seeds
        .par_iter()
        .map(|seed| {
            let &index = by_id.get(seed.image_id.as_str()).ok_or_else(|| {
                Error::Dataset(format!("seed '{}' is not in the manifest", seed.image_id))
            })?;
            match dataset.gt_mask(index)? {
                Some(gt) => accumulate(&seed.raster, &gt, n).map(Some),
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionAccumulator::new(n);
    let mut evaluated = 0;
    for d in deltas.into_iter().flatten() {
        total.merge(&d)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::EmptyMetrics("no seed has a ground-truth mask".into()));
    }
    finalize(&total)
}

pub fn evaluate_maps(dataset: &Dataset, images: &[ImageMaps], bg_threshold: f64) -> Result<MetricsReport> {
    evaluate_seeds(dataset, &seeds_from_maps(images, bg_threshold)?)
}

/// Reads the cache directory from `LPCAM_CACHE_DIR`, if set.
pub fn cache_from_env() -> Option<ClusterCache> {
    std::env::var_os("LPCAM_CACHE_DIR")
        .filter(|v| !v.is_empty())
        .map(|v| ClusterCache::new(Path::new(&v)))
}
