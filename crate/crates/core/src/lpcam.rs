//! Prototype similarity maps and their aggregation into LPCAM heatmaps,
//! plus dataset-wide map generation into an on-disk archive.
//!
//! For one class the class prototypes are slid over the feature block and
//! their cosine-similarity maps averaged into a foreground map; context
//! prototypes give a background map the same way. The activation is
//! `FG - BG`, ReLU'd and max-normalized exactly like a CAM.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, normalize_to_activation};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::npy;
use crate::prototypes::{ClassPrototypes, PrototypeBank};
use crate::types::{dot, norm, ActivationMap, ClassifierWeights, FeatureBlock, RawMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LpcamMode {
    /// `FG - BG`.
    #[default]
    Full,
    /// Foreground term only.
    FgOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Cam,
    #[default]
    Lpcam,
}

/// Cosine similarity without clamping. `None` when either vector has zero norm.
pub fn cosine_unclamped(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Cosine similarity of every local feature to `prototype`, clamped to
/// `[-1, 1]`. Zero-norm local features score 0.
pub fn similarity_map(block: &FeatureBlock, prototype: &[f32]) -> Result<RawMap> {
    if prototype.len() != block.channels() {
        return Err(Error::Dimension(format!(
            "prototype has length {} but the block has {} channels",
            prototype.len(),
            block.channels()
        )));
    }
    let pn = norm(prototype);
    if pn == 0.0 || !pn.is_finite() {
        return Err(Error::InvalidParameter("prototype has zero norm".into()));
    }
    let values = block
        .locals()
        .map(|f| {
            let fnorm = norm(f);
            if fnorm == 0.0 {
                0.0
            } else {
                (dot(f, prototype) / (fnorm * pn)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    RawMap::new(block.height(), block.width(), values)
}

fn mean_similarity(block: &FeatureBlock, prototypes: &[Vec<f32>]) -> Result<RawMap> {
    let mut acc = RawMap::zeros(block.height(), block.width());
    if prototypes.is_empty() {
        return Ok(acc);
    }
    for p in prototypes {
        let m = similarity_map(block, p)?;
        for (a, v) in acc.values.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let k = prototypes.len() as f64;
    for a in &mut acc.values {
        *a /= k;
    }
    Ok(acc)
}

/// Averaged class-prototype and context-prototype similarity maps.
/// The background map is all zeros when there are no context prototypes.
pub fn aggregate_fg_bg(block: &FeatureBlock, entry: &ClassPrototypes) -> Result<(RawMap, RawMap)> {
    if entry.fg.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "class {} has no class prototypes",
            entry.class_id
        )));
    }
    Ok((mean_similarity(block, &entry.fg)?, mean_similarity(block, &entry.bg)?))
}

pub fn compute_lpcam(
    block: &FeatureBlock,
    entry: &ClassPrototypes,
    mode: LpcamMode,
) -> Result<ActivationMap> {
    let (fg, bg) = aggregate_fg_bg(block, entry)?;
    let raw = match mode {
        LpcamMode::FgOnly => fg,
        LpcamMode::Full => RawMap {
            height: fg.height,
            width: fg.width,
            values: fg.values.iter().zip(&bg.values).map(|(f, b)| f - b).collect(),
        },
    };
    normalize_to_activation(&raw, entry.class_id)
}

/// All activation maps of one image, ordered by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMaps {
    pub image_id: String,
    /// Resolution seed masks should be produced at.
    pub target_size: (usize, usize),
    pub maps: Vec<ActivationMap>,
}

/// Which maps to generate and from what.
#[derive(Debug, Clone, Copy)]
pub struct MapRequest<'a> {
    pub weights: &'a ClassifierWeights,
    pub bank: Option<&'a PrototypeBank>,
    pub kind: MapKind,
    pub mode: LpcamMode,
}

impl MapRequest<'_> {
    fn check(&self, dataset: &Dataset) -> Result<()> {
        dataset.check_weights(self.weights)?;
        if self.kind == MapKind::Lpcam {
            let bank = self.bank.ok_or_else(|| {
                Error::InvalidParameter("LPCAM maps need a prototype bank".into())
            })?;
            let missing = bank.missing(&dataset.manifest().present_classes());
            if !missing.is_empty() {
                return Err(Error::MissingBankEntries(missing));
            }
            if bank.meta.channels != dataset.channels() {
                return Err(Error::Dimension(format!(
                    "bank has C={} but the dataset has C={}",
                    bank.meta.channels,
                    dataset.channels()
                )));
            }
        }
        Ok(())
    }

    fn image_maps(&self, dataset: &Dataset, index: usize) -> Result<ImageMaps> {
        let record = &dataset.records()[index];
        let block = dataset.features(index)?;
        let maps = record
            .present_classes()
            .into_iter()
            .map(|class_id| match self.kind {
                MapKind::Cam => compute_cam(&block, self.weights, class_id),
                MapKind::Lpcam => {
                    let entry = self
                        .bank
                        .and_then(|b| b.get(class_id))
                        .ok_or_else(|| Error::MissingBankEntries(vec![class_id]))?;
                    compute_lpcam(&block, entry, self.mode)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageMaps {
            image_id: record.image_id.clone(),
            target_size: dataset.target_size(index)?,
            maps,
        })
    }
}

/// A dedicated pool of `workers` threads (at least one).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))
}

/// Maps for every (image, present class) pair, in manifest order.
pub fn generate_maps(
    dataset: &Dataset,
    request: &MapRequest<'_>,
    workers: usize,
) -> Result<Vec<ImageMaps>> {
    request.check(dataset)?;
    worker_pool(workers)?.install(|| {
        (0..dataset.records().len())
            .into_par_iter()
            .map(|i| request.image_maps(dataset, i))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub image_id: String,
    pub class_id: usize,
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveImage {
    pub image_id: String,
    pub target_height: usize,
    pub target_width: usize,
    pub entries: Vec<ArchiveEntry>,
}

/// JSON index of a map archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub kind: MapKind,
    pub mode: LpcamMode,
    pub images: Vec<ArchiveImage>,
}

pub const ARCHIVE_INDEX: &str = "index.json";

/// Writes maps as `maps/<image_id>/<class_id>.npy` under `dir` plus `index.json`.
///
/// Files are written one at a time in manifest order.
pub fn write_archive(
    dir: &Path,
    kind: MapKind,
    mode: LpcamMode,
    images: &[ImageMaps],
) -> Result<ArchiveIndex> {
    let mut index = ArchiveIndex {
        kind,
        mode,
        images: Vec::with_capacity(images.len()),
    };
    for image in images {
        let mut entries = Vec::with_capacity(image.maps.len());
        for map in &image.maps {
            let rel = PathBuf::from("maps")
                .join(&image.image_id)
                .join(format!("{}.npy", map.class_id()));
            npy::write_f32(&dir.join(&rel), &[map.height(), map.width()], map.values())?;
            entries.push(ArchiveEntry {
                image_id: image.image_id.clone(),
                class_id: map.class_id(),
                path: rel,
                height: map.height(),
                width: map.width(),
            });
        }
        index.images.push(ArchiveImage {
            image_id: image.image_id.clone(),
            target_height: image.target_size.0,
            target_width: image.target_size.1,
            entries,
        });
    }
    let path = dir.join(ARCHIVE_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_archive(dir: &Path) -> Result<(ArchiveIndex, Vec<ImageMaps>)> {
    let path = dir.join(ARCHIVE_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: ArchiveIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let images = index
        .images
        .iter()
        .map(|img| {
            let maps = img
                .entries
                .iter()
                .map(|e| {
                    let (shape, data) = npy::read_f32(&dir.join(&e.path))?;
                    if shape != [e.height, e.width] {
                        return Err(Error::Dimension(format!(
                            "{}: expected ({}, {}), found {shape:?}",
                            e.path.display(),
                            e.height,
                            e.width
                        )));
                    }
                    ActivationMap::new(e.class_id, e.height, e.width, data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageMaps {
                image_id: img.image_id.clone(),
                target_size: (img.target_height, img.target_width),
                maps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, images))
}

/// Generates every map and writes the archive.
pub fn batch_generate(
    dataset: &Dataset,
    request: &MapRequest<'_>,
    workers: usize,
    out_dir: &Path,
) -> Result<ArchiveIndex> {
    let images = generate_maps(dataset, request, workers)?;
    write_archive(out_dir, request.kind, request.mode, &images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureBlock {
        let values = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureBlock::new(h, w, c, values).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, c: usize) -> Vec<f32> {
        (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn entry(fg: Vec<Vec<f32>>, bg: Vec<Vec<f32>>) -> ClassPrototypes {
        ClassPrototypes {
            class_id: 0,
            fg,
            bg,
            fg_scores: vec![],
            bg_scores: vec![],
            fallback: false,
        }
    }

    #[test]
    fn similarity_is_one_at_identical_and_minus_one_at_antipodal() {
        let p = vec![0.3f32, -1.2, 2.0];
        let neg: Vec<f32> = p.iter().map(|v| -v).collect();
        let values = [p.clone(), neg, vec![1.0, 0.0, 0.0]].concat();
        let block = FeatureBlock::new(1, 3, 3, values).unwrap();
        let m = similarity_map(&block, &p).unwrap();
        assert!((m.values[0] - 1.0).abs() < 1e-12);
        assert!((m.values[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_normalized_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let block = random_block(&mut rng, 3, 3, 4);
        let p = random_vec(&mut rng, 4);
        let m = similarity_map(&block, &p).unwrap();
        let pn: f64 = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        for i in 0..9 {
            let f = &block.values()[i * 4..i * 4 + 4];
            let fnorm: f64 = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let d: f64 = f.iter().zip(&p).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((m.values[i] - d / (fnorm * pn)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_feature_scores_zero_and_zero_prototype_fails() {
        let block = FeatureBlock::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let m = similarity_map(&block, &[1.0, 1.0]).unwrap();
        assert_eq!(m.values[0], 0.0);
        assert!(similarity_map(&block, &[0.0, 0.0]).is_err());
        assert!(similarity_map(&block, &[1.0]).is_err());
    }

    #[test]
    fn single_prototype_fg_is_its_similarity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = random_block(&mut rng, 3, 4, 5);
        let p = random_vec(&mut rng, 5);
        let (fg, bg) = aggregate_fg_bg(&block, &entry(vec![p.clone()], vec![])).unwrap();
        assert_eq!(fg, similarity_map(&block, &p).unwrap());
        assert!(bg.values.iter().all(|&v| v == 0.0));
        let (dup, _) = aggregate_fg_bg(&block, &entry(vec![p.clone(), p.clone()], vec![])).unwrap();
        for (a, b) in dup.values.iter().zip(&fg.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_matches_hand_averaged_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = random_block(&mut rng, 3, 3, 6);
        let f1 = random_vec(&mut rng, 6);
        let f2 = random_vec(&mut rng, 6);
        let b1 = random_vec(&mut rng, 6);
        let (fg, bg) =
            aggregate_fg_bg(&block, &entry(vec![f1.clone(), f2.clone()], vec![b1.clone()])).unwrap();
        let cos = |f: &[f32], p: &[f32]| {
            let d: f64 = f.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
            let nf: f64 = f.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            let np: f64 = p.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            d / (nf * np)
        };
        for i in 0..9 {
            let f = &block.values()[i * 6..i * 6 + 6];
            assert!((fg.values[i] - 0.5 * (cos(f, &f1) + cos(f, &f2))).abs() < 1e-6);
            assert!((bg.values[i] - cos(f, &b1)).abs() < 1e-6);
        }
    }

    #[test]
    fn full_equals_fg_only_without_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = random_block(&mut rng, 4, 4, 3);
        let e = entry(vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)], vec![]);
        assert_eq!(
            compute_lpcam(&block, &e, LpcamMode::Full).unwrap(),
            compute_lpcam(&block, &e, LpcamMode::FgOnly).unwrap()
        );
    }

    #[test]
    fn small_gap_survives_normalization() {
        // FG of 0.9 and 1.0 at two positions with a zero BG
        let p = vec![1.0f32, 0.0];
        let x2 = vec![0.9f32, (1.0f32 - 0.81).sqrt()];
        let block = FeatureBlock::new(1, 2, 2, [x2, p.clone()].concat()).unwrap();
        let map = compute_lpcam(&block, &entry(vec![p], vec![]), LpcamMode::Full).unwrap();
        assert!((map.values()[0] - 0.9).abs() < 1e-6);
        assert_eq!(map.values()[1], 1.0);
    }

    #[test]
    fn context_dominated_block_is_empty() {
        let block = FeatureBlock::new(1, 2, 2, vec![0.0, 1.0, 0.1, 1.0]).unwrap();
        let e = entry(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]);
        let map = compute_lpcam(&block, &e, LpcamMode::Full).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn lpcam_output_in_unit_interval(seed in any::<u64>(), k1 in 1usize..4, k2 in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = random_block(&mut rng, 3, 3, 4);
            let e = entry(
                (0..k1).map(|_| random_vec(&mut rng, 4)).collect(),
                (0..k2).map(|_| random_vec(&mut rng, 4)).collect(),
            );
            let map = compute_lpcam(&block, &e, LpcamMode::Full).unwrap();
            prop_assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let (fg, bg) = aggregate_fg_bg(&block, &e).unwrap();
            let any_positive = fg.values.iter().zip(&bg.values).any(|(f, b)| f - b > 0.0);
            if any_positive {
                prop_assert_eq!(map.max(), 1.0);
            }
        }

        #[test]
        fn prototype_order_does_not_matter(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = random_block(&mut rng, 3, 3, 4);
            let fg: Vec<Vec<f32>> = (0..4).map(|_| random_vec(&mut rng, 4)).collect();
            let mut rev = fg.clone();
            rev.reverse();
            let (a, _) = aggregate_fg_bg(&block, &entry(fg, vec![])).unwrap();
            let (b, _) = aggregate_fg_bg(&block, &entry(rev, vec![])).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn prototype_scale_does_not_matter(seed in any::<u64>(), scale in 0.001f32..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let block = random_block(&mut rng, 3, 3, 4);
            let p = random_vec(&mut rng, 4);
            let scaled: Vec<f32> = p.iter().map(|v| v * scale).collect();
            let a = similarity_map(&block, &p).unwrap();
            let b = similarity_map(&block, &scaled).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
