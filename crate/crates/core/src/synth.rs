//! Procedural benchmark with planted part and context structure.
//!
//! Every object of class `n` has a small discriminative part (direction
//! `d1_n`), a larger non-discriminative body (`d2_n`) and a strip of
//! co-occurring context below it (`ctx_n`) that the ground truth labels as
//! background. The classifier weights lean heavily on `d1_n`, so a plain CAM
//! covers the part and fades over the body, while the context shares part of
//! its direction with the body and therefore leaks into foreground-only
//! prototype maps.
//!
//! Channel layout: for class `n` the channels `4n..4n+4` hold a shared object
//! axis, the part axis, the body axis and the context axis; the next two
//! channels are generic scene axes; the rest carry only noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest, ManifestHeader};
use crate::error::{Error, Result};
use crate::types::{ClassifierWeights, FeatureBlock, LabelRaster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub num_images: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Ground-truth masks are this many times larger than the feature grid.
    pub gt_scale: usize,
    /// Chance that an image holds a second object of another class.
    pub second_object_prob: f64,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise: f64,
    pub part_weight: f32,
    pub body_weight: f32,
    pub shared_weight: f32,
    /// Weight of the body axis inside the context direction.
    pub context_overlap: f32,
    /// Height in cells of the context strip under each object.
    pub context_rows: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            num_images: 20,
            num_classes: 3,
            channels: 32,
            height: 16,
            width: 16,
            gt_scale: 2,
            second_object_prob: 0.35,
            noise: 0.08,
            part_weight: 6.0,
            body_weight: 1.5,
            shared_weight: 1.0,
            context_overlap: 0.35,
            context_rows: 4,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.num_images == 0 || self.num_classes == 0 {
            return bad("a scenario needs at least one image and one class".into());
        }
        if self.num_classes > crate::dataset::MAX_CLASSES {
            return bad(format!("at most {} classes fit an 8-bit mask", crate::dataset::MAX_CLASSES));
        }
        if self.channels < 4 * self.num_classes + 2 {
            return bad(format!(
                "{} classes need at least {} channels",
                self.num_classes,
                4 * self.num_classes + 2
            ));
        }
        if self.height < 10 || self.width < 10 {
            return bad("the feature grid must be at least 10x10".into());
        }
        if self.gt_scale == 0 {
            return bad("gt_scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.second_object_prob) {
            return bad("second_object_prob must be in [0, 1]".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number".into());
        }
        Ok(())
    }

    fn shared_axis(&self, class_id: usize) -> usize {
        4 * class_id
    }

    fn scene_axes(&self) -> (usize, usize) {
        (4 * self.num_classes, 4 * self.num_classes + 1)
    }

    /// Unit direction of the discriminative part of `class_id`.
    pub fn part_direction(&self, class_id: usize) -> Vec<f32> {
        self.mix(&[(self.shared_axis(class_id), 0.5), (4 * class_id + 1, 1.0)])
    }

    /// Unit direction of the non-discriminative body of `class_id`.
    pub fn body_direction(&self, class_id: usize) -> Vec<f32> {
        self.mix(&[(self.shared_axis(class_id), 0.5), (4 * class_id + 2, 1.0)])
    }

    /// Unit direction of the context strip that accompanies `class_id`.
    pub fn context_direction(&self, class_id: usize) -> Vec<f32> {
        self.mix(&[(4 * class_id + 3, 1.0), (4 * class_id + 2, self.context_overlap)])
    }

    fn mix(&self, parts: &[(usize, f32)]) -> Vec<f32> {
        let mut v = vec![0.0f32; self.channels];
        for &(c, a) in parts {
            v[c] += a;
        }
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    pub fn weights(&self) -> Result<ClassifierWeights> {
        let rows: Vec<Vec<f32>> = (0..self.num_classes)
            .map(|n| {
                let mut w = vec![0.0f32; self.channels];
                w[self.shared_axis(n)] = self.shared_weight;
                w[4 * n + 1] = self.part_weight;
                w[4 * n + 2] = self.body_weight;
                w
            })
            .collect();
        ClassifierWeights::from_rows(&rows)
    }
}

/// Axis-aligned rectangle in feature-grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    fn grown(&self, margin: usize) -> (usize, usize, usize, usize) {
        (
            self.row.saturating_sub(margin),
            self.col.saturating_sub(margin),
            self.row + self.height + margin,
            self.col + self.width + margin,
        )
    }

    fn overlaps_with_margin(&self, other: &Rect, margin: usize) -> bool {
        let (r0, c0, r1, c1) = self.grown(margin);
        r0 < other.row + other.height && other.row < r1 && c0 < other.col + other.width && other.col < c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub class_id: usize,
    pub part: Rect,
    pub body: Rect,
    pub context: Rect,
}

impl PlantedObject {
    fn footprint(&self) -> Rect {
        let row = self.part.row.min(self.body.row);
        let col = self.part.col.min(self.body.col).min(self.context.col);
        let bottom = self.context.row + self.context.height;
        let right = (self.part.col + self.part.width)
            .max(self.body.col + self.body.width)
            .max(self.context.col + self.context.width);
        Rect {
            row,
            col,
            height: bottom - row,
            width: right - col,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub image_id: String,
    pub objects: Vec<PlantedObject>,
}

/// Generator bookkeeping, written next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub scenario: Scenario,
    pub seed: u64,
    pub images: Vec<SynthImage>,
}

impl SynthMeta {
    /// Ground truth implied by the planted rectangles alone.
    pub fn expected_gt(&self, index: usize) -> Result<LabelRaster> {
        let s = &self.scenario;
        let (h, w) = (s.height * s.gt_scale, s.width * s.gt_scale);
        let mut values = vec![0u8; h * w];
        for obj in &self.images[index].objects {
            for r in 0..h {
                for c in 0..w {
                    let (fr, fc) = (r / s.gt_scale, c / s.gt_scale);
                    if obj.part.contains(fr, fc) || obj.body.contains(fr, fc) {
                        values[r * w + c] = (obj.class_id + 1) as u8;
                    }
                }
            }
        }
        LabelRaster::new(h, w, values)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub weights: ClassifierWeights,
    pub features: Vec<FeatureBlock>,
    pub gt: Vec<LabelRaster>,
    pub meta: SynthMeta,
}

const SYNTH_STREAM: u64 = 0x5359_4e54;

fn place_object(
    rng: &mut ChaCha8Rng,
    s: &Scenario,
    class_id: usize,
    taken: &[Rect],
) -> Option<PlantedObject> {
    for _ in 0..200 {
        let height = rng.random_range(3..=5);
        let width = rng.random_range(6..=8);
        let context_rows = s.context_rows;
        if height + context_rows > s.height || width > s.width {
            return None;
        }
        let row = rng.random_range(0..=s.height - height - context_rows);
        let col = rng.random_range(0..=s.width - width);
        let part_width = (width / 3).max(2);
        let part_on_left = rng.random_bool(0.5);
        let (part_col, body_col) = if part_on_left {
            (col, col + part_width)
        } else {
            (col + width - part_width, col)
        };
        let obj = PlantedObject {
            class_id,
            part: Rect { row, col: part_col, height, width: part_width },
            body: Rect { row, col: body_col, height, width: width - part_width },
            context: Rect { row: row + height, col, height: context_rows, width },
        };
        let fp = obj.footprint();
        if taken.iter().all(|t| !fp.overlaps_with_margin(t, 1)) {
            return Some(obj);
        }
    }
    None
}

/// Generates the dataset in memory. Identical `(scenario, seed)` pairs give
/// identical output.
pub fn synthesize(scenario: &Scenario, seed: u64) -> Result<SynthDataset> {
    scenario.validate()?;
    let s = scenario;
    let mut rng = crate::stream_rng(seed, SYNTH_STREAM);
    let noise = Normal::new(0.0, s.noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let (g1, g2) = s.scene_axes();

    let mut records = Vec::with_capacity(s.num_images);
    let mut features = Vec::with_capacity(s.num_images);
    let mut gts = Vec::with_capacity(s.num_images);
    let mut images = Vec::with_capacity(s.num_images);

    for i in 0..s.num_images {
        let image_id = format!("img_{i:03}");
        let primary = i % s.num_classes;
        let mut objects = Vec::new();
        if let Some(o) = place_object(&mut rng, s, primary, &[]) {
            objects.push(o);
        }
        if s.num_classes > 1 && rng.random_bool(s.second_object_prob) {
            let other = (primary + rng.random_range(1..s.num_classes)) % s.num_classes;
            let taken: Vec<Rect> = objects.iter().map(PlantedObject::footprint).collect();
            if let Some(o) = place_object(&mut rng, s, other, &taken) {
                objects.push(o);
            }
        }
        if objects.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "could not place an object in a {}x{} grid",
                s.height, s.width
            )));
        }

        let theta: f32 = rng.random_range(0.0..std::f32::consts::FRAC_PI_2);
        let mut values = Vec::with_capacity(s.height * s.width * s.channels);
        for r in 0..s.height {
            for c in 0..s.width {
                let mut v: Vec<f32> = (0..s.channels).map(|_| noise.sample(&mut rng) as f32).collect();
                let planted = objects.iter().find_map(|o| {
                    if o.part.contains(r, c) {
                        Some((s.part_direction(o.class_id), 2.5..3.5))
                    } else if o.body.contains(r, c) {
                        Some((s.body_direction(o.class_id), 1.8..4.0))
                    } else if o.context.contains(r, c) {
                        Some((s.context_direction(o.class_id), 1.0..3.0))
                    } else {
                        None
                    }
                });
                match planted {
                    Some((dir, range)) => {
                        let a: f32 = rng.random_range(range);
                        v.iter_mut().zip(&dir).for_each(|(x, d)| *x += a * d);
                    }
                    None => {
                        let a: f32 = rng.random_range(1.5..3.0);
                        v[g1] += a * theta.cos();
                        v[g2] += a * theta.sin();
                    }
                }
                values.extend(v);
            }
        }
        features.push(FeatureBlock::new(s.height, s.width, s.channels, values)?);

        let mut labels: Vec<usize> = objects.iter().map(|o| o.class_id).collect();
        labels.sort_unstable();
        labels.dedup();
        records.push(ImageRecord {
            image_id: image_id.clone(),
            labels,
            feature_path: PathBuf::from("features").join(format!("{image_id}.npy")),
            gt_mask_path: Some(PathBuf::from("gt").join(format!("{image_id}.npy"))),
        });
        images.push(SynthImage { image_id, objects });
    }

    let meta = SynthMeta {
        scenario: s.clone(),
        seed,
        images,
    };
    for i in 0..s.num_images {
        gts.push(meta.expected_gt(i)?);
    }
    let manifest = Manifest {
        header: ManifestHeader {
            num_classes: s.num_classes,
            channels: s.channels,
            class_names: (0..s.num_classes).map(|n| format!("class_{n}")).collect(),
        },
        records,
    };
    Ok(SynthDataset {
        manifest,
        weights: s.weights()?,
        features,
        gt: gts,
        meta,
    })
}

pub const SYNTH_META: &str = "synth_meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.npy";

/// Writes `manifest.json`, `weights.npy`, `features/`, `gt/` and
/// `synth_meta.json` under `dir`. Returns the manifest path.
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((record, block), gt) in data.manifest.records.iter().zip(&data.features).zip(&data.gt) {
        block.write_npy(&dir.join(&record.feature_path))?;
        if let Some(p) = &record.gt_mask_path {
            gt.write_npy(&dir.join(p))?;
        }
    }
    data.weights.write_npy(&dir.join(WEIGHTS_FILE))?;
    let meta_path = dir.join(SYNTH_META);
    let text = serde_json::to_string_pretty(&data.meta).map_err(|e| Error::json(&meta_path, e))?;
    std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    data.manifest.write(&manifest_path)?;
    Ok(manifest_path)
}

pub fn read_meta(dir: &Path) -> Result<SynthMeta> {
    let path = dir.join(SYNTH_META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::dot;

    #[test]
    fn directions_are_unit_and_share_the_intended_overlap() {
        let s = Scenario::default();
        for n in 0..s.num_classes {
            let (p, b, x) = (s.part_direction(n), s.body_direction(n), s.context_direction(n));
            for v in [&p, &b, &x] {
                assert!((dot(v, v) - 1.0).abs() < 1e-6);
            }
            assert!((dot(&p, &b) - 0.2).abs() < 1e-6);
            let overlap = s.context_overlap as f64;
            let expected = overlap / (1.25f64.sqrt() * (1.0 + overlap * overlap).sqrt());
            assert!((dot(&b, &x) - expected).abs() < 1e-6);
            assert!(dot(&p, &x).abs() < 1e-6);
        }
        assert!(dot(&s.part_direction(0), &s.part_direction(1)).abs() < 1e-12);
    }

    #[test]
    fn weights_favour_the_part() {
        let s = Scenario::default();
        let w = s.weights().unwrap();
        let row = w.row(1).unwrap();
        assert!(dot(row, &s.part_direction(1)) > 3.0 * dot(row, &s.body_direction(1)));
        assert_eq!(dot(w.row(0).unwrap(), &s.part_direction(2)), 0.0);
    }

    #[test]
    fn default_dataset_shape() {
        let d = synthesize(&Scenario::default(), 7).unwrap();
        assert_eq!(d.manifest.records.len(), 20);
        assert_eq!(d.manifest.present_classes(), vec![0, 1, 2]);
        for (r, g) in d.manifest.records.iter().zip(&d.gt) {
            assert_eq!((g.height, g.width), (32, 32));
            assert!(!r.labels.is_empty());
        }
    }

    #[test]
    fn same_seed_same_data_and_different_seed_different_data() {
        let a = synthesize(&Scenario::default(), 3).unwrap();
        let b = synthesize(&Scenario::default(), 3).unwrap();
        let c = synthesize(&Scenario::default(), 4).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.meta, b.meta);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn context_is_background_in_the_ground_truth() {
        let d = synthesize(&Scenario::default(), 11).unwrap();
        for (img, gt) in d.meta.images.iter().zip(&d.gt) {
            for o in &img.objects {
                let (r, c) = (o.context.row * 2, o.context.col * 2);
                assert_eq!(gt.values[r * gt.width + c], 0);
                let (r, c) = (o.part.row * 2, o.part.col * 2);
                assert_eq!(gt.values[r * gt.width + c] as usize, o.class_id + 1);
            }
        }
    }

    #[test]
    fn rejects_too_few_channels() {
        let s = Scenario {
            channels: 8,
            ..Scenario::default()
        };
        assert!(synthesize(&s, 0).is_err());
    }
}
