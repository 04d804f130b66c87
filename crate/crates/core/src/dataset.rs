//! Dataset manifests and validation.
//!
//! A manifest is a JSON document with a header fixing the class count and
//! channel width, followed by one record per image. Relative file paths are
//! resolved against the directory containing the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::types::{ClassifierWeights, FeatureBlock, LabelRaster, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub num_classes: usize,
    pub channels: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Indices of the classes present in the image.
    pub labels: Vec<usize>,
    pub feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
}

impl ImageRecord {
    /// Multi-hot label vector of length `num_classes`.
    pub fn multi_hot(&self, num_classes: usize) -> Vec<u8> {
        let mut y = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                y[l] = 1;
            }
        }
        y
    }

    pub fn has_label(&self, class_id: usize) -> bool {
        self.labels.contains(&class_id)
    }

    /// Present classes, sorted and deduplicated.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn images_of_class(&self, class_id: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.has_label(class_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.records.iter().flat_map(|r| r.labels.clone()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// A manifest bound to the directory its relative paths resolve against.
///
/// Feature blocks can optionally be held in memory for repeated passes.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: Manifest,
    root: PathBuf,
    preloaded: Option<Arc<Vec<FeatureBlock>>>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self::new(manifest, root))
    }

    pub fn new(manifest: Manifest, root: PathBuf) -> Self {
        Self {
            manifest,
            root,
            preloaded: None,
        }
    }

    /// Loads every feature block into memory.
    pub fn preload(mut self) -> Result<Self> {
        let blocks = (0..self.manifest.records.len())
            .map(|i| self.read_features(i))
            .collect::<Result<Vec<_>>>()?;
        self.preloaded = Some(Arc::new(blocks));
        Ok(self)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.manifest.records
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.header.num_classes
    }

    pub fn channels(&self) -> usize {
        self.manifest.header.channels
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    fn read_features(&self, index: usize) -> Result<FeatureBlock> {
        let record = &self.manifest.records[index];
        let block = FeatureBlock::read_npy(&self.resolve(&record.feature_path))?;
        if block.channels() != self.channels() {
            return Err(Error::ChannelMismatch {
                image_id: record.image_id.clone(),
                expected: self.channels(),
                found: block.channels(),
            });
        }
        Ok(block)
    }

    /// Feature block of the record at `index`.
    pub fn features(&self, index: usize) -> Result<std::borrow::Cow<'_, FeatureBlock>> {
        match &self.preloaded {
            Some(blocks) => Ok(std::borrow::Cow::Borrowed(&blocks[index])),
            None => self.read_features(index).map(std::borrow::Cow::Owned),
        }
    }

    pub fn gt_mask(&self, index: usize) -> Result<Option<LabelRaster>> {
        match &self.manifest.records[index].gt_mask_path {
            Some(p) => LabelRaster::read_npy(&self.resolve(p)).map(Some),
            None => Ok(None),
        }
    }

    /// Image-resolution (H, W) for the record: the ground-truth shape if
    /// there is one, else the feature resolution.
    pub fn target_size(&self, index: usize) -> Result<(usize, usize)> {
        let record = &self.manifest.records[index];
        if let Some(p) = &record.gt_mask_path {
            let header = npy::read_header(&self.resolve(p))?;
            if header.shape.len() == 2 {
                return Ok((header.shape[0], header.shape[1]));
            }
            return Err(Error::Dimension(format!(
                "{}: ground-truth mask must be 2-d",
                p.display()
            )));
        }
        let header = npy::read_header(&self.resolve(&record.feature_path))?;
        if header.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "{}: feature block must be 3-d",
                record.feature_path.display()
            )));
        }
        Ok((header.shape[0], header.shape[1]))
    }

    /// Checks the weight matrix against the manifest header.
    pub fn check_weights(&self, weights: &ClassifierWeights) -> Result<()> {
        if weights.num_classes() != self.num_classes() || weights.channels() != self.channels() {
            return Err(Error::Dimension(format!(
                "weights are {}x{} but the dataset declares N={} C={}",
                weights.num_classes(),
                weights.channels(),
                self.num_classes(),
                self.channels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordStatus {
    pub image_id: String,
    pub errors: Vec<String>,
}

impl RecordStatus {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub num_classes: usize,
    pub channels: usize,
    pub records: Vec<RecordStatus>,
}

impl ValidationReport {
    pub fn ok_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_ok()).count()
    }

    pub fn error_count(&self) -> usize {
        self.records.len() - self.ok_count()
    }
}

/// The largest class count that fits an 8-bit seed mask with 0 = background
/// and 255 reserved for "ignore".
pub const MAX_CLASSES: usize = 254;

fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\'])
        && !id.contains('\0')
}

/// Validates every record of a manifest.
///
/// Missing files and bad labels are reported per record. A channel-count
/// mismatch or an unusable header aborts with an error.
pub fn validate_dataset(manifest_path: &Path) -> Result<ValidationReport> {
    let dataset = Dataset::open(manifest_path)?;
    validate(&dataset)
}

pub fn validate(dataset: &Dataset) -> Result<ValidationReport> {
    let header = &dataset.manifest().header;
    if header.num_classes == 0 || header.num_classes > MAX_CLASSES {
        return Err(Error::Dataset(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {}",
            header.num_classes
        )));
    }
    if header.channels == 0 {
        return Err(Error::Dataset("channels must be positive".into()));
    }
    if !header.class_names.is_empty() && header.class_names.len() != header.num_classes {
        return Err(Error::Dataset(format!(
            "{} class names given for {} classes",
            header.class_names.len(),
            header.num_classes
        )));
    }

    let mut seen = HashSet::new();
    let mut statuses = Vec::with_capacity(dataset.records().len());
    for (index, record) in dataset.records().iter().enumerate() {
        let mut errors = Vec::new();
        if !is_safe_id(&record.image_id) {
            errors.push(format!("image_id '{}' is not usable as a file name", record.image_id));
        }
        if !seen.insert(record.image_id.clone()) {
            errors.push(format!("duplicate image_id '{}'", record.image_id));
        }
        if record.labels.is_empty() {
            errors.push("record has no labels".into());
        }
        for &l in &record.labels {
            if l >= header.num_classes {
                errors.push(format!(
                    "label {l} out of range for {} classes",
                    header.num_classes
                ));
            }
        }

        let feature_path = dataset.resolve(&record.feature_path);
        let mut spatial = None;
        if !feature_path.is_file() {
            errors.push(format!("file not found: {}", feature_path.display()));
        } else {
            match dataset.features(index) {
                Ok(block) => spatial = Some((block.height(), block.width())),
                Err(e @ Error::ChannelMismatch { .. }) => return Err(e),
                Err(e) => errors.push(format!("{}: {e}", feature_path.display())),
            }
        }

        if let Some(gt) = &record.gt_mask_path {
            let gt_path = dataset.resolve(gt);
            if !gt_path.is_file() {
                errors.push(format!("file not found: {}", gt_path.display()));
            } else {
                match LabelRaster::read_npy(&gt_path) {
                    Ok(mask) => {
                        let bad = mask
                            .values
                            .iter()
                            .find(|&&v| v != IGNORE_LABEL && v as usize > header.num_classes);
                        if let Some(v) = bad {
                            errors.push(format!(
                                "{}: label value {v} exceeds num_classes",
                                gt_path.display()
                            ));
                        }
                        if let Some((h, w)) = spatial {
                            if mask.height < h || mask.width < w {
                                errors.push(format!(
                                    "{}: mask {}x{} is smaller than the feature grid {h}x{w}",
                                    gt_path.display(),
                                    mask.height,
                                    mask.width
                                ));
                            }
                        }
                    }
                    Err(e) => errors.push(format!("{}: {e}", gt_path.display())),
                }
            }
        }

        statuses.push(RecordStatus {
            image_id: record.image_id.clone(),
            errors,
        });
    }

    Ok(ValidationReport {
        num_classes: header.num_classes,
        channels: header.channels,
        records: statuses,
    })
}
