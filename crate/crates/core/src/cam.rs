//! Conventional class activation maps and CAM-driven feature splitting.

use crate::error::{Error, Result};
use crate::types::{dot, ActivationMap, ClassifierWeights, FeatureBlock, LocalFeatures, RawMap};

/// Projects every local feature onto `w`.
pub fn raw_cam(block: &FeatureBlock, w: &[f32]) -> Result<RawMap> {
    if w.len() != block.channels() {
        return Err(Error::Dimension(format!(
            "weight vector has length {} but the block has {} channels",
            w.len(),
            block.channels()
        )));
    }
    let values = block.locals().map(|f| dot(w, f)).collect();
    RawMap::new(block.height(), block.width(), values)
}

/// ReLU followed by division by the maximum.
///
/// A map with no positive entry normalizes to all zeros.
pub fn normalize_map(raw: &RawMap) -> Result<Vec<f32>> {
    if let Some(i) = raw.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw map at flat index {i}")));
    }
    let max = raw.values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(vec![0.0; raw.values.len()]);
    }
    Ok(raw
        .values
        .iter()
        .map(|&v| (v.max(0.0) / max) as f32)
        .collect())
}

pub fn normalize_to_activation(raw: &RawMap, class_id: usize) -> Result<ActivationMap> {
    let values = normalize_map(raw)?;
    ActivationMap::new(class_id, raw.height, raw.width, values)
}

pub fn compute_cam(
    block: &FeatureBlock,
    weights: &ClassifierWeights,
    class_id: usize,
) -> Result<ActivationMap> {
    let raw = raw_cam(block, weights.row(class_id)?)?;
    normalize_to_activation(&raw, class_id)
}

/// Local features of one block partitioned by a CAM threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FgBgSplit {
    pub foreground: LocalFeatures,
    pub background: LocalFeatures,
    pub tau: f64,
}

/// Positions with `cam >= tau` go to the foreground, the rest to the background.
pub fn split_by_cam(block: &FeatureBlock, cam: &ActivationMap, tau: f64) -> Result<FgBgSplit> {
    if cam.height() != block.height() || cam.width() != block.width() {
        return Err(Error::Dimension(format!(
            "cam is {}x{} but the block is {}x{}",
            cam.height(),
            cam.width(),
            block.height(),
            block.width()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("tau must be in (0, 1), got {tau}")));
    }
    let mut foreground = LocalFeatures::new(block.channels());
    let mut background = LocalFeatures::new(block.channels());
    for (feature, &score) in block.locals().zip(cam.values()) {
        if score as f64 >= tau {
            foreground.push(feature)?;
        } else {
            background.push(feature)?;
        }
    }
    Ok(FgBgSplit {
        foreground,
        background,
        tau,
    })
}
