//! Shared domain types.
//!
//! Feature blocks use a height x width x channels layout, row-major by
//! (row, column, channel), so every local feature is a contiguous slice.
//! All types are immutable once constructed and validated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::npy;

/// Dot product of two `f32` slices accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn ensure_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
        None => Ok(()),
    }
}

/// One image's unpooled feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureBlock {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "feature block dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "feature block {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        ensure_finite(&values, "feature block")?;
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The local feature at spatial position (row, col).
    pub fn local(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Local features in row-major spatial order.
    pub fn locals(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.channels)
    }

    pub fn read_npy(path: &Path) -> Result<Self> {
        let (shape, data) = npy::read_f32(path)?;
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "{}: feature block must be 3-d (H, W, C), got shape {shape:?}",
                path.display()
            )));
        }
        Self::new(shape[0], shape[1], shape[2], data)
    }

    pub fn write_npy(&self, path: &Path) -> Result<()> {
        npy::write_f32(
            path,
            &[self.height, self.width, self.channels],
            &self.values,
        )
    }
}

/// The classifier's fully-connected weight matrix, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    num_classes: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ClassifierWeights {
    pub fn new(num_classes: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if num_classes == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "weights must be non-empty, got {num_classes}x{channels}"
            )));
        }
        if values.len() != num_classes * channels {
            return Err(Error::Dimension(format!(
                "weights {num_classes}x{channels} need {} values, got {}",
                num_classes * channels,
                values.len()
            )));
        }
        ensure_finite(&values, "classifier weights")?;
        Ok(Self {
            num_classes,
            channels,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Dimension("weight rows have differing lengths".into()));
        }
        Self::new(rows.len(), channels, rows.concat())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, class_id: usize) -> Result<&[f32]> {
        if class_id >= self.num_classes {
            return Err(Error::InvalidParameter(format!(
                "class id {class_id} out of range for {} classes",
                self.num_classes
            )));
        }
        let start = class_id * self.channels;
        Ok(&self.values[start..start + self.channels])
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.channels)
    }

    pub fn read_npy(path: &Path) -> Result<Self> {
        let (shape, data) = npy::read_f32(path)?;
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{}: weights must be 2-d (N, C), got shape {shape:?}",
                path.display()
            )));
        }
        Self::new(shape[0], shape[1], data)
    }

    pub fn write_npy(&self, path: &Path) -> Result<()> {
        npy::write_f32(path, &[self.num_classes, self.channels], &self.values)
    }
}

/// A dense real-valued H x W matrix, used for un-normalized maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RawMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &RawMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A max-normalized heatmap for one class.
///
/// Values are in `[0, 1]`; the constructor rejects anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    class_id: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ActivationMap {
    pub fn new(class_id: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "activation map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "activation value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            class_id,
            height,
            width,
            values,
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_raw(&self) -> RawMap {
        RawMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// An integer label image. Ground truth uses 255 as "ignore".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

pub const IGNORE_LABEL: u8 = 255;

impl LabelRaster {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "label raster {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn read_npy(path: &Path) -> Result<Self> {
        let (shape, data) = npy::read_u8(path)?;
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{}: label raster must be 2-d, got shape {shape:?}",
                path.display()
            )));
        }
        Self::new(shape[0], shape[1], data)
    }

    pub fn write_npy(&self, path: &Path) -> Result<()> {
        npy::write_u8(path, &[self.height, self.width], &self.values)
    }

    /// Binary PGM (P5) rendering, with labels stretched for visibility.
    pub fn to_pgm(&self) -> Vec<u8> {
        let top = self
            .values
            .iter()
            .copied()
            .filter(|&v| v != IGNORE_LABEL)
            .max()
            .unwrap_or(0)
            .max(1) as u32;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if v == IGNORE_LABEL {
                255
            } else {
                (v as u32 * 200 / top) as u8
            }
        }));
        out
    }
}

/// Seed mask for one image: 0 is background, `n + 1` is class `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedMask {
    pub image_id: String,
    pub raster: LabelRaster,
}

/// A bag of C-dimensional local features stored contiguously.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalFeatures {
    dim: usize,
    data: Vec<f32>,
}

impl LocalFeatures {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut out = Self::new(dim);
        for r in rows {
            out.push(r.as_ref())?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension(format!(
                "feature of length {} pushed into bag of dimension {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &LocalFeatures) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if other.dim != self.dim {
            return Err(Error::Dimension(format!(
                "cannot merge bags of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}
