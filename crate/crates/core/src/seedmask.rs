//! Seed masks from per-class activation maps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpcam::ImageMaps;
use crate::types::{LabelRaster, RawMap, SeedMask};

/// Bilinear resize with half-pixel centers (corner alignment off).
/// Source coordinates are clamped to the grid, so the output never leaves
/// the input's value range.
pub fn upsample(map: &RawMap, target_h: usize, target_w: usize) -> Result<RawMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Dimension(format!(
            "target size must be positive, got {target_h}x{target_w}"
        )));
    }
    if map.height == 0 || map.width == 0 {
        return Err(Error::Dimension("cannot resize an empty map".into()));
    }
    if (target_h, target_w) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(target_h, map.height);
    let cols = axis(target_w, map.width);
    let mut values = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, wy) in &rows {
        for &(x0, x1, wx) in &cols {
            let top = map.get(y0, x0) * (1.0 - wx) + map.get(y0, x1) * wx;
            let bottom = map.get(y1, x0) * (1.0 - wx) + map.get(y1, x1) * wx;
            values.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    RawMap::new(target_h, target_w, values)
}

/// Labels each pixel with the strongest present class, or background when
/// no class reaches `bg_threshold`. Class `n` is written as `n + 1`; ties go
/// to the lowest class id.
pub fn assemble_seed(
    image_id: &str,
    maps: &[(usize, RawMap)],
    bg_threshold: f64,
) -> Result<SeedMask> {
    let (_, first) = maps
        .first()
        .ok_or_else(|| Error::InvalidParameter(format!("image '{image_id}' has no class maps")))?;
    if let Some((c, m)) = maps.iter().find(|(_, m)| !m.same_shape(first)) {
        return Err(Error::Dimension(format!(
            "map for class {c} is {}x{}, expected {}x{}",
            m.height, m.width, first.height, first.width
        )));
    }
    if let Some((c, _)) = maps.iter().find(|(c, _)| *c >= crate::dataset::MAX_CLASSES) {
        return Err(Error::InvalidParameter(format!(
            "class id {c} does not fit an 8-bit mask"
        )));
    }
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by_key(|&i| maps[i].0);

    let n = first.values.len();
    let mut labels = vec![0u8; n];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &i in &order {
            let (class_id, map) = &maps[i];
            let v = map.values[p];
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((*class_id, v));
            }
        }
        if let Some((class_id, v)) = best {
            if v >= bg_threshold {
                *label = (class_id + 1) as u8;
            }
        }
    }
    Ok(SeedMask {
        image_id: image_id.to_string(),
        raster: LabelRaster::new(first.height, first.width, labels)?,
    })
}

/// Upsamples an image's maps to its target size and assembles the seed.
pub fn seed_for_image(image: &ImageMaps, bg_threshold: f64) -> Result<SeedMask> {
    let (h, w) = image.target_size;
    let maps = image
        .maps
        .iter()
        .map(|m| Ok((m.class_id(), upsample(&m.to_raw(), h, w)?)))
        .collect::<Result<Vec<_>>>()?;
    assemble_seed(&image.image_id, &maps, bg_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedIndex {
    pub bg_threshold: f64,
    pub masks: Vec<SeedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub image_id: String,
    pub path: PathBuf,
}

pub const SEED_INDEX: &str = "seeds.json";

/// Writes `<image_id>.npy` (and `<image_id>.pgm` when asked) plus `seeds.json`.
pub fn write_seeds(dir: &Path, masks: &[SeedMask], bg_threshold: f64, pgm: bool) -> Result<SeedIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = SeedIndex {
        bg_threshold,
        masks: Vec::with_capacity(masks.len()),
    };
    for mask in masks {
        let rel = PathBuf::from(format!("{}.npy", mask.image_id));
        mask.raster.write_npy(&dir.join(&rel))?;
        if pgm {
            let p = dir.join(format!("{}.pgm", mask.image_id));
            std::fs::write(&p, mask.raster.to_pgm()).map_err(|e| Error::io(&p, e))?;
        }
        index.masks.push(SeedEntry {
            image_id: mask.image_id.clone(),
            path: rel,
        });
    }
    let path = dir.join(SEED_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_seeds(dir: &Path) -> Result<Vec<SeedMask>> {
    let path = dir.join(SEED_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: SeedIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    index
        .masks
        .iter()
        .map(|e| {
            Ok(SeedMask {
                image_id: e.image_id.clone(),
                raster: LabelRaster::read_npy(&dir.join(&e.path))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(h: usize, w: usize, v: Vec<f64>) -> RawMap {
        RawMap::new(h, w, v).unwrap()
    }

    #[test]
    fn constant_map_stays_constant() {
        let out = upsample(&raw(1, 1, vec![0.7]), 5, 3).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn identity_resize_is_exact() {
        let m = raw(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(upsample(&m, 2, 3).unwrap(), m);
    }

    #[test]
    fn two_by_two_to_four_by_four_matches_hand_arithmetic() {
        // a b / c d with half-pixel centers: source coords per axis are
        // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to hi = 1)
        let (a, b, c, d) = (0.0, 1.0, 2.0, 4.0);
        let m = raw(2, 2, vec![a, b, c, d]);
        let out = upsample(&m, 4, 4).unwrap();
        let weights = [0.0, 0.25, 0.75, 1.0];
        for (i, &wy) in weights.iter().enumerate() {
            for (j, &wx) in weights.iter().enumerate() {
                let top = a * (1.0 - wx) + b * wx;
                let bottom = c * (1.0 - wx) + d * wx;
                let expected = top * (1.0 - wy) + bottom * wy;
                assert!((out.get(i, j) - expected).abs() < 1e-6, "({i},{j})");
            }
        }
        assert!((out.get(1, 1) - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_target() {
        assert!(upsample(&raw(1, 1, vec![0.0]), 0, 2).is_err());
    }

    #[test]
    fn single_class_thresholding() {
        let s = assemble_seed("a", &[(2, raw(2, 2, vec![0.9; 4]))], 0.3).unwrap();
        assert!(s.raster.values.iter().all(|&v| v == 3));
        let s = assemble_seed("a", &[(2, raw(2, 2, vec![0.1; 4]))], 0.3).unwrap();
        assert!(s.raster.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_between_classes_and_ties_to_lowest() {
        let s = assemble_seed(
            "a",
            &[(4, raw(1, 2, vec![0.6, 0.5])), (1, raw(1, 2, vec![0.4, 0.5]))],
            0.3,
        )
        .unwrap();
        assert_eq!(s.raster.values, vec![5, 2]);
    }

    #[test]
    fn rejects_mismatched_or_missing_maps() {
        assert!(assemble_seed("a", &[], 0.3).is_err());
        assert!(assemble_seed(
            "a",
            &[(0, raw(1, 2, vec![0.0; 2])), (1, raw(2, 1, vec![0.0; 2]))],
            0.3
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn upsample_stays_in_range(
            values in proptest::collection::vec(0.0f64..1.0, 6),
            th in 1usize..12,
            tw in 1usize..12,
        ) {
            let m = raw(2, 3, values.clone());
            let out = upsample(&m, th, tw).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn assembly_labels_threshold_and_order(
            a in proptest::collection::vec(0.0f64..1.0, 9),
            b in proptest::collection::vec(0.0f64..1.0, 9),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..0.5,
        ) {
            let maps = vec![(0, raw(3, 3, a.clone())), (3, raw(3, 3, b.clone()))];
            let rev: Vec<_> = maps.iter().rev().cloned().collect();
            let s = assemble_seed("x", &maps, t1).unwrap();
            prop_assert_eq!(&s, &assemble_seed("x", &rev, t1).unwrap());
            prop_assert!(s.raster.values.iter().all(|v| [0, 1, 4].contains(v)));
            let t2 = t1 + dt;
            let s2 = assemble_seed("x", &maps, t2).unwrap();
            let bg = |m: &SeedMask| m.raster.values.iter().filter(|&&v| v == 0).count();
            prop_assert!(bg(&s2) >= bg(&s));
        }
    }
}
