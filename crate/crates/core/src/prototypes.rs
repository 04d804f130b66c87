//! Scoring cluster centers with the classifier and selecting class and
//! context prototypes.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clustering::Metric;
use crate::error::{Error, Result};
use crate::npy;
use crate::types::{dot, norm, ClassifierWeights};

/// Softmax over all classes of `center . w_j`.
pub fn class_probabilities(center: &[f32], weights: &ClassifierWeights) -> Result<Vec<f64>> {
    if center.len() != weights.channels() {
        return Err(Error::Dimension(format!(
            "center has length {} but weights have {} channels",
            center.len(),
            weights.channels()
        )));
    }
    let logits: Vec<f64> = weights.rows().map(|w| dot(center, w)).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("center logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Classifier confidence that `center` belongs to `class_id`.
pub fn score_center(center: &[f32], weights: &ClassifierWeights, class_id: usize) -> Result<f64> {
    weights.row(class_id)?;
    Ok(class_probabilities(center, weights)?[class_id])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeScore {
    pub center_index: usize,
    pub score: f64,
    pub selected: bool,
}

/// Selected prototypes of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub class_id: usize,
    /// Class prototypes; never empty.
    pub fg: Vec<Vec<f32>>,
    /// Context prototypes; may be empty.
    pub bg: Vec<Vec<f32>>,
    pub fg_scores: Vec<PrototypeScore>,
    pub bg_scores: Vec<PrototypeScore>,
    /// True when no foreground center cleared `mu_f` and the top one was kept.
    pub fallback: bool,
}

impl ClassPrototypes {
    pub fn k1(&self) -> usize {
        self.fg.len()
    }

    pub fn k2(&self) -> usize {
        self.bg.len()
    }
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be in (0, 1), got {v}")))
    }
}

fn check_prototype(v: &[f32]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("prototype vector".into()));
    }
    if norm(v) == 0.0 {
        return Err(Error::InvalidParameter("prototype vector has zero norm".into()));
    }
    Ok(())
}

/// Keeps foreground centers scoring above `mu_f` and background centers
/// scoring below `mu_b`. When no foreground center qualifies the single
/// highest-scoring one is kept (lowest index on ties).
pub fn select_prototypes(
    fg_centers: &[Vec<f32>],
    bg_centers: &[Vec<f32>],
    weights: &ClassifierWeights,
    class_id: usize,
    mu_f: f64,
    mu_b: f64,
) -> Result<ClassPrototypes> {
    check_threshold("mu_f", mu_f)?;
    check_threshold("mu_b", mu_b)?;
    if fg_centers.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "class {class_id} has no foreground centers to select from"
        )));
    }
    for c in fg_centers.iter().chain(bg_centers) {
        check_prototype(c)?;
    }

    let mut fg_scores = fg_centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let score = score_center(c, weights, class_id)?;
            Ok(PrototypeScore {
                center_index: i,
                score,
                selected: score > mu_f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bg_scores = bg_centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let score = score_center(c, weights, class_id)?;
            Ok(PrototypeScore {
                center_index: i,
                score,
                selected: score < mu_b,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let fallback = !fg_scores.iter().any(|s| s.selected);
    if fallback {
        let mut top = 0;
        for (i, s) in fg_scores.iter().enumerate() {
            if s.score > fg_scores[top].score {
                top = i;
            }
        }
        warn!(
            "class {class_id}: no foreground center scored above {mu_f}; keeping center {top} (score {:.4})",
            fg_scores[top].score
        );
        fg_scores[top].selected = true;
    }

    let pick = |centers: &[Vec<f32>], scores: &[PrototypeScore]| {
        scores
            .iter()
            .filter(|s| s.selected)
            .map(|s| centers[s.center_index].clone())
            .collect::<Vec<_>>()
    };
    Ok(ClassPrototypes {
        class_id,
        fg: pick(fg_centers, &fg_scores),
        bg: pick(bg_centers, &bg_scores),
        fg_scores,
        bg_scores,
        fallback,
    })
}

/// Hyperparameters a bank was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub k: usize,
    pub tau: f64,
    pub mu_f: f64,
    pub mu_b: f64,
    pub sample_cap: Option<usize>,
    pub metric: Metric,
    pub seed: u64,
    pub channels: usize,
    pub num_classes: usize,
}

/// Class and context prototypes for every clustered class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub meta: BankMeta,
    pub classes: BTreeMap<usize, ClassPrototypes>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    k1: usize,
    k2: usize,
    fg_file: String,
    bg_file: String,
    fg_scores: Vec<PrototypeScore>,
    bg_scores: Vec<PrototypeScore>,
    fallback: bool,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    config: BankMeta,
    classes: BTreeMap<String, IndexEntry>,
}

pub const BANK_INDEX: &str = "bank.json";

impl PrototypeBank {
    pub fn get(&self, class_id: usize) -> Option<&ClassPrototypes> {
        self.classes.get(&class_id)
    }

    /// Classes in `wanted` without an entry.
    pub fn missing(&self, wanted: &[usize]) -> Vec<usize> {
        wanted
            .iter()
            .copied()
            .filter(|c| !self.classes.contains_key(c))
            .collect()
    }

    /// Writes `class_<n>_fg.npy`, `class_<n>_bg.npy` and `bank.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = self.meta.channels;
        let mut classes = BTreeMap::new();
        for (&id, entry) in &self.classes {
            let fg_file = format!("class_{id}_fg.npy");
            let bg_file = format!("class_{id}_bg.npy");
            npy::write_f32(&dir.join(&fg_file), &[entry.k1(), c], &entry.fg.concat())?;
            npy::write_f32(&dir.join(&bg_file), &[entry.k2(), c], &entry.bg.concat())?;
            classes.insert(
                id.to_string(),
                IndexEntry {
                    k1: entry.k1(),
                    k2: entry.k2(),
                    fg_file,
                    bg_file,
                    fg_scores: entry.fg_scores.clone(),
                    bg_scores: entry.bg_scores.clone(),
                    fallback: entry.fallback,
                },
            );
        }
        let index = BankIndex {
            config: self.meta.clone(),
            classes,
        };
        let path = dir.join(BANK_INDEX);
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_INDEX);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BankIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let c = index.config.channels;
        let read_rows = |file: &str, expected: usize| -> Result<Vec<Vec<f32>>> {
            let (shape, data) = npy::read_f32(&dir.join(file))?;
            if shape != [expected, c] {
                return Err(Error::Dimension(format!(
                    "{file}: expected shape ({expected}, {c}), found {shape:?}"
                )));
            }
            let rows: Vec<Vec<f32>> = data.chunks_exact(c.max(1)).map(<[f32]>::to_vec).collect();
            for r in &rows {
                check_prototype(r)?;
            }
            Ok(rows)
        };
        let mut classes = BTreeMap::new();
        for (key, entry) in index.classes {
            let class_id: usize = key
                .parse()
                .map_err(|_| Error::Dataset(format!("bank index has bad class key '{key}'")))?;
            if entry.k1 == 0 {
                return Err(Error::Dataset(format!("class {class_id} has no class prototypes")));
            }
            classes.insert(
                class_id,
                ClassPrototypes {
                    class_id,
                    fg: read_rows(&entry.fg_file, entry.k1)?,
                    bg: read_rows(&entry.bg_file, entry.k2)?,
                    fg_scores: entry.fg_scores,
                    bg_scores: entry.bg_scores,
                    fallback: entry.fallback,
                },
            );
        }
        Ok(Self {
            meta: index.config,
            classes,
        })
    }
}
