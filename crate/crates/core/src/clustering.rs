//! Per-class local feature collection and K-Means.
//!
//! Two metrics are supported. `Cosine` is spherical K-Means: inputs are
//! unit-normalized, centers are the renormalized member means and the
//! objective is the summed cosine distance `1 - cos(x, c)`. `Euclidean` is
//! the standard Lloyd iteration on squared distances over raw features.
//! Both seed with k-means++ under the active metric and run several
//! restarts, keeping the lowest objective.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, split_by_cam};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stream_rng;
use crate::types::{ClassifierWeights, LocalFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidParameter(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub k: usize,
    pub metric: Metric,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Maximum number of images drawn per class; `None` uses them all.
    pub sample_cap: Option<usize>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 12,
            metric: Metric::Cosine,
            max_iters: 100,
            tol: 1e-5,
            restarts: 3,
            seed: 0,
            sample_cap: None,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidParameter(format!("tol must be >= 0, got {}", self.tol)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if self.sample_cap == Some(0) {
            return Err(Error::InvalidParameter("sample_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub metric: Metric,
    /// K centers, each of the input dimension. Unit norm in cosine mode.
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Mean Euclidean norm of the raw features assigned to each center.
    pub member_norms: Vec<f64>,
    pub objective: f64,
    pub iterations_run: usize,
    /// Zero-norm inputs dropped in cosine mode.
    pub excluded: usize,
    pub best_restart: usize,
    /// Objective after every assignment step, one trace per restart.
    pub traces: Vec<Vec<f64>>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Centers as `f32` prototype vectors.
    ///
    /// Cosine centers are unit directions; they are rescaled to the mean norm
    /// of their members so classifier scores see the magnitude of a typical
    /// member. Cosine similarity to the prototype is unaffected.
    pub fn prototype_vectors(&self) -> Vec<Vec<f32>> {
        self.centers
            .iter()
            .zip(&self.member_norms)
            .map(|(c, &scale)| {
                let s = match self.metric {
                    Metric::Cosine if scale > 0.0 => scale,
                    _ => 1.0,
                };
                c.iter().map(|&v| (v * s) as f32).collect()
            })
            .collect()
    }
}

/// Prepared inputs: rows in `f64`, unit-normalized for the cosine metric.
struct Points {
    dim: usize,
    data: Vec<f64>,
    raw_norms: Vec<f64>,
}

impl Points {
    fn len(&self) -> usize {
        self.raw_norms.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn distance(metric: Metric, x: &[f64], c: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
        Metric::Cosine => {
            let d: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
            (1.0 - d).max(0.0)
        }
    }
}

fn prepare(features: &LocalFeatures, metric: Metric) -> Result<(Points, usize)> {
    let dim = features.dim();
    let mut data = Vec::with_capacity(features.len() * dim);
    let mut raw_norms = Vec::with_capacity(features.len());
    let mut excluded = 0;
    for (i, row) in features.rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("clustering input row {i}")));
        }
        let n = crate::types::norm(row);
        match metric {
            Metric::Cosine => {
                if n == 0.0 {
                    excluded += 1;
                    continue;
                }
                data.extend(row.iter().map(|&v| v as f64 / n));
            }
            Metric::Euclidean => data.extend(row.iter().map(|&v| v as f64)),
        }
        raw_norms.push(n);
    }
    if excluded > 0 {
        warn!("excluded {excluded} zero-norm features from cosine clustering");
    }
    Ok((Points { dim, data, raw_norms }, excluded))
}

/// Nearest center for every point, ties to the lowest index.
fn assign(points: &Points, centers: &[Vec<f64>], metric: Metric) -> Vec<(usize, f64)> {
    (0..points.len())
        .into_par_iter()
        .with_min_len(512)
        .map(|i| {
            let x = points.row(i);
            let mut best = (0, f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let d = distance(metric, x, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect()
}

fn seed_centers(points: &Points, k: usize, metric: Metric, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| distance(metric, points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen center
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(distance(metric, points.row(i), points.row(next)));
        }
    }
    chosen.into_iter().map(|i| points.row(i).to_vec()).collect()
}

/// Recomputes centers from an assignment. Returns `None` for clusters that
/// are empty or whose members sum to zero in cosine mode.
fn update_centers(
    points: &Points,
    assignment: &[(usize, f64)],
    k: usize,
    metric: Metric,
) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0f64; points.dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &(c, _)) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(sum, count)| {
            if count == 0 {
                return None;
            }
            match metric {
                Metric::Euclidean => Some(sum.iter().map(|s| s / count as f64).collect()),
                Metric::Cosine => {
                    let n = sum.iter().map(|s| s * s).sum::<f64>().sqrt();
                    (n > 0.0).then(|| sum.iter().map(|s| s / n).collect())
                }
            }
        })
        .collect()
}

/// Fills missing centers with the points farthest from their current center.
fn repair_empty(
    points: &Points,
    assignment: &[(usize, f64)],
    updated: Vec<Option<Vec<f64>>>,
    metric: Metric,
) -> Vec<Vec<f64>> {
    if updated.iter().all(Option::is_some) {
        return updated.into_iter().map(Option::unwrap).collect();
    }
    let mut taken = vec![false; points.len()];
    let mut far: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &(c, _))| match &updated[c] {
            Some(center) => distance(metric, points.row(i), center),
            None => f64::INFINITY,
        })
        .collect();
    updated
        .into_iter()
        .map(|slot| {
            slot.unwrap_or_else(|| {
                let mut best = None;
                for (i, &d) in far.iter().enumerate() {
                    if !taken[i] && best.is_none_or(|(_, bd)| d > bd) {
                        best = Some((i, d));
                    }
                }
                let i = best.map(|(i, _)| i).unwrap_or(0);
                taken[i] = true;
                far[i] = 0.0;
                points.row(i).to_vec()
            })
        })
        .collect()
}

struct Run {
    centers: Vec<Vec<f64>>,
    assignment: Vec<(usize, f64)>,
    objective: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn objective_of(assignment: &[(usize, f64)]) -> f64 {
    assignment.iter().map(|&(_, d)| d).sum()
}

fn lloyd(points: &Points, config: &ClusteringConfig, restart: usize) -> Run {
    let mut rng = stream_rng(config.seed, 0x6b6d_0000 + restart as u64);
    let mut centers = seed_centers(points, config.k, config.metric, &mut rng);
    let mut assignment = assign(points, &centers, config.metric);
    let mut objective = objective_of(&assignment);
    let mut trace = vec![objective];
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let updated = update_centers(points, &assignment, config.k, config.metric);
        let next_centers = repair_empty(points, &assignment, updated, config.metric);
        let next = assign(points, &next_centers, config.metric);
        let next_objective = objective_of(&next);
        debug_assert!(
            next_objective <= objective + 1e-9 * (1.0 + objective),
            "objective increased from {objective} to {next_objective}"
        );
        trace.push(next_objective);
        let unchanged = next.iter().zip(&assignment).all(|(a, b)| a.0 == b.0);
        let improvement = objective - next_objective;
        centers = next_centers;
        assignment = next;
        objective = next_objective;
        if unchanged || improvement < config.tol {
            break;
        }
    }

    Run {
        centers,
        assignment,
        objective,
        iterations,
        trace,
    }
}

/// Clusters `features` into `config.k` centers.
pub fn kmeans(features: &LocalFeatures, config: &ClusteringConfig) -> Result<ClusterResult> {
    config.validate()?;
    let (points, excluded) = prepare(features, config.metric)?;
    if points.len() < config.k {
        return Err(Error::TooFewFeatures {
            k: config.k,
            n: points.len(),
        });
    }

    let runs: Vec<Run> = (0..config.restarts)
        .into_par_iter()
        .map(|r| lloyd(&points, config, r))
        .collect();

    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.objective < runs[best].objective {
            best = i;
        }
    }
    let traces = runs.iter().map(|r| r.trace.clone()).collect();
    let run = runs.into_iter().nth(best).expect("at least one restart");

    let mut counts = vec![0usize; config.k];
    let mut norm_sums = vec![0.0f64; config.k];
    for (i, &(c, _)) in run.assignment.iter().enumerate() {
        counts[c] += 1;
        norm_sums[c] += points.raw_norms[i];
    }
    let overall = points.raw_norms.iter().sum::<f64>() / points.len() as f64;
    let member_norms = counts
        .iter()
        .zip(&norm_sums)
        .map(|(&n, &s)| if n > 0 { s / n as f64 } else { overall })
        .collect();

    Ok(ClusterResult {
        metric: config.metric,
        centers: run.centers,
        counts,
        member_norms,
        objective: run.objective,
        iterations_run: run.iterations,
        excluded,
        best_restart: best,
        traces,
    })
}

/// Foreground and background local features of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures {
    pub class_id: usize,
    pub foreground: LocalFeatures,
    pub background: LocalFeatures,
    /// Image ids that contributed, in manifest order.
    pub images: Vec<String>,
}

/// Indices of the images used for a class, subsampled without replacement
/// to `sample_cap` and returned in manifest order.
pub fn sample_class_images(
    dataset: &Dataset,
    class_id: usize,
    sample_cap: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    let candidates = dataset.manifest().images_of_class(class_id);
    if candidates.is_empty() {
        return Err(Error::EmptyClass { class_id });
    }
    match sample_cap {
        Some(0) => Err(Error::InvalidParameter("sample_cap must be positive".into())),
        Some(cap) if cap < candidates.len() => {
            let mut rng = stream_rng(seed, 0x5a4d_0000_0000 + class_id as u64);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), cap)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        }
        _ => Ok(candidates),
    }
}

/// Splits every (sampled) image of the class by its CAM and pools the parts.
pub fn collect_class_features(
    dataset: &Dataset,
    weights: &ClassifierWeights,
    class_id: usize,
    tau: f64,
    sample_cap: Option<usize>,
    seed: u64,
) -> Result<ClassFeatures> {
    let indices = sample_class_images(dataset, class_id, sample_cap, seed)?;
    let splits = indices
        .par_iter()
        .map(|&i| {
            let block = dataset.features(i)?;
            let cam = compute_cam(&block, weights, class_id)?;
            split_by_cam(&block, &cam, tau)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut foreground = LocalFeatures::new(weights.channels());
    let mut background = LocalFeatures::new(weights.channels());
    for s in &splits {
        foreground.extend(&s.foreground)?;
        background.extend(&s.background)?;
    }
    Ok(ClassFeatures {
        class_id,
        foreground,
        background,
        images: indices
            .iter()
            .map(|&i| dataset.records()[i].image_id.clone())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRecord, Manifest, ManifestHeader};
    use crate::types::FeatureBlock;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn config(k: usize, metric: Metric) -> ClusteringConfig {
        ClusteringConfig {
            k,
            metric,
            ..Default::default()
        }
    }

    #[test]
    fn single_euclidean_center_is_the_mean() {
        let rows = vec![
            vec![1.0f32, 2.0],
            vec![3.0, -4.0],
            vec![-2.0, 8.0],
            vec![6.0, 0.5],
        ];
        let bag = LocalFeatures::from_rows(2, &rows).unwrap();
        let r = kmeans(&bag, &config(1, Metric::Euclidean)).unwrap();
        assert!((r.centers[0][0] - 2.0).abs() < 1e-12);
        assert!((r.centers[0][1] - 1.625).abs() < 1e-12);
        assert_eq!(r.counts, vec![4]);
    }

    #[test]
    fn antipodal_groups_split_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = [1.0f32, 0.5, -0.25, 2.0];
        let mut rows = Vec::new();
        for sign in [1.0f32, -1.0] {
            for _ in 0..3 {
                let scale = rng.random_range(0.5..3.0f32);
                rows.push(
                    base.iter()
                        .map(|v| sign * scale * (v + rng.random_range(-0.02..0.02)))
                        .collect::<Vec<f32>>(),
                );
            }
        }
        // construction check: within-group cosine above 0.99
        for g in [0..3, 3..6] {
            for i in g.clone() {
                for j in g.clone() {
                    let c = crate::types::dot(&rows[i], &rows[j])
                        / (crate::types::norm(&rows[i]) * crate::types::norm(&rows[j]));
                    assert!(c > 0.99);
                }
            }
        }
        let bag = LocalFeatures::from_rows(4, &rows).unwrap();
        let r = kmeans(&bag, &config(2, Metric::Cosine)).unwrap();
        assert_eq!(r.counts, vec![3, 3]);
        assert!(r.objective < 0.01);
    }

    #[test]
    fn too_few_features_is_an_error() {
        let bag = LocalFeatures::from_rows(2, &[vec![1.0f32, 0.0]]).unwrap();
        assert!(matches!(
            kmeans(&bag, &config(2, Metric::Euclidean)),
            Err(Error::TooFewFeatures { k: 2, n: 1 })
        ));
    }

    #[test]
    fn zero_norm_features_are_excluded_in_cosine_mode() {
        let rows = vec![vec![0.0f32, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let bag = LocalFeatures::from_rows(2, &rows).unwrap();
        let r = kmeans(&bag, &config(2, Metric::Cosine)).unwrap();
        assert_eq!(r.excluded, 2);
        assert_eq!(r.counts.iter().sum::<usize>(), 2);
        // two survivors cannot feed three clusters
        assert!(kmeans(&bag, &config(3, Metric::Cosine)).is_err());
    }

    #[test]
    fn duplicate_points_still_seed_k_centers() {
        let rows = vec![vec![1.0f32, 1.0]; 5];
        let bag = LocalFeatures::from_rows(2, &rows).unwrap();
        let r = kmeans(&bag, &config(3, Metric::Euclidean)).unwrap();
        assert_eq!(r.centers.len(), 3);
        assert_eq!(r.counts.iter().sum::<usize>(), 5);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn empty_cluster_is_reseeded_at_farthest_point() {
        // center 1 starts far from everything and loses all members
        let points = Points {
            dim: 1,
            data: vec![0.0, 1.0, 10.0],
            raw_norms: vec![0.0, 1.0, 10.0],
        };
        let centers = vec![vec![3.0], vec![100.0]];
        let a = assign(&points, &centers, Metric::Euclidean);
        assert!(a.iter().all(|&(c, _)| c == 0));
        let updated = update_centers(&points, &a, 2, Metric::Euclidean);
        assert!(updated[1].is_none());
        let repaired = repair_empty(&points, &a, updated, Metric::Euclidean);
        assert_eq!(repaired[1], vec![10.0]);
    }

    #[test]
    fn rejects_invalid_config() {
        let bag = LocalFeatures::from_rows(1, &[vec![1.0f32], vec![2.0]]).unwrap();
        for bad in [
            ClusteringConfig { k: 0, ..Default::default() },
            ClusteringConfig { restarts: 0, ..Default::default() },
            ClusteringConfig { tol: -1.0, ..Default::default() },
            ClusteringConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(kmeans(&bag, &bad).is_err());
        }
    }

    fn random_bag(seed: u64, n: usize, dim: usize) -> LocalFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        LocalFeatures::from_rows(dim, &rows).unwrap()
    }

    #[test]
    fn spherical_centers_have_unit_norm() {
        let bag = random_bag(5, 200, 6);
        let r = kmeans(&bag, &config(7, Metric::Cosine)).unwrap();
        for c in &r.centers {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_inputs_give_identical_results() {
        let bag = random_bag(9, 300, 5);
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let a = kmeans(&bag, &config(6, metric)).unwrap();
            let b = kmeans(&bag, &config(6, metric)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn prototypes_restore_member_magnitude() {
        let rows = vec![vec![3.0f32, 0.0], vec![5.0, 0.0], vec![0.0, 2.0], vec![0.0, 2.0]];
        let bag = LocalFeatures::from_rows(2, &rows).unwrap();
        let r = kmeans(&bag, &config(2, Metric::Cosine)).unwrap();
        let mut protos = r.prototype_vectors();
        protos.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
        assert_eq!(protos[0], vec![4.0, 0.0]);
        assert_eq!(protos[1], vec![0.0, 2.0]);
    }

    fn clustered_bag(seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = [[5.0f32, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        (0..30)
            .map(|i| {
                anchors[i % 3]
                    .iter()
                    .map(|v| v + rng.random_range(-0.3..0.3))
                    .collect()
            })
            .collect()
    }

    fn sorted_centers(r: &ClusterResult) -> Vec<Vec<f64>> {
        let mut c = r.centers.clone();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn objective_never_increases(seed in any::<u64>(), k in 1usize..6, cosine in any::<bool>()) {
            let bag = random_bag(seed, 60, 4);
            let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
            let r = kmeans(&bag, &ClusteringConfig { seed, ..config(k, metric) }).unwrap();
            for trace in &r.traces {
                for pair in trace.windows(2) {
                    prop_assert!(pair[1] <= pair[0] + 1e-9 * (1.0 + pair[0]));
                }
            }
            prop_assert_eq!(r.counts.iter().sum::<usize>(), 60);
        }

        #[test]
        fn permuting_inputs_only_relabels(seed in any::<u64>(), cosine in any::<bool>()) {
            let rows = clustered_bag(seed);
            let mut shuffled = rows.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
            let a = kmeans(&LocalFeatures::from_rows(3, &rows).unwrap(), &config(3, metric)).unwrap();
            let b = kmeans(&LocalFeatures::from_rows(3, &shuffled).unwrap(), &config(3, metric)).unwrap();
            for (x, y) in sorted_centers(&a).iter().zip(&sorted_centers(&b)) {
                for (u, v) in x.iter().zip(y) {
                    prop_assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }

    fn toy_dataset(dir: &std::path::Path, images: usize, labels: impl Fn(usize) -> Vec<usize>) -> Dataset {
        let mut records = Vec::new();
        for i in 0..images {
            let name = format!("img{i}.npy");
            let values: Vec<f32> = (0..2 * 2 * 3).map(|v| ((v + i) % 5) as f32 + 0.5).collect();
            FeatureBlock::new(2, 2, 3, values).unwrap().write_npy(&dir.join(&name)).unwrap();
            records.push(ImageRecord {
                image_id: format!("img{i}"),
                labels: labels(i),
                feature_path: name.into(),
                gt_mask_path: None,
            });
        }
        let manifest = Manifest {
            header: ManifestHeader { num_classes: 2, channels: 3, class_names: vec![] },
            records,
        };
        Dataset::new(manifest, dir.to_path_buf())
    }

    #[test]
    fn collection_conserves_positions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 2, |_| vec![0]);
        let w = ClassifierWeights::new(2, 3, vec![1.0, 0.2, -0.3, 0.0, 0.0, 1.0]).unwrap();
        let f = collect_class_features(&ds, &w, 0, 0.1, None, 0).unwrap();
        assert_eq!(f.foreground.len() + f.background.len(), 8);
        assert_eq!(f.images, vec!["img0", "img1"]);
    }

    #[test]
    fn uniform_activation_puts_everything_in_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let block = FeatureBlock::new(2, 2, 1, vec![1.0; 4]).unwrap();
        block.write_npy(&dir.path().join("a.npy")).unwrap();
        let manifest = Manifest {
            header: ManifestHeader { num_classes: 1, channels: 1, class_names: vec![] },
            records: vec![ImageRecord {
                image_id: "a".into(),
                labels: vec![0],
                feature_path: "a.npy".into(),
                gt_mask_path: None,
            }],
        };
        let ds = Dataset::new(manifest, dir.path().to_path_buf());
        let w = ClassifierWeights::new(1, 1, vec![2.0]).unwrap();
        let f = collect_class_features(&ds, &w, 0, 0.1, None, 0).unwrap();
        assert_eq!(f.foreground.len(), 4);
        assert!(f.background.is_empty());
    }

    #[test]
    fn class_without_images_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 2, |_| vec![0]);
        let w = ClassifierWeights::new(2, 3, vec![1.0; 6]).unwrap();
        assert!(matches!(
            collect_class_features(&ds, &w, 1, 0.1, None, 0),
            Err(Error::EmptyClass { class_id: 1 })
        ));
    }

    #[test]
    fn sample_cap_draws_exactly_cap_images_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(dir.path(), 150, |i| if i % 7 == 0 { vec![0, 1] } else { vec![0] });
        let a = sample_class_images(&ds, 0, Some(100), 42).unwrap();
        let b = sample_class_images(&ds, 0, Some(100), 42).unwrap();
        let c = sample_class_images(&ds, 0, Some(100), 43).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
        assert_eq!(sample_class_images(&ds, 0, Some(500), 42).unwrap().len(), 150);
    }
}
