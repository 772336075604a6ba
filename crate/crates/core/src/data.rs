//! Datasets, IDX loading and client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::seed::{self, SimRng};

/// Retry budget for Dirichlet plans that leave a client empty.
pub const DIRICHLET_MAX_RETRIES: usize = 100;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
    /// `(rows, cols)` when the features are a flattened image.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
            image_shape: self.image_shape,
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    /// Shuffle and split off `fraction` of the samples as a held-out set.
    /// Returns `(kept, held_out)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(FlError::Config(format!(
                "holdout fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed));
        let cut = (fraction * self.len() as f64).round() as usize;
        let (held, kept) = order.split_at(cut);
        Ok((self.subset(kept), self.subset(held)))
    }
}

fn square_shape(dim: usize) -> Option<(usize, usize)> {
    let side = (dim as f64).sqrt().round() as usize;
    (side * side == dim).then_some((side, side))
}

/// Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Per-feature standard deviation around the class mean.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.15
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, dim: usize, per_class: usize) -> Self {
        Self {
            num_classes,
            dim,
            per_class,
            spread: default_spread(),
        }
    }
}

pub fn gen_synthetic(seed: u64, num_classes: usize, dim: usize, per_class: usize) -> Result<Dataset> {
    gen_synthetic_with(seed, &SyntheticSpec::new(num_classes, dim, per_class))
}

/// Class means are drawn uniformly from `[0.2, 0.8]^dim`; samples add isotropic
/// Gaussian noise and are clamped to `[0, 1]`. Samples are emitted class by class.
pub fn gen_synthetic_with(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dim < 4 || spec.per_class < 1 {
        return Err(FlError::Config(
            "synthetic data needs num_classes >= 2, dim >= 4, per_class >= 1".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(FlError::Config(format!("spread must be >= 0, got {}", spec.spread)));
    }
    let mut rng = seed::rng(seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("spread checked");
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let features = mean
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes,
        dim: spec.dim,
        image_shape: square_shape(spec.dim),
    })
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FlError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(FlError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parse an IDX image file: returns `(rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let size = rows * cols;
    let needed = 16 + count * size;
    if bytes.len() < needed {
        return Err(FlError::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    let images = bytes[16..needed]
        .chunks(size.max(1))
        .take(count)
        .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(FlError::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

/// Load an IDX image/label pair (MNIST layout).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(image_path).map_err(|e| FlError::io(image_path, e))?;
    let label_bytes = fs::read(label_path).map_err(|e| FlError::io(label_path, e))?;
    let (rows, cols, images) = parse_idx_images(&image_bytes, image_path)?;
    let labels = parse_idx_labels(&label_bytes, label_path)?;
    if images.len() != labels.len() {
        return Err(FlError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(features, label)| Sample { features, label })
        .collect();
    Ok(Dataset {
        samples,
        num_classes,
        dim: rows * cols,
        image_shape: Some((rows, cols)),
    })
}

/// Index lists into a source dataset: one per client plus the aggregator's
/// fine-tuning set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub finetune_indices: Vec<usize>,
}

/// Shuffle and carve the fine-tuning set off the front. Returns `(finetune, rest)`.
fn carve_finetune(len: usize, fraction: f64, rng: &mut SimRng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(FlError::Config(format!(
            "finetune_fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let ft = (fraction * len as f64).round() as usize;
    let rest = order.split_off(ft);
    Ok((order, rest))
}

pub fn partition_iid(dataset: &Dataset, n: usize, finetune_fraction: f64, seed: u64) -> Result<PartitionPlan> {
    if n == 0 {
        return Err(FlError::Config("need at least one client".into()));
    }
    let mut rng = seed::rng(seed);
    let (finetune_indices, rest) = carve_finetune(dataset.len(), finetune_fraction, &mut rng)?;
    if n > rest.len() {
        return Err(FlError::Input(format!(
            "{n} clients but only {} samples left after the fine-tuning split",
            rest.len()
        )));
    }
    let base = rest.len() / n;
    let extra = rest.len() % n;
    let mut client_indices = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        client_indices.push(rest[start..start + size].to_vec());
        start += size;
    }
    Ok(PartitionPlan {
        client_indices,
        finetune_indices,
    })
}

fn dirichlet(alpha: f64, n: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|d| d / total).collect()
    } else {
        // every draw underflowed (tiny alpha): the limit is a one-hot vector
        let mut one_hot = vec![0.0; n];
        one_hot[rng.random_range(0..n)] = 1.0;
        one_hot
    }
}

/// Label-skewed split: each class's samples are divided among clients by
/// Dirichlet(alpha) proportions.
pub fn partition_dirichlet(
    dataset: &Dataset,
    n: usize,
    alpha: f64,
    finetune_fraction: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FlError::Config(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if n == 0 {
        return Err(FlError::Config("need at least one client".into()));
    }
    let mut rng = seed::rng(seed);
    let (finetune_indices, rest) = carve_finetune(dataset.len(), finetune_fraction, &mut rng)?;
    if n > rest.len() {
        return Err(FlError::Input(format!(
            "{n} clients but only {} samples left after the fine-tuning split",
            rest.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for &i in &rest {
        by_class[dataset.samples[i].label].push(i);
    }

    for _ in 0..DIRICHLET_MAX_RETRIES {
        let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); n];
        for members in &by_class {
            let proportions = dirichlet(alpha, n, &mut rng);
            let total = members.len() as f64;
            let mut cumulative = 0.0;
            let mut start = 0;
            for (client, p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == n {
                    members.len()
                } else {
                    ((cumulative * total).round() as usize).clamp(start, members.len())
                };
                client_indices[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if client_indices.iter().all(|c| !c.is_empty()) {
            return Ok(PartitionPlan {
                client_indices,
                finetune_indices,
            });
        }
    }
    Err(FlError::DegeneratePartition {
        retries: DIRICHLET_MAX_RETRIES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn blank(len: usize, num_classes: usize) -> Dataset {
        Dataset {
            samples: (0..len)
                .map(|i| Sample {
                    features: vec![0.0; 4],
                    label: i % num_classes,
                })
                .collect(),
            num_classes,
            dim: 4,
            image_shape: Some((2, 2)),
        }
    }

    fn assert_disjoint(plan: &PartitionPlan, len: usize) {
        let mut seen = HashSet::new();
        for list in plan.client_indices.iter().chain(std::iter::once(&plan.finetune_indices)) {
            for &i in list {
                assert!(i < len);
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let d = gen_synthetic(4, 3, 16, 5).unwrap();
        assert_eq!(d.len(), 15);
        for c in 0..3 {
            assert_eq!(d.labels().filter(|&l| l == c).count(), 5);
        }
        assert_eq!(d, gen_synthetic(4, 3, 16, 5).unwrap());
        assert!(d.samples.iter().all(|s| s.features.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(d.image_shape, Some((4, 4)));
        assert!(gen_synthetic(4, 1, 16, 5).is_err());
        assert!(gen_synthetic(4, 2, 3, 5).is_err());
    }

    #[test]
    fn iid_matches_reported_shard_sizes() {
        let d = blank(50_000, 10);
        let plan = partition_iid(&d, 20, 0.04, 1).unwrap();
        assert_eq!(plan.finetune_indices.len(), 2000);
        assert!(plan.client_indices.iter().all(|c| c.len() == 2400));
        assert_disjoint(&plan, d.len());
    }

    #[test]
    fn iid_without_finetune_covers_everything() {
        let d = blank(103, 2);
        let plan = partition_iid(&d, 10, 0.0, 9).unwrap();
        assert!(plan.finetune_indices.is_empty());
        let total: usize = plan.client_indices.iter().map(Vec::len).sum();
        assert_eq!(total, 103);
        let sizes: Vec<usize> = plan.client_indices.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_disjoint(&plan, d.len());
        assert_eq!(plan, partition_iid(&d, 10, 0.0, 9).unwrap());
    }

    #[test]
    fn iid_rejects_too_many_clients() {
        let d = blank(10, 2);
        assert!(partition_iid(&d, 11, 0.0, 0).is_err());
        assert!(partition_iid(&d, 5, 0.6, 0).is_err());
        assert!(partition_iid(&d, 2, 1.0, 0).is_err());
    }

    #[test]
    fn dirichlet_conserves_each_class() {
        let d = blank(2000, 10);
        let plan = partition_dirichlet(&d, 20, 0.5, 0.04, 3).unwrap();
        assert_disjoint(&plan, d.len());
        assert!(plan.client_indices.iter().all(|c| !c.is_empty()));
        let ft: HashSet<usize> = plan.finetune_indices.iter().copied().collect();
        for class in 0..10 {
            let available = (0..d.len()).filter(|i| i % 10 == class && !ft.contains(i)).count();
            let assigned: usize = plan
                .client_indices
                .iter()
                .map(|c| c.iter().filter(|&&i| d.samples[i].label == class).count())
                .sum();
            assert_eq!(assigned, available);
        }
        assert_eq!(plan, partition_dirichlet(&d, 20, 0.5, 0.04, 3).unwrap());
    }

    #[test]
    fn dirichlet_large_alpha_approaches_iid() {
        let d = blank(10_000, 10);
        for seed in 0..5 {
            let plan = partition_dirichlet(&d, 20, 1e6, 0.0, seed).unwrap();
            // 1000 per class over 20 clients = 50 each
            for client in &plan.client_indices {
                for class in 0..10 {
                    let count = client.iter().filter(|&&i| d.samples[i].label == class).count();
                    assert!((45..=55).contains(&count), "count {count}");
                }
            }
        }
    }

    #[test]
    fn dirichlet_degenerate_reports_error() {
        // 2 samples cannot feed 2 clients reliably at tiny alpha
        let d = blank(2, 1);
        let mut d = d;
        d.num_classes = 1;
        match partition_dirichlet(&d, 2, 1e-4, 0.0, 0) {
            Err(FlError::DegeneratePartition { retries }) => assert_eq!(retries, DIRICHLET_MAX_RETRIES),
            other => panic!("expected degenerate partition, got {other:?}"),
        }
        assert!(partition_dirichlet(&d, 2, 0.0, 0.0, 0).is_err());
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.extend_from_slice(pixels);
        bytes
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut bytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bytes.extend((labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn idx_pair_round_trip_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        fs::write(&img, idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 255, 0, 0])).unwrap();
        fs::write(&lbl, idx_labels(&[3, 7])).unwrap();
        let d = load_idx(&img, &lbl).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim, 4);
        assert_eq!(d.samples[0].features, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.samples[1].label, 7);
        assert_eq!(d.num_classes, 8);

        fs::write(&lbl, idx_labels(&[3])).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(FlError::CountMismatch { images: 2, labels: 1 })));
        assert!(matches!(load_idx(&img, &dir.path().join("missing")), Err(FlError::Io { .. })));
    }

    #[test]
    fn idx_parse_errors_are_distinct() {
        let p = Path::new("x");
        let mut bad = idx_images(1, 1, 1, &[9]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, p), Err(FlError::BadMagic { found: 0x801, .. })));
        assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[9]), p), Err(FlError::BadMagic { .. })));
        let short = idx_images(2, 2, 2, &[1, 2, 3]);
        assert!(matches!(parse_idx_images(&short, p), Err(FlError::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0], p), Err(FlError::Truncated { .. })));
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let d = gen_synthetic(1, 2, 4, 10).unwrap();
        let (train, val) = d.split_holdout(0.25, 3).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(val.len(), 5);
    }
}
