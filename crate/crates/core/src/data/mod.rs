//! Procedurally generated factorized image datasets.
//!
//! [`generate_dataset`] renders one [`MiniSprites`] image per factor tuple,
//! giving full combinatorial coverage. Datasets persist in the `.xfds`
//! container ([`save`], [`load`]) and feed training through
//! [`sample_contrastive_batch`], which guarantees every supervised factor has
//! at least one positive pair in the batch.

mod batch;
mod container;
mod render;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grad::{Real, Tensor};

pub use batch::{sample_contrastive_batch, ContrastiveBatch};
pub use container::{decode, encode, load, save};
pub use render::{MiniSprites, Shape};

/// Product of cardinalities allowed by [`generate_dataset`] unless overridden.
pub const DEFAULT_CAP: usize = 200_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset would hold {product} images, above the cap of {cap}")]
    CapExceeded { product: u128, cap: usize },
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
    /// Supervised factors get a T_i subspace; the rest are left to S.
    pub supervised: bool,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, cardinality: usize, supervised: bool) -> Self {
        Self {
            name: name.into(),
            cardinality,
            supervised,
        }
    }
}

/// Names and supervision flags of the MiniSprites factors for `cfg`.
pub fn minisprite_specs(cfg: &MiniSprites) -> Vec<FactorSpec> {
    let mut specs = vec![
        FactorSpec::new("shape", 3, true),
        FactorSpec::new("scale", cfg.scales, true),
        FactorSpec::new("pos_x", cfg.positions, true),
        FactorSpec::new("pos_y", cfg.positions, true),
    ];
    if let Some(g) = cfg.intensities {
        specs.push(FactorSpec::new("intensity", g, cfg.intensity_supervised));
    }
    specs
}

/// Images (u8, N x C x H x W) with one label per factor.
#[derive(Clone, Debug)]
pub struct FactorizedDataset {
    image_shape: [usize; 3],
    images: Vec<u8>,
    labels: Vec<u16>,
    specs: Vec<FactorSpec>,
    /// Seed recorded at generation; not part of the container format.
    pub generator_seed: Option<u64>,
}

impl PartialEq for FactorizedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.image_shape == other.image_shape && self.specs == other.specs && self.labels == other.labels && self.images == other.images
    }
}

impl FactorizedDataset {
    /// Validates and wraps externally produced data (e.g. a converted benchmark).
    pub fn new(image_shape: [usize; 3], images: Vec<u8>, labels: Vec<u16>, specs: Vec<FactorSpec>) -> Result<Self, DataError> {
        validate_specs(&specs)?;
        let f = specs.len();
        let pixels: usize = image_shape.iter().product();
        if pixels == 0 {
            return Err(DataError::Config(format!("empty image shape {image_shape:?}")));
        }
        if !labels.len().is_multiple_of(f) || images.len() != labels.len() / f * pixels {
            return Err(DataError::Config(format!(
                "{} labels and {} pixels do not describe whole samples of {f} factors and {pixels} pixels",
                labels.len(),
                images.len()
            )));
        }
        for (i, row) in labels.chunks(f).enumerate() {
            for (spec, &v) in specs.iter().zip(row) {
                if v as usize >= spec.cardinality {
                    return Err(DataError::Config(format!(
                        "sample {i}: {} = {v} is outside [0, {})",
                        spec.name, spec.cardinality
                    )));
                }
            }
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            specs,
            generator_seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn specs(&self) -> &[FactorSpec] {
        &self.specs
    }

    pub fn num_factors(&self) -> usize {
        self.specs.len()
    }

    /// Indices of the supervised factors, in factor order.
    pub fn supervised(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&f| self.specs[f].supervised).collect()
    }

    pub fn image(&self, n: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[n * p..(n + 1) * p]
    }

    pub fn label_row(&self, n: usize) -> &[u16] {
        let f = self.specs.len();
        &self.labels[n * f..(n + 1) * f]
    }

    pub fn label(&self, n: usize, factor: usize) -> usize {
        self.labels[n * self.specs.len() + factor] as usize
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Copy restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        let mut labels = Vec::with_capacity(indices.len() * self.specs.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.extend_from_slice(self.label_row(i));
        }
        Self {
            image_shape: self.image_shape,
            images,
            labels,
            specs: self.specs.clone(),
            generator_seed: self.generator_seed,
        }
    }

    /// Images `indices` as a `[B, C, H, W]` tensor scaled to [0, 1].
    pub fn batch_tensor<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::lit(p as f64) * scale));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch extent")
    }

    /// Labels as CSV with a header row of factor names.
    pub fn write_labels_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| DataError::Io(e.into());
        w.write_record(self.specs.iter().map(|s| s.name.as_str())).map_err(to_io)?;
        for n in 0..self.len() {
            w.write_record(self.label_row(n).iter().map(|v| v.to_string())).map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Hex sha256 of the serialized container.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(encode(self)))
    }
}

fn validate_specs(specs: &[FactorSpec]) -> Result<(), DataError> {
    if specs.is_empty() {
        return Err(DataError::Config("at least one factor is required".into()));
    }
    let mut seen = HashMap::new();
    for (i, s) in specs.iter().enumerate() {
        if s.cardinality < 2 || s.cardinality > u16::MAX as usize + 1 {
            return Err(DataError::Config(format!(
                "factor {:?} has cardinality {}, need 2..=65536",
                s.name, s.cardinality
            )));
        }
        if let Some(j) = seen.insert(s.name.as_str(), i) {
            return Err(DataError::Config(format!("factor name {:?} used by factors {j} and {i}", s.name)));
        }
    }
    Ok(())
}

/// Renders every factor tuple of `cfg` once, in lexicographic label order
/// (last factor fastest).
pub fn generate_dataset(cfg: &MiniSprites, seed: u64, cap: usize) -> Result<FactorizedDataset, DataError> {
    cfg.validate()?;
    let specs = minisprite_specs(cfg);
    validate_specs(&specs)?;
    let cards = cfg.cardinalities();
    let product: u128 = cards.iter().map(|&c| c as u128).product();
    if product > cap as u128 {
        return Err(DataError::CapExceeded { product, cap });
    }
    let n = product as usize;
    let f = cards.len();
    let mut images = Vec::with_capacity(n * cfg.height * cfg.width);
    let mut labels = Vec::with_capacity(n * f);
    let mut tuple = vec![0usize; f];
    for _ in 0..n {
        images.extend(cfg.render(&tuple));
        labels.extend(tuple.iter().map(|&v| v as u16));
        for d in (0..f).rev() {
            tuple[d] += 1;
            if tuple[d] < cards[d] {
                break;
            }
            tuple[d] = 0;
        }
    }
    Ok(FactorizedDataset {
        image_shape: [1, cfg.height, cfg.width],
        images,
        labels,
        specs,
        generator_seed: Some(seed),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Iid,
    HeldOutCombinations,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitPolicy {
    pub kind: SplitKind,
    /// Expected fraction of samples (iid) or label tuples (held out) sent to test.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            kind: SplitKind::Iid,
            fraction: 0.1,
            seed: 0,
        }
    }
}

/// Partitions sample indices into `(train, test)`, both ascending.
pub fn split(dataset: &FactorizedDataset, policy: &SplitPolicy) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(policy.fraction > 0.0 && policy.fraction < 1.0) {
        return Err(DataError::Config(format!("split fraction must lie in (0, 1), got {}", policy.fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let n = dataset.len();
    let in_test: Vec<bool> = match policy.kind {
        SplitKind::Iid => (0..n).map(|_| rng.random_bool(policy.fraction)).collect(),
        SplitKind::HeldOutCombinations => {
            let mut tuples: Vec<&[u16]> = (0..n).map(|i| dataset.label_row(i)).collect();
            tuples.sort_unstable();
            tuples.dedup();
            tuples.shuffle(&mut rng);
            let held = ((tuples.len() as f64 * policy.fraction).round() as usize).clamp(1, tuples.len() - 1);
            let held: std::collections::HashSet<&[u16]> = tuples[..held].iter().copied().collect();
            (0..n).map(|i| held.contains(dataset.label_row(i))).collect()
        }
    };
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_test[i]);
    Ok((train, test))
}

/// Convenience wrapper writing a dataset to disk with its checksum returned.
pub fn save_with_checksum(dataset: &FactorizedDataset, path: &Path) -> Result<String, DataError> {
    save(dataset, path)?;
    Ok(dataset.checksum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MiniSprites {
        MiniSprites {
            scales: 2,
            positions: 3,
            intensities: Some(2),
            ..Default::default()
        }
    }

    #[test]
    fn default_dataset_size() {
        let ds = generate_dataset(&MiniSprites::default(), 0, DEFAULT_CAP).unwrap();
        assert_eq!(ds.len(), 3072);
        assert_eq!(ds.image_shape(), [1, 32, 32]);
        let cfg = MiniSprites {
            intensities: None,
            ..Default::default()
        };
        assert_eq!(generate_dataset(&cfg, 0, DEFAULT_CAP).unwrap().len(), 768);
    }

    #[test]
    fn cap_names_the_product() {
        match generate_dataset(&MiniSprites::default(), 0, 1000) {
            Err(DataError::CapExceeded { product: 3072, cap: 1000 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn images_match_their_labels() {
        let cfg = small();
        let ds = generate_dataset(&cfg, 0, DEFAULT_CAP).unwrap();
        for n in 0..ds.len() {
            let tuple: Vec<usize> = ds.label_row(n).iter().map(|&v| v as usize).collect();
            assert_eq!(ds.image(n), cfg.render(&tuple).as_slice());
        }
        assert_eq!(ds.label_row(1), &[0, 0, 0, 0, 1]);
    }

    #[test]
    fn joint_histograms_factorize_exactly() {
        let ds = generate_dataset(&small(), 0, DEFAULT_CAP).unwrap();
        let cards: Vec<usize> = ds.specs().iter().map(|s| s.cardinality).collect();
        let n = ds.len();
        for a in 0..cards.len() {
            for b in a + 1..cards.len() {
                let mut joint = vec![0usize; cards[a] * cards[b]];
                for i in 0..n {
                    joint[ds.label(i, a) * cards[b] + ds.label(i, b)] += 1;
                }
                assert!(joint.iter().all(|&c| c * cards[a] * cards[b] == n));
            }
        }
    }

    #[test]
    fn spec_validation() {
        let dup = vec![FactorSpec::new("a", 2, true), FactorSpec::new("a", 3, true)];
        assert!(FactorizedDataset::new([1, 1, 1], vec![], vec![], dup).is_err());
        let unary = vec![FactorSpec::new("a", 1, true)];
        assert!(FactorizedDataset::new([1, 1, 1], vec![], vec![], unary).is_err());
        let ok = vec![FactorSpec::new("a", 2, true)];
        assert!(FactorizedDataset::new([1, 1, 1], vec![0], vec![2], ok.clone()).is_err());
        assert_eq!(FactorizedDataset::new([1, 1, 1], vec![0], vec![1], ok).unwrap().len(), 1);
    }

    #[test]
    fn iid_split_size_is_binomial() {
        let cfg = MiniSprites {
            intensities: None,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg, 0, DEFAULT_CAP).unwrap();
        let policy = SplitPolicy {
            kind: SplitKind::Iid,
            fraction: 0.2,
            seed: 5,
        };
        let (train, test) = split(&ds, &policy).unwrap();
        let sigma = (768.0f64 * 0.2 * 0.8).sqrt();
        assert!((test.len() as f64 - 153.6).abs() <= 3.0 * sigma);
        assert_eq!(train.len() + test.len(), 768);
        assert_eq!(split(&ds, &policy).unwrap(), (train, test));
    }

    #[test]
    fn held_out_split_is_disjoint_in_tuples() {
        let ds = generate_dataset(&small(), 0, DEFAULT_CAP).unwrap();
        let policy = SplitPolicy {
            kind: SplitKind::HeldOutCombinations,
            fraction: 0.25,
            seed: 1,
        };
        let (train, test) = split(&ds, &policy).unwrap();
        assert!(!test.is_empty());
        let train_tuples: std::collections::HashSet<&[u16]> = train.iter().map(|&i| ds.label_row(i)).collect();
        assert!(test.iter().all(|&i| !train_tuples.contains(ds.label_row(i))));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = generate_dataset(&small(), 0, DEFAULT_CAP).unwrap();
        for fraction in [0.0, 1.0, -0.5, f64::NAN] {
            let policy = SplitPolicy {
                fraction,
                ..Default::default()
            };
            assert!(split(&ds, &policy).is_err());
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_sample() {
        let ds = generate_dataset(&small(), 0, DEFAULT_CAP).unwrap();
        let mut buf = Vec::new();
        ds.write_labels_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("shape,scale,pos_x,pos_y,intensity"));
        assert_eq!(lines.count(), ds.len());
    }

    #[test]
    fn batch_tensor_scales_to_unit_interval() {
        let ds = generate_dataset(&small(), 0, DEFAULT_CAP).unwrap();
        let t = ds.batch_tensor::<f64>(&[0, 5]);
        assert_eq!(t.shape(), &[2, 1, 32, 32]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(t.data().contains(&1.0) || t.data().iter().any(|&v| v > 0.0));
    }
}
