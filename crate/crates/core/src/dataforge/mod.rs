//! Synthetic phantom data and the preprocessing applied before training.

mod augment;
mod clahe;
mod kmeans;
mod phantom;
mod tds;

pub use augment::{augment, background_fill, draw_transform, AugmentPolicy, Transform};
pub use clahe::{clahe, clahe_slice, ClaheConfig, CLAHE_BINS};
pub use kmeans::{kmeans_1d, kmeans_labels, KMeans, KMEANS_MAX_ITERS, KMEANS_TOLERANCE};
pub use phantom::{generate_phantoms, AnomalyKind, PhantomSpec, PhantomTask, MAX_STRUCTURES};
pub use tds::{load_dataset, save_dataset, TDS_MAGIC, TDS_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::metrics::UNLABELED;

/// Marker stored for samples without a class label.
pub const NO_CLASS: u8 = 255;

/// One image with its dense label map and optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, spatial...]`
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub class: Option<u8>,
}

impl Sample {
    pub fn spatial(&self) -> &[usize] {
        &self.image.shape()[1..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub spatial: Vec<usize>,
    /// Segmentation labels including background.
    pub n_labels: u8,
    pub n_classes: u8,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(spatial: &[usize], n_labels: u8, n_classes: u8) -> Self {
        Dataset {
            dim: spatial.len(),
            spatial: spatial.to_vec(),
            n_labels,
            n_classes,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check shapes, label ranges and finiteness of every sample.
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.spatial.iter().product();
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape()[0] != 1 || s.spatial() != self.spatial.as_slice() {
                return Err(Error::Data(format!(
                    "sample {i}: image {:?} does not match {:?}",
                    s.image.shape(),
                    self.spatial
                )));
            }
            if s.labels.len() != n {
                return Err(Error::Data(format!("sample {i}: {} labels for {n} pixels", s.labels.len())));
            }
            if let Some(l) = s.labels.iter().find(|&&l| l != UNLABELED && l >= self.n_labels) {
                return Err(Error::Data(format!("sample {i}: label {l} outside [0, {})", self.n_labels)));
            }
            if let Some(c) = s.class {
                if c >= self.n_classes {
                    return Err(Error::Data(format!("sample {i}: class {c} outside [0, {})", self.n_classes)));
                }
            }
            if !s.image.is_finite() {
                return Err(Error::Data(format!("sample {i}: non-finite intensity")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..Dataset::new(&self.spatial, self.n_labels, self.n_classes)
        }
    }

    pub fn class_labels(&self) -> Result<Vec<u8>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| s.class.ok_or_else(|| Error::Data(format!("sample {i} has no class label"))))
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with coordinates into an independent seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for item `index` of a seeded collection.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index]))
}

/// Train/test indices of a stratified split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draw `per_class` training samples from each class; everything else is test.
/// Classes left without test samples are reported through `log::warn!`.
pub fn split(classes: &[u8], per_class: usize, seed: u64) -> Result<Split> {
    let n_classes = classes.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    split_counts(classes, &vec![per_class; n_classes], seed)
}

/// Stratified split with a separate training count for each class.
pub fn split_counts(classes: &[u8], counts: &[usize], seed: u64) -> Result<Split> {
    if counts.contains(&0) {
        return Err(Error::Param("training count per class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, &want) in counts.iter().enumerate() {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] as usize == c).collect();
        if members.len() < want {
            return Err(Error::Data(format!(
                "class {c} has {} samples, {want} requested for training",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        if members.len() == want {
            log::warn!("class {c}: all {want} samples used for training, none left for testing");
        }
        train.extend_from_slice(&members[..want]);
        test.extend_from_slice(&members[want..]);
    }
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= counts.len()) {
        return Err(Error::Data(format!("class {c} has no training count")));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let classes: Vec<u8> = (0..30).map(|i| (i % 3) as u8).collect();
        let s = split(&classes, 4, 1).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.test.len(), 18);
        for c in 0..3u8 {
            assert_eq!(s.train.iter().filter(|&&i| classes[i] == c).count(), 4);
        }
        assert!(s.train.iter().all(|i| !s.test.contains(i)));
        assert_eq!(split(&classes, 4, 1).unwrap(), s);
    }

    #[test]
    fn split_seeds_differ() {
        let classes: Vec<u8> = (0..60).map(|i| (i % 3) as u8).collect();
        let splits: Vec<Split> = (0..10).map(|seed| split(&classes, 5, seed).unwrap()).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(splits[i].train, splits[j].train);
            }
        }
    }

    #[test]
    fn split_edge_cases() {
        let uneven = split_counts(&[0, 0, 0, 1, 1, 2, 2, 2], &[3, 1, 2], 5).unwrap();
        assert_eq!(uneven.train.len(), 6);
        assert!(split_counts(&[0, 1, 2], &[1, 1], 5).is_err());
        let classes = [0u8, 0, 1, 1];
        let s = split(&classes, 2, 0).unwrap();
        assert!(s.test.is_empty());
        assert!(split(&classes, 3, 0).is_err());
    }

    #[test]
    fn derived_seeds_depend_on_every_part() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
        assert_eq!(derive_seed(5, &[7]), derive_seed(5, &[7]));
    }
}
