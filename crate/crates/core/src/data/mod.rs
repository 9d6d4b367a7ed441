//! Paired samples, deterministic phantom generation, dataset ingestion and
//! the out-of-distribution loading path.

mod dataset;
mod io;
mod phantom;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::image::Image2D;
use crate::seed;

pub use dataset::{load_dataset, load_ood, write_dataset, OodLoad, DATASET_DIRS};
pub use io::{read_image, read_png, write_png16, write_rgb_png, IntensityMapping, SampleMeta};
pub use phantom::{generate_phantom_pair, phantom_layers, phantom_noise, PhantomConfig, PhantomLayers, PhantomManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

/// An aligned attenuation / dark-field pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub attenuation: Image2D,
    /// Absent for out-of-distribution inputs.
    pub darkfield: Option<Image2D>,
    pub split: Split,
    /// Per-pixel standard deviation of the injected noise (phantoms only).
    pub truth_noise_sigma: Option<Image2D>,
    /// Soft lung-field mask in `[0, 1]` (phantoms only).
    pub lung_mask: Option<Image2D>,
}

impl PairedSample {
    pub fn is_synthetic(&self) -> bool {
        self.truth_noise_sigma.is_some()
    }
}

/// Train/val/test proportions used for every dataset size: 227:15:27.
pub const SPLIT_PARTS: [usize; 3] = [227, 15, 27];

/// Split sizes `(train, val, test)` for `n` samples.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let total: usize = SPLIT_PARTS.iter().sum();
    let share = |p: usize| ((n * p) as f64 / total as f64).round() as usize;
    let test = share(SPLIT_PARTS[2]).min(n);
    let val = share(SPLIT_PARTS[1]).min(n - test);
    (n - test - val, val, test)
}

/// Assign a split to each of `n` items by a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let (train, val, _) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, 0x5B17)));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cohort_splits_exactly() {
        assert_eq!(split_counts(269), (227, 15, 27));
        let s = assign_splits(269, 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 227);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 15);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 27);
    }

    #[test]
    fn splits_are_deterministic_partitions() {
        for n in [1usize, 2, 10, 100, 300] {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
            assert_eq!(assign_splits(n, 9), assign_splits(n, 9));
        }
        assert_ne!(assign_splits(100, 1), assign_splits(100, 2));
    }
}
