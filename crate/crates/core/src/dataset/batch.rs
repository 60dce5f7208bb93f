//! Batch assembly with fixed labeled/unlabeled composition.
//!
//! The labeled and unlabeled pools cycle through independent shuffled epochs,
//! so the n_L:n_U ratio is constant per step regardless of pool sizes. All
//! randomness (epoch shuffles, per-view augmentation) is keyed, which makes
//! the stream restartable from a small serializable state.

use super::{augment, AugmentationPolicy, Branch, GeoTemporal, Label, LoadedDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchConfig {
    /// Labeled samples per batch.
    pub n_l: usize,
    /// Unlabeled samples per batch.
    pub n_u: usize,
    /// Also produce strong views of labeled samples (needed by algorithms
    /// with labeled-consistency terms, e.g. the debiasing loss).
    pub labeled_strong: bool,
    /// Sample with replacement when a pool is smaller than its per-batch count.
    pub replacement: bool,
}

/// One sample's views inside a batch.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub index: usize,
    pub id: String,
    pub weak: Array3<f64>,
    pub strong: Option<Array3<f64>>,
    /// Ground truth when known. For unlabeled samples this is only ever used
    /// to score pseudo-label quality, never as a training target.
    pub label: Option<Label>,
    pub meta: GeoTemporal,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub labeled: Vec<BatchSample>,
    pub unlabeled: Vec<BatchSample>,
}

/// Position of one pool's epoch cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    epoch: u64,
    pos: usize,
}

/// Serializable stream position; restoring it reproduces the remaining
/// batches bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    labeled: Cursor,
    unlabeled: Cursor,
}

pub struct BatchStream<'a> {
    data: &'a LoadedDataset,
    policy: &'a AugmentationPolicy,
    labeled_pool: Vec<usize>,
    unlabeled_pool: Vec<usize>,
    config: BatchConfig,
    seed: u64,
    labeled_cursor: Cursor,
    unlabeled_cursor: Cursor,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        data: &'a LoadedDataset,
        policy: &'a AugmentationPolicy,
        labeled_pool: Vec<usize>,
        unlabeled_pool: Vec<usize>,
        config: BatchConfig,
        seed: u64,
    ) -> Result<Self> {
        if labeled_pool.is_empty() || unlabeled_pool.is_empty() {
            return Err(Error::InvalidConfig("empty labeled or unlabeled pool".into()));
        }
        if !config.replacement
            && (config.n_l > labeled_pool.len() || config.n_u > unlabeled_pool.len())
        {
            return Err(Error::InvalidConfig(format!(
                "batch composition ({}, {}) exceeds pool sizes ({}, {}) without replacement",
                config.n_l,
                config.n_u,
                labeled_pool.len(),
                unlabeled_pool.len()
            )));
        }
        Ok(BatchStream {
            data,
            policy,
            labeled_pool,
            unlabeled_pool,
            config,
            seed,
            labeled_cursor: Cursor { epoch: 0, pos: 0 },
            unlabeled_cursor: Cursor { epoch: 0, pos: 0 },
        })
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            labeled: self.labeled_cursor,
            unlabeled: self.unlabeled_cursor,
        }
    }

    pub fn restore(&mut self, state: StreamState) {
        self.labeled_cursor = state.labeled;
        self.unlabeled_cursor = state.unlabeled;
    }

    fn make_views(&self, index: usize, step: u64, strong: bool) -> BatchSample {
        let sample: Sample = self.data.sample(index);
        let step_seed = rng::key(&[self.seed, rng::hash_str("aug-step"), step]);
        let weak = augment(self.policy, &sample, Branch::Weak, step_seed);
        let strong_view = strong.then(|| augment(self.policy, &sample, Branch::Strong, step_seed).image);
        BatchSample {
            index,
            id: sample.id,
            weak: weak.image,
            strong: strong_view,
            label: sample.label,
            meta: sample.meta,
        }
    }

    /// Assemble the batch for `step`. Steps must be requested in increasing
    /// order for the epoch cursors to advance consistently.
    pub fn next_batch(&mut self, step: u64) -> Batch {
        let labeled_idx = draw(
            &self.labeled_pool,
            "epoch-labeled",
            &mut self.labeled_cursor,
            self.config.n_l,
            step,
            self.seed,
            self.config.replacement,
        );
        let unlabeled_idx = draw(
            &self.unlabeled_pool,
            "epoch-unlabeled",
            &mut self.unlabeled_cursor,
            self.config.n_u,
            step,
            self.seed,
            self.config.replacement,
        );

        let labeled = labeled_idx
            .into_iter()
            .map(|i| self.make_views(i, step, self.config.labeled_strong))
            .collect();
        let unlabeled = unlabeled_idx
            .into_iter()
            .map(|i| self.make_views(i, step, true))
            .collect();
        Batch { step, labeled, unlabeled }
    }
}

fn epoch_order(pool: &[usize], purpose: &str, epoch: u64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = pool.to_vec();
    let mut rng = rng::stream(seed, purpose, &[epoch]);
    order.shuffle(&mut rng);
    order
}

fn draw(
    pool: &[usize],
    purpose: &str,
    cursor: &mut Cursor,
    n: usize,
    step: u64,
    seed: u64,
    replacement: bool,
) -> Vec<usize> {
    if replacement && n > pool.len() {
        // With-replacement batches are a plain keyed draw per slot.
        let mut rng = rng::stream(seed, purpose, &[u64::MAX, step]);
        return (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    }
    let mut out = Vec::with_capacity(n);
    let mut order = epoch_order(pool, purpose, cursor.epoch, seed);
    while out.len() < n {
        if cursor.pos >= order.len() {
            cursor.epoch += 1;
            cursor.pos = 0;
            order = epoch_order(pool, purpose, cursor.epoch, seed);
        }
        out.push(order[cursor.pos]);
        cursor.pos += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, LoadedDataset, SyntheticWorldConfig};

    fn dataset() -> (tempfile::TempDir, LoadedDataset) {
        let cfg = SyntheticWorldConfig {
            num_classes: 3,
            num_regions: 4,
            image_size: 8,
            samples_total: 30,
            spatial_dependence_strength: 0.5,
            seasonal_dependence_strength: 0.0,
            sampling_bias: None,
            label_noise: 0.0,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
        (dir, LoadedDataset::load(manifest).unwrap())
    }

    #[test]
    fn batch_composition_is_exact() {
        let (_dir, data) = dataset();
        let policy = AugmentationPolicy::default();
        let mut stream = BatchStream::new(
            &data,
            &policy,
            (0..10).collect(),
            (10..30).collect(),
            BatchConfig { n_l: 4, n_u: 8, labeled_strong: false, replacement: false },
            1,
        )
        .unwrap();
        for step in 0..20 {
            let b = stream.next_batch(step);
            assert_eq!(b.labeled.len(), 4);
            assert_eq!(b.unlabeled.len(), 8);
            assert!(b.labeled.iter().all(|s| s.strong.is_none()));
            assert!(b.unlabeled.iter().all(|s| s.strong.is_some()));
        }
    }

    #[test]
    fn stream_is_deterministic_and_restorable() {
        let (_dir, data) = dataset();
        let policy = AugmentationPolicy::default();
        fn mk<'a>(d: &'a LoadedDataset, p: &'a AugmentationPolicy) -> BatchStream<'a> {
            BatchStream::new(
                d,
                p,
                (0..10).collect(),
                (10..30).collect(),
                BatchConfig { n_l: 3, n_u: 5, labeled_strong: true, replacement: false },
                7,
            )
            .unwrap()
        }
        let mut a = mk(&data, &policy);
        let mut b = mk(&data, &policy);
        let mut mid_state = None;
        for step in 0..12 {
            if step == 6 {
                mid_state = Some(a.state());
            }
            let ba = a.next_batch(step);
            let bb = b.next_batch(step);
            assert_eq!(
                ba.labeled.iter().map(|s| s.index).collect::<Vec<_>>(),
                bb.labeled.iter().map(|s| s.index).collect::<Vec<_>>()
            );
            assert_eq!(ba.unlabeled[0].weak, bb.unlabeled[0].weak);
        }
        // Restore at step 6 and replay: identical batches.
        let mut c = mk(&data, &policy);
        c.restore(mid_state.unwrap());
        let b6 = c.next_batch(6);
        let mut fresh = mk(&data, &policy);
        for step in 0..6 {
            fresh.next_batch(step);
        }
        let expect = fresh.next_batch(6);
        assert_eq!(
            b6.labeled.iter().map(|s| s.index).collect::<Vec<_>>(),
            expect.labeled.iter().map(|s| s.index).collect::<Vec<_>>()
        );
        assert_eq!(b6.unlabeled[2].strong, expect.unlabeled[2].strong);
    }

    #[test]
    fn replacement_allows_small_pools() {
        let (_dir, data) = dataset();
        let policy = AugmentationPolicy::identity();
        let mut stream = BatchStream::new(
            &data,
            &policy,
            (0..5).collect(),
            (10..30).collect(),
            BatchConfig { n_l: 8, n_u: 4, labeled_strong: false, replacement: true },
            3,
        )
        .unwrap();
        let b = stream.next_batch(0);
        assert_eq!(b.labeled.len(), 8);
        let mut seen = std::collections::HashSet::new();
        let repeats = b.labeled.iter().filter(|s| !seen.insert(s.index)).count();
        assert!(repeats > 0, "with-replacement batch from pool of 5 must repeat");
    }

    #[test]
    fn oversized_batch_without_replacement_errors() {
        let (_dir, data) = dataset();
        let policy = AugmentationPolicy::identity();
        let err = BatchStream::new(
            &data,
            &policy,
            (0..5).collect(),
            (10..30).collect(),
            BatchConfig { n_l: 8, n_u: 4, labeled_strong: false, replacement: false },
            3,
        );
        assert!(err.is_err());
    }
}
