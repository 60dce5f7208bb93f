//! Dataset-level invariants: dependence monotonicity, augmentation
//! transparency, and split determinism at scale.

use stssl::dataset::{
    augment, split, synthesize_records, AugmentationPolicy, Branch, GeoTemporal, Label, Sample,
    SplitSpec, SplitStrategy, SyntheticWorldConfig,
};
use stssl::eval::evaluate_metadata_baseline;

fn world(sg: f64, st: f64, n: usize, seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        num_classes: 8,
        num_regions: 9,
        image_size: 8,
        samples_total: n,
        spatial_dependence_strength: sg,
        seasonal_dependence_strength: st,
        sampling_bias: None,
        label_noise: 0.0,
        seed,
    }
}

/// The metadata-only oracle's accuracy is non-decreasing in the spatial
/// dependence strength at fixed seed.
#[test]
fn metadata_advantage_is_monotone_in_spatial_strength() {
    let mut last = f64::NEG_INFINITY;
    for sg in [0.0, 0.4, 0.8] {
        let cfg = world(sg, 0.0, 4000, 31);
        let pairs: Vec<(GeoTemporal, usize)> = synthesize_records(&cfg)
            .unwrap()
            .into_iter()
            .map(|(r, _)| (r.meta, r.labels[0]))
            .collect();
        let acc = evaluate_metadata_baseline(&pairs, cfg.num_classes)
            .unwrap()
            .baseline_accuracy;
        assert!(
            acc >= last - 0.01,
            "accuracy dropped from {last:.3} to {acc:.3} at strength {sg}"
        );
        last = acc;
    }
}

/// Labels and metadata are bit-identical across both augmentation branches
/// for 1000 random samples.
#[test]
fn augmentation_is_transparent_to_labels_and_metadata() {
    let policy = AugmentationPolicy::default();
    for i in 0..1000u64 {
        let mut rng = stssl::rng::stream(i, "transparency", &[]);
        use rand::Rng;
        let sample = Sample {
            id: format!("t{i}"),
            image: ndarray::Array3::from_shape_fn((8, 8, 3), |_| rng.random()),
            label: Some(Label::Class((i % 7) as usize)),
            meta: GeoTemporal {
                latitude: rng.random_range(-90.0..=90.0),
                longitude: rng.random_range(-180.0..=180.0),
                day_of_year: (i % 3 != 0).then(|| rng.random_range(0.0..366.0)),
            },
        };
        for branch in [Branch::Weak, Branch::Strong] {
            let out = augment(&policy, &sample, branch, i);
            assert_eq!(out.label, sample.label);
            assert_eq!(out.meta, sample.meta);
            assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

/// Identical (manifest, spec) inputs produce identical partitions, across
/// five seeds, each run twice.
#[test]
fn split_determinism_across_seeds() {
    let cfg = world(0.5, 0.2, 600, 4);
    let dir = tempfile::tempdir().unwrap();
    let manifest = stssl::dataset::generate_synthetic(&cfg, dir.path()).unwrap();
    for seed in 0..5 {
        let spec = SplitSpec {
            strategy: SplitStrategy::Stratified { labeled_fraction: 0.1 },
            seed,
        };
        let a = split(&manifest, &spec).unwrap();
        let b = split(&manifest, &spec).unwrap();
        assert_eq!(a, b, "seed {seed}");
        // Disjoint cover.
        let mut all = a.labeled.clone();
        all.extend(&a.unlabeled);
        all.sort_unstable();
        assert_eq!(all, (0..manifest.records.len()).collect::<Vec<_>>());
    }
}
