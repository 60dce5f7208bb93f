//! Shared fixtures for integration tests: a tiny synthetic world plus a
//! small experiment config that trains in seconds.

use std::path::Path;
use stssl::config::{
    AblationSwitches, DatasetSection, EvalSection, ExperimentConfig, ModelSection, SslSection,
    TrainSection,
};
use stssl::dataset::{generate_synthetic, SplitStrategy, SyntheticWorldConfig};
use stssl::model::Variant;

pub fn tiny_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        num_classes: 4,
        num_regions: 6,
        image_size: 8,
        samples_total: 120,
        spatial_dependence_strength: 0.8,
        seasonal_dependence_strength: 0.4,
        sampling_bias: None,
        label_noise: 0.0,
        seed,
    }
}

pub fn tiny_experiment(dir: &Path, total_steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSection {
            dir: dir.to_path_buf(),
            synthetic: Some(tiny_world(5)),
            train_fraction: 0.8,
            split: SplitStrategy::Stratified { labeled_fraction: 0.2 },
            augmentation: None,
        },
        model: ModelSection {
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            day_fill: 0.5,
            cyclic_day: false,
        },
        ssl: SslSection { algorithm: "fixmatch".into(), tau: 0.8 },
        train: TrainSection {
            total_steps,
            base_lr: 1e-3,
            weight_decay: 5e-4,
            n_l: 4,
            n_u: 6,
            replacement: false,
            lambda_u: None,
            lambda_d: 1.0,
            ema_decay: 0.99,
            seed: 9,
            log_interval: 5,
            eval_interval: 0,
            ablation: AblationSwitches::default(),
        },
        eval: EvalSection::default(),
    }
}

/// Generate the tiny world under `dir` and return a config pointing at it.
pub fn tiny_setup_config(dir: &Path, total_steps: u64) -> ExperimentConfig {
    let config = tiny_experiment(dir, total_steps);
    generate_synthetic(config.dataset.synthetic.as_ref().unwrap(), dir).unwrap();
    config
}

/// Single-model variant of the tiny experiment.
pub fn single_model(mut config: ExperimentConfig, variant: Variant) -> ExperimentConfig {
    config.train.ablation.single_model = true;
    config.train.ablation.single_variant = variant;
    config
}

/// Handcrafted multi-label dataset: `n` random PNGs over `k` classes with
/// 1–3 positive labels each. Returns the dataset directory contents in
/// place; day_of_year is present for even rows only.
#[allow(dead_code)]
pub fn write_multilabel_dataset(dir: &Path, n: usize, k: usize, image_size: usize) {
    use rand::Rng;
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut csv = String::from("id,image_path,labels,lat,lon,day_of_year\n");
    for i in 0..n {
        let mut rng = stssl::rng::stream(77, "mlfixture", &[i as u64]);
        let img = image::RgbImage::from_fn(image_size as u32, image_size as u32, |_, _| {
            image::Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
        });
        let path = format!("images/ml-{i:04}.png");
        img.save(dir.join(&path)).unwrap();
        let mut labels: Vec<usize> = (0..k).filter(|_| rng.random::<f64>() < 0.3).collect();
        if labels.is_empty() {
            labels.push(i % k);
        }
        let day = if i % 2 == 0 {
            format!("{}", rng.random_range(0.0..366.0))
        } else {
            String::new()
        };
        csv.push_str(&format!(
            "ml-{i:04},{path},{},{:.4},{:.4},{day}\n",
            labels.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            rng.random_range(-60.0..60.0),
            rng.random_range(-150.0..150.0),
        ));
    }
    std::fs::write(dir.join("manifest.csv"), csv).unwrap();
    std::fs::write(
        dir.join("dataset.json"),
        serde_json::json!({
            "task_mode": "multi-label",
            "num_classes": k,
            "image_size": image_size,
        })
        .to_string(),
    )
    .unwrap();
}

/// Bitwise equality of two parameter snapshots.
pub fn snapshots_equal(a: &stssl::model::ParamSnapshot, b: &stssl::model::ParamSnapshot) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, va), (nb, vb))| {
            na == nb
                && va.shape() == vb.shape()
                && va
                    .iter()
                    .zip(vb.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
