//! Finite-difference verification of backbone gradients and output
//! finiteness at initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use stssl::autodiff::check::{numerical_gradient, rel_error};
use stssl::autodiff::Graph;
use stssl::dataset::{GeoTemporal, TaskMode};
use stssl::model::{
    forward, init_params, BackboneConfig, Fusion, MetaMask, ParamBinding, ParamSnapshot, Variant,
};

fn tiny(variant: Variant, fusion: Fusion) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 5,
        task_mode: TaskMode::SingleLabel,
        variant,
        fusion,
        day_fill: 0.5,
        cyclic_day: false,
    }
}

fn rand_inputs(b: usize, seed: u64) -> (ArrayD<f64>, Vec<GeoTemporal>) {
    let mut rng = stssl::rng::stream(seed, "gradtest", &[]);
    let images = ArrayD::from_shape_fn(IxDyn(&[b, 8, 8, 3]), |_| rng.random());
    let metas = (0..b)
        .map(|_| GeoTemporal {
            latitude: rng.random_range(-90.0..90.0),
            longitude: rng.random_range(-180.0..180.0),
            day_of_year: Some(rng.random_range(0.0..366.0)),
        })
        .collect();
    (images, metas)
}

/// Sum of all logits under a given parameter snapshot.
fn logit_sum(
    config: &BackboneConfig,
    params: &ParamSnapshot,
    images: &ArrayD<f64>,
    metas: &[GeoTemporal],
) -> f64 {
    let mut g = Graph::new();
    let binding = ParamBinding::bind(&mut g, params, false);
    let img = g.constant(images.clone());
    let out = forward(&mut g, config, params, &binding, img, Some(metas), &MetaMask::default())
        .unwrap();
    let s = g.sum_all(out.logits);
    g.scalar(s)
}

/// For every parameter tensor, gradients of the logit sum must match central
/// finite differences with relative error below 1e-3.
#[test]
fn backbone_gradients_match_finite_differences() {
    for (variant, fusion) in [
        (Variant::Teacher, Fusion::Early),
        (Variant::Teacher, Fusion::Late),
        (Variant::Student, Fusion::None),
        (Variant::Plain, Fusion::None),
    ] {
        let config = tiny(variant, fusion);
        let params = init_params(&config, 7).unwrap();
        let (images, metas) = rand_inputs(2, 13);

        let mut g = Graph::new();
        let binding = ParamBinding::bind(&mut g, &params, true);
        let img = g.constant(images.clone());
        let out = forward(&mut g, &config, &params, &binding, img, Some(&metas), &MetaMask::default())
            .unwrap();
        let loss = g.sum_all(out.logits);
        let grads = g.backward(loss);

        for (i, (name, value)) in params.iter().enumerate() {
            let analytic = grads
                .get(binding.node_by_index(i))
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            let numeric = numerical_gradient(
                |v| {
                    let mut perturbed = params.clone();
                    perturbed.get_mut(name).unwrap().assign(v);
                    logit_sum(&config, &perturbed, &images, &metas)
                },
                value,
                1e-5,
            );
            let err = rel_error(&analytic, &numeric);
            assert!(
                err < 1e-3,
                "{variant:?}/{fusion:?} {name}: rel error {err:.2e}"
            );
        }
    }
}

/// No NaN/Inf in any model output for random inputs at initialization.
#[test]
fn outputs_are_finite_at_init() {
    let config = tiny(Variant::Teacher, Fusion::Early);
    let params = init_params(&config, 3).unwrap();
    for batch in 0..125 {
        let (images, metas) = rand_inputs(8, 1000 + batch);
        let mut g = Graph::new();
        let binding = ParamBinding::bind(&mut g, &params, false);
        let img = g.constant(images);
        let out = forward(&mut g, &config, &params, &binding, img, Some(&metas), &MetaMask::default())
            .unwrap();
        for id in [out.logits, out.cls_embedding, out.special_embedding.unwrap()] {
            assert!(g.value(id).iter().all(|v| v.is_finite()));
        }
    }
}
