//! Named parameter storage and initialization.

use super::{BackboneConfig, Variant};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Flat, ordered collection of parameter tensors with stable names. The name
/// set is a function of the backbone config; order is construction order and
/// is what the optimizer, EMA, and checkpoints iterate over.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSnapshot {
    pub fn new() -> Self {
        ParamSnapshot {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> (&str, &ArrayD<f64>) {
        let (n, v) = &self.entries[i];
        (n.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        let i = self.index_of(name)?;
        Some(&mut self.entries[i].1)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Same names, same shapes.
    pub fn is_compatible(&self, other: &ParamSnapshot) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, va), (nb, vb))| na == nb && va.shape() == vb.shape())
    }
}

impl Default for ParamSnapshot {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph nodes for every parameter of a snapshot, in snapshot order.
pub struct ParamBinding {
    ids: Vec<NodeId>,
    trainable: bool,
}

impl ParamBinding {
    /// Insert all parameters into the graph. `trainable` decides whether
    /// gradients are tracked.
    pub fn bind(g: &mut Graph, snapshot: &ParamSnapshot, trainable: bool) -> Self {
        let ids = snapshot
            .iter()
            .map(|(_, v)| {
                if trainable {
                    g.var(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        ParamBinding { ids, trainable }
    }

    pub fn node(&self, snapshot: &ParamSnapshot, name: &str) -> NodeId {
        let i = snapshot
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    pub fn node_by_index(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

const INIT_STD: f64 = 0.02;

/// Initialize all parameters for a backbone. Deterministic under
/// `(seed, variant)`: teacher, student, and plain models draw from separate
/// streams, so their parameter sets are independent. Special tokens and the
/// metadata encoder use the same scheme as everything else.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<ParamSnapshot> {
    config.validate()?;
    let mut rng = rng::stream(seed, "init", &[variant_tag(config.variant)]);
    let d = config.embed_dim;
    let patch_dim = config.patch_size * config.patch_size * 3;
    let hidden = config.mlp_hidden();
    let mut p = ParamSnapshot::new();

    p.push("patch_embed.weight", normal(&mut rng, &[patch_dim, d], INIT_STD));
    p.push("patch_embed.bias", ArrayD::zeros(IxDyn(&[d])));
    p.push("cls_token", normal(&mut rng, &[1, 1, d], INIT_STD));
    if config.variant == Variant::Student {
        p.push("distill_token", normal(&mut rng, &[1, 1, d], INIT_STD));
    }
    if config.has_meta_encoder() {
        let m = config.meta_input_width();
        p.push("meta_encoder.fc1.weight", normal(&mut rng, &[m, d], INIT_STD));
        p.push("meta_encoder.fc1.bias", ArrayD::zeros(IxDyn(&[d])));
        p.push("meta_encoder.fc2.weight", normal(&mut rng, &[d, d], INIT_STD));
        p.push("meta_encoder.fc2.bias", ArrayD::zeros(IxDyn(&[d])));
    }
    p.push(
        "pos_embed",
        normal(&mut rng, &[1, config.seq_len(), d], INIT_STD),
    );
    for b in 0..config.depth {
        let pre = format!("blocks.{b}");
        p.push(&format!("{pre}.norm1.gain"), ArrayD::ones(IxDyn(&[d])));
        p.push(&format!("{pre}.norm1.bias"), ArrayD::zeros(IxDyn(&[d])));
        p.push(&format!("{pre}.attn.qkv.weight"), normal(&mut rng, &[d, 3 * d], INIT_STD));
        p.push(&format!("{pre}.attn.qkv.bias"), ArrayD::zeros(IxDyn(&[3 * d])));
        p.push(&format!("{pre}.attn.proj.weight"), normal(&mut rng, &[d, d], INIT_STD));
        p.push(&format!("{pre}.attn.proj.bias"), ArrayD::zeros(IxDyn(&[d])));
        p.push(&format!("{pre}.norm2.gain"), ArrayD::ones(IxDyn(&[d])));
        p.push(&format!("{pre}.norm2.bias"), ArrayD::zeros(IxDyn(&[d])));
        p.push(&format!("{pre}.mlp.fc1.weight"), normal(&mut rng, &[d, hidden], INIT_STD));
        p.push(&format!("{pre}.mlp.fc1.bias"), ArrayD::zeros(IxDyn(&[hidden])));
        p.push(&format!("{pre}.mlp.fc2.weight"), normal(&mut rng, &[hidden, d], INIT_STD));
        p.push(&format!("{pre}.mlp.fc2.bias"), ArrayD::zeros(IxDyn(&[d])));
    }
    p.push("norm.gain", ArrayD::ones(IxDyn(&[d])));
    p.push("norm.bias", ArrayD::zeros(IxDyn(&[d])));
    p.push("head.weight", normal(&mut rng, &[d, config.num_classes], INIT_STD));
    p.push("head.bias", ArrayD::zeros(IxDyn(&[config.num_classes])));
    Ok(p)
}

fn variant_tag(v: Variant) -> u64 {
    match v {
        Variant::Teacher => 1,
        Variant::Student => 2,
        Variant::Plain => 3,
    }
}

/// Parameter names a checkpoint must carry for this config.
pub fn expected_param_names(config: &BackboneConfig) -> Result<Vec<String>> {
    Ok(init_params(config, 0)?.names().map(String::from).collect())
}

/// Analytic parameter count, used to cross-check construction.
pub fn param_count(config: &BackboneConfig) -> usize {
    let d = config.embed_dim;
    let patch_dim = config.patch_size * config.patch_size * 3;
    let hidden = config.mlp_hidden();
    let mut n = patch_dim * d + d; // patch embed
    n += d; // cls token
    if config.variant == Variant::Student {
        n += d;
    }
    if config.has_meta_encoder() {
        n += config.meta_input_width() * d + d + d * d + d;
    }
    n += config.seq_len() * d; // position embedding
    n += config.depth * (2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * hidden + hidden + hidden * d + d);
    n += 2 * d; // final norm
    n += d * config.num_classes + config.num_classes;
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Fusion;
    use crate::dataset::TaskMode;

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

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny(Variant::Teacher, Fusion::Early);
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert!(a.is_compatible(&b));
        for ((_, va), (_, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(va, vb);
        }
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a.get("head.weight"), c.get("head.weight"));
    }

    #[test]
    fn teacher_and_student_draw_disjoint_streams() {
        let t = init_params(&tiny(Variant::Teacher, Fusion::Early), 42).unwrap();
        let s = init_params(&tiny(Variant::Student, Fusion::None), 42).unwrap();
        assert!(t.get("meta_encoder.fc1.weight").is_some());
        assert!(t.get("distill_token").is_none());
        assert!(s.get("distill_token").is_some());
        assert!(s.get("meta_encoder.fc1.weight").is_none());
        assert_ne!(t.get("cls_token"), s.get("cls_token"));
    }

    #[test]
    fn scalar_count_matches_closed_form() {
        for (variant, fusion) in [
            (Variant::Teacher, Fusion::Early),
            (Variant::Teacher, Fusion::Late),
            (Variant::Student, Fusion::None),
            (Variant::Plain, Fusion::None),
        ] {
            let cfg = tiny(variant, fusion);
            let p = init_params(&cfg, 1).unwrap();
            assert_eq!(p.num_scalars(), param_count(&cfg), "{variant:?}/{fusion:?}");
        }
    }
}
