//! Forward-pass graph construction for the transformer backbones.

use super::{meta_features, BackboneConfig, Fusion, MetaMask, ParamBinding, ParamSnapshot, Variant};
use crate::autodiff::{Graph, NodeId};
use crate::dataset::GeoTemporal;
use crate::error::{Error, Result};
use ndarray::Array2;

const LN_EPS: f64 = 1e-6;

/// Per-forward record: logits, the classification embedding, and the token
/// embedding used for distillation (teacher: metatoken, student:
/// distillation token), all post final normalization. Attention probabilities
/// are recorded per block for structural probes.
pub struct ModelOutputs {
    pub logits: NodeId,
    pub cls_embedding: NodeId,
    pub special_embedding: Option<NodeId>,
    pub attention: Vec<NodeId>,
}

impl ModelOutputs {
    pub fn logits_array(&self, g: &Graph) -> Array2<f64> {
        to_array2(g, self.logits)
    }
}

pub fn to_array2(g: &Graph, id: NodeId) -> Array2<f64> {
    g.value(id)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d node")
        .to_owned()
}

/// Two-layer MLP over encoder input rows: `[B, meta_width] -> [B, embed_dim]`.
/// Kept separate from `forward` so gradient probes can target it directly.
pub fn encode_metadata(
    g: &mut Graph,
    params: &ParamSnapshot,
    binding: &ParamBinding,
    features: NodeId,
) -> NodeId {
    let w1 = binding.node(params, "meta_encoder.fc1.weight");
    let b1 = binding.node(params, "meta_encoder.fc1.bias");
    let w2 = binding.node(params, "meta_encoder.fc2.weight");
    let b2 = binding.node(params, "meta_encoder.fc2.bias");
    let h = g.matmul(features, w1);
    let h = g.add_broadcast(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    g.add_broadcast(out, b2)
}

fn linear(
    g: &mut Graph,
    params: &ParamSnapshot,
    binding: &ParamBinding,
    x: NodeId,
    weight: &str,
    bias: &str,
) -> NodeId {
    let w = binding.node(params, weight);
    let b = binding.node(params, bias);
    let y = g.matmul(x, w);
    g.add_broadcast(y, b)
}

/// Build the forward graph for one batch.
///
/// The student and plain variants are pure functions of the images: the
/// metadata argument is ignored entirely, never read. The teacher requires
/// metadata; with early fusion the metatoken joins the sequence, with late
/// fusion the encoded metadata is added to the classification embedding
/// after the blocks (it cannot influence attention).
pub fn forward(
    g: &mut Graph,
    config: &BackboneConfig,
    params: &ParamSnapshot,
    binding: &ParamBinding,
    images: NodeId,
    metas: Option<&[GeoTemporal]>,
    mask: &MetaMask,
) -> Result<ModelOutputs> {
    let shape = g.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != config.image_size || shape[2] != config.image_size || shape[3] != 3
    {
        return Err(Error::ShapeMismatch(format!(
            "images {shape:?}, expected [B, {0}, {0}, 3]",
            config.image_size
        )));
    }
    let bsz = shape[0];
    if bsz == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }

    let needs_meta = config.variant == Variant::Teacher;
    let meta_token: Option<NodeId> = if needs_meta {
        let metas = metas.ok_or_else(|| {
            Error::InvalidConfig("teacher forward requires metadata".into())
        })?;
        if metas.len() != bsz {
            return Err(Error::ShapeMismatch(format!(
                "{} metadata records for batch of {bsz}",
                metas.len()
            )));
        }
        let feats = meta_features(config, mask, metas);
        let feats = g.constant(feats.into_dyn());
        Some(encode_metadata(g, params, binding, feats))
    } else {
        None
    };

    let d = config.embed_dim;
    let t_patches = config.num_patches();
    let seq = config.seq_len();

    // Patch embedding.
    let patches = g.patch_extract(images, config.patch_size);
    let flat = g.reshape(patches, &[bsz * t_patches, config.patch_size * config.patch_size * 3]);
    let emb = linear(g, params, binding, flat, "patch_embed.weight", "patch_embed.bias");
    let patch_tokens = g.reshape(emb, &[bsz, t_patches, d]);

    // Token sequence.
    let cls = binding.node(params, "cls_token");
    let cls = g.broadcast_axis0(cls, bsz);
    let mut parts: Vec<NodeId> = vec![cls];
    match (config.variant, config.fusion) {
        (Variant::Teacher, Fusion::Early) => {
            let mt = g.reshape(meta_token.unwrap(), &[bsz, 1, d]);
            parts.push(mt);
        }
        (Variant::Student, _) => {
            let dt = binding.node(params, "distill_token");
            parts.push(g.broadcast_axis0(dt, bsz));
        }
        _ => {}
    }
    parts.push(patch_tokens);
    let tokens = g.concat(&parts, 1);
    debug_assert_eq!(g.value(tokens).shape(), &[bsz, seq, d]);
    let pos = binding.node(params, "pos_embed");
    let mut x = g.add_broadcast(tokens, pos);

    // Transformer blocks.
    let heads = config.num_heads;
    let dh = d / heads;
    let mut attention = Vec::with_capacity(config.depth);
    for blk in 0..config.depth {
        let pre = format!("blocks.{blk}");
        let n1g = binding.node(params, &format!("{pre}.norm1.gain"));
        let n1b = binding.node(params, &format!("{pre}.norm1.bias"));
        let h = g.layer_norm(x, n1g, n1b, LN_EPS);
        let h2 = g.reshape(h, &[bsz * seq, d]);
        let qkv = linear(g, params, binding, h2, &format!("{pre}.attn.qkv.weight"), &format!("{pre}.attn.qkv.bias"));
        let qkv = g.reshape(qkv, &[bsz, seq, 3, heads, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]); // [3, B, H, T, dh]
        let q = g.slice_axis(qkv, 0, 0, 1);
        let q = g.reshape(q, &[bsz, heads, seq, dh]);
        let k = g.slice_axis(qkv, 0, 1, 2);
        let k = g.reshape(k, &[bsz, heads, seq, dh]);
        let v = g.slice_axis(qkv, 0, 2, 3);
        let v = g.reshape(v, &[bsz, heads, seq, dh]);
        let kt = g.permute(k, &[0, 1, 3, 2]);
        let scores = g.batch_matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax_last(scores);
        attention.push(probs);
        let ctx = g.batch_matmul(probs, v); // [B, H, T, dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[bsz * seq, d]);
        let proj = linear(g, params, binding, ctx, &format!("{pre}.attn.proj.weight"), &format!("{pre}.attn.proj.bias"));
        let proj = g.reshape(proj, &[bsz, seq, d]);
        x = g.add(x, proj);

        let n2g = binding.node(params, &format!("{pre}.norm2.gain"));
        let n2b = binding.node(params, &format!("{pre}.norm2.bias"));
        let h = g.layer_norm(x, n2g, n2b, LN_EPS);
        let h2 = g.reshape(h, &[bsz * seq, d]);
        let m = linear(g, params, binding, h2, &format!("{pre}.mlp.fc1.weight"), &format!("{pre}.mlp.fc1.bias"));
        let m = g.gelu(m);
        let m = linear(g, params, binding, m, &format!("{pre}.mlp.fc2.weight"), &format!("{pre}.mlp.fc2.bias"));
        let m = g.reshape(m, &[bsz, seq, d]);
        x = g.add(x, m);
    }

    let ng = binding.node(params, "norm.gain");
    let nb = binding.node(params, "norm.bias");
    let x = g.layer_norm(x, ng, nb, LN_EPS);

    let cls_out = g.slice_axis(x, 1, 0, 1);
    let cls_embedding = g.reshape(cls_out, &[bsz, d]);

    let mut special_embedding = match (config.variant, config.fusion) {
        (Variant::Teacher, Fusion::Early) | (Variant::Student, _) => {
            let s = g.slice_axis(x, 1, 1, 2);
            Some(g.reshape(s, &[bsz, d]))
        }
        _ => None,
    };

    let head_input = if config.variant == Variant::Teacher && config.fusion == Fusion::Late {
        // Late fusion: metadata joins after the backbone. The fused embedding
        // also serves as the distillation source for this ablation.
        let fused = g.add(cls_embedding, meta_token.unwrap());
        special_embedding = Some(fused);
        fused
    } else {
        cls_embedding
    };

    let logits = linear(g, params, binding, head_input, "head.weight", "head.bias");
    Ok(ModelOutputs {
        logits,
        cls_embedding,
        special_embedding,
        attention,
    })
}
