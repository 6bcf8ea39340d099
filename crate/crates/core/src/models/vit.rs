//! Patch-transformer regressor: linear patch embedding with sinusoidal
//! position encodings, a stack of pre-norm encoder layers (global
//! multi-head self-attention + MLP, residual connections), and an MLP
//! regression head over the mean token.

use super::{token_mean, ModelSpec, Params, LN_EPS};
use crate::attention::{
    multi_head_attention, patch_partition, positional_encoding, AttentionWeights, HeadWeights,
    PEConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Dims {
    side: usize,
    patch: usize,
    depth: usize,
    d_model: usize,
    heads: usize,
    mlp_ratio: usize,
}

fn dims(spec: &ModelSpec) -> Dims {
    match *spec {
        ModelSpec::Vit {
            input_side,
            patch,
            depth,
            d_model,
            heads,
            mlp_ratio,
            ..
        } => Dims {
            side: input_side,
            patch,
            depth,
            d_model,
            heads,
            mlp_ratio,
        },
        _ => unreachable!("vit builder called with a non-vit spec"),
    }
}

fn head_hidden(d_model: usize) -> usize {
    (d_model / 2).max(1)
}

pub(super) fn expected_weights(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = dims(spec);
    let patch_dim = d.patch * d.patch;
    let (dm, dk) = (d.d_model, d.d_model / d.heads);
    let hidden = d.mlp_ratio * dm;
    let mut w = vec![
        ("patch_proj.weight".into(), vec![patch_dim, dm]),
        ("patch_proj.bias".into(), vec![dm]),
    ];
    for i in 0..d.depth {
        w.push((format!("enc{i}.ln1.gamma"), vec![dm]));
        w.push((format!("enc{i}.ln1.beta"), vec![dm]));
        for j in 0..d.heads {
            w.push((format!("enc{i}.attn.h{j}.query"), vec![dm, dk]));
            w.push((format!("enc{i}.attn.h{j}.key"), vec![dm, dk]));
            w.push((format!("enc{i}.attn.h{j}.value"), vec![dm, dk]));
        }
        w.push((format!("enc{i}.attn.out"), vec![dm, dm]));
        w.push((format!("enc{i}.ln2.gamma"), vec![dm]));
        w.push((format!("enc{i}.ln2.beta"), vec![dm]));
        w.push((format!("enc{i}.mlp.fc1.weight"), vec![dm, hidden]));
        w.push((format!("enc{i}.mlp.fc1.bias"), vec![hidden]));
        w.push((format!("enc{i}.mlp.fc2.weight"), vec![hidden, dm]));
        w.push((format!("enc{i}.mlp.fc2.bias"), vec![dm]));
    }
    let hh = head_hidden(dm);
    w.push(("final_ln.gamma".into(), vec![dm]));
    w.push(("final_ln.beta".into(), vec![dm]));
    w.push(("head.fc1.weight".into(), vec![dm, hh]));
    w.push(("head.fc1.bias".into(), vec![hh]));
    w.push(("head.fc2.weight".into(), vec![hh, 1]));
    w.push(("head.fc2.bias".into(), vec![1]));
    w
}

pub(super) fn attention_weights<T: Element>(
    params: &Params<T>,
    prefix: &str,
    heads: usize,
) -> Result<AttentionWeights<T>> {
    let mut hw = Vec::with_capacity(heads);
    for j in 0..heads {
        hw.push(HeadWeights {
            query: params.get(&format!("{prefix}.h{j}.query"))?.clone(),
            key: params.get(&format!("{prefix}.h{j}.key"))?.clone(),
            value: params.get(&format!("{prefix}.h{j}.value"))?.clone(),
        });
    }
    AttentionWeights::new(hw, params.get(&format!("{prefix}.out"))?.clone())
}

pub(super) fn layer_norm_by_name<T: Element>(
    x: &Tensor<T>,
    params: &Params<T>,
    prefix: &str,
    axis: usize,
) -> Result<Tensor<T>> {
    x.layer_norm(
        params.get(&format!("{prefix}.gamma"))?,
        params.get(&format!("{prefix}.beta"))?,
        axis,
        LN_EPS,
    )
}

pub(super) fn mlp_by_name<T: Element>(
    x: &Tensor<T>,
    params: &Params<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    x.linear(
        params.get(&format!("{prefix}.fc1.weight"))?,
        Some(params.get(&format!("{prefix}.fc1.bias"))?),
    )?
    .gelu()?
    .linear(
        params.get(&format!("{prefix}.fc2.weight"))?,
        Some(params.get(&format!("{prefix}.fc2.bias"))?),
    )
}

pub(super) fn forward<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = dims(spec);
    if x.shape() != [d.side, d.side] {
        return Err(Error::invalid(format!(
            "vit input must be [{0}, {0}], got {1:?}",
            d.side,
            x.shape()
        )));
    }
    let image = x.reshape(&[d.side, d.side, 1])?;
    let (seq, layout) = patch_partition(&image, d.patch)?;
    let mut t = seq.linear(
        params.get("patch_proj.weight")?,
        Some(params.get("patch_proj.bias")?),
    )?;
    let n = layout.n_patches();
    let pe = positional_encoding(&PEConfig::new(n, d.d_model)?);
    let pe: Vec<T> = pe.into_iter().map(T::from_f64).collect();
    let pe = t.tape.constant(&[n, d.d_model], pe)?;
    t = t.add(&pe)?;
    for i in 0..d.depth {
        let normed = layer_norm_by_name(&t, params, &format!("enc{i}.ln1"), 1)?;
        let aw = attention_weights(params, &format!("enc{i}.attn"), d.heads)?;
        t = t.add(&multi_head_attention(&normed, &aw, None)?)?;
        let normed = layer_norm_by_name(&t, params, &format!("enc{i}.ln2"), 1)?;
        t = t.add(&mlp_by_name(&normed, params, &format!("enc{i}.mlp"))?)?;
    }
    let t = layer_norm_by_name(&t, params, "final_ln", 1)?;
    let pooled = token_mean(&t)?;
    pooled
        .linear(
            params.get("head.fc1.weight")?,
            Some(params.get("head.fc1.bias")?),
        )?
        .gelu()?
        .linear(
            params.get("head.fc2.weight")?,
            Some(params.get("head.fc2.bias")?),
        )
}

#[cfg(test)]
mod tests {
    use super::super::{init_weights, ModelSpec, Params};
    use crate::attention::patch_partition;
    use crate::tensor::Tape;

    #[test]
    fn full_scale_patching_yields_64_tokens() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&[224, 224, 1], vec![0.0; 224 * 224], false).unwrap();
        let (seq, layout) = patch_partition(&x, 28).unwrap();
        assert_eq!(layout.n_patches(), 64);
        assert_eq!(seq.shape(), &[64, 784]);
    }

    #[test]
    fn zero_depth_keeps_only_embedding_and_head() {
        let spec = ModelSpec::vit(8, 4, 0, 6, 2, 2, None).unwrap();
        let names = spec.expected_weights();
        assert!(names.iter().all(|(n, _)| !n.starts_with("enc")));

        let entries = init_weights(&spec, 4);
        let tape = Tape::<f32>::new();
        tape.set_recording(false);
        let params = Params::bind(&tape, &entries).unwrap();
        let x = tape
            .leaf(&[8, 8], (0..64).map(|i| (i as f32).sin()).collect(), false)
            .unwrap();
        let out = super::forward(&spec, &params, &x).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert!(out.value()[0].is_finite());
    }

    #[test]
    fn position_encoding_makes_patch_order_matter() {
        let spec = ModelSpec::vit(8, 4, 1, 6, 2, 2, None).unwrap();
        let entries = init_weights(&spec, 8);
        let tape = Tape::<f32>::new();
        tape.set_recording(false);
        let params = Params::bind(&tape, &entries).unwrap();

        // Two images whose four 4x4 patches are the same multiset in
        // different spatial order.
        let patch_vals = |p: usize, i: usize| (p * 100 + i) as f32 * 0.01;
        let build = |order: [usize; 4]| -> Vec<f32> {
            let mut img = vec![0.0f32; 64];
            for (slot, &p) in order.iter().enumerate() {
                let (pr, pc) = (slot / 2, slot % 2);
                for i in 0..16 {
                    let (r, c) = (i / 4, i % 4);
                    img[(pr * 4 + r) * 8 + (pc * 4 + c)] = patch_vals(p, i);
                }
            }
            img
        };
        let a = tape.leaf(&[8, 8], build([0, 1, 2, 3]), false).unwrap();
        let b = tape.leaf(&[8, 8], build([3, 2, 1, 0]), false).unwrap();
        let ya = super::forward(&spec, &params, &a).unwrap().value()[0];
        let yb = super::forward(&spec, &params, &b).unwrap().value()[0];
        assert!((ya - yb).abs() > 1e-7, "{ya} vs {yb}");
    }
}
