//! Shifted-window transformer regressor: 4x4 patch embedding, four stages
//! of paired plain / shifted window-attention blocks with patch-merging
//! downsamples between stages, global average pooling, and a linear head.
//!
//! Window sizes clamp to the feature-map side when the map is smaller than
//! the configured window; a clamped full-map window attends globally and
//! disables the shift (shifting a single window only masks it apart).

use super::vit::{attention_weights, layer_norm_by_name, mlp_by_name};
use super::{token_mean, ModelSpec, Params};
use crate::attention::{patch_partition, window_multi_head_attention, WindowLayout};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Dims {
    side: usize,
    patch: usize,
    dims: [usize; 4],
    heads: [usize; 4],
    pairs: [usize; 4],
    window: usize,
    mlp_ratio: usize,
}

fn dims(spec: &ModelSpec) -> Dims {
    match *spec {
        ModelSpec::Swin {
            input_side,
            patch,
            dims,
            heads,
            pairs,
            window,
            mlp_ratio,
            ..
        } => Dims {
            side: input_side,
            patch,
            dims,
            heads,
            pairs,
            window,
            mlp_ratio,
        },
        _ => unreachable!("swin builder called with a non-swin spec"),
    }
}

/// Feature-map side and effective (clamped) window size per stage.
fn stage_geometry(d: &Dims) -> [(usize, usize); 4] {
    let s0 = d.side.div_ceil(d.patch);
    let mut g = [(0, 0); 4];
    for (i, slot) in g.iter_mut().enumerate() {
        let side = s0 >> i;
        *slot = (side, d.window.min(side));
    }
    g
}

pub(super) fn expected_weights(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let d = dims(spec);
    let geo = stage_geometry(&d);
    let patch_dim = d.patch * d.patch;
    let mut w = vec![
        ("patch_proj.weight".into(), vec![patch_dim, d.dims[0]]),
        ("patch_proj.bias".into(), vec![d.dims[0]]),
    ];
    for s in 0..4 {
        let c = d.dims[s];
        if s > 0 {
            let merged = 4 * d.dims[s - 1];
            w.push((format!("stage{s}.merge.ln.gamma"), vec![merged]));
            w.push((format!("stage{s}.merge.ln.beta"), vec![merged]));
            w.push((format!("stage{s}.merge.reduce"), vec![merged, c]));
        }
        let (_, eff) = geo[s];
        let span = 2 * eff - 1;
        let (h, dk) = (d.heads[s], c / d.heads[s]);
        let hidden = d.mlp_ratio * c;
        for k in 0..2 * d.pairs[s] {
            let p = format!("stage{s}.block{k}");
            w.push((format!("{p}.ln1.gamma"), vec![c]));
            w.push((format!("{p}.ln1.beta"), vec![c]));
            for j in 0..h {
                w.push((format!("{p}.attn.h{j}.query"), vec![c, dk]));
                w.push((format!("{p}.attn.h{j}.key"), vec![c, dk]));
                w.push((format!("{p}.attn.h{j}.value"), vec![c, dk]));
            }
            w.push((format!("{p}.attn.out"), vec![c, c]));
            w.push((format!("{p}.attn.rel_bias"), vec![h, span * span]));
            w.push((format!("{p}.ln2.gamma"), vec![c]));
            w.push((format!("{p}.ln2.beta"), vec![c]));
            w.push((format!("{p}.mlp.fc1.weight"), vec![c, hidden]));
            w.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
            w.push((format!("{p}.mlp.fc2.weight"), vec![hidden, c]));
            w.push((format!("{p}.mlp.fc2.bias"), vec![c]));
        }
    }
    let c3 = d.dims[3];
    w.push(("final_ln.gamma".into(), vec![c3]));
    w.push(("final_ln.beta".into(), vec![c3]));
    w.push(("head.weight".into(), vec![c3, 1]));
    w.push(("head.bias".into(), vec![1]));
    w
}

/// Group 2x2 neighborhoods of `[side, side, c]` into `[side/2 · side/2, 4c]`
/// rows, flattened (row-in-pair, col-in-pair, channel).
fn merge_neighborhoods<T: Element>(x: &Tensor<T>, side: usize, c: usize) -> Result<Tensor<T>> {
    let half = side / 2;
    x.reshape(&[half, 2, half, 2, c])?
        .transpose(&[0, 2, 1, 3, 4])?
        .reshape(&[half * half, 4 * c])
}

pub(super) fn forward<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = dims(spec);
    if x.shape() != [d.side, d.side] {
        return Err(Error::invalid(format!(
            "swin input must be [{0}, {0}], got {1:?}",
            d.side,
            x.shape()
        )));
    }
    let geo = stage_geometry(&d);
    let image = x.reshape(&[d.side, d.side, 1])?;
    let (seq, layout) = patch_partition(&image, d.patch)?;
    let s0 = layout.patches_h;
    let mut t = seq
        .linear(
            params.get("patch_proj.weight")?,
            Some(params.get("patch_proj.bias")?),
        )?
        .reshape(&[s0, s0, d.dims[0]])?;
    for s in 0..4 {
        let (side, eff) = geo[s];
        let c = d.dims[s];
        if s > 0 {
            let prev_side = geo[s - 1].0;
            let merged = merge_neighborhoods(&t, prev_side, d.dims[s - 1])?;
            let normed = layer_norm_by_name(&merged, params, &format!("stage{s}.merge.ln"), 1)?;
            t = normed
                .matmul(params.get(&format!("stage{s}.merge.reduce"))?)?
                .reshape(&[side, side, c])?;
        }
        for k in 0..2 * d.pairs[s] {
            let prefix = format!("stage{s}.block{k}");
            let shift = if k % 2 == 1 && eff < side { eff / 2 } else { 0 };
            let layout = WindowLayout::new(eff, shift, side, side)?;
            let normed = layer_norm_by_name(&t, params, &format!("{prefix}.ln1"), 2)?;
            let aw = attention_weights(params, &format!("{prefix}.attn"), d.heads[s])?;
            let table = params.get(&format!("{prefix}.attn.rel_bias"))?;
            let attended =
                window_multi_head_attention(&normed, &layout, &aw, Some(table))?;
            t = t.add(&attended)?;
            let normed = layer_norm_by_name(&t, params, &format!("{prefix}.ln2"), 2)?;
            let mlp = mlp_by_name(&normed.reshape(&[side * side, c])?, params, &format!("{prefix}.mlp"))?
                .reshape(&[side, side, c])?;
            t = t.add(&mlp)?;
        }
    }
    let (s3, _) = geo[3];
    let tokens = t.reshape(&[s3 * s3, d.dims[3]])?;
    let normed = layer_norm_by_name(&tokens, params, "final_ln", 1)?;
    token_mean(&normed)?.linear(params.get("head.weight")?, Some(params.get("head.bias")?))
}

#[cfg(test)]
mod tests {
    use super::super::vit::{attention_weights, layer_norm_by_name, mlp_by_name};
    use super::super::{init_weights, token_mean, ModelSpec, Params};
    use super::{dims, merge_neighborhoods, stage_geometry};
    use crate::attention::{
        multi_head_attention_biased, patch_partition, relative_position_bias,
    };
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn stages_halve_the_feature_map() {
        let spec = ModelSpec::full(super::super::ModelFamily::Swin);
        let d = dims(&spec);
        let geo = stage_geometry(&d);
        assert_eq!(geo, [(56, 7), (28, 7), (14, 7), (7, 7)]);

        let desk = ModelSpec::desk(super::super::ModelFamily::Swin);
        let d = dims(&desk);
        assert_eq!(stage_geometry(&d), [(16, 4), (8, 4), (4, 4), (2, 2)]);
    }

    #[test]
    fn merge_groups_two_by_two_neighborhoods() {
        let tape = Tape::<f64>::new();
        // 4x4 map, 1 channel, value = 10*row + col.
        let vals: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let x = tape.leaf(&[4, 4, 1], vals, false).unwrap();
        let m = merge_neighborhoods(&x, 4, 1).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        assert_eq!(m.value()[0..4], [0.0, 1.0, 10.0, 11.0]);
        assert_eq!(m.value()[4..8], [2.0, 3.0, 12.0, 13.0]);
        assert_eq!(m.value()[8..12], [20.0, 21.0, 30.0, 31.0]);
    }

    /// With the window covering every stage's whole feature map, the
    /// windowed forward must match a plain global-attention transformer
    /// using the same weights.
    #[test]
    fn whole_map_windows_match_global_attention() {
        let spec =
            ModelSpec::swin(8, 1, [2, 2, 4, 4], [1, 1, 2, 2], [1, 1, 1, 1], 64, 2, None)
                .unwrap();
        let d = dims(&spec);
        let geo = stage_geometry(&d);
        assert!(geo.iter().all(|&(side, eff)| side == eff));

        let entries = init_weights(&spec, 17);
        let tape = Tape::<f64>::new();
        tape.set_recording(false);
        let params = Params::bind(&tape, &entries).unwrap();
        let x = tape
            .leaf(&[8, 8], (0..64).map(|i| ((i * 23 % 64) as f64 / 32.0) - 1.0).collect(), false)
            .unwrap();

        let windowed = super::forward(&spec, &params, &x).unwrap().value();

        // Straight-line global-attention forward on flat token lists.
        let image = x.reshape(&[8, 8, 1]).unwrap();
        let (seq, _) = patch_partition(&image, 1).unwrap();
        let mut t = seq
            .linear(
                params.get("patch_proj.weight").unwrap(),
                Some(params.get("patch_proj.bias").unwrap()),
            )
            .unwrap();
        for s in 0..4 {
            let (side, _) = geo[s];
            if s > 0 {
                let prev = geo[s - 1].0;
                let grid = t.reshape(&[prev, prev, d.dims[s - 1]]).unwrap();
                let merged = merge_neighborhoods(&grid, prev, d.dims[s - 1]).unwrap();
                let normed =
                    layer_norm_by_name(&merged, &params, &format!("stage{s}.merge.ln"), 1)
                        .unwrap();
                t = normed
                    .matmul(params.get(&format!("stage{s}.merge.reduce")).unwrap())
                    .unwrap();
            }
            for k in 0..2 {
                let prefix = format!("stage{s}.block{k}");
                let normed =
                    layer_norm_by_name(&t, &params, &format!("{prefix}.ln1"), 1).unwrap();
                let aw = attention_weights(&params, &format!("{prefix}.attn"), d.heads[s])
                    .unwrap();
                let table = params.get(&format!("{prefix}.attn.rel_bias")).unwrap();
                let biases: Vec<Tensor<f64>> = (0..d.heads[s])
                    .map(|j| {
                        let row = table.slice(0, j, 1).unwrap();
                        relative_position_bias(&row, side).unwrap()
                    })
                    .collect();
                let attended =
                    multi_head_attention_biased(&normed, &aw, None, Some(&biases)).unwrap();
                t = t.add(&attended).unwrap();
                let normed =
                    layer_norm_by_name(&t, &params, &format!("{prefix}.ln2"), 1).unwrap();
                let mlp = mlp_by_name(&normed, &params, &format!("{prefix}.mlp")).unwrap();
                t = t.add(&mlp).unwrap();
            }
        }
        let normed = layer_norm_by_name(&t, &params, "final_ln", 1).unwrap();
        let global = token_mean(&normed)
            .unwrap()
            .linear(
                params.get("head.weight").unwrap(),
                Some(params.get("head.bias").unwrap()),
            )
            .unwrap()
            .value();

        assert_eq!(windowed.len(), global.len());
        for (a, b) in windowed.iter().zip(&global) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
