//! Convolutional regressor: three same-padded 3x3 convolutions with ReLU,
//! a 2x2 max pool, one more convolution, a second pool, and a fully
//! connected layer producing the scalar range prediction.

use super::{ModelSpec, Params};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims(spec: &ModelSpec) -> (usize, [usize; 4]) {
    match *spec {
        ModelSpec::Cnn {
            input_side,
            channels,
            ..
        } => (input_side, channels),
        _ => unreachable!("cnn builder called with a non-cnn spec"),
    }
}

pub(super) fn expected_weights(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (side, ch) = dims(spec);
    let mut w = Vec::new();
    let mut in_c = 1;
    for (i, &out_c) in ch.iter().enumerate() {
        w.push((format!("conv{}.weight", i + 1), vec![out_c, in_c, 3, 3]));
        w.push((format!("conv{}.bias", i + 1), vec![out_c]));
        in_c = out_c;
    }
    let feat = ch[3] * (side / 4) * (side / 4);
    w.push(("fc.weight".into(), vec![feat, 1]));
    w.push(("fc.bias".into(), vec![1]));
    w
}

pub(super) fn forward<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (side, ch) = dims(spec);
    let batch = match x.shape() {
        [h, w] if *h == side && *w == side => 1,
        [b, h, w] if *h == side && *w == side => *b,
        other => {
            return Err(Error::invalid(format!(
                "cnn input must be [{side}, {side}] or [b, {side}, {side}], got {other:?}"
            )))
        }
    };
    let mut t = x.reshape(&[batch, 1, side, side])?;
    for i in 1..=4 {
        t = t
            .conv2d(
                params.get(&format!("conv{i}.weight"))?,
                Some(params.get(&format!("conv{i}.bias"))?),
                1,
                1,
            )?
            .relu()?;
        if i >= 3 {
            t = t.max_pool2d(2)?;
        }
    }
    let feat = ch[3] * (side / 4) * (side / 4);
    t.reshape(&[batch, feat])?
        .linear(params.get("fc.weight")?, Some(params.get("fc.bias")?))
}
