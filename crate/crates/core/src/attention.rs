//! Attention primitives shared by the transformer regressors: scaled
//! dot-product and multi-head attention, sinusoidal position encodings,
//! patch embedding, and shifted-window partitioning with its masks.
//!
//! Everything here builds on [`crate::tensor`] ops, so every operation is
//! differentiable end to end.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Additive logit penalty for masked key positions. Large enough that the
/// corresponding softmax weight underflows to zero at 32-bit.
pub const MASK_VALUE: f64 = -1e9;

/// Scaled dot-product attention over row-stacked queries, keys, and values.
///
/// `q` is `[n, d_k]`, `k` is `[m, d_k]`, `v` is `[m, d_v]`, and `mask`, when
/// present, is `[n, m]` and is added to the logits before the softmax
/// (use `0` to pass and [`MASK_VALUE`] to block a pair). Returns the
/// attended output `[n, d_v]` together with the row-stochastic weight
/// matrix `[n, m]`.
pub fn scaled_dot_product_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    for (name, t) in [("query", q), ("key", k), ("value", v)] {
        if t.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "scaled_dot_product_attention: {name} must be rank 2, got {:?}",
                t.shape()
            )));
        }
    }
    if q.shape()[1] != k.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (n, m) = (q.shape()[0], k.shape()[0]);
    let d_k = q.shape()[1];
    let mut logits = q
        .matmul(&k.transpose(&[1, 0])?)?
        .scale(1.0 / (d_k as f64).sqrt())?;
    if let Some(mk) = mask {
        if mk.shape() != [n, m] {
            return Err(Error::ShapeMismatch {
                op: "scaled_dot_product_attention",
                lhs: vec![n, m],
                rhs: mk.shape().to_vec(),
            });
        }
        logits = logits.add(mk)?;
    }
    let weights = logits.softmax(1)?;
    let output = weights.matmul(v)?;
    Ok((output, weights))
}

/// Per-head query/key/value projections, each `[d_model, d_k or d_v]`.
#[derive(Clone)]
pub struct HeadWeights<T: Element> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

/// Projections for multi-head attention: one [`HeadWeights`] per head plus
/// the output projection `[h·d_v, d_out]` applied to the concatenated heads.
#[derive(Clone)]
pub struct AttentionWeights<T: Element> {
    heads: Vec<HeadWeights<T>>,
    output: Tensor<T>,
}

impl<T: Element> AttentionWeights<T> {
    pub fn new(heads: Vec<HeadWeights<T>>, output: Tensor<T>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::invalid(
                "multi-head attention needs at least one head",
            ));
        }
        for (i, h) in heads.iter().enumerate() {
            for (name, w) in [("query", &h.query), ("key", &h.key), ("value", &h.value)] {
                if w.shape().len() != 2 {
                    return Err(Error::invalid(format!(
                        "head {i} {name} projection must be rank 2, got {:?}",
                        w.shape()
                    )));
                }
            }
        }
        let d_model = heads[0].query.shape()[0];
        let d_k = heads[0].query.shape()[1];
        let d_v = heads[0].value.shape()[1];
        for (i, h) in heads.iter().enumerate() {
            if h.query.shape() != [d_model, d_k] {
                return Err(Error::invalid(format!(
                    "head {i} query projection is {:?}, expected [{d_model}, {d_k}]",
                    h.query.shape()
                )));
            }
            if h.key.shape() != [d_model, d_k] {
                return Err(Error::invalid(format!(
                    "head {i} key projection is {:?}, expected [{d_model}, {d_k}]",
                    h.key.shape()
                )));
            }
            if h.value.shape() != [d_model, d_v] {
                return Err(Error::invalid(format!(
                    "head {i} value projection is {:?}, expected [{d_model}, {d_v}]",
                    h.value.shape()
                )));
            }
        }
        let rows = heads.len() * d_v;
        if output.shape().len() != 2 || output.shape()[0] != rows {
            return Err(Error::invalid(format!(
                "output projection is {:?}, expected [{rows}, d_out]",
                output.shape()
            )));
        }
        Ok(Self { heads, output })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].query.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].query.shape()[1]
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.output.shape()[1]
    }

    pub fn heads(&self) -> &[HeadWeights<T>] {
        &self.heads
    }

    pub fn output_projection(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn param_count(&self) -> usize {
        let per_head: usize = self
            .heads
            .iter()
            .map(|h| h.query.numel() + h.key.numel() + h.value.numel())
            .sum();
        per_head + self.output.numel()
    }
}

/// Multi-head self-attention: project `x` (`[n, d_model]`) to per-head
/// queries/keys/values, attend per head, concatenate the head outputs, and
/// apply the output projection. `mask` (`[n, n]`) is shared by all heads.
pub fn multi_head_attention<T: Element>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    multi_head_attention_biased(x, weights, mask, None)
}

/// [`multi_head_attention`] with an extra additive per-head logit bias
/// (`head_bias[i]` is `[n, n]`), used by windowed attention for its
/// relative-position term.
pub fn multi_head_attention_biased<T: Element>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    mask: Option<&Tensor<T>>,
    head_bias: Option<&[Tensor<T>]>,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "multi_head_attention: input must be rank 2, got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if x.shape()[1] != weights.d_model() {
        return Err(Error::invalid(format!(
            "multi_head_attention: input width {} does not match query projection rows {}",
            x.shape()[1],
            weights.d_model()
        )));
    }
    if let Some(biases) = head_bias {
        if biases.len() != weights.n_heads() {
            return Err(Error::invalid(format!(
                "multi_head_attention: {} head biases for {} heads",
                biases.len(),
                weights.n_heads()
            )));
        }
    }
    let mut head_outputs = Vec::with_capacity(weights.n_heads());
    for (i, head) in weights.heads.iter().enumerate() {
        let q = x.matmul(&head.query)?;
        let k = x.matmul(&head.key)?;
        let v = x.matmul(&head.value)?;
        let bias = head_bias.map(|b| &b[i]);
        let additive = match (mask, bias) {
            (Some(m), Some(b)) => Some(m.add(b)?),
            (Some(m), None) => Some(m.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        };
        if let Some(a) = &additive {
            if a.shape() != [n, n] {
                return Err(Error::ShapeMismatch {
                    op: "multi_head_attention",
                    lhs: vec![n, n],
                    rhs: a.shape().to_vec(),
                });
            }
        }
        let (out, _) = scaled_dot_product_attention(&q, &k, &v, additive.as_ref())?;
        head_outputs.push(out);
    }
    let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
    let concat = Tensor::concat(&refs, 1)?;
    concat.matmul(&weights.output)
}

/// Shape of a sinusoidal position-encoding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PEConfig {
    pub n_positions: usize,
    pub d_m: usize,
}

impl PEConfig {
    pub fn new(n_positions: usize, d_m: usize) -> Result<Self> {
        if n_positions == 0 {
            return Err(Error::invalid("position encoding needs n_positions >= 1"));
        }
        if d_m < 2 || d_m % 2 != 0 {
            return Err(Error::invalid(format!(
                "position encoding dimension must be even and >= 2, got {d_m}"
            )));
        }
        Ok(Self { n_positions, d_m })
    }
}

/// Sinusoidal position encodings, row-major `n_positions × d_m`:
/// entry `(pos, j)` is `sin(pos / 10000^(j/d_m))` for even `j` and
/// `cos(pos / 10000^((j−1)/d_m))` for odd `j`.
pub fn positional_encoding(cfg: &PEConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.n_positions * cfg.d_m);
    for pos in 0..cfg.n_positions {
        for j in 0..cfg.d_m {
            let even_j = j - j % 2;
            let angle = pos as f64 / 10000f64.powf(even_j as f64 / cfg.d_m as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// How an image was cut into square patches, including any zero padding
/// applied to make the sides divisible by the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub patches_h: usize,
    pub patches_w: usize,
}

impl PatchLayout {
    pub fn n_patches(&self) -> usize {
        self.patches_h * self.patches_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Cut an `[H, W, C]` image into non-overlapping `patch × patch` squares,
/// zero-padding the bottom and right edges when the sides do not divide.
///
/// Returns `[n_patches, patch·patch·C]` with patches in row-major order and
/// each patch flattened in (row, col, channel) order.
pub fn patch_partition<T: Element>(
    x: &Tensor<T>,
    patch: usize,
) -> Result<(Tensor<T>, PatchLayout)> {
    if x.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "patch_partition: input must be [H, W, C], got {:?}",
            x.shape()
        )));
    }
    if patch == 0 {
        return Err(Error::invalid("patch_partition: patch size must be >= 1"));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ph = h.div_ceil(patch) * patch;
    let pw = w.div_ceil(patch) * patch;
    let mut t = x.clone();
    if ph > h {
        let zeros = t.tape.constant(&[ph - h, w, c], vec![T::zero(); (ph - h) * w * c])?;
        t = Tensor::concat(&[&t, &zeros], 0)?;
    }
    if pw > w {
        let zeros = t
            .tape
            .constant(&[ph, pw - w, c], vec![T::zero(); ph * (pw - w) * c])?;
        t = Tensor::concat(&[&t, &zeros], 1)?;
    }
    let layout = PatchLayout {
        patch,
        channels: c,
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
        patches_h: ph / patch,
        patches_w: pw / patch,
    };
    let seq = t
        .reshape(&[layout.patches_h, patch, layout.patches_w, patch, c])?
        .transpose(&[0, 2, 1, 3, 4])?
        .reshape(&[layout.n_patches(), layout.patch_dim()])?;
    Ok((seq, layout))
}

/// Partitioning of a feature map into square attention windows, optionally
/// cyclically shifted by `(−shift, −shift)` before the cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub shift: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowLayout {
    pub fn new(window: usize, shift: usize, height: usize, width: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("window size must be >= 1"));
        }
        if height == 0 || width == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::invalid(format!(
                "feature map {height}x{width} is not divisible into {window}x{window} windows"
            )));
        }
        if shift >= window {
            return Err(Error::invalid(format!(
                "window shift {shift} must be smaller than the window size {window}"
            )));
        }
        Ok(Self {
            window,
            shift,
            height,
            width,
        })
    }

    pub fn n_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Cyclic roll along `axis`: `out[i] = x[(i + offset) mod len]`.
fn roll_axis<T: Element>(x: &Tensor<T>, axis: usize, offset: usize) -> Result<Tensor<T>> {
    let len = x.shape()[axis];
    let s = offset % len;
    if s == 0 {
        return Ok(x.clone());
    }
    let head = x.slice(axis, s, len - s)?;
    let tail = x.slice(axis, 0, s)?;
    Tensor::concat(&[&head, &tail], axis)
}

fn check_window_input<T: Element>(x: &Tensor<T>, layout: &WindowLayout) -> Result<usize> {
    if x.shape().len() != 3 || x.shape()[0] != layout.height || x.shape()[1] != layout.width {
        return Err(Error::invalid(format!(
            "window layout {}x{} does not match feature map {:?}",
            layout.height,
            layout.width,
            x.shape()
        )));
    }
    Ok(x.shape()[2])
}

/// Cut an `[H, W, C]` feature map into `[n_windows, window², C]` tokens,
/// windows in row-major order and tokens row-major within each window.
/// A non-zero `layout.shift` first rolls the map by `(−shift, −shift)`.
pub fn window_partition<T: Element>(
    x: &Tensor<T>,
    layout: &WindowLayout,
) -> Result<Tensor<T>> {
    let c = check_window_input(x, layout)?;
    let w = layout.window;
    let mut t = x.clone();
    if layout.shift > 0 {
        t = roll_axis(&t, 0, layout.shift)?;
        t = roll_axis(&t, 1, layout.shift)?;
    }
    t.reshape(&[layout.height / w, w, layout.width / w, w, c])?
        .transpose(&[0, 2, 1, 3, 4])?
        .reshape(&[layout.n_windows(), layout.tokens_per_window(), c])
}

/// Inverse of [`window_partition`]: reassemble `[n_windows, window², C]`
/// into the `[H, W, C]` map, undoing the cyclic shift when one was applied.
pub fn window_reverse<T: Element>(
    windows: &Tensor<T>,
    layout: &WindowLayout,
) -> Result<Tensor<T>> {
    let expect = [layout.n_windows(), layout.tokens_per_window()];
    if windows.shape().len() != 3
        || windows.shape()[0] != expect[0]
        || windows.shape()[1] != expect[1]
    {
        return Err(Error::invalid(format!(
            "window_reverse: expected [{}, {}, C], got {:?}",
            expect[0],
            expect[1],
            windows.shape()
        )));
    }
    let c = windows.shape()[2];
    let w = layout.window;
    let mut t = windows
        .reshape(&[layout.height / w, layout.width / w, w, w, c])?
        .transpose(&[0, 2, 1, 3, 4])?
        .reshape(&[layout.height, layout.width, c])?;
    if layout.shift > 0 {
        t = roll_axis(&t, 0, layout.height - layout.shift)?;
        t = roll_axis(&t, 1, layout.width - layout.shift)?;
    }
    Ok(t)
}

/// Additive attention masks for shifted windows, ordered like the windows
/// from [`window_partition`]; each mask is row-major `window² × window²`
/// with `0` where both tokens came from the same pre-shift window and
/// [`MASK_VALUE`] where the cyclic shift made non-neighbors share a window.
/// Returns `None` when `layout.shift` is zero (no pair needs masking).
pub fn window_attention_masks(layout: &WindowLayout) -> Option<Vec<Vec<f64>>> {
    if layout.shift == 0 {
        return None;
    }
    let (h, wd, w, s) = (layout.height, layout.width, layout.window, layout.shift);
    let windows_w = wd / w;
    let pre_shift_id = |r: usize, c: usize| (r / w) * windows_w + c / w;
    let n = layout.tokens_per_window();
    let mut masks = Vec::with_capacity(layout.n_windows());
    for wr in 0..h / w {
        for wc in 0..windows_w {
            let ids: Vec<usize> = (0..n)
                .map(|i| {
                    let r = (wr * w + i / w + s) % h;
                    let c = (wc * w + i % w + s) % wd;
                    pre_shift_id(r, c)
                })
                .collect();
            let mut mask = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if ids[i] != ids[j] {
                        mask[i * n + j] = MASK_VALUE;
                    }
                }
            }
            masks.push(mask);
        }
    }
    Some(masks)
}

/// Lookup table from token pairs to relative-offset slots: entry `(i, j)` of
/// the returned row-major `window² × window²` map indexes a
/// `(2·window − 1)²`-entry bias table by the pair's spatial offset.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / window, i % window);
        for j in 0..n {
            let (rj, cj) = (j / window, j % window);
            let dr = ri + window - 1 - rj;
            let dc = ci + window - 1 - cj;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Expand a per-head bias table of `(2·window − 1)²` learned entries into
/// the `[window², window²]` additive logit bias for one head.
pub fn relative_position_bias<T: Element>(
    table: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let span = 2 * window - 1;
    if table.numel() != span * span {
        return Err(Error::invalid(format!(
            "relative position table has {} entries, expected {}",
            table.numel(),
            span * span
        )));
    }
    let n = window * window;
    table.gather(&relative_position_index(window), &[n, n])
}

/// Windowed multi-head self-attention over an `[H, W, C]` feature map:
/// partition into (possibly shifted) windows, attend within each window with
/// shared weights, shift masks, and an optional relative-position bias table
/// (`[h, (2·window − 1)²]`), then reassemble the map.
pub fn window_multi_head_attention<T: Element>(
    x: &Tensor<T>,
    layout: &WindowLayout,
    weights: &AttentionWeights<T>,
    bias_table: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let c = check_window_input(x, layout)?;
    if c != weights.d_model() {
        return Err(Error::invalid(format!(
            "window attention: {c} channels do not match query projection rows {}",
            weights.d_model()
        )));
    }
    let n = layout.tokens_per_window();
    let span = 2 * layout.window - 1;
    let head_biases = match bias_table {
        Some(table) => {
            if table.shape() != [weights.n_heads(), span * span] {
                return Err(Error::invalid(format!(
                    "relative position table is {:?}, expected [{}, {}]",
                    table.shape(),
                    weights.n_heads(),
                    span * span
                )));
            }
            let mut biases = Vec::with_capacity(weights.n_heads());
            for h in 0..weights.n_heads() {
                let row = table.slice(0, h, 1)?;
                biases.push(relative_position_bias(&row, layout.window)?);
            }
            Some(biases)
        }
        None => None,
    };
    let masks = window_attention_masks(layout);
    let windows = window_partition(x, layout)?;
    let mut outputs = Vec::with_capacity(layout.n_windows());
    for wi in 0..layout.n_windows() {
        let tokens = windows.slice(0, wi, 1)?.reshape(&[n, c])?;
        let mask = match &masks {
            Some(all) => {
                let data: Vec<T> = all[wi].iter().map(|&v| T::from_f64(v)).collect();
                Some(x.tape.constant(&[n, n], data)?)
            }
            None => None,
        };
        let out = multi_head_attention_biased(
            &tokens,
            weights,
            mask.as_ref(),
            head_biases.as_deref(),
        )?;
        outputs.push(out.reshape(&[1, n, weights.d_out()])?);
    }
    let refs: Vec<&Tensor<T>> = outputs.iter().collect();
    window_reverse(&Tensor::concat(&refs, 0)?, layout)
}
