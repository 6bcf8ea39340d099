//! Forward and backward implementations of every tensor operation.
//!
//! Backward closures read forward values from the tape instead of capturing
//! copies; ops that need their own output (softmax) capture the output node
//! index, which is known to be the next index at creation time. Expensive
//! gradient branches are skipped when the receiving parent cannot use them.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

use super::{numel, BackFn, Element, TapeNodes, Tensor};

/// Boxes a backward closure; going through `impl Fn` pins the higher-ranked
/// signature the trait object needs.
fn back<T, F>(f: F) -> BackFn<T>
where
    T: Element,
    F: Fn(&TapeNodes<T>, &[T]) -> Vec<(usize, Vec<T>)> + 'static,
{
    Box::new(f)
}

/// Row-major strides of a shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// `(outer, len, inner)` loop bounds for iterating lanes along `axis`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Reorders `data` (shaped `shape`) so dimension `d` of the output is input
/// dimension `perm[d]`. Returns the output shape and data.
fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let istr = strides(shape);
    let map: Vec<usize> = perm.iter().map(|&d| istr[d]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += map[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= map[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    (out_shape, out)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of bounds for shape {shape:?}"
        )));
    }
    Ok(())
}

/// `C = A·B` for row-major slices with the given dimensions.
fn matmul_slices<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
) -> Vec<T> {
    let av = if transpose_a {
        ArrayView2::from_shape((k, m), a).expect("matmul lhs shape")
    } else {
        ArrayView2::from_shape((m, k), a).expect("matmul lhs shape")
    };
    let bv = if transpose_b {
        ArrayView2::from_shape((n, k), b).expect("matmul rhs shape")
    } else {
        ArrayView2::from_shape((k, n), b).expect("matmul rhs shape")
    };
    let mut out = vec![T::zero(); m * n];
    {
        let mut c = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("matmul out shape");
        match (transpose_a, transpose_b) {
            (false, false) => general_mat_mul(T::one(), &av, &bv, T::zero(), &mut c),
            (true, false) => general_mat_mul(T::one(), &av.t(), &bv, T::zero(), &mut c),
            (false, true) => general_mat_mul(T::one(), &av, &bv.t(), T::zero(), &mut c),
            (true, true) => general_mat_mul(T::one(), &av.t(), &bv.t(), T::zero(), &mut c),
        }
    }
    out
}

/// Extracts convolution patches of `x` (shaped `c×h×w`) into a
/// `(c·kh·kw) × (oh·ow)` matrix, zero-padding out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let q = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * q];
    let mut row = 0usize;
    for cc in 0..c {
        let plane = &x[cc * h * w..(cc + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * q;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[base + oy * ow + ox] = plane[src_row + ix as usize];
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto the input layout; exact adjoint of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    cols: &[T],
    gx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let q = oh * ow;
    let mut row = 0usize;
    for cc in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * q;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = cc * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = dst_row + ix as usize;
                        gx[dst] = gx[dst] + cols[base + oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.idx, other.idx);
        let value = self.tape.with_nodes(|n| {
            n.data(a).iter().zip(n.data(b)).map(|(&x, &y)| x + y).collect::<Vec<T>>()
        });
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a, b], || {
            back(move |_, g| vec![(a, g.to_vec()), (b, g.to_vec())])
        }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.idx, other.idx);
        let value = self.tape.with_nodes(|n| {
            n.data(a).iter().zip(n.data(b)).map(|(&x, &y)| x * y).collect::<Vec<T>>()
        });
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a, b], || {
            back(move |nodes, g| {
                let mut out = Vec::with_capacity(2);
                if nodes.needs_grad(a) {
                    let yb = nodes.data(b);
                    out.push((a, g.iter().zip(yb).map(|(&gi, &y)| gi * y).collect()));
                }
                if nodes.needs_grad(b) {
                    let xa = nodes.data(a);
                    out.push((b, g.iter().zip(xa).map(|(&gi, &x)| gi * x).collect()));
                }
                out
            })
        }))
    }

    /// Multiplies every element by the scalar `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        if !c.is_finite() {
            return Err(Error::invalid(format!("scale factor must be finite, got {c}")));
        }
        let a = self.idx;
        let cv = T::from_f64(c);
        let value = self
            .tape
            .with_nodes(|n| n.data(a).iter().map(|&x| x * cv).collect::<Vec<T>>());
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a], || {
            back(move |_, g: &[T]| vec![(a, g.iter().map(|&gi| gi * cv).collect())])
               
        }))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let a = self.idx;
        let value = self.tape.with_nodes(|n| n.data(a).to_vec());
        Ok(self.tape.push_op(shape.to_vec(), value, &[a], || {
            back(move |_, g: &[T]| vec![(a, g.to_vec())])
        }))
    }

    /// General axis permutation: output dimension `d` is input dimension
    /// `perm[d]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::invalid(format!(
                "transpose: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let a = self.idx;
        let shape = self.shape().to_vec();
        let perm_owned = perm.to_vec();
        let (out_shape, value) =
            self.tape.with_nodes(|n| permute_data(n.data(a), &shape, &perm_owned));
        Ok(self.tape.push_op(out_shape.clone(), value, &[a], || {
            let mut inverse = vec![0usize; perm_owned.len()];
            for (d, &p) in perm_owned.iter().enumerate() {
                inverse[p] = d;
            }
            back(move |_, g: &[T]| {
                let (_, gx) = permute_data(g, &out_shape, &inverse);
                vec![(a, gx)]
            })
        }))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no tensors given"))?;
        check_axis("concat", first.shape(), axis)?;
        let mut out_shape = first.shape().to_vec();
        let mut total = 0usize;
        for p in parts {
            first.same_tape(p)?;
            if p.shape().len() != out_shape.len()
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != out_shape[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[axis];
        }
        out_shape[axis] = total;

        let (outer, _, inner) = lane_dims(&out_shape, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let tape = first.tape.clone();
        let value = tape.with_nodes(|n| {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let mut offset = 0usize;
            for (part, &len) in idxs.iter().zip(&lens) {
                let src = n.data(*part);
                for o in 0..outer {
                    let dst_base = (o * total + offset) * inner;
                    let src_base = o * len * inner;
                    out[dst_base..dst_base + len * inner]
                        .copy_from_slice(&src[src_base..src_base + len * inner]);
                }
                offset += len;
            }
            out
        });
        let parents = idxs.clone();
        Ok(tape.push_op(out_shape, value, &parents, || {
            back(move |_, g: &[T]| {
                let mut out = Vec::with_capacity(idxs.len());
                let mut offset = 0usize;
                for (&part, &len) in idxs.iter().zip(&lens) {
                    let mut gp = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src_base = (o * total + offset) * inner;
                        let dst_base = o * len * inner;
                        gp[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g[src_base..src_base + len * inner]);
                    }
                    out.push((part, gp));
                    offset += len;
                }
                out
            })
        }))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("slice", self.shape(), axis)?;
        let full = self.shape()[axis];
        if len == 0 || start + len > full {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of length {full}",
                start + len
            )));
        }
        let (outer, _, inner) = lane_dims(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let a = self.idx;
        let value = self.tape.with_nodes(|n| {
            let src = n.data(a);
            let mut out = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src_base = (o * full + start) * inner;
                let dst_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            out
        });
        let in_len = self.numel();
        Ok(self.tape.push_op(out_shape, value, &[a], || {
            back(move |_, g: &[T]| {
                let mut gx = vec![T::zero(); in_len];
                for o in 0..outer {
                    let dst_base = (o * full + start) * inner;
                    let src_base = o * len * inner;
                    gx[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                vec![(a, gx)]
            })
        }))
    }

    /// Flat-index lookup: `out[i] = self[indices[i]]`, reshaped to `shape`.
    ///
    /// Indices address the tensor's row-major storage and may repeat; the
    /// backward pass scatter-adds into every source slot that was read.
    pub fn gather(&self, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: vec![indices.len()],
                rhs: shape.to_vec(),
            });
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of bounds for {n} elements"
            )));
        }
        let a = self.idx;
        let value = self.tape.with_nodes(|nodes| {
            let src = nodes.data(a);
            indices.iter().map(|&i| src[i]).collect::<Vec<T>>()
        });
        let idx = indices.to_vec();
        Ok(self.tape.push_op(shape.to_vec(), value, &[a], || {
            back(move |_, g: &[T]| {
                let mut gx = vec![T::zero(); n];
                for (slot, &src) in idx.iter().enumerate() {
                    gx[src] = gx[src] + g[slot];
                }
                vec![(a, gx)]
            })
        }))
    }

    /// Rectified linear unit.
    pub fn relu(&self) -> Result<Tensor<T>> {
        let a = self.idx;
        let value = self.tape.with_nodes(|n| {
            n.data(a)
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect::<Vec<T>>()
        });
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a], || {
            back(move |nodes, g| {
                let x = nodes.data(a);
                vec![(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                )]
            })
        }))
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c = T::from_f64(0.797_884_560_802_865_4);
        let k = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let a = self.idx;
        let value = self.tape.with_nodes(|n| {
            n.data(a)
                .iter()
                .map(|&x| {
                    let u = c * (x + k * x * x * x);
                    half * x * (T::one() + u.tanh())
                })
                .collect::<Vec<T>>()
        });
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a], || {
            back(move |nodes, g| {
                let x = nodes.data(a);
                let three = T::from_f64(3.0);
                vec![(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| {
                            let u = c * (xi + k * xi * xi * xi);
                            let t = u.tanh();
                            let du = c * (T::one() + three * k * xi * xi);
                            let d = half * (T::one() + t) + half * xi * (T::one() - t * t) * du;
                            gi * d
                        })
                        .collect(),
                )]
            })
        }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = lane_dims(self.shape(), axis);
        let a = self.idx;
        let value = self.tape.with_nodes(|n| {
            let x = n.data(a);
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut maxv = T::neg_infinity();
                    for l in 0..len {
                        maxv = maxv.max(x[base + l * inner]);
                    }
                    let mut sum = T::zero();
                    for l in 0..len {
                        let e = (x[base + l * inner] - maxv).exp();
                        out[base + l * inner] = e;
                        sum = sum + e;
                    }
                    for l in 0..len {
                        out[base + l * inner] = out[base + l * inner] / sum;
                    }
                }
            }
            out
        });
        let out_idx = self.tape.len();
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a], || {
            back(move |nodes, g| {
                let y = nodes.data(out_idx);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            let p = base + l * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for l in 0..len {
                            let p = base + l * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![(a, gx)]
            })
        }))
    }

    /// Layer normalization along `axis` with learned affine parameters.
    ///
    /// Mean and population variance are taken per lane; `gamma` and `beta`
    /// must be one-dimensional with the lane length.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        axis: usize,
        eps: f64,
    ) -> Result<Tensor<T>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        check_axis("layer_norm", self.shape(), axis)?;
        let (outer, len, inner) = lane_dims(self.shape(), axis);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if p.shape() != [len] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    lhs: vec![len],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::invalid(format!("layer_norm eps must be non-negative, got {eps}")));
        }
        let (a, gi_, bi_) = (self.idx, gamma.idx, beta.idx);
        let epsv = T::from_f64(eps);
        let m = T::from_f64(len as f64);
        let value = self.tape.with_nodes(|n| {
            let x = n.data(a);
            let gv = n.data(gi_);
            let bv = n.data(bi_);
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mean = T::zero();
                    for l in 0..len {
                        mean = mean + x[base + l * inner];
                    }
                    mean = mean / m;
                    let mut var = T::zero();
                    for l in 0..len {
                        let d = x[base + l * inner] - mean;
                        var = var + d * d;
                    }
                    var = var / m;
                    let inv = T::one() / (var + epsv).sqrt();
                    for l in 0..len {
                        let xhat = (x[base + l * inner] - mean) * inv;
                        out[base + l * inner] = gv[l] * xhat + bv[l];
                    }
                }
            }
            out
        });
        Ok(self
            .tape
            .push_op(self.shape().to_vec(), value, &[a, gi_, bi_], || {
                back(move |nodes, g| {
                    let x = nodes.data(a);
                    let gv = nodes.data(gi_);
                    let mut gx = vec![T::zero(); x.len()];
                    let mut ggamma = vec![T::zero(); len];
                    let mut gbeta = vec![T::zero(); len];
                    let mut xhat = vec![T::zero(); len];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut mean = T::zero();
                            for l in 0..len {
                                mean = mean + x[base + l * inner];
                            }
                            mean = mean / m;
                            let mut var = T::zero();
                            for l in 0..len {
                                let d = x[base + l * inner] - mean;
                                var = var + d * d;
                            }
                            var = var / m;
                            let inv = T::one() / (var + epsv).sqrt();
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for l in 0..len {
                                let p = base + l * inner;
                                xhat[l] = (x[p] - mean) * inv;
                                let dxhat = g[p] * gv[l];
                                s1 = s1 + dxhat;
                                s2 = s2 + dxhat * xhat[l];
                                ggamma[l] = ggamma[l] + g[p] * xhat[l];
                                gbeta[l] = gbeta[l] + g[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                let dxhat = g[p] * gv[l];
                                gx[p] = inv * (dxhat - s1 / m - xhat[l] * s2 / m);
                            }
                        }
                    }
                    vec![(a, gx), (gi_, ggamma), (bi_, gbeta)]
                })
            }))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(rhs)?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let (a, b) = (self.idx, rhs.idx);
        let value = self
            .tape
            .with_nodes(|nd| matmul_slices(nd.data(a), nd.data(b), m, k, n, false, false));
        Ok(self.tape.push_op(vec![m, n], value, &[a, b], || {
            back(move |nodes, g| {
                let mut out = Vec::with_capacity(2);
                if nodes.needs_grad(a) {
                    // dA = dC·Bᵀ
                    out.push((a, matmul_slices(g, nodes.data(b), m, n, k, false, true)));
                }
                if nodes.needs_grad(b) {
                    // dB = Aᵀ·dC
                    out.push((b, matmul_slices(nodes.data(a), g, k, m, n, true, false)));
                }
                out
            })
        }))
    }

    /// Affine map of row vectors: `x·weight + bias`.
    ///
    /// `x` is `[rows, in]`, `weight` is `[in, out]`, `bias` (optional) is
    /// `[out]` and broadcasts over rows.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.same_tape(weight)?;
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (rows, fin, fout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            self.same_tape(b)?;
            if b.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (xi, wi) = (self.idx, weight.idx);
        let bi = bias.map(|b| b.idx);
        let value = self.tape.with_nodes(|nd| {
            let mut y = matmul_slices(nd.data(xi), nd.data(wi), rows, fin, fout, false, false);
            if let Some(bi) = bi {
                let bv = nd.data(bi);
                for r in 0..rows {
                    for j in 0..fout {
                        y[r * fout + j] = y[r * fout + j] + bv[j];
                    }
                }
            }
            y
        });
        let mut parents = vec![xi, wi];
        if let Some(bi) = bi {
            parents.push(bi);
        }
        Ok(self.tape.push_op(vec![rows, fout], value, &parents, || {
            back(move |nodes, g| {
                let mut out = Vec::with_capacity(3);
                if nodes.needs_grad(xi) {
                    out.push((xi, matmul_slices(g, nodes.data(wi), rows, fout, fin, false, true)));
                }
                if nodes.needs_grad(wi) {
                    out.push((wi, matmul_slices(nodes.data(xi), g, fin, rows, fout, true, false)));
                }
                if let Some(bi) = bi {
                    if nodes.needs_grad(bi) {
                        let mut gb = vec![T::zero(); fout];
                        for r in 0..rows {
                            for j in 0..fout {
                                gb[j] = gb[j] + g[r * fout + j];
                            }
                        }
                        out.push((bi, gb));
                    }
                }
                out
            })
        }))
    }

    /// 2-D convolution over `[batch, channels, height, width]` input with
    /// `[out_channels, channels, kh, kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        self.same_tape(weight)?;
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid(format!(
                "conv2d kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}"
            )));
        }
        if let Some(b) = bias {
            self.same_tape(b)?;
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let k = c * kh * kw;
        let q = oh * ow;
        let (xi, wi) = (self.idx, weight.idx);
        let bi = bias.map(|b| b.idx);
        let value = self.tape.with_nodes(|nd| {
            let x = nd.data(xi);
            let wv = nd.data(wi);
            let mut y = vec![T::zero(); bsz * o * q];
            for bb in 0..bsz {
                let cols = im2col(&x[bb * c * h * w..], c, h, w, kh, kw, stride, padding, oh, ow);
                let yb = matmul_slices(wv, &cols, o, k, q, false, false);
                y[bb * o * q..(bb + 1) * o * q].copy_from_slice(&yb);
            }
            if let Some(bi) = bi {
                let bv = nd.data(bi);
                for bb in 0..bsz {
                    for oc in 0..o {
                        let base = (bb * o + oc) * q;
                        for p in 0..q {
                            y[base + p] = y[base + p] + bv[oc];
                        }
                    }
                }
            }
            y
        });
        let mut parents = vec![xi, wi];
        if let Some(bi) = bi {
            parents.push(bi);
        }
        Ok(self
            .tape
            .push_op(vec![bsz, o, oh, ow], value, &parents, || {
                back(move |nodes, g| {
                    let x = nodes.data(xi);
                    let wv = nodes.data(wi);
                    let need_x = nodes.needs_grad(xi);
                    let need_w = nodes.needs_grad(wi);
                    let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                    for bb in 0..bsz {
                        let gb = &g[bb * o * q..(bb + 1) * o * q];
                        if need_w {
                            let cols =
                                im2col(&x[bb * c * h * w..], c, h, w, kh, kw, stride, padding, oh, ow);
                            // dW += dY·colsᵀ
                            let part = matmul_slices(gb, &cols, o, q, k, false, true);
                            for (dst, src) in gw.iter_mut().zip(&part) {
                                *dst = *dst + *src;
                            }
                        }
                        if need_x {
                            // dcols = Wᵀ·dY, scattered back onto the input.
                            let gcols = matmul_slices(wv, gb, k, o, q, true, false);
                            col2im_add(
                                &gcols,
                                &mut gx[bb * c * h * w..(bb + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                padding,
                                oh,
                                ow,
                            );
                        }
                    }
                    let mut out = Vec::with_capacity(3);
                    if need_x {
                        out.push((xi, gx));
                    }
                    if need_w {
                        out.push((wi, gw));
                    }
                    if let Some(bi) = bi {
                        if nodes.needs_grad(bi) {
                            let mut gbias = vec![T::zero(); o];
                            for bb in 0..bsz {
                                for oc in 0..o {
                                    let base = (bb * o + oc) * q;
                                    for p in 0..q {
                                        gbias[oc] = gbias[oc] + g[base + p];
                                    }
                                }
                            }
                            out.push((bi, gbias));
                        }
                    }
                    out
                })
            }))
    }

    fn pool_pre(&self, op: &'static str, k: usize) -> Result<(usize, usize, usize, usize)> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::invalid(format!("{op} needs a rank-4 input, got {xs:?}")));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid(format!(
                "{op}: window {k} must evenly divide the {h}x{w} input"
            )));
        }
        Ok((bsz, c, h, w))
    }

    /// Non-overlapping max pooling with a `k×k` window; ties pick the first
    /// element in row-major scan order.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.pool_pre("max_pool2d", k)?;
        let (oh, ow) = (h / k, w / k);
        let a = self.idx;
        let (value, argmax) = self.tape.with_nodes(|nd| {
            let x = nd.data(a);
            let mut out = Vec::with_capacity(bsz * c * oh * ow);
            let mut arg: Vec<u32> = Vec::with_capacity(out.capacity());
            for plane in 0..bsz * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * k * w + ox * k;
                        let mut bv = x[best];
                        for dy in 0..k {
                            for dx in 0..k {
                                let p = base + (oy * k + dy) * w + ox * k + dx;
                                if x[p] > bv {
                                    bv = x[p];
                                    best = p;
                                }
                            }
                        }
                        out.push(bv);
                        arg.push(best as u32);
                    }
                }
            }
            (out, arg)
        });
        let in_len = self.numel();
        Ok(self
            .tape
            .push_op(vec![bsz, c, oh, ow], value, &[a], || {
                back(move |_, g: &[T]| {
                    let mut gx = vec![T::zero(); in_len];
                    for (gi, &src) in g.iter().zip(&argmax) {
                        gx[src as usize] = gx[src as usize] + *gi;
                    }
                    vec![(a, gx)]
                })
            }))
    }

    /// Non-overlapping average pooling with a `k×k` window.
    pub fn mean_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.pool_pre("mean_pool2d", k)?;
        let (oh, ow) = (h / k, w / k);
        let a = self.idx;
        let norm = T::from_f64(1.0 / (k * k) as f64);
        let value = self.tape.with_nodes(|nd| {
            let x = nd.data(a);
            let mut out = Vec::with_capacity(bsz * c * oh * ow);
            for plane in 0..bsz * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut sum = T::zero();
                        for dy in 0..k {
                            for dx in 0..k {
                                sum = sum + x[base + (oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        out.push(sum * norm);
                    }
                }
            }
            out
        });
        let in_len = self.numel();
        Ok(self
            .tape
            .push_op(vec![bsz, c, oh, ow], value, &[a], || {
                back(move |_, g: &[T]| {
                    let mut gx = vec![T::zero(); in_len];
                    for plane in 0..bsz * c {
                        let base = plane * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[plane * oh * ow + oy * ow + ox] * norm;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let p = base + (oy * k + dy) * w + ox * k + dx;
                                        gx[p] = gx[p] + gv;
                                    }
                                }
                            }
                        }
                    }
                    vec![(a, gx)]
                })
            }))
    }

    /// Mean squared error against `target`, returned as a scalar.
    pub fn mse_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(target)?;
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (a, b) = (self.idx, target.idx);
        let n = self.numel();
        let inv_n = T::from_f64(1.0 / n as f64);
        let value = self.tape.with_nodes(|nd| {
            let mut sum = T::zero();
            for (&p, &t) in nd.data(a).iter().zip(nd.data(b)) {
                let d = p - t;
                sum = sum + d * d;
            }
            vec![sum * inv_n]
        });
        Ok(self.tape.push_op(vec![1], value, &[a, b], || {
            back(move |nodes, g| {
                let two = T::from_f64(2.0);
                let scale = two * inv_n * g[0];
                let pd = nodes.data(a);
                let td = nodes.data(b);
                let gp: Vec<T> = pd.iter().zip(td).map(|(&p, &t)| scale * (p - t)).collect();
                let mut out = Vec::with_capacity(2);
                if nodes.needs_grad(b) {
                    out.push((b, gp.iter().map(|&v| T::zero() - v).collect()));
                }
                out.push((a, gp));
                out
            })
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let a = self.idx;
        let n = self.numel();
        let value = self.tape.with_nodes(|nd| {
            let mut sum = T::zero();
            for &v in nd.data(a) {
                sum = sum + v;
            }
            vec![sum]
        });
        Ok(self.tape.push_op(vec![1], value, &[a], || {
            back(move |_, g: &[T]| vec![(a, vec![g[0]; n])])
        }))
    }

    /// Mean over all elements, as a scalar.
    pub fn mean_all(&self) -> Result<Tensor<T>> {
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1−rate)`. The mask derives from `seed`, so a
    /// forward pass is reproducible. `rate` 0 is the identity.
    pub fn dropout(&self, rate: f64, seed: u64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut rng = stream_rng(seed, Stream::Dropout);
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let a = self.idx;
        let value = self.tape.with_nodes(|nd| {
            nd.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect::<Vec<T>>()
        });
        Ok(self.tape.push_op(self.shape().to_vec(), value, &[a], || {
            back(move |_, g: &[T]| {
                vec![(a, g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect())]
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{gradient_check, numel, Tape, Tensor};
    use crate::Result;

    /// Deterministic pseudo-random data in roughly [-1, 1].
    fn data(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let h = crate::rng::splitmix64(salt.wrapping_mul(1000).wrapping_add(i as u64));
                (h as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn check<F>(shapes: &[Vec<usize>], f: F) -> f64
    where
        F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), data(numel(s), i as u64 + 1)))
            .collect();
        gradient_check(&inputs, f).unwrap()
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn add_values_and_grads() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let b = tape.leaf(&[2], vec![10.0, 20.0], true).unwrap();
        assert_eq!(a.add(&b).unwrap().value(), vec![11.0, 22.0]);
        assert!(a.add(&tape.leaf(&[3], vec![0.0; 3], false).unwrap()).is_err());

        let err = check(&[vec![2, 3], vec![2, 3]], |_, xs| {
            xs[0].add(&xs[1])?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn mul_grads() {
        let err = check(&[vec![2, 3], vec![2, 3]], |_, xs| {
            xs[0].mul(&xs[1])?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn scale_and_reshape_grads() {
        let err = check(&[vec![2, 3]], |_, xs| {
            xs[0].scale(-2.5)?.reshape(&[3, 2])?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn transpose_roundtrip_and_grads() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        let t = x.transpose(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.value(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = t.transpose(&[1, 0]).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(x.transpose(&[0, 0]).is_err());
        assert!(x.transpose(&[0]).is_err());

        // 3-D permutation round-trip.
        let y = tape.leaf(&[2, 3, 4], (0..24).map(|v| v as f64).collect(), false).unwrap();
        let p = y.transpose(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.transpose(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), y.value());

        let err = check(&[vec![2, 3, 4]], |_, xs| {
            // Weight the elements so the permutation matters.
            let w: Vec<f64> = (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect();
            let t = xs[0].transpose(&[2, 0, 1])?;
            let wt = t.tape.constant(&[4, 2, 3], w)?;
            t.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let b = tape.leaf(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0], false).unwrap();
        let cat = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.value(), vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(cat.slice(1, 0, 2).unwrap().value(), a.value());
        assert_eq!(cat.slice(1, 2, 3).unwrap().value(), b.value());
        assert!(cat.slice(1, 4, 2).is_err());
        assert!(cat.slice(2, 0, 1).is_err());
        assert!(Tensor::concat(&[&a, &b], 0).is_err());

        let err = check(&[vec![2, 2], vec![2, 3]], |_, xs| {
            let cat = Tensor::concat(&[&xs[0], &xs[1]], 1)?;
            let w: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
            let wt = cat.tape.constant(&[2, 5], w)?;
            cat.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");

        let err = check(&[vec![3, 4]], |_, xs| {
            let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.2).collect();
            let s = xs[0].slice(1, 1, 2)?;
            let wt = s.tape.constant(&[3, 2], w)?;
            s.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gather_values_and_repeated_index_grads() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let g = x.gather(&[3, 0, 0, 2], &[4]).unwrap();
        assert_eq!(g.value(), vec![4.0, 1.0, 1.0, 3.0]);
        assert!(x.gather(&[4], &[1]).is_err());
        assert!(x.gather(&[0, 1], &[3]).is_err());

        let err = check(&[vec![5]], |_, xs| {
            let g = xs[0].gather(&[4, 1, 1, 1, 0, 3], &[2, 3])?;
            let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 2.0).collect();
            let wt = g.tape.constant(&[2, 3], w)?;
            g.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_and_gelu_grads() {
        let err = check(&[vec![7]], |_, xs| xs[0].relu()?.sum_all());
        assert!(err < TOL, "{err}");
        let err = check(&[vec![7]], |_, xs| xs[0].gelu()?.mul(&xs[0])?.sum_all());
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gelu_reference_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![-1.0, 0.0, 1.0], false).unwrap();
        let y = x.gelu().unwrap().value();
        assert!((y[0] - (-0.15880800939172324)).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.8411919906082768).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(&[2, 4], vec![0.5, -1.0, 3.0, 0.0, 10.0, 10.0, 10.0, 10.0], false)
            .unwrap();
        let y = x.softmax(1).unwrap().value();
        for row in 0..2 {
            let s: f64 = y[row * 4..(row + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!((y[4] - 0.25).abs() < 1e-12);

        // Large negative mask values do not produce NaN.
        let x = tape.leaf(&[1, 3], vec![1.0, -1e9, 2.0], false).unwrap();
        let y = x.softmax(1).unwrap().value();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(y[1] == 0.0);
    }

    #[test]
    fn softmax_grads_along_each_axis() {
        for axis in [0usize, 1] {
            let err = check(&[vec![3, 4]], |_, xs| {
                let w: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
                let s = xs[0].softmax(axis)?;
                let wt = s.tape.constant(&[3, 4], w)?;
                s.mul(&wt)?.sum_all()
            });
            assert!(err < TOL, "axis {axis}: {err}");
        }
    }

    #[test]
    fn layer_norm_normalizes_lanes() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(&[2, 5], data(10, 3), false)
            .unwrap();
        let gamma = tape.leaf(&[5], vec![1.0; 5], false).unwrap();
        let beta = tape.leaf(&[5], vec![0.0; 5], false).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1, 1e-12).unwrap().value();
        for row in 0..2 {
            let lane = &y[row * 5..(row + 1) * 5];
            let mean: f64 = lane.iter().sum::<f64>() / 5.0;
            let var: f64 = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6, "row {row} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row {row} var {var}");
        }
    }

    #[test]
    fn layer_norm_grads() {
        let err = check(&[vec![2, 5], vec![5], vec![5]], |_, xs| {
            let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
            let y = xs[0].layer_norm(&xs[1], &xs[2], 1, 1e-5)?;
            let wt = y.tape.constant(&[2, 5], w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_hand_value_and_grads() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0], false).unwrap();
        assert_eq!(a.matmul(&b).unwrap().value(), vec![19.0, 22.0, 43.0, 50.0]);
        assert!(a.matmul(&tape.leaf(&[3, 2], vec![0.0; 6], false).unwrap()).is_err());

        let err = check(&[vec![3, 4], vec![4, 2]], |_, xs| {
            let w: Vec<f64> = (0..6).map(|i| (i as f64) * 0.25 - 0.7).collect();
            let y = xs[0].matmul(&xs[1])?;
            let wt = y.tape.constant(&[3, 2], w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&[2, 3], data(6, 1), false).unwrap();
        let w = tape.leaf(&[3, 2], data(6, 2), false).unwrap();
        let b = tape.leaf(&[2], vec![0.5, -1.5], false).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap().value();
        let reference = x.matmul(&w).unwrap().value();
        for r in 0..2 {
            for j in 0..2 {
                let expect = reference[r * 2 + j] + if j == 0 { 0.5 } else { -1.5 };
                assert!((y[r * 2 + j] - expect).abs() < 1e-12);
            }
        }

        let err = check(&[vec![4, 3], vec![3, 2], vec![2]], |_, xs| {
            let w: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
            let y = xs[0].linear(&xs[1], Some(&xs[2]))?;
            let wt = y.tape.constant(&[4, 2], w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv2d_hand_value() {
        // 1×1×3×3 input, 1×1×2×2 kernel of ones: each output is the window sum.
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect(), false)
            .unwrap();
        let w = tape.leaf(&[1, 1, 2, 2], vec![1.0; 4], false).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value(), vec![12.0, 16.0, 24.0, 28.0]);

        // Same-padding keeps the spatial size.
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);

        // Stride 2 without padding halves it.
        let x4 = tape.leaf(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect(), false).unwrap();
        let y = x4.conv2d(&w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value(), vec![0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0, 8.0 + 9.0 + 12.0 + 13.0, 10.0 + 11.0 + 14.0 + 15.0]);
    }

    #[test]
    fn conv2d_grads() {
        let err = check(&[vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]], |_, xs| {
            let y = xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1)?;
            let n = numel(y.shape());
            let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let wt = y.tape.constant(y.shape(), w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");

        // Strided, unpadded variant.
        let err = check(&[vec![1, 2, 4, 4], vec![2, 2, 2, 2]], |_, xs| {
            let y = xs[0].conv2d(&xs[1], None, 2, 0)?;
            let n = numel(y.shape());
            let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).cos()).collect();
            let wt = y.tape.constant(y.shape(), w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn pooling_values_and_grads() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 8.0, 4.0], false)
            .unwrap();
        let mx = x.max_pool2d(2).unwrap();
        assert_eq!(mx.shape(), &[1, 1, 1, 2]);
        assert_eq!(mx.value(), vec![5.0, 8.0]);
        let mn = x.mean_pool2d(2).unwrap();
        assert_eq!(mn.value(), vec![2.0, 3.5]);
        assert!(x.max_pool2d(3).is_err());

        let err = check(&[vec![1, 2, 4, 4]], |_, xs| {
            let y = xs[0].max_pool2d(2)?;
            let w: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
            let wt = y.tape.constant(&[1, 2, 2, 2], w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");

        let err = check(&[vec![1, 2, 4, 4]], |_, xs| {
            let y = xs[0].mean_pool2d(2)?;
            let w: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
            let wt = y.tape.constant(&[1, 2, 2, 2], w)?;
            y.mul(&wt)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn mse_loss_value_and_grads() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(&[3], vec![1.0, 2.0, 3.0], false).unwrap();
        let t = tape.leaf(&[3], vec![0.0, 2.0, 6.0], false).unwrap();
        let loss = p.mse_loss(&t).unwrap();
        assert!((loss.item().unwrap() - (1.0 + 0.0 + 9.0) / 3.0).abs() < 1e-12);

        let err = check(&[vec![5], vec![5]], |_, xs| xs[0].mse_loss(&xs[1]));
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_masks_are_seeded() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&[100], vec![1.0; 100], false).unwrap();
        let y = x.dropout(0.0, 1).unwrap();
        assert_eq!(y.value(), x.value());

        let a = x.dropout(0.5, 7).unwrap().value();
        let b = x.dropout(0.5, 7).unwrap().value();
        let c = x.dropout(0.5, 8).unwrap().value();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Survivors are scaled by 2 and roughly half survive.
        let kept = a.iter().filter(|&&v| v != 0.0).count();
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((30..=70).contains(&kept), "{kept}");
        assert!(x.dropout(1.0, 1).is_err());

        let err = check(&[vec![6]], |_, xs| {
            xs[0].dropout(0.5, 3)?.sum_all()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn deep_chain_grad() {
        // Composite expression mixing most ops, checked end to end.
        let err = check(&[vec![2, 8], vec![8, 8], vec![8], vec![8]], |_, xs| {
            let h = xs[0].linear(&xs[1], None)?;
            let h = h.layer_norm(&xs[2], &xs[3], 1, 1e-5)?;
            let h = h.gelu()?;
            let attn = h.matmul(&h.transpose(&[1, 0])?)?.scale(0.5)?.softmax(1)?;
            let mixed = attn.matmul(&h)?;
            let pooled = mixed.reshape(&[1, 1, 4, 4])?.mean_pool2d(2)?;
            let flat = pooled.reshape(&[1, 4])?;
            let w4 = flat.tape.constant(&[4, 1], vec![0.3, -0.2, 0.8, 0.1])?;
            let out = flat.matmul(&w4)?;
            let target = out.tape.constant(&[1, 1], vec![0.25])?;
            out.mse_loss(&target)
        });
        assert!(err < TOL, "{err}");
    }
}
