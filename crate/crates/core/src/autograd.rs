//! Reverse-mode automatic differentiation on an operation tape.
//!
//! A [`Tape`] records every operation in topological order: each node holds
//! the computed output tensor plus whatever the backward rule needs (input
//! ids, saved buffers such as im2col patches or dropout masks). Calling
//! [`Tape::backward`] walks the record once in reverse, accumulating
//! gradients for every recorded value. Sharing a parameter id between many
//! operations (the weight-shared kernel network applied at every patch
//! position) therefore sums per-use gradients automatically.
//!
//! Ops cover exactly what the network needs: convolution (+ReLU), 2×2
//! average pooling, dense, ReLU, dropout, softmax cross-entropy, patch
//! extraction, reshape, axis means, and scalar glue.

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{
    col2im_add, conv_out_extent, fmt_shape, im2col_into, matmul, matmul_nt, matmul_tn,
    reduce_mean, softmax_rows, Tensor,
};
use crate::Mode;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Stream tag for dropout masks (see [`crate::rng`]).
const STREAM_DROPOUT: u64 = 0xd0;

/// Key identifying one dropout site at one training step. Masks are a pure
/// function of the key, so replaying a step reproduces them exactly.
#[derive(Debug, Clone, Copy)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer_id: u64,
    pub step: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, layer_id: u64, step: u64) -> Self {
        DropoutKey {
            seed,
            layer_id,
            step,
        }
    }

    fn stream(&self) -> SplitMix64 {
        SplitMix64::stream(self.seed, &[STREAM_DROPOUT, self.layer_id, self.step])
    }
}

/// A realized dropout mask: entries are 0 or 1, reproducible from the key.
#[derive(Debug, Clone)]
pub struct DropoutMask<T: Scalar> {
    pub keep_prob: f64,
    pub mask: Tensor<T>,
    pub key: DropoutKey,
}

/// Sample the mask for a given shape. Each element is dropped independently
/// with probability `p`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, key: DropoutKey) -> DropoutMask<T> {
    let mut rng = key.stream();
    let mask = Tensor::from_fn(shape, |_| {
        if rng.next_f64() < p {
            T::ZERO
        } else {
            T::ONE
        }
    });
    DropoutMask {
        keep_prob: 1.0 - p,
        mask,
        key,
    }
}

/// Standalone inverted dropout: train mode zeroes elements with probability
/// `p` and scales survivors by 1/(1−p); infer mode is the identity.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    key: DropoutKey,
) -> Result<Tensor<T>> {
    check_dropout_p(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let m = dropout_mask::<T>(x.shape(), p, key);
    let inv = T::from_f64(1.0 / m.keep_prob);
    Ok(x.zip_map(&m.mask, |v, keep| v * keep * inv).expect("same shape"))
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0,1), got {p}"
        )));
    }
    Ok(())
}

enum Op<T: Scalar> {
    Leaf {
        param: bool,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        relu: bool,
        /// Saved im2col lowering, [N·oh·ow, C·kh·kw].
        cols: Tensor<T>,
    },
    AvgPool2x2 {
        x: ValueId,
    },
    Dense {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Dropout {
        x: ValueId,
        mask: Tensor<T>,
        inv_keep: T,
    },
    SoftmaxXent {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    SoftmaxRows {
        x: ValueId,
    },
    NllFromProbs {
        probs: ValueId,
        labels: Vec<usize>,
    },
    ExtractPatches {
        x: ValueId,
        patch: usize,
        stride: usize,
    },
    Reshape {
        x: ValueId,
        src_shape: Vec<usize>,
    },
    MeanAxis {
        x: ValueId,
        axis: usize,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        x: ValueId,
        factor: T,
    },
    WeightedSum {
        x: ValueId,
        coeffs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros when the value did not influence the loss.
    pub fn take_or_zeros(&mut self, id: ValueId, shape: &[usize]) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Reverse-mode computation record.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tensor computed for `id`.
    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient requested).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf { param: false })
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf { param: true })
    }

    /// Valid-padding convolution with optional fused ReLU.
    ///
    /// `x` is [N,C,H,W], `w` is [K,C,kh,kw], `b` is [K]; the output is
    /// [N,K,oh,ow] with oh = ⌊(H−kh)/stride⌋+1. With `relu` off the raw
    /// pre-activation is returned (used by the logits layer).
    pub fn conv2d_relu(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        relu: bool,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let [n, c, h, wid] = xs[..] else {
            return Err(Error::Shape(format!(
                "conv2d: input must be [N,C,H,W], got {}",
                fmt_shape(&xs)
            )));
        };
        let [k, cw, kh, kw] = ws[..] else {
            return Err(Error::Shape(format!(
                "conv2d: weight must be [K,C,kh,kw], got {}",
                fmt_shape(&ws)
            )));
        };
        if cw != c {
            return Err(Error::Shape(format!(
                "conv2d: channel mismatch, input {} vs weight {}",
                fmt_shape(&xs),
                fmt_shape(&ws)
            )));
        }
        if bs != [k] {
            return Err(Error::Shape(format!(
                "conv2d: bias must be [{k}], got {}",
                fmt_shape(&bs)
            )));
        }
        if kh > h || kw > wid {
            return Err(Error::Shape(format!(
                "conv2d: kernel {}x{} exceeds input {}",
                kh, kw, fmt_shape(&xs)
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: zero stride".into()));
        }
        let oh = conv_out_extent(h, kh, stride);
        let ow = conv_out_extent(wid, kw, stride);
        let positions = oh * ow;
        let row_len = c * kh * kw;

        // Lower every item into one [N·positions, row_len] matrix.
        let mut cols = Tensor::zeros(&[n * positions, row_len]);
        {
            let src = self.value(x).data();
            let item_in = c * h * wid;
            let item_out = positions * row_len;
            parallel::for_each_chunk(cols.data_mut(), item_out, |i, chunk| {
                im2col_into(&src[i * item_in..(i + 1) * item_in], c, h, wid, kh, kw, stride, chunk);
            });
        }

        // One matmul for the whole batch: [N·positions, K].
        let w_flat = self.value(w).clone().reshaped(&[k, row_len])?;
        let pre = matmul_nt(&cols, &w_flat)?;

        // Transpose to [N,K,oh,ow], add bias, apply the activation.
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        {
            let pre_d = pre.data();
            let bias = self.value(b).data().to_vec();
            parallel::for_each_chunk(out.data_mut(), k * positions, |i, chunk| {
                let block = &pre_d[i * positions * k..(i + 1) * positions * k];
                for kk in 0..k {
                    let bk = bias[kk];
                    let dst = &mut chunk[kk * positions..(kk + 1) * positions];
                    for (pos, o) in dst.iter_mut().enumerate() {
                        let v = block[pos * k + kk] + bk;
                        *o = if relu { v.maximum(T::ZERO) } else { v };
                    }
                }
            });
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                relu,
                cols,
            },
        ))
    }

    /// Non-overlapping 2×2 window means over [N,C,H,W]; H and W must be even.
    pub fn avg_pool_2x2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::Shape(format!(
                "avg_pool_2x2: input must be [N,C,H,W], got {}",
                fmt_shape(&xs)
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool_2x2: odd spatial extent in {}",
                fmt_shape(&xs)
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let src = self.value(x).data();
        let quarter = T::from_f64(0.25);
        parallel::for_each_chunk(out.data_mut(), oh * ow, |plane, chunk| {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let p = base + 2 * oi * w + 2 * oj;
                    chunk[oi * ow + oj] =
                        (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]) * quarter;
                }
            }
        });
        Ok(self.push(out, Op::AvgPool2x2 { x }))
    }

    /// Fully connected layer: x·w + b with x [N,F], w [F,U], b [U].
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let ([_n, f], [fw, u]) = (&xs[..], &ws[..]) else {
            return Err(Error::Shape(format!(
                "dense: need x [N,F] and w [F,U], got {} and {}",
                fmt_shape(&xs),
                fmt_shape(&ws)
            )));
        };
        if f != fw {
            return Err(Error::Shape(format!(
                "dense: feature mismatch, x {} vs w {}",
                fmt_shape(&xs),
                fmt_shape(&ws)
            )));
        }
        if bs != [*u] {
            return Err(Error::Shape(format!(
                "dense: bias must be [{u}], got {}",
                fmt_shape(&bs)
            )));
        }
        let mut out = matmul(self.value(x), self.value(w))?;
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(bias.len()) {
            for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.maximum(T::ZERO));
        self.push(out, Op::Relu { x })
    }

    /// Inverted dropout. Train mode records a mask node; infer mode (or
    /// p = 0) is the identity and records nothing.
    pub fn dropout(&mut self, x: ValueId, p: f64, mode: Mode, key: DropoutKey) -> Result<ValueId> {
        check_dropout_p(p)?;
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let m = dropout_mask::<T>(self.value(x).shape(), p, key);
        let inv = T::from_f64(1.0 / m.keep_prob);
        let out = self
            .value(x)
            .zip_map(&m.mask, |v, keep| v * keep * inv)
            .expect("same shape");
        Ok(self.push(
            out,
            Op::Dropout {
                x,
                mask: m.mask,
                inv_keep: inv,
            },
        ))
    }

    /// Fused stable softmax + mean cross-entropy over a batch.
    ///
    /// Returns the scalar loss id and the softmax probabilities (rows sum
    /// to 1). The loss is the batch mean of −ln p[label].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
    ) -> Result<(ValueId, Tensor<T>)> {
        let ls = self.value(logits).shape().to_vec();
        let [n, classes] = ls[..] else {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits must be [B,C], got {}",
                fmt_shape(&ls)
            )));
        };
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!(
                "softmax_cross_entropy: label {bad} out of range [0,{classes})"
            )));
        }
        let probs = softmax_rows(self.value(logits));
        // Loss from shifted logits directly (not ln of the stored probs) to
        // stay stable for saturated rows.
        let mut total = T::ZERO;
        for (row, &y) in self.value(logits).data().chunks_exact(classes).zip(labels) {
            let mut max = row[0];
            for &v in row.iter().skip(1) {
                max = max.maximum(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            total += sum.ln() - (row[y] - max);
        }
        let loss = Tensor::scalar(total / T::from_f64(n as f64));
        let id = self.push(
            loss,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
        );
        Ok((id, probs))
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        if self.value(x).is_scalar() {
            return Err(Error::Shape("softmax_rows: scalar input".into()));
        }
        let out = softmax_rows(self.value(x));
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    /// Mean negative log of the labelled entry of a probability tensor
    /// [B,C]. Used when class probabilities are averaged before the loss.
    pub fn nll_from_probs(&mut self, probs: ValueId, labels: &[usize]) -> Result<ValueId> {
        let ps = self.value(probs).shape().to_vec();
        let [n, classes] = ps[..] else {
            return Err(Error::Shape(format!(
                "nll_from_probs: probs must be [B,C], got {}",
                fmt_shape(&ps)
            )));
        };
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "nll_from_probs: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!(
                "nll_from_probs: label {bad} out of range [0,{classes})"
            )));
        }
        let mut total = T::ZERO;
        for (row, &y) in self.value(probs).data().chunks_exact(classes).zip(labels) {
            total -= row[y].ln();
        }
        let loss = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(
            loss,
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Crop a strided grid of square patches from [B,C,S,S] images into
    /// [B, g·g, C, patch, patch], positions row-major over the grid.
    pub fn extract_patches(&mut self, x: ValueId, patch: usize, stride: usize) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::Shape(format!(
                "extract_patches: input must be [B,C,S,S], got {}",
                fmt_shape(&xs)
            )));
        };
        if stride == 0 {
            return Err(Error::Config("extract_patches: zero stride".into()));
        }
        if patch == 0 || patch > h || patch > w {
            return Err(Error::Shape(format!(
                "extract_patches: patch {patch} infeasible for input {}",
                fmt_shape(&xs)
            )));
        }
        let gh = conv_out_extent(h, patch, stride);
        let gw = conv_out_extent(w, patch, stride);
        let positions = gh * gw;
        let mut out = Tensor::zeros(&[n, positions, c, patch, patch]);
        let src = self.value(x).data();
        let item_in = c * h * w;
        let item_out = positions * c * patch * patch;
        parallel::for_each_chunk(out.data_mut(), item_out, |i, chunk| {
            let img = &src[i * item_in..(i + 1) * item_in];
            let mut cursor = 0;
            for gi in 0..gh {
                for gj in 0..gw {
                    let (i0, j0) = (gi * stride, gj * stride);
                    for ch in 0..c {
                        let plane = &img[ch * h * w..(ch + 1) * h * w];
                        for u in 0..patch {
                            let line = &plane[(i0 + u) * w + j0..(i0 + u) * w + j0 + patch];
                            chunk[cursor..cursor + patch].copy_from_slice(line);
                            cursor += patch;
                        }
                    }
                }
            }
        });
        Ok(self.push(out, Op::ExtractPatches { x, patch, stride }))
    }

    /// View the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let src_shape = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x, src_shape }))
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let out = reduce_mean(self.value(x), axis)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: ValueId, factor: T) -> ValueId {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Scalar projection Σᵢ xᵢ·cᵢ; the harness for turning any op output
    /// into a checkable loss.
    pub fn weighted_sum(&mut self, x: ValueId, coeffs: Tensor<T>) -> Result<ValueId> {
        let dot = self
            .value(x)
            .zip_map(&coeffs, |a, b| a * b)?
            .data()
            .iter()
            .copied()
            .sum();
        Ok(self.push(Tensor::scalar(dot), Op::WeightedSum { x, coeffs }))
    }

    /// Reverse pass from a scalar loss. The gradient of the loss with
    /// respect to itself is 1; every recorded operation is visited exactly
    /// once in reverse order.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Config(format!(
                "backward: value {} is not on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got {}",
                fmt_shape(self.nodes[loss.0].value.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Constant leaves do not request gradients; everything else does.
    fn wants_grad(&self, id: ValueId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Leaf { param: false })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: ValueId, delta: Tensor<T>) {
        if self.wants_grad(id) {
            accumulate(grads, id, delta);
        }
    }

    fn backward_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                relu,
                cols,
            } => {
                let [n, c, h, wid] = self.value(*x).shape()[..] else {
                    unreachable!()
                };
                let [k, _, kh, kw] = self.value(*w).shape()[..] else {
                    unreachable!()
                };
                let (oh, ow) = (
                    conv_out_extent(h, kh, *stride),
                    conv_out_extent(wid, kw, *stride),
                );
                let positions = oh * ow;
                let row_len = c * kh * kw;

                // Pre-activation gradient in [N·positions, K] layout, with
                // the ReLU mask applied (output > 0 passes).
                let mut gpre = Tensor::zeros(&[n * positions, k]);
                {
                    let gy_d = gy.data();
                    let out_d = node.value.data();
                    let apply_relu = *relu;
                    parallel::for_each_chunk(gpre.data_mut(), positions * k, |item, chunk| {
                        let base = item * k * positions;
                        for kk in 0..k {
                            for pos in 0..positions {
                                let src = base + kk * positions + pos;
                                let pass = !apply_relu || out_d[src] > T::ZERO;
                                chunk[pos * k + kk] = if pass { gy_d[src] } else { T::ZERO };
                            }
                        }
                    });
                }

                // grad_w = gpreᵀ · cols, reshaped back to [K,C,kh,kw].
                let gw = matmul_tn(&gpre, cols)
                    .expect("conv2d backward gw")
                    .reshaped(&[k, c, kh, kw])
                    .expect("conv2d gw shape");
                self.accum(grads, *w, gw);

                // grad_b: column sums of gpre in row order.
                let mut gb = Tensor::zeros(&[k]);
                {
                    let gb_d = gb.data_mut();
                    for row in gpre.data().chunks_exact(k) {
                        for (acc, &v) in gb_d.iter_mut().zip(row.iter()) {
                            *acc += v;
                        }
                    }
                }
                self.accum(grads, *b, gb);

                // grad_x: push gpre through the kernel then scatter back
                // (skipped entirely for constant inputs).
                if self.wants_grad(*x) {
                    let w_flat = self
                        .value(*w)
                        .clone()
                        .reshaped(&[k, row_len])
                        .expect("conv2d w flat");
                    let gcols = matmul(&gpre, &w_flat).expect("conv2d backward gcols");
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    {
                        let gcols_d = gcols.data();
                        let item_cols = positions * row_len;
                        parallel::for_each_chunk(gx.data_mut(), c * h * wid, |item, chunk| {
                            col2im_add(
                                &gcols_d[item * item_cols..(item + 1) * item_cols],
                                c,
                                h,
                                wid,
                                kh,
                                kw,
                                *stride,
                                chunk,
                            );
                        });
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::AvgPool2x2 { x } => {
                let [_, _, h, w] = self.value(*x).shape()[..] else {
                    unreachable!()
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let gy_d = gy.data();
                let quarter = T::from_f64(0.25);
                parallel::for_each_chunk(gx.data_mut(), h * w, |plane, chunk| {
                    let base = plane * oh * ow;
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let g = gy_d[base + oi * ow + oj] * quarter;
                            let p = 2 * oi * w + 2 * oj;
                            chunk[p] += g;
                            chunk[p + 1] += g;
                            chunk[p + w] += g;
                            chunk[p + w + 1] += g;
                        }
                    }
                });
                self.accum(grads, *x, gx);
            }
            Op::Dense { x, w, b } => {
                let gw = matmul_tn(self.value(*x), gy).expect("dense backward gw");
                self.accum(grads, *w, gw);

                let u = self.value(*b).len();
                let mut gb = Tensor::zeros(&[u]);
                for row in gy.data().chunks_exact(u) {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(row.iter()) {
                        *acc += v;
                    }
                }
                self.accum(grads, *b, gb);

                let gx = matmul_nt(gy, self.value(*w)).expect("dense backward gx");
                self.accum(grads, *x, gx);
            }
            Op::Relu { x } => {
                let gx = node
                    .value
                    .zip_map(gy, |out, g| if out > T::ZERO { g } else { T::ZERO })
                    .expect("relu backward");
                self.accum(grads, *x, gx);
            }
            Op::Dropout { x, mask, inv_keep } => {
                let inv = *inv_keep;
                let gx = gy
                    .zip_map(mask, |g, keep| g * keep * inv)
                    .expect("dropout backward");
                self.accum(grads, *x, gx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let g = gy.item();
                let classes = probs.shape()[1];
                let inv_n = T::ONE / T::from_f64(labels.len() as f64);
                let mut gl = probs.clone();
                for (row, &y) in gl.data_mut().chunks_exact_mut(classes).zip(labels.iter()) {
                    row[y] -= T::ONE;
                    for v in row.iter_mut() {
                        *v *= g * inv_n;
                    }
                }
                self.accum(grads, *logits, gl);
            }
            Op::SoftmaxRows { x } => {
                let classes = *node.value.shape().last().expect("softmax shape");
                let mut gx = node.value.clone();
                {
                    let out_d = node.value.data();
                    let gy_d = gy.data();
                    for (r, row) in gx.data_mut().chunks_exact_mut(classes).enumerate() {
                        let o = &out_d[r * classes..(r + 1) * classes];
                        let g = &gy_d[r * classes..(r + 1) * classes];
                        let mut dot = T::ZERO;
                        for (&gv, &ov) in g.iter().zip(o.iter()) {
                            dot += gv * ov;
                        }
                        for ((v, &gv), &ov) in row.iter_mut().zip(g.iter()).zip(o.iter()) {
                            *v = ov * (gv - dot);
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::NllFromProbs { probs, labels } => {
                let g = gy.item();
                let p = self.value(*probs);
                let classes = p.shape()[1];
                let inv_n = T::ONE / T::from_f64(labels.len() as f64);
                let mut gp = Tensor::zeros(p.shape());
                for (b, &y) in labels.iter().enumerate() {
                    gp.data_mut()[b * classes + y] = -g * inv_n / p.data()[b * classes + y];
                }
                self.accum(grads, *probs, gp);
            }
            Op::ExtractPatches { x, patch, stride } => {
                if !self.wants_grad(*x) {
                    return;
                }
                let [_, c, h, w] = self.value(*x).shape()[..] else {
                    unreachable!()
                };
                let gh = conv_out_extent(h, *patch, *stride);
                let gw_ = conv_out_extent(w, *patch, *stride);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let gy_d = gy.data();
                let item_out = gh * gw_ * c * patch * patch;
                parallel::for_each_chunk(gx.data_mut(), c * h * w, |item, chunk| {
                    let gpatches = &gy_d[item * item_out..(item + 1) * item_out];
                    let mut cursor = 0;
                    for gi in 0..gh {
                        for gj in 0..gw_ {
                            let (i0, j0) = (gi * stride, gj * stride);
                            for ch in 0..c {
                                for u in 0..*patch {
                                    let base = ch * h * w + (i0 + u) * w + j0;
                                    for v in 0..*patch {
                                        chunk[base + v] += gpatches[cursor];
                                        cursor += 1;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *x, gx);
            }
            Op::Reshape { x, src_shape } => {
                let gx = gy
                    .clone()
                    .reshaped(src_shape)
                    .expect("reshape backward");
                self.accum(grads, *x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let inv = T::ONE / T::from_f64(n as f64);
                let mut gx = Tensor::zeros(shape);
                let gy_d = gy.data();
                {
                    let gx_d = gx.data_mut();
                    for o in 0..outer {
                        for d in 0..n {
                            let dst = (o * n + d) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gx_d[dst + i] = gy_d[src + i] * inv;
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accum(grads, *x, gy.map(|g| g * f));
            }
            Op::WeightedSum { x, coeffs } => {
                let g = gy.item();
                self.accum(grads, *x, coeffs.map(|c| c * g));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ValueId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .add_scaled(&delta, T::ONE)
            .expect("gradient shape mismatch"),
        slot @ None => *slot = Some(delta),
    }
}
