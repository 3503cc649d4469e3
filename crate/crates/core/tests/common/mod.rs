#![allow(dead_code)]

//! Independent oracles shared by the integration tests. Everything here is
//! written as plain loops, deliberately separate from the library's kernels.

use cnnic::data::{Dataset, Split};
use cnnic::rng::SplitMix64;
use cnnic::Tensor;

/// Naive triple-loop matrix product.
pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.data()[i * k + kk] * b.data()[kk * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// Naive valid convolution of one [C,H,W] image with [K,C,kh,kw] kernels.
pub fn naive_conv2d(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    relu: bool,
) -> Vec<f64> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; k * oh * ow];
    for kk in 0..k {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[kk];
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let x_val = x[ch * h * w + (oi * stride + u) * w + oj * stride + v];
                            let w_val =
                                weight[((kk * c + ch) * kh + u) * kw + v];
                            acc += x_val * w_val;
                        }
                    }
                }
                out[(kk * oh + oi) * ow + oj] = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    out
}

/// Naive 2x2 average pooling of a [C,H,W] buffer.
pub fn naive_pool(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let base = ch * h * w + 2 * oi * w + 2 * oj;
                out[(ch * oh + oi) * ow + oj] =
                    (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) / 4.0;
            }
        }
    }
    out
}

/// Naive dense layer for a single row.
pub fn naive_dense(x: &[f64], w: &[f64], b: &[f64], units: usize, relu: bool) -> Vec<f64> {
    let features = x.len();
    (0..units)
        .map(|u| {
            let mut acc = b[u];
            for f in 0..features {
                acc += x[f] * w[f * units + u];
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

/// Naive row softmax.
pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Slice the strided patch grid out of one [1,S,S] image by direct indexing.
pub fn naive_patches(img: &[f64], s: usize, patch: usize, stride: usize) -> Vec<Vec<f64>> {
    let g = (s - patch) / stride + 1;
    let mut out = Vec::new();
    for gi in 0..g {
        for gj in 0..g {
            let mut p = Vec::with_capacity(patch * patch);
            for u in 0..patch {
                for v in 0..patch {
                    p.push(img[(gi * stride + u) * s + gj * stride + v]);
                }
            }
            out.push(p);
        }
    }
    out
}

/// Ten-class synthetic image set: each class lights a distinct block on a
/// 2x5 grid, plus seeded noise. Linearly separable, learns fast.
pub fn synthetic_dataset(n: usize, image_size: usize, seed: u64) -> Dataset<f32> {
    let mut rng = SplitMix64::stream(seed, &[0xda7a]);
    let cell_h = image_size / 2;
    let cell_w = image_size / 5;
    let mut data = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let (row, col) = ((class / 5) as usize, (class % 5) as usize);
        for y in 0..image_size {
            for x in 0..image_size {
                let inside = y >= row * cell_h
                    && y < (row + 1) * cell_h
                    && x >= col * cell_w
                    && x < (col + 1) * cell_w;
                let template = if inside { 0.85 } else { 0.05 };
                data.push((template + 0.15 * rng.next_f64()) as f32);
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, image_size, image_size], data).unwrap();
    Dataset::new(images, labels, Split::Train).unwrap()
}
