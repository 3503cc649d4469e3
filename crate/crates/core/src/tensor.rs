//! Dense n-dimensional tensors with row-major layout.
//!
//! The element type is generic over [`Scalar`] (`f32` for training, `f64`
//! for verification). Element (i₀,…,i_{r−1}) of a tensor with shape
//! [d₀,…,d_{r−1}] lives at flat index Σ iₖ·strideₖ where strideₖ is the
//! product of the extents after k. Rank 0 is a scalar holding one element.
//!
//! All kernels accumulate in a fixed (row-major) order so results are
//! bit-reproducible at a given precision, independent of thread count.

use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(","))
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!(
                "zero extent in shape {}",
                fmt_shape(&shape)
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, got {}",
                fmt_shape(&shape),
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, T::ZERO)
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Build from a function of the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {} to {}",
                fmt_shape(&self.shape),
                fmt_shape(shape)
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {} vs {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// self += scale · other (shapes must match).
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "accumulate {} into {}",
                fmt_shape(&other.shape),
                fmt_shape(&self.shape)
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in self.data.iter_mut() {
            *v *= factor;
        }
    }

    /// Convert elements through f64 to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise argmax over the last axis; ties break toward the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().expect("argmax_rows on scalar");
        self.data
            .chunks_exact(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Matrix product of `a` [m,k] and `b` [k,n].
///
/// Each output row accumulates over k in index order, which matches the
/// per-element order of the naive triple loop, so the two routes agree
/// bit-for-bit at a fixed precision.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul: inner extents differ, {} x {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    parallel::for_each_chunk(out.data_mut(), n, |i, row| {
        let a_row = &av[i * ka..(i + 1) * ka];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &bv[kk * n..(kk + 1) * n];
            for (o, &bval) in row.iter_mut().zip(b_row.iter()) {
                *o += aik * bval;
            }
        }
    });
    Ok(out)
}

/// Eight-lane dot product; the fixed partial-sum tree keeps results
/// deterministic while letting the accumulators vectorize.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in ai.by_ref().zip(bi.by_ref()) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `a` [m,k] times `b` [n,k] transposed: out[i,j] = Σₖ a[i,k]·b[j,k].
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = dims2(a, "matmul_nt lhs")?;
    let (n, kb) = dims2(b, "matmul_nt rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_nt: inner extents differ, {} x {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    parallel::for_each_chunk(out.data_mut(), n, |i, row| {
        let a_row = &av[i * ka..(i + 1) * ka];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot8(a_row, &bv[j * ka..(j + 1) * ka]);
        }
    });
    Ok(out)
}

/// Accumulation chunks for [`matmul_tn`]. Fixed regardless of worker count
/// so the reduction tree, and therefore every bit of the result, does not
/// depend on the machine's parallelism.
const TN_CHUNKS: usize = 16;

/// `a` [k,m] transposed times `b` [k,n]: out[i,j] = Σₖ a[k,i]·b[k,j].
///
/// k is the large axis here (gradient reductions over batch rows), so the
/// work is split into `TN_CHUNKS` fixed k-ranges computed in parallel and
/// summed in chunk order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ka, m) = dims2(a, "matmul_tn lhs")?;
    let (kb, n) = dims2(b, "matmul_tn rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_tn: inner extents differ, {} x {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    let av = a.data();
    let bv = b.data();
    let chunks = TN_CHUNKS.min(ka);
    let per = ka.div_ceil(chunks);
    let mut partials = vec![T::ZERO; chunks * m * n];
    parallel::for_each_chunk(&mut partials, m * n, |c, partial| {
        let k_end = (c * per + per).min(ka);
        for kk in c * per..k_end {
            let a_row = &av[kk * m..(kk + 1) * m];
            let b_row = &bv[kk * n..(kk + 1) * n];
            for (i, &aki) in a_row.iter().enumerate() {
                let row = &mut partial[i * n..(i + 1) * n];
                for (o, &bval) in row.iter_mut().zip(b_row.iter()) {
                    *o += aki * bval;
                }
            }
        }
    });
    let mut out = Tensor::zeros(&[m, n]);
    for c in 0..chunks {
        let src = &partials[c * m * n..(c + 1) * m * n];
        for (o, &p) in out.data_mut().iter_mut().zip(src.iter()) {
            *o += p;
        }
    }
    Ok(out)
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!(
            "{what}: expected rank 2, got {}",
            fmt_shape(other)
        ))),
    }
}

/// Spatial extent of a valid (unpadded) convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Lower a [C,H,W] image into patch rows for matrix multiplication.
///
/// Row r of the output holds the flattened receptive field of output
/// position r: positions are row-major over the output grid; within a row
/// the layout is channel-major over (C, kh, kw). Positions are never padded.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::Shape(format!(
            "im2col: expected rank 3 [C,H,W], got {}",
            fmt_shape(x.shape())
        )));
    };
    if stride == 0 {
        return Err(Error::Config("im2col: zero stride".into()));
    }
    if kh > h || kw > w {
        return Err(Error::Shape(format!(
            "im2col: kernel {kh}x{kw} exceeds input {}",
            fmt_shape(x.shape())
        )));
    }
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let row_len = c * kh * kw;
    let mut out = vec![T::ZERO; oh * ow * row_len];
    let src = x.data();
    im2col_into(src, c, h, w, kh, kw, stride, &mut out);
    Tensor::new(vec![oh * ow, row_len], out)
}

/// im2col writing into a caller-provided buffer of length oh·ow·C·kh·kw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_into<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let row_len = c * kh * kw;
    debug_assert_eq!(out.len(), oh * ow * row_len);
    let mut cursor = 0;
    for oi in 0..oh {
        for oj in 0..ow {
            let (i0, j0) = (oi * stride, oj * stride);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                for u in 0..kh {
                    let line = &plane[(i0 + u) * w + j0..(i0 + u) * w + j0 + kw];
                    out[cursor..cursor + kw].copy_from_slice(line);
                    cursor += kw;
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients back into a [C,H,W] buffer (the adjoint
/// of [`im2col_into`]); overlapping positions accumulate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    debug_assert_eq!(cols.len(), oh * ow * c * kh * kw);
    debug_assert_eq!(out.len(), c * h * w);
    let mut cursor = 0;
    for oi in 0..oh {
        for oj in 0..ow {
            let (i0, j0) = (oi * stride, oj * stride);
            for ch in 0..c {
                for u in 0..kh {
                    let base = ch * h * w + (i0 + u) * w + j0;
                    for v in 0..kw {
                        out[base + v] += cols[cursor];
                        cursor += 1;
                    }
                }
            }
        }
    }
}

/// Arithmetic mean along one axis; the axis is removed from the shape.
pub fn reduce_mean<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "reduce_mean: axis {axis} out of range for {}",
            fmt_shape(x.shape())
        )));
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let mut out = vec![T::ZERO; outer * inner];
    let src = x.data();
    let inv = T::ONE / T::from_f64(n as f64);
    for o in 0..outer {
        let out_base = o * inner;
        for d in 0..n {
            let src_base = (o * n + d) * inner;
            for i in 0..inner {
                out[out_base + i] += src[src_base + i];
            }
        }
        for v in &mut out[out_base..out_base + inner] {
            *v *= inv;
        }
    }
    Tensor::new(out_shape, out)
}

/// Numerically stable softmax over the last axis (max subtraction per row).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = *x.shape().last().expect("softmax_rows on scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            max = max.maximum(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0f64]).is_ok());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f64 } else { 0.0 });
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 2.0);
        assert_eq!(matmul(&eye, &a).unwrap(), a);

        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0);
        let prod = matmul(&z, &b).unwrap();
        assert_eq!(prod.shape(), &[2, 4]);
        assert!(prod.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2,3]") && err.contains("[4,2]"), "{err}");
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.11).cos());
        let c = matmul(&a, &b).unwrap();

        // matmul_nt(a, bᵀ) == a·b
        let bt = Tensor::from_fn(&[4, 5], |i| {
            let (r, col) = (i / 5, i % 5);
            b.data()[col * 4 + r]
        });
        let c2 = matmul_nt(&a, &bt).unwrap();
        // matmul_tn(aᵀ, b) == a·b
        let at = Tensor::from_fn(&[5, 3], |i| {
            let (r, col) = (i / 3, i % 3);
            a.data()[col * 5 + r]
        });
        let c3 = matmul_tn(&at, &b).unwrap();
        for ((x, y), z) in c.data().iter().zip(c2.data()).zip(c3.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_full_window_is_identity_row() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let cols = im2col(&x, 4, 4, 1).unwrap();
        assert_eq!(cols.shape(), &[1, 16]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_strided_position_count() {
        let x = Tensor::<f64>::zeros(&[1, 5, 5]);
        let cols = im2col(&x, 3, 3, 2).unwrap();
        assert_eq!(cols.shape(), &[4, 9]); // floor((5-3)/2)+1 = 2 per axis
    }

    #[test]
    fn im2col_hand_example() {
        // 3x3 input 1..9, 2x2 windows, stride 1.
        let x = Tensor::from_fn(&[1, 3, 3], |i| (i + 1) as f64);
        let cols = im2col(&x, 2, 2, 1).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        assert_eq!(
            cols.data(),
            &[
                1.0, 2.0, 4.0, 5.0, //
                2.0, 3.0, 5.0, 6.0, //
                4.0, 5.0, 7.0, 8.0, //
                5.0, 6.0, 8.0, 9.0
            ]
        );
    }

    #[test]
    fn im2col_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        assert!(im2col(&x, 4, 2, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> must equal <x, col2im_add(y)> for random y.
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.7).sin());
        let cols = im2col(&x, 3, 2, 1).unwrap();
        let y = Tensor::from_fn(cols.shape(), |i| (i as f64 * 0.3).cos());
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0f64; x.len()];
        col2im_add(y.data(), 2, 5, 4, 3, 2, 1, &mut back);
        let rhs: f64 = x.data().iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn reduce_mean_hand_example() {
        let x = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let m = reduce_mean(&x, 0).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2.0, 3.0]);
    }

    #[test]
    fn reduce_mean_length_one_axis_squeezes() {
        let x = Tensor::from_fn(&[3, 1, 2], |i| i as f64);
        let m = reduce_mean(&x, 1).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn reduce_mean_constant_tensor() {
        let x = Tensor::filled(&[4, 5], 2.5f64);
        let m = reduce_mean(&x, 1).unwrap();
        assert_eq!(m.shape(), &[4]);
        assert!(m.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn reduce_mean_axis_out_of_range() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(reduce_mean(&x, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[4, 10], |i| (i as f32 * 1.3).sin() * 20.0);
        let p = softmax_rows(&x);
        for row in p.data().chunks_exact(10) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, 1.0, 0.0, 0.5, 2.0, 2.0]).unwrap();
        assert_eq!(x.argmax_rows(), vec![0, 1]);
    }
}
