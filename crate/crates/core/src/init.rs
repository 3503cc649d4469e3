//! Orthonormal weight initialization.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

const STREAM_INIT: u64 = 0x1a;

/// Orthonormal initialization for a weight tensor of rank ≥ 2.
///
/// The tensor is viewed as a 2-D matrix [rows = first extent, cols = product
/// of the rest]; a standard-normal draw is orthogonalized (modified
/// Gram–Schmidt, two passes) so that the vectors along the smaller dimension
/// are orthonormal, then reshaped back. Gain is 1. The draw and the result
/// are a pure function of the seed. Bias vectors are zero-initialized
/// elsewhere; rank < 2 is an error here.
pub fn orthonormal_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    if shape.len() < 2 {
        return Err(Error::Config(format!(
            "orthonormal_init: rank must be >= 2, got shape {}",
            fmt_shape(shape)
        )));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mut rng = SplitMix64::stream(seed, &[STREAM_INIT]);

    // Work on the side with the fewer vectors so they can all be orthonormal.
    let (vecs, dim, transposed) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut m = vec![0.0f64; vecs * dim];
    // Draw in matrix order [rows, cols] so the stream layout is independent
    // of which side gets orthogonalized.
    if transposed {
        for c in 0..dim {
            for r in 0..vecs {
                m[r * dim + c] = rng.next_normal();
            }
        }
    } else {
        for v in m.iter_mut() {
            *v = rng.next_normal();
        }
    }
    gram_schmidt(&mut m, vecs, dim, &mut rng);

    let mut out = vec![0.0f64; rows * cols];
    if transposed {
        for r in 0..vecs {
            for c in 0..dim {
                out[c * cols + r] = m[r * dim + c];
            }
        }
    } else {
        out.copy_from_slice(&m);
    }
    let data = out.into_iter().map(T::from_f64).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Modified Gram–Schmidt with a second orthogonalization pass. `m` holds
/// `vecs` row vectors of length `dim`, vecs ≤ dim.
fn gram_schmidt(m: &mut [f64], vecs: usize, dim: usize, rng: &mut SplitMix64) {
    for i in 0..vecs {
        loop {
            for _pass in 0..2 {
                for j in 0..i {
                    let mut dot = 0.0;
                    for d in 0..dim {
                        dot += m[i * dim + d] * m[j * dim + d];
                    }
                    for d in 0..dim {
                        m[i * dim + d] -= dot * m[j * dim + d];
                    }
                }
            }
            let norm: f64 = m[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for d in 0..dim {
                    m[i * dim + d] /= norm;
                }
                break;
            }
            // Degenerate draw: replace the row and try again.
            for d in 0..dim {
                m[i * dim + d] = rng.next_normal();
            }
        }
    }
}
