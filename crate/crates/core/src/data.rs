//! In-memory dataset and deterministic batching.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

const STREAM_SHUFFLE: u64 = 0x5f;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images [N,1,S,S] scaled to [0,1] plus integer labels 0–9.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u8>, split: Split) -> Result<Self> {
        let [n, 1, s1, s2] = images.shape()[..] else {
            return Err(Error::Data(format!(
                "dataset images must be [N,1,S,S], got {}",
                fmt_shape(images.shape())
            )));
        };
        if s1 != s2 {
            return Err(Error::Data(format!(
                "dataset images must be square, got {}",
                fmt_shape(images.shape())
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 9) {
            return Err(Error::Data(format!("label {bad} out of range [0,9]")));
        }
        if images
            .data()
            .iter()
            .any(|v| !(T::ZERO..=T::ONE).contains(v) || !v.is_finite())
        {
            return Err(Error::Data("image values must lie in [0,1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// First `n` items (desk-scale subsetting).
    pub fn subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "subset of {n} from a dataset of {}",
                self.len()
            )));
        }
        let per_image = self.images.len() / self.len();
        let images = Tensor::new(
            vec![n, 1, self.image_size(), self.image_size()],
            self.images.data()[..n * per_image].to_vec(),
        )?;
        Ok(Dataset {
            images,
            labels: self.labels[..n].to_vec(),
            split: self.split,
        })
    }

    /// Copy the rows at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<u8>)> {
        let per_image = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per_image);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per_image..(i + 1) * per_image]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(
            vec![indices.len(), 1, self.image_size(), self.image_size()],
            data,
        )?;
        Ok((images, labels))
    }

    /// Shuffled index batches for one epoch; see [`batches`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        batches(self.len(), batch_size, seed, epoch)
    }
}

/// Split 0..n into mini-batches of a seeded permutation. The permutation is
/// a pure function of (seed, epoch); the final short batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batches: zero batch size".into()));
    }
    if n == 0 {
        return Err(Error::Config("batches: empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::stream(seed, &[STREAM_SHUFFLE, epoch]);
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
