//! Dataset loading, preprocessing and minibatch iteration.

mod augment;
mod batches;
mod cifar;
mod mnist;
mod normalize;
mod synthetic;

pub use augment::{augment, augment_image, augment_with, Crop};
pub use batches::BatchIterator;
pub use cifar::{find_cifar10, load_cifar10, CIFAR_RECORD};
pub use mnist::{find_mnist, load_mnist};
pub use normalize::Normalizer;
pub use synthetic::synthetic;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]`, NHWC, with one-hot labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Tensor,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Tensor, split: Split) -> Result<Self> {
        if images.dims().len() != 4 || labels.dims().len() != 2 || images.dims()[0] != labels.dims()[0] {
            return Err(Error::shape("dataset", format!("images {} and labels {} disagree", images.shape(), labels.shape())));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.labels.dims()[1]
    }

    /// Per-image extents `[H, W, C]`.
    pub fn image_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    /// Index of the hot entry of row `i`.
    pub fn label(&self, i: usize) -> usize {
        let k = self.classes();
        let row = &self.labels.data()[i * k..(i + 1) * k];
        row.iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    /// Copies the listed examples into a batch `(images, labels)`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let img: usize = self.image_dims().iter().product();
        let k = self.classes();
        let mut x = Vec::with_capacity(indices.len() * img);
        let mut y = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("example index {i} out of range for {} examples", self.len())));
            }
            x.extend_from_slice(&self.images.data()[i * img..(i + 1) * img]);
            y.extend_from_slice(&self.labels.data()[i * k..(i + 1) * k]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.image_dims());
        Ok((Tensor::new(dims, x)?, Tensor::new(vec![indices.len(), k], y)?))
    }

    /// The first `n` examples.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Dataset::new(images, labels, self.split)
    }
}

/// Row-wise one-hot encoding.
pub fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0 as Real; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}
