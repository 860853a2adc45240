use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{one_hot, Dataset, Split};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A learnable stand-in dataset: each class owns a random prototype image and
/// examples blend it with uniform noise. Prototypes depend on `seed` only, so
/// train and test splits drawn with the same seed share them.
pub fn synthetic(n: usize, dims: [usize; 3], classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    let img: usize = dims.iter().product();
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Vec<Real>> = (0..classes).map(|_| (0..img).map(|_| proto_rng.gen::<Real>()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let mut pixels = Vec::with_capacity(n * img);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..classes);
        labels.push(k as u8);
        pixels.extend(protos[k].iter().map(|&p| 0.6 * p + 0.4 * rng.gen::<Real>()));
    }
    let mut shape = vec![n];
    shape.extend(dims);
    Dataset::new(Tensor::new(shape, pixels)?, one_hot(&labels, classes)?, split)
}
