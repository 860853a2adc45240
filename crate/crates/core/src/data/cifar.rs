use std::fs;
use std::path::{Path, PathBuf};

use super::{one_hot, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
/// Bytes per record: one label byte and three colour planes.
pub const CIFAR_RECORD: usize = 1 + 3 * PLANE;

/// Reads CIFAR-10 binary batch files, in order, into one NHWC dataset.
pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels: Vec<Real> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: whole,
                detail: format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        pixels.reserve(bytes.len() / CIFAR_RECORD * 3 * PLANE);
        for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: (k * CIFAR_RECORD) as u64,
                    detail: format!("label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0]);
            let planes = &rec[1..];
            for p in 0..PLANE {
                for c in 0..3 {
                    pixels.push(Real::from(planes[c * PLANE + p]) / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, SIDE, SIDE, 3], pixels)?;
    Dataset::new(images, one_hot(&labels, 10)?, split)
}

/// Locates the five training batches and the test batch in `dir`,
/// `dir/cifar-10-batches-bin` or `dir/cifar10`.
pub fn find_cifar10(dir: &Path) -> Option<(Vec<PathBuf>, PathBuf)> {
    [dir.to_path_buf(), dir.join("cifar-10-batches-bin"), dir.join("cifar10")].into_iter().find_map(|base| {
        let train: Vec<PathBuf> = (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect();
        let test = base.join("test_batch.bin");
        (train.iter().all(|p| p.is_file()) && test.is_file()).then_some((train, test))
    })
}
