use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};

use super::{one_hot, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), offset, detail: detail.into() }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(format_err(path, bytes.len() as u64, "truncated header"));
    }
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(format_err(path, 0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    Ok((0..dims).map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize).collect())
}

/// Reads an IDX image file and its label file.
pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = fs::read(images)?;
    let dims = header(images, &img, IMAGE_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = n.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| format_err(images, 4, "image extents overflow"))?;
    if img.len() - 16 != pixels {
        return Err(format_err(images, img.len() as u64, format!("expected {pixels} pixel bytes after the header, found {}", img.len() - 16)));
    }
    let lab = fs::read(labels)?;
    let ln = header(labels, &lab, LABEL_MAGIC, 1)?[0];
    if ln != n {
        return Err(format_err(labels, 4, format!("label count {ln} does not match image count {n}")));
    }
    if lab.len() - 8 != n {
        return Err(format_err(labels, lab.len() as u64, format!("expected {n} label bytes, found {}", lab.len() - 8)));
    }
    let data: Vec<Real> = img[16..].iter().map(|&b| Real::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, h, w, 1], data)?;
    let labels = one_hot(&lab[8..], 10).map_err(|e| format_err(labels, 8, e.to_string()))?;
    Dataset::new(images, labels, split)
}

/// Locates the four standard MNIST files in `dir` or `dir/mnist`.
/// Returns `(train images, train labels, test images, test labels)`.
pub fn find_mnist(dir: &Path) -> Option<[PathBuf; 4]> {
    const NAMES: [&str; 4] = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    [dir.to_path_buf(), dir.join("mnist"), dir.join("MNIST").join("raw")].into_iter().find_map(|base| {
        let paths = NAMES.map(|n| base.join(n));
        paths.iter().all(|p| p.is_file()).then_some(paths)
    })
}
