use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const PAD: usize = 4;

/// Crop offset into the zero-padded image and whether to mirror it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl Crop {
    /// The crop that reproduces the input.
    pub const CENTER: Crop = Crop { top: PAD, left: PAD, flip: false };

    pub fn sample<R: Rng>(rng: &mut R) -> Crop {
        Crop { top: rng.gen_range(0..=2 * PAD), left: rng.gen_range(0..=2 * PAD), flip: rng.gen_bool(0.5) }
    }
}

/// Pads one `H×W×C` image by four zero pixels per side, crops back to
/// `H×W` at `crop` and optionally mirrors it horizontally.
pub fn augment_image(src: &[Real], h: usize, w: usize, c: usize, crop: Crop, dst: &mut [Real]) {
    for y in 0..h {
        let sy = (y + crop.top) as isize - PAD as isize;
        for x in 0..w {
            let ox = if crop.flip { w - 1 - x } else { x };
            let sx = (ox + crop.left) as isize - PAD as isize;
            let out = &mut dst[(y * w + x) * c..(y * w + x + 1) * c];
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                out.fill(0.0);
            } else {
                let at = (sy as usize * w + sx as usize) * c;
                out.copy_from_slice(&src[at..at + c]);
            }
        }
    }
}

/// Random pad-crop-flip applied independently to every image of an NHWC batch.
pub fn augment<R: Rng>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    let crops: Vec<Crop> = (0..batch.dims().first().copied().unwrap_or(0)).map(|_| Crop::sample(rng)).collect();
    augment_with(batch, &crops)
}

pub fn augment_with(batch: &Tensor, crops: &[Crop]) -> Result<Tensor> {
    let &[n, h, w, c] = batch.dims() else {
        return Err(Error::shape("augment", format!("expected an NHWC batch, got {}", batch.shape())));
    };
    if crops.len() != n {
        return Err(Error::shape("augment", format!("{} crops for {n} images", crops.len())));
    }
    let img = h * w * c;
    let mut out = vec![0.0; batch.numel()];
    for (i, crop) in crops.iter().enumerate() {
        augment_image(&batch.data()[i * img..(i + 1) * img], h, w, c, *crop, &mut out[i * img..(i + 1) * img]);
    }
    Tensor::new(batch.dims().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize) -> Tensor {
        let numel = n * 32 * 32 * 3;
        Tensor::new(vec![n, 32, 32, 3], (0..numel).map(|i| (i % 251) as Real / 250.0).collect()).unwrap()
    }

    #[test]
    fn center_crop_without_flip_is_identity() {
        let x = ramp(2);
        let y = augment_with(&x, &[Crop::CENTER; 2]).unwrap();
        assert!(y.bits_eq(&x));
    }

    #[test]
    fn flipping_twice_restores_input() {
        let x = ramp(1);
        let flip = Crop { flip: true, ..Crop::CENTER };
        let once = augment_with(&x, &[flip]).unwrap();
        assert!(!once.bits_eq(&x));
        assert!(augment_with(&once, &[flip]).unwrap().bits_eq(&x));
    }

    #[test]
    fn corner_crop_shifts_by_pad() {
        let x = ramp(1);
        let y = augment_with(&x, &[Crop { top: 0, left: 0, flip: false }]).unwrap();
        let (xs, ys) = (x.data(), y.data());
        for r in 0..32 {
            for col in 0..32 {
                for ch in 0..3 {
                    let got = ys[(r * 32 + col) * 3 + ch];
                    let want = if r < 4 || col < 4 { 0.0 } else { xs[((r - 4) * 32 + col - 4) * 3 + ch] };
                    assert_eq!(got, want, "({r},{col},{ch})");
                }
            }
        }
    }

    #[test]
    fn random_augment_keeps_shape_and_range() {
        let x = ramp(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = augment(&x, &mut rng).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
