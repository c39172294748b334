use rand::Rng;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    /// Zero padding added on every side before a random crop back to size.
    pub crop_pad: usize,
}

impl AugmentFlags {
    pub fn is_identity(&self) -> bool {
        !self.hflip && self.crop_pad == 0
    }
}

/// Mirrors sample `i` of an `[N, C, H, W]` tensor left to right.
pub fn hflip_sample<S: Scalar>(x: &mut Tensor<S>, i: usize) {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let base = i * c * h * w;
    for row in x.data_mut()[base..base + c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

fn crop_sample<S: Scalar>(x: &mut Tensor<S>, i: usize, pad: usize, dy: usize, dx: usize) {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let base = i * c * h * w;
    let src = x.data()[base..base + c * h * w].to_vec();
    let dst = &mut x.data_mut()[base..base + c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                // Position in the padded image is (y + dy, xx + dx).
                let sy = (y + dy).checked_sub(pad).filter(|&v| v < h);
                let sx = (xx + dx).checked_sub(pad).filter(|&v| v < w);
                dst[(ch * h + y) * w + xx] = match (sy, sx) {
                    (Some(sy), Some(sx)) => src[(ch * h + sy) * w + sx],
                    _ => S::zero(),
                };
            }
        }
    }
}

/// Random horizontal flip (p = 0.5) and pad-then-crop, per sample. Inputs
/// without spatial dimensions pass through unchanged.
pub fn augment<S: Scalar, R: Rng>(x: &mut Tensor<S>, flags: AugmentFlags, rng: &mut R) {
    if x.shape().len() != 4 || flags.is_identity() {
        return;
    }
    for i in 0..x.dim(0) {
        if flags.hflip && rng.random_bool(0.5) {
            hflip_sample(x, i);
        }
        if flags.crop_pad > 0 {
            let dy = rng.random_range(0..=2 * flags.crop_pad);
            let dx = rng.random_range(0..=2 * flags.crop_pad);
            crop_sample(x, i, flags.crop_pad, dy, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor<f64> {
        Tensor::new(&[2, 2, 3, 3], (0..36).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn flags_off_is_identity() {
        let mut x = img();
        augment(&mut x, AugmentFlags::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(x, img());
    }

    #[test]
    fn double_flip_is_identity() {
        let mut x = img();
        hflip_sample(&mut x, 1);
        assert_eq!(&x.data()[18..21], &[20.0, 19.0, 18.0]);
        hflip_sample(&mut x, 1);
        assert_eq!(x, img());
    }

    #[test]
    fn centred_crop_is_identity() {
        let mut x = img();
        crop_sample(&mut x, 0, 2, 2, 2);
        assert_eq!(x, img());
        crop_sample(&mut x, 0, 1, 0, 0);
        assert_eq!(&x.data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(x.data()[4], 0.0);
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let flags = AugmentFlags {
            hflip: true,
            crop_pad: 1,
        };
        let (mut a, mut b) = (img(), img());
        augment(&mut a, flags, &mut ChaCha8Rng::seed_from_u64(5));
        augment(&mut b, flags, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
