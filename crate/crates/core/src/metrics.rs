//! Image quality metrics.

use crate::error::Result;
use crate::image::Image;
use crate::losses::photometric_terms;

pub use crate::ssim::ssim_index;

/// Value reported for identical images, and the ceiling for all others.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let (_, mse) = photometric_terms(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_hits_cap() {
        let a = Image::filled(4, 4, [0.3, 0.2, 0.9]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn mse_of_one_hundredth_is_twenty_db() {
        let a = Image::filled(3, 3, [0.5; 3]);
        let b = Image::filled(3, 3, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Image::from_fn(6, 5, |_, _, _| rng.random());
        let b = Image::from_fn(6, 5, |_, _, _| rng.random());
        let mut sq = 0.0;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            sq += (x - y) * (x - y);
        }
        let expected = 10.0 * (1.0 / (sq / 90.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!(psnr(&a, &Image::zeros(5, 6)).is_err());
    }
}
