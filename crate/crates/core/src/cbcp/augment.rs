//! Visual augmentation of pasted patches: random intensity scaling followed by Gaussian blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Raster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Multiplicative intensity factor range `[low, high]`, `0 < low <= high`.
    pub intensity_scale_range: [f64; 2],
    /// Gaussian sigma range in pixels, `0 <= low <= high`. Sigma 0 disables blurring.
    pub blur_sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            intensity_scale_range: [0.8, 1.2],
            blur_sigma_range: [0.0, 1.5],
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let [s_lo, s_hi] = self.intensity_scale_range;
        let [b_lo, b_hi] = self.blur_sigma_range;
        let finite = [s_lo, s_hi, b_lo, b_hi].iter().all(|v| v.is_finite());
        if !finite || s_lo <= 0.0 || s_lo > s_hi || b_lo < 0.0 || b_lo > b_hi {
            return Err(Error::Config(format!(
                "invalid augmentation ranges: scale {:?}, sigma {:?}",
                self.intensity_scale_range, self.blur_sigma_range
            )));
        }
        Ok(())
    }
}

/// Reflect an out-of-range index back into `0..n` (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur over interleaved RGB planes stored as `f64`.
fn blur_in_place(values: &mut [f64], width: usize, height: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - radius, width);
                    acc += w * values[(y * width + sx) * 3 + c];
                }
                tmp[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - radius, height);
                    acc += w * tmp[(sy * width + x) * 3 + c];
                }
                values[(y * width + x) * 3 + c] = acc;
            }
        }
    }
}

/// Scale intensities by `scale`, clamp to `[0, 255]`, then blur with `sigma`.
pub fn scale_and_blur(patch: &Raster, scale: f64, sigma: f64) -> Raster {
    let mut values: Vec<f64> = patch
        .data()
        .iter()
        .map(|&v| (v as f64 * scale).clamp(0.0, 255.0))
        .collect();
    if sigma > 0.0 {
        blur_in_place(&mut values, patch.width() as usize, patch.height() as usize, sigma);
    }
    let data = values.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Raster::new(patch.width(), patch.height(), data).expect("dimensions preserved")
}

/// Draw a scale and sigma from the parameter ranges and apply them.
pub fn augment_patch_with<R: Rng + ?Sized>(patch: &Raster, params: &AugmentParams, rng: &mut R) -> Raster {
    let [s_lo, s_hi] = params.intensity_scale_range;
    let [b_lo, b_hi] = params.blur_sigma_range;
    let scale = rng.gen_range(s_lo..=s_hi);
    let sigma = rng.gen_range(b_lo..=b_hi);
    scale_and_blur(patch, scale, sigma)
}

/// Augment with a generator seeded from `params.seed`.
pub fn augment_patch(patch: &Raster, params: &AugmentParams) -> Result<Raster> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    Ok(augment_patch_with(patch, params, &mut rng))
}
