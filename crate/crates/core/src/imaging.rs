//! Quality-degradation transforms and PSNR.
//!
//! Images are single-channel, row-major, with intensities in `[0, 1]`. Every
//! transform preserves dimensions and clips its output back into range, so
//! degraded images can always be compared pixel-for-pixel with the original.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image must have non-zero dimensions, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("scale factor must lie in (0, 1], got {0}")]
    BadFactor(f64),
    #[error("scale factor {factor} shrinks a {height}x{width} image below one pixel")]
    FactorTooSmall {
        factor: f64,
        height: usize,
        width: usize,
    },
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid transform parameter {name} = {value}")]
    BadParameter { name: &'static str, value: f64 },
}

/// Single-channel image with row-major intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, clipping every pixel into `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyImage { height, width });
        }
        if pixels.len() != height * width {
            return Err(ImageError::BufferLength {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        let pixels = pixels.into_iter().map(clip01).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self {
            height: self.height,
            width: self.width,
            pixels: pixels.into_iter().map(clip01).collect(),
        }
    }
}

fn clip01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// The three image-quality / device tiers, ordered low < medium < high.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTier {
    Low,
    Medium,
    High,
}

impl QualityTier {
    pub const ALL: [QualityTier; 3] = [QualityTier::Low, QualityTier::Medium, QualityTier::High];

    /// Position in `ALL`, handy for per-tier arrays.
    pub fn index(self) -> usize {
        match self {
            QualityTier::Low => 0,
            QualityTier::Medium => 1,
            QualityTier::High => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityTier::Low => "low",
            QualityTier::Medium => "medium",
            QualityTier::High => "high",
        }
    }
}

impl fmt::Display for QualityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Downscales by area averaging to `ceil(factor*H) x ceil(factor*W)`, then
/// upsamples back to the original size with bilinear interpolation.
pub fn downscale_upscale(img: &Image, factor: f64) -> Result<Image, ImageError> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(ImageError::BadFactor(factor));
    }
    if factor * (img.height.min(img.width) as f64) < 1.0 {
        return Err(ImageError::FactorTooSmall {
            factor,
            height: img.height,
            width: img.width,
        });
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let small_h = (factor * img.height as f64).ceil() as usize;
    let small_w = (factor * img.width as f64).ceil() as usize;

    let down_rows = area_weights(img.height, small_h);
    let down_cols = area_weights(img.width, small_w);
    let small = separable(&img.pixels, img.height, img.width, &down_rows, &down_cols);

    let up_rows = bilinear_weights(small_h, img.height);
    let up_cols = bilinear_weights(small_w, img.width);
    let restored = separable(&small, small_h, small_w, &up_rows, &up_cols);
    Ok(img.with_pixels(restored))
}

/// Sparse 1-D resampling matrix: for each output index, `(input, weight)` taps.
type Taps = Vec<Vec<(usize, f64)>>;

fn area_weights(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter().map(|&(i, w)| (i, w / total)).collect()
        })
        .collect()
}

// half-pixel centres, edge clamped
fn bilinear_weights(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            if i0 == i1 || t == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

/// Applies `rows` along the vertical axis and `cols` along the horizontal one.
fn separable(src: &[f64], h: usize, w: usize, rows: &Taps, cols: &Taps) -> Vec<f64> {
    let out_w = cols.len();
    let mut horizontal = vec![0.0; h * out_w];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for (c, taps) in cols.iter().enumerate() {
            horizontal[r * out_w + c] = taps.iter().map(|&(i, wt)| line[i] * wt).sum();
        }
    }
    let out_h = rows.len();
    let mut out = vec![0.0; out_h * out_w];
    for (r, taps) in rows.iter().enumerate() {
        for c in 0..out_w {
            out[r * out_w + c] = taps
                .iter()
                .map(|&(i, wt)| horizontal[i * out_w + c] * wt)
                .sum();
        }
    }
    out
}

/// Unnormalised Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur; taps falling outside the image are dropped and the
/// remaining weights renormalised.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image, ImageError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ImageError::BadParameter {
            name: "sigma",
            value: sigma,
        });
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let rows = blur_taps(img.height, &kernel);
    let cols = blur_taps(img.width, &kernel);
    Ok(img.with_pixels(separable(&img.pixels, img.height, img.width, &rows, &cols)))
}

fn blur_taps(n: usize, kernel: &[f64]) -> Taps {
    let radius = (kernel.len() / 2) as i64;
    (0..n as i64)
        .map(|o| {
            let taps: Vec<(usize, f64)> = (-radius..=radius)
                .filter_map(|k| {
                    let i = o + k;
                    (i >= 0 && i < n as i64).then(|| (i as usize, kernel[(k + radius) as usize]))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect()
}

const BLOCK: usize = 4;

/// Orthonormal 4-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut basis = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in basis.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
        }
    }
    basis
}

/// JPEG-like block artifacts: 4x4 orthonormal DCT, uniform quantisation of
/// every coefficient with `quant_step` (ties to even), inverse DCT, clip.
/// Partial edge blocks are padded by edge replication and the padding is
/// discarded after the inverse.
pub fn compression_artifacts(img: &Image, quant_step: f64) -> Result<Image, ImageError> {
    if !(quant_step > 0.0) || !quant_step.is_finite() {
        return Err(ImageError::BadParameter {
            name: "quant_step",
            value: quant_step,
        });
    }
    let basis = dct_basis();
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let mut block = [[0.0; BLOCK]; BLOCK];
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = img.get((by + i).min(h - 1), (bx + j).min(w - 1));
                }
            }
            let mut coeffs = transform(&basis, &block, false);
            for row in coeffs.iter_mut() {
                for c in row.iter_mut() {
                    *c = (*c / quant_step).round_ties_even() * quant_step;
                }
            }
            let restored = transform(&basis, &coeffs, true);
            for (i, row) in restored.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if by + i < h && bx + j < w {
                        out[(by + i) * w + bx + j] = *v;
                    }
                }
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Forward: `B X B^T`; inverse: `B^T X B`.
fn transform(
    basis: &[[f64; BLOCK]; BLOCK],
    x: &[[f64; BLOCK]; BLOCK],
    inverse: bool,
) -> [[f64; BLOCK]; BLOCK] {
    let b = |r: usize, c: usize| if inverse { basis[c][r] } else { basis[r][c] };
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            tmp[r][c] = (0..BLOCK).map(|k| b(r, k) * x[k][c]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            out[r][c] = (0..BLOCK).map(|k| tmp[r][k] * b(c, k)).sum();
        }
    }
    out
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel, then clips.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    img: &Image,
    sigma: f64,
    rng: &mut R,
) -> Result<Image, ImageError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ImageError::BadParameter {
            name: "sigma",
            value: sigma,
        });
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let noisy = img
        .pixels
        .iter()
        .map(|&p| {
            let z: f64 = rng.sample(StandardNormal);
            p + sigma * z
        })
        .collect();
    Ok(img.with_pixels(noisy))
}

/// Parameters of the per-tier degradation pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityTransforms {
    pub low_scale: f64,
    pub low_blur: f64,
    pub low_quant_step: f64,
    pub low_noise: f64,
    pub medium_scale: f64,
    pub medium_blur: f64,
    pub medium_noise: f64,
    /// Optional noise for the high tier. Zero keeps the high tier pristine.
    pub high_noise: f64,
}

impl Default for QualityTransforms {
    fn default() -> Self {
        Self {
            low_scale: 0.25,
            low_blur: 1.5,
            low_quant_step: 0.5,
            low_noise: 0.15,
            medium_scale: 0.5,
            medium_blur: 0.8,
            medium_noise: 0.08,
            high_noise: 0.0,
        }
    }
}

impl QualityTransforms {
    /// Degrades a pristine image to `tier` quality.
    ///
    /// low: rescale, blur, block compression, noise.
    /// medium: rescale, blur, noise.
    /// high: identity (plus `high_noise` if configured).
    pub fn degrade<R: Rng + ?Sized>(
        &self,
        img: &Image,
        tier: QualityTier,
        rng: &mut R,
    ) -> Result<Image, ImageError> {
        match tier {
            QualityTier::Low => {
                let x = downscale_upscale(img, self.low_scale)?;
                let x = gaussian_blur(&x, self.low_blur)?;
                let x = compression_artifacts(&x, self.low_quant_step)?;
                add_gaussian_noise(&x, self.low_noise, rng)
            }
            QualityTier::Medium => {
                let x = downscale_upscale(img, self.medium_scale)?;
                let x = gaussian_blur(&x, self.medium_blur)?;
                add_gaussian_noise(&x, self.medium_noise, rng)
            }
            QualityTier::High => add_gaussian_noise(img, self.high_noise, rng),
        }
    }
}

/// [`QualityTransforms::degrade`] with the default parameters.
pub fn degrade<R: Rng + ?Sized>(
    img: &Image,
    tier: QualityTier,
    rng: &mut R,
) -> Result<Image, ImageError> {
    QualityTransforms::default().degrade(img, tier, rng)
}

/// Peak signal-to-noise ratio in dB with peak 1.0.
///
/// Identical images yield `f64::INFINITY`.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64, ImageError> {
    if (reference.height, reference.width) != (test.height, test.width) {
        return Err(ImageError::DimensionMismatch(
            (reference.height, reference.width),
            (test.height, test.width),
        ));
    }
    let mse = reference
        .pixels
        .iter()
        .zip(&test.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.pixels.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_tree;
    use proptest::prelude::*;
    use rand::Rng;

    fn checkerboard(n: usize) -> Image {
        let px = (0..n * n)
            .map(|i| ((i / n + i % n) % 2) as f64)
            .collect();
        Image::new(n, n, px).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Image {
        let px = (0..h * w).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn constant_is_fixed_point_of_resampling() {
        let img = Image::filled(28, 28, 0.5).unwrap();
        let out = downscale_upscale(&img, 0.25).unwrap();
        for p in out.pixels() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_factor_is_identity() {
        let img = ramp(9, 13);
        assert_eq!(downscale_upscale(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn checkerboard_averages_to_grey() {
        // each 2x2 area average of a 0/1 checkerboard is 0.5, and bilinear
        // expansion of a constant 2x2 grid is constant
        let out = downscale_upscale(&checkerboard(4), 0.5).unwrap();
        for p in out.pixels() {
            assert!((p - 0.5).abs() < 1e-12, "{p}");
        }
    }

    #[test]
    fn rejects_bad_factors() {
        let img = ramp(8, 8);
        assert_eq!(downscale_upscale(&img, 0.0), Err(ImageError::BadFactor(0.0)));
        assert_eq!(downscale_upscale(&img, 1.5), Err(ImageError::BadFactor(1.5)));
        assert!(matches!(
            downscale_upscale(&img, 0.1),
            Err(ImageError::FactorTooSmall { .. })
        ));
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let img = ramp(7, 5);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(10, 12, 0.3).unwrap();
        let out = gaussian_blur(&img, 1.5).unwrap();
        for p in out.pixels() {
            assert!((p - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_impulse_row_matches_hand_kernel() {
        // sigma 0.8 -> radius 3; in a width-5 row the centre pixel keeps taps
        // at offsets -2..=2 only, so its value is w0 / (w0 + 2 w1 + 2 w2).
        let img = Image::new(1, 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = gaussian_blur(&img, 0.8).unwrap();
        let w = |k: f64| (-(k * k) / (2.0 * 0.8 * 0.8)).exp();
        let expected = w(0.0) / (w(0.0) + 2.0 * w(1.0) + 2.0 * w(2.0));
        assert!((out.get(0, 2) - expected).abs() < 1e-12);
        assert!((expected - 0.499116).abs() < 1e-5);
    }

    #[test]
    fn blur_preserves_mass_of_interior_blob() {
        let mut px = vec![0.0; 32 * 32];
        for r in 13..19 {
            for c in 12..20 {
                px[r * 32 + c] = 0.8;
            }
        }
        let img = Image::new(32, 32, px).unwrap();
        let out = gaussian_blur(&img, 1.5).unwrap();
        let before: f64 = img.pixels().iter().sum();
        let after: f64 = out.pixels().iter().sum();
        assert!(((after - before) / before).abs() < 1e-6);
    }

    #[test]
    fn compression_keeps_constants_within_dc_quantum() {
        // orthonormal 4x4 DC coefficient is 4v, so reconstruction error is at
        // most step / 2 / 4
        for &(v, step) in &[(0.5, 0.5), (0.37, 0.5), (0.81, 0.3), (0.123, 1.0)] {
            let img = Image::filled(9, 11, v).unwrap();
            let out = compression_artifacts(&img, step).unwrap();
            for p in out.pixels() {
                assert!((p - v).abs() <= step / 8.0 + 1e-12, "v={v} step={step} got {p}");
            }
        }
        let exact = compression_artifacts(&Image::filled(8, 8, 0.5).unwrap(), 0.5).unwrap();
        assert!(exact.pixels().iter().all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn tiny_quant_step_is_near_identity() {
        let img = ramp(13, 10);
        let out = compression_artifacts(&img, 1e-9).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn compression_of_black_is_black() {
        let img = Image::filled(28, 28, 0.0).unwrap();
        assert_eq!(compression_artifacts(&img, 0.5).unwrap(), img);
    }

    #[test]
    fn noise_zero_sigma_identity_and_determinism() {
        let img = ramp(10, 10);
        let mut rng = seed_tree(1, &["noise"]);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        let a = add_gaussian_noise(&img, 0.2, &mut seed_tree(5, &["n"])).unwrap();
        let b = add_gaussian_noise(&img, 0.2, &mut seed_tree(5, &["n"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let img = Image::filled(100, 100, 0.5).unwrap();
        let out = add_gaussian_noise(&img, 0.15, &mut seed_tree(3, &["std"])).unwrap();
        let n = out.pixels().len() as f64;
        let mean = out.pixels().iter().sum::<f64>() / n;
        let var = out.pixels().iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.13..=0.17).contains(&std), "std {std}");
    }

    #[test]
    fn high_tier_is_identity() {
        let img = ramp(28, 28);
        let mut rng = seed_tree(0, &["d"]);
        assert_eq!(degrade(&img, QualityTier::High, &mut rng).unwrap(), img);
    }

    #[test]
    fn medium_tier_on_constant_is_noise_limited() {
        // resampling and blur fix constants, so MSE = 0.08^2 and
        // PSNR = 10 log10(1 / 0.0064) = 21.94 dB
        let img = Image::filled(100, 100, 0.5).unwrap();
        let out = degrade(&img, QualityTier::Medium, &mut seed_tree(11, &["m"])).unwrap();
        let db = psnr(&img, &out).unwrap();
        assert!((db - 21.938).abs() < 0.5, "psnr {db}");
    }

    #[test]
    fn psnr_reference_values() {
        let a = Image::filled(8, 8, 0.0).unwrap();
        let b = Image::filled(8, 8, 0.1).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let c = Image::filled(8, 9, 0.0).unwrap();
        assert!(matches!(psnr(&a, &c), Err(ImageError::DimensionMismatch(..))));
    }

    #[test]
    fn tier_ordering() {
        assert!(QualityTier::Low < QualityTier::Medium);
        assert!(QualityTier::Medium < QualityTier::High);
    }

    proptest! {
        #[test]
        fn transforms_preserve_shape_and_range(
            h in 4usize..20, w in 4usize..20, seed in any::<u64>(),
            tier in 0usize..3,
        ) {
            let mut rng = seed_tree(seed, &["img"]);
            let px: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
            let img = Image::new(h, w, px).unwrap();
            let out = degrade(&img, QualityTier::ALL[tier], &mut rng).unwrap();
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            let mut rng = seed_tree(seed, &["sym"]);
            let a = Image::new(6, 6, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
            let b = Image::new(6, 6, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
