//! Fourier domain adaptation: swap the low-frequency amplitude of a source
//! image for that of a target image while keeping the source phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imagecore::{DatasetSplit, GrayImage};

/// Amplitudes at or below this count as zero when deciding a phase.
const ZERO_AMPLITUDE: f64 = 1e-12;

/// In-place 2-D DFT of a row-major `h x w` buffer. The inverse is unnormalized.
pub fn fft2d(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

pub fn spectrum(img: &GrayImage) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = img
        .pixels()
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fft2d(&mut data, img.height(), img.width(), false);
    data
}

/// Half-width `b = floor(beta · min(H, W))` of the swapped low-frequency square.
pub fn window_half_width(h: usize, w: usize, beta: f64) -> usize {
    (beta * h.min(w) as f64).floor() as usize
}

/// Whether unshifted frequency index `(ky, kx)` lies in the centered square of
/// side `2b + 1` around DC (signed frequencies `|fy|, |fx| <= b`).
pub fn in_window(ky: usize, kx: usize, h: usize, w: usize, b: usize) -> bool {
    let signed = |k: usize, n: usize| if k <= n / 2 { k } else { n - k };
    signed(ky, h) <= b && signed(kx, w) <= b
}

fn check(src: &GrayImage, tgt: &GrayImage, beta: f64) -> Result<()> {
    if src.shape() != tgt.shape() {
        return Err(Error::arg(format!(
            "FDA needs equal shapes, got {:?} and {:?}",
            src.shape(),
            tgt.shape()
        )));
    }
    if !(beta > 0.0 && beta <= 0.5) {
        return Err(Error::arg(format!("FDA beta {beta} outside (0, 0.5]")));
    }
    Ok(())
}

/// Real part of the inverse transform after the amplitude swap, before clipping.
pub fn fda_unclipped(src: &GrayImage, tgt: &GrayImage, beta: f64) -> Result<Vec<f64>> {
    check(src, tgt, beta)?;
    let (h, w) = src.shape();
    let b = window_half_width(h, w, beta);
    let mut s = spectrum(src);
    let t = spectrum(tgt);
    for ky in 0..h {
        for kx in 0..w {
            if !in_window(ky, kx, h, w, b) {
                continue;
            }
            let i = ky * w + kx;
            let amp = t[i].norm();
            let src_amp = s[i].norm();
            s[i] = if src_amp > ZERO_AMPLITUDE {
                s[i] * (amp / src_amp)
            } else {
                Complex::new(amp, 0.0)
            };
        }
    }
    fft2d(&mut s, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Ok(s.iter().map(|c| c.re * scale).collect())
}

pub fn fda_translate(src: &GrayImage, tgt: &GrayImage, beta: f64) -> Result<GrayImage> {
    let raw = fda_unclipped(src, tgt, beta)?;
    GrayImage::from_clipped(
        src.width(),
        src.height(),
        raw.into_iter().map(|v| v as f32).collect(),
    )
}

/// Translates each source image toward a uniformly drawn target image.
pub fn fda_split(
    source: &DatasetSplit,
    target: &DatasetSplit,
    beta: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if target.is_empty() {
        return Err(Error::arg("FDA needs at least one target image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = source
        .images()
        .iter()
        .map(|img| {
            let partner = &target.images()[rng.random_range(0..target.len())];
            fda_translate(img, partner, beta)
        })
        .collect::<Result<Vec<_>>>()?;
    source.with_images(images)
}
