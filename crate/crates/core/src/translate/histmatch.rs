//! Histogram specification toward a target intensity profile.

use crate::error::Result;
use crate::imagecore::{
    bin_of, compute_histogram, mean_histogram, DatasetSplit, GrayImage, Histogram, BINS,
};

const CDF_TOL: f64 = 1e-12;

/// Monotone lookup table `m(b) = CDF_target⁻¹(CDF_source(b))` over bins,
/// returned as output 8-bit levels.
pub fn matching_lut(source: &Histogram, target: &Histogram) -> Result<[u8; BINS]> {
    source.check_normalized()?;
    target.check_normalized()?;
    let cs = source.cdf();
    let ct = target.cdf();
    let mut lut = [0u8; BINS];
    let mut t = 0;
    for (b, &c) in cs.iter().enumerate() {
        // cs is non-decreasing, so the inverse pointer only moves forward
        while t < BINS - 1 && ct[t] < c - CDF_TOL {
            t += 1;
        }
        lut[b] = t as u8;
    }
    Ok(lut)
}

/// Remaps `img` so its intensity distribution follows `target_hist`.
/// A single-bin target yields a constant image at that bin's level.
pub fn hist_match(img: &GrayImage, target_hist: &Histogram) -> Result<GrayImage> {
    let lut = matching_lut(&compute_histogram(img), target_hist)?;
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| lut[bin_of(v)] as f32 / 255.0)
        .collect();
    GrayImage::new(img.width(), img.height(), pixels)
}

/// Matches every source image to the mean histogram of `target`.
pub fn hist_match_split(source: &DatasetSplit, target: &DatasetSplit) -> Result<DatasetSplit> {
    let hists: Vec<Histogram> = target.images().iter().map(compute_histogram).collect();
    let profile = mean_histogram(&hists)?;
    let images = source
        .images()
        .iter()
        .map(|img| hist_match(img, &profile))
        .collect::<Result<Vec<_>>>()?;
    source.with_images(images)
}
