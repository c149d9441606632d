//! Images, masks, histograms and manifest-described dataset splits.
//!
//! Intensities live in `[0, 1]` in memory and as 8-bit grayscale PNG on disk
//! (`byte / 255`). Masks are stored as `{0, 255}` PNGs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
/// Histogram resolution; one bin per 8-bit level.
pub const BINS: usize = 256;

/// Grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::arg(format!(
                "image {width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::arg(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(width, height, pixels)
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) instead of rejecting.
    pub fn from_clipped(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Nearest 8-bit level per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }

    /// The image as it reads back after an 8-bit save.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .to_bytes()
                .into_iter()
                .map(|b| b as f32 / 255.0)
                .collect(),
        }
    }
}

/// Per-pixel metal-line label: 1 = metal, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::arg(format!(
                "{} labels supplied for a {width}x{height} mask",
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::arg(format!("mask label {v} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.labels.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// Normalized 256-bin intensity distribution.
///
/// Bin `b` collects intensities in `[b/256, (b+1)/256)`; the last bin also
/// takes 1.0. An 8-bit level `k` therefore lands in bin `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    bins: Vec<f64>,
    pixel_count: u64,
}

impl Histogram {
    /// Validates and wraps a normalized bin vector.
    pub fn from_bins(bins: Vec<f64>, pixel_count: u64) -> Result<Self> {
        if bins.len() != BINS {
            return Err(Error::arg(format!(
                "histogram needs {BINS} bins, got {}",
                bins.len()
            )));
        }
        if pixel_count == 0 {
            return Err(Error::arg("histogram pixel count must be positive"));
        }
        let h = Self { bins, pixel_count };
        h.check_normalized()?;
        Ok(h)
    }

    /// Normalizes raw counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.len() != BINS || total == 0 {
            return Err(Error::arg(
                "histogram counts must have 256 bins and a positive total",
            ));
        }
        let bins = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            bins,
            pixel_count: total,
        })
    }

    /// Unit mass at one bin.
    pub fn delta(bin: usize, pixel_count: u64) -> Self {
        let mut bins = vec![0.0; BINS];
        bins[bin] = 1.0;
        Self { bins, pixel_count }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn pixel_count(&self) -> u64 {
        self.pixel_count
    }

    /// Cumulative mass `CDF(b) = sum_{i <= b} bins[i]`.
    pub fn cdf(&self) -> Vec<f64> {
        self.bins
            .iter()
            .scan(0.0, |acc, &b| {
                *acc += b;
                Some(*acc)
            })
            .collect()
    }

    pub fn check_normalized(&self) -> Result<()> {
        if self.bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::arg("histogram has a negative or non-finite bin"));
        }
        let sum: f64 = self.bins.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!(
                "histogram mass {sum} is not normalized"
            )));
        }
        Ok(())
    }

    /// Bins with nonzero mass.
    pub fn support(&self) -> usize {
        self.bins.iter().filter(|&&b| b > 0.0).count()
    }
}

/// Histogram bin of an intensity in `[0, 1]`.
pub fn bin_of(v: f32) -> usize {
    ((v as f64 * BINS as f64) as usize).min(BINS - 1)
}

pub fn compute_histogram(img: &GrayImage) -> Histogram {
    let mut counts = [0u64; BINS];
    for &v in img.pixels() {
        counts[bin_of(v)] += 1;
    }
    Histogram::from_counts(&counts).expect("valid image has pixels")
}

/// Per-bin arithmetic mean of normalized histograms.
pub fn mean_histogram(hists: &[Histogram]) -> Result<Histogram> {
    if hists.is_empty() {
        return Err(Error::arg("mean_histogram of an empty list"));
    }
    let mut bins = vec![0.0; BINS];
    for h in hists {
        for (acc, b) in bins.iter_mut().zip(h.bins()) {
            *acc += b;
        }
    }
    let n = hists.len() as f64;
    for b in &mut bins {
        *b /= n;
    }
    // Renormalize away accumulated rounding so the invariant holds exactly.
    let sum: f64 = bins.iter().sum();
    for b in &mut bins {
        *b /= sum;
    }
    Ok(Histogram {
        bins,
        pixel_count: hists.iter().map(|h| h.pixel_count).sum(),
    })
}

/// Role of a split in the adaptation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    SourceTrain,
    SourceTest,
    TargetTrain,
    TargetTest,
}

impl SplitRole {
    pub fn is_test(self) -> bool {
        matches!(self, SplitRole::SourceTest | SplitRole::TargetTest)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::SourceTrain => "source-train",
            SplitRole::SourceTest => "source-test",
            SplitRole::TargetTrain => "target-train",
            SplitRole::TargetTest => "target-test",
        }
    }
}

/// Images with stable ids and, for labeled splits, aligned masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    role: SplitRole,
    ids: Vec<String>,
    images: Vec<GrayImage>,
    masks: Option<Vec<BinaryMask>>,
}

impl DatasetSplit {
    pub fn new(
        role: SplitRole,
        ids: Vec<String>,
        images: Vec<GrayImage>,
        masks: Option<Vec<BinaryMask>>,
    ) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::arg(format!(
                "{} ids for {} images",
                ids.len(),
                images.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::arg(format!(
                "duplicate id {dup:?} in {} split",
                role.as_str()
            )));
        }
        if let Some(masks) = &masks {
            if masks.len() != images.len() {
                return Err(Error::arg(format!(
                    "{} masks for {} images",
                    masks.len(),
                    images.len()
                )));
            }
            for ((img, m), id) in images.iter().zip(masks).zip(&ids) {
                if img.shape() != m.shape() {
                    return Err(Error::arg(format!(
                        "mask shape differs from image shape for {id}"
                    )));
                }
            }
        }
        Ok(Self {
            role,
            ids,
            images,
            masks,
        })
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[GrayImage] {
        &self.images
    }

    pub fn masks(&self) -> Option<&[BinaryMask]> {
        self.masks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Same ids, masks and role with replaced images; shapes must be preserved.
    pub fn with_images(&self, images: Vec<GrayImage>) -> Result<Self> {
        if images.len() != self.images.len() {
            return Err(Error::arg("replacement image count differs"));
        }
        if images
            .iter()
            .zip(&self.images)
            .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::arg("replacement images change shape"));
        }
        Self::new(self.role, self.ids.clone(), images, self.masks.clone())
    }

    pub fn without_masks(&self) -> Self {
        Self {
            masks: None,
            ..self.clone()
        }
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let masks = self
            .masks
            .as_ref()
            .map(|m| indices.iter().map(|&i| m[i].clone()).collect());
        Self::new(self.role, ids, images, masks)
    }

    /// Appends another split's items; both must agree on mask presence.
    pub fn concat(&self, other: &DatasetSplit) -> Result<Self> {
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        let mut images = self.images.clone();
        images.extend(other.images.iter().cloned());
        let masks = match (&self.masks, &other.masks) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            (None, None) => None,
            _ => {
                return Err(Error::arg(
                    "cannot concatenate labeled and unlabeled splits",
                ))
            }
        };
        Self::new(self.role, ids, images, masks)
    }
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
    if img.color() != ColorType::L8 {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("expected 8-bit single-channel, found {:?}", img.color()),
        });
    }
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_bytes(w as usize, h as usize, luma.as_raw())
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    write_gray_png(path, img.width(), img.height(), img.to_bytes())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = load_image(path)?;
    let mut labels = Vec::with_capacity(img.len());
    for b in img.to_bytes() {
        labels.push(match b {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Format {
                    path: path.to_owned(),
                    reason: format!("mask byte {other} is neither 0 nor 255"),
                })
            }
        });
    }
    BinaryMask::new(img.width(), img.height(), labels)
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes = mask.labels().iter().map(|&v| v * 255).collect();
    write_gray_png(path, mask.width(), mask.height(), bytes)
}

fn write_gray_png(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf = image::ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_owned(),
                reason: other.to_string(),
            },
        })
}

/// On-disk description of a split; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: SplitRole,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub image: String,
    pub mask: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    util::read_json(path)
}

/// Loads every image (and mask, when every item has one) listed in a manifest.
pub fn load_split(manifest_path: &Path) -> Result<DatasetSplit> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let all_masked = !manifest.items.is_empty() && manifest.items.iter().all(|i| i.mask.is_some());
    for item in &manifest.items {
        ids.push(item.id.clone());
        images.push(load_image(&base.join(&item.image))?);
        if all_masked {
            masks.push(load_mask(&base.join(item.mask.as_ref().expect("checked")))?);
        }
    }
    DatasetSplit::new(manifest.role, ids, images, all_masked.then_some(masks))
}

/// Writes images (and masks) of `split` under `dir` plus `dir/<manifest_name>`.
///
/// With `include_masks = false` the manifest lists `mask: null` even if the
/// split carries masks; the mask files are then written under `dir/heldout/`
/// for evaluation only.
pub fn write_split(
    split: &DatasetSplit,
    dir: &Path,
    manifest_name: &str,
    include_masks: bool,
) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    let mask_dir = if include_masks {
        dir.join("masks")
    } else {
        dir.join("heldout")
    };
    util::create_dir(&img_dir)?;
    if split.masks().is_some() {
        util::create_dir(&mask_dir)?;
    }
    let mut items = Vec::with_capacity(split.len());
    for (i, (id, img)) in split.ids().iter().zip(split.images()).enumerate() {
        let image_rel = format!("images/{id}.png");
        save_image(img, &dir.join(&image_rel))?;
        let mut mask_rel = None;
        if let Some(masks) = split.masks() {
            let rel = if include_masks {
                format!("masks/{id}.png")
            } else {
                format!("heldout/{id}.png")
            };
            save_mask(&masks[i], &dir.join(&rel))?;
            if include_masks {
                mask_rel = Some(rel);
            }
        }
        items.push(ManifestItem {
            id: id.clone(),
            image: image_rel,
            mask: mask_rel,
        });
    }
    let path = dir.join(manifest_name);
    util::write_json(
        &path,
        &Manifest {
            role: split.role(),
            items,
        },
    )?;
    Ok(path)
}

/// Removes a directory tree if it exists.
pub fn remove_dir_if_exists(dir: &Path) -> Result<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(dir, e)),
    }
}
