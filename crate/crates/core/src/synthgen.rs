//! Deterministic circuit-style datasets: Manhattan-routed metal-line masks
//! rendered in parameterized visual styles.
//!
//! A style plays the role of one device/layer domain. Rendering maps mask
//! labels to two intensity levels, softens edges, multiplies by a smooth
//! low-frequency texture and adds Gaussian noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{
    write_split, BinaryMask, DatasetSplit, GrayImage, Manifest, ManifestItem, SplitRole,
};
use crate::util;

/// Visual appearance of a synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub bg_level: f32,
    pub fg_level: f32,
    pub noise_sigma: f32,
    pub blur_radius: f32,
    pub texture_amp: f32,
}

impl DomainStyle {
    pub fn contrast(&self) -> f32 {
        (self.fg_level - self.bg_level).abs()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.bg_level) || !unit.contains(&self.fg_level) {
            return Err(Error::arg("style levels must lie in [0, 1]"));
        }
        if self.bg_level == self.fg_level {
            return Err(Error::arg(
                "style foreground and background levels coincide",
            ));
        }
        if !(0.0..=0.3).contains(&self.noise_sigma) {
            return Err(Error::arg(format!(
                "noise_sigma {} outside [0, 0.3]",
                self.noise_sigma
            )));
        }
        if !(0.0..=4.0).contains(&self.blur_radius) {
            return Err(Error::arg(format!(
                "blur_radius {} outside [0, 4]",
                self.blur_radius
            )));
        }
        if !(0.0..=0.5).contains(&self.texture_amp) {
            return Err(Error::arg(format!(
                "texture_amp {} outside [0, 0.5]",
                self.texture_amp
            )));
        }
        Ok(())
    }

    /// Named presets. `source` is the labeled domain; the three `shifted-*` /
    /// `textured` styles stand in for distinct target devices.
    pub fn preset(name: &str) -> Result<Self> {
        let style = match name {
            "source" => Self {
                bg_level: 0.25,
                fg_level: 0.75,
                noise_sigma: 0.04,
                blur_radius: 1.0,
                texture_amp: 0.05,
            },
            "shifted-bright" => Self {
                bg_level: 0.45,
                fg_level: 0.92,
                noise_sigma: 0.05,
                blur_radius: 1.0,
                texture_amp: 0.05,
            },
            // darker overall and with a much smaller fg/bg gap
            "shifted-dark-lowcontrast" => Self {
                bg_level: 0.12,
                fg_level: 0.32,
                noise_sigma: 0.035,
                blur_radius: 1.5,
                texture_amp: 0.05,
            },
            "textured" => Self {
                bg_level: 0.3,
                fg_level: 0.68,
                noise_sigma: 0.06,
                blur_radius: 1.0,
                texture_amp: 0.3,
            },
            other => return Err(Error::Config(format!("unknown style preset {other:?}"))),
        };
        Ok(style)
    }

    pub const PRESETS: [&'static str; 4] = [
        "source",
        "shifted-bright",
        "shifted-dark-lowcontrast",
        "textured",
    ];
}

/// Geometry of the generated line layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub image_size: usize,
    pub line_width_range: (usize, usize),
    pub density: f64,
    pub seed: u64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            line_width_range: (4, 8),
            density: 0.3,
            seed: 0,
        }
    }
}

impl LayoutSpec {
    /// Line widths scaled to the tile so small tiles keep the same look.
    pub fn for_size(image_size: usize, seed: u64) -> Self {
        let min_w = (image_size / 24).max(2);
        Self {
            image_size,
            line_width_range: (min_w, (image_size / 12).max(min_w)),
            density: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.line_width_range;
        if self.image_size < 32 {
            return Err(Error::arg(format!(
                "image_size {} below 32",
                self.image_size
            )));
        }
        if lo < 2 || hi < lo {
            return Err(Error::arg(format!("invalid line width range {lo}..={hi}")));
        }
        if hi * 4 > self.image_size {
            return Err(Error::arg(format!(
                "line width {hi} too large for {}-pixel tiles",
                self.image_size
            )));
        }
        if !(0.05..=0.6).contains(&self.density) {
            return Err(Error::arg(format!(
                "density {} outside [0.05, 0.6]",
                self.density
            )));
        }
        Ok(())
    }
}

/// Acceptable distance between the achieved and requested foreground fraction.
pub const DENSITY_TOLERANCE: f64 = 0.15;
const MAX_ATTEMPTS: usize = 16;
const MAX_SEGMENTS: usize = 400;

/// Draws Manhattan routes (horizontal/vertical runs joined by right-angle
/// bends) on a track grid until the requested foreground fraction is reached.
pub fn generate_layout(spec: &LayoutSpec) -> Result<BinaryMask> {
    spec.validate()?;
    let size = spec.image_size;
    let (min_w, max_w) = spec.line_width_range;
    let pitch = 2 * max_w;
    let tracks = size.div_ceil(pitch);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut best = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut mask = BinaryMask::zeros(size, size);
        let mut filled = 0usize;
        let target = (spec.density * (size * size) as f64) as usize;
        let mut segments = 0;
        'routes: while filled < target && segments < MAX_SEGMENTS {
            let width = rng.random_range(min_w..=max_w);
            let offset = rng.random_range(0..=(pitch - width));
            let mut horizontal = rng.random_bool(0.5);
            // current position along both axes, snapped to the track grid
            let mut x = rng.random_range(0..tracks) * pitch + offset;
            let mut y = rng.random_range(0..tracks) * pitch + offset;
            let bends = rng.random_range(0..=2);
            for _ in 0..=bends {
                let len = rng.random_range(size / 4..=size);
                let forward = rng.random_bool(0.5);
                let (x0, y0) = (x, y);
                let (x1, y1) = if horizontal {
                    let end = if forward {
                        (x + len).min(size - 1)
                    } else {
                        x.saturating_sub(len)
                    };
                    x = tracks_snap(end, pitch, offset, size);
                    (x, y0 + width - 1)
                } else {
                    let end = if forward {
                        (y + len).min(size - 1)
                    } else {
                        y.saturating_sub(len)
                    };
                    y = tracks_snap(end, pitch, offset, size);
                    (x0 + width - 1, y)
                };
                filled += fill_rect(&mut mask, x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1));
                segments += 1;
                horizontal = !horizontal;
                if filled >= target {
                    break 'routes;
                }
            }
        }
        let frac = mask.foreground_fraction();
        let err = (frac - spec.density).abs();
        if err <= DENSITY_TOLERANCE / 2.0 {
            return Ok(mask);
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, mask));
        }
    }
    match best {
        Some((err, mask)) if err <= DENSITY_TOLERANCE => Ok(mask),
        Some((err, _)) => Err(Error::Generation(format!(
            "density {} unreachable with widths {min_w}..={max_w} on {size}px tiles (closest miss {err:.3})",
            spec.density
        ))),
        None => unreachable!("at least one attempt runs"),
    }
}

fn tracks_snap(v: usize, pitch: usize, offset: usize, size: usize) -> usize {
    let snapped = (v / pitch) * pitch + offset;
    snapped.min(size - 1)
}

fn fill_rect(mask: &mut BinaryMask, x0: usize, y0: usize, x1: usize, y1: usize) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let mut added = 0;
    for y in y0..=y1.min(h - 1) {
        for x in x0..=x1.min(w - 1) {
            if mask.get(x, y) == 0 {
                mask.set(x, y, 1);
                added += 1;
            }
        }
    }
    added
}

/// Renders `mask` in `style`: two-level base, Gaussian edge blur,
/// multiplicative low-frequency texture, additive Gaussian noise, clip.
pub fn render(mask: &BinaryMask, style: &DomainStyle, seed: u64) -> Result<GrayImage> {
    style.validate()?;
    let (w, h) = (mask.width(), mask.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f32> = mask
        .labels()
        .iter()
        .map(|&l| {
            if l == 1 {
                style.fg_level
            } else {
                style.bg_level
            }
        })
        .collect();
    let mut pixels = if style.blur_radius > 0.0 {
        gaussian_blur(&base, w, h, style.blur_radius)
    } else {
        base
    };
    if style.texture_amp > 0.0 {
        let texture = low_frequency_texture(w, h, &mut rng);
        for (p, t) in pixels.iter_mut().zip(&texture) {
            *p *= 1.0 + style.texture_amp * t;
        }
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, style.noise_sigma).expect("validated sigma");
        for p in pixels.iter_mut() {
            *p += normal.sample(&mut rng);
        }
    }
    GrayImage::from_clipped(w, h, pixels)
}

/// Separable Gaussian with sigma `radius / 2`, truncated at `ceil(radius)`, edges clamped.
fn gaussian_blur(src: &[f32], w: usize, h: usize, radius: f32) -> Vec<f32> {
    let r = radius.ceil() as isize;
    let sigma = radius / 2.0;
    let kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sum of three random plane waves of 0.5 to 2 cycles per tile, scaled into `[-1, 1]`.
fn low_frequency_texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.5f32..1.0);
            let fx = rng.random_range(-2.0f32..2.0);
            let fy = rng.random_range(-2.0f32..2.0);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            (amp, fx, fy, phase)
        })
        .collect();
    let total: f32 = waves.iter().map(|w| w.0).sum();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let s: f32 = waves
                .iter()
                .map(|&(a, fx, fy, ph)| a * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            out.push(s / total);
        }
    }
    out
}

/// SplitMix64 finalizer over a combination of inputs; derives independent
/// per-item seeds from one base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Source and target splits for one domain pair. `target_train` is unlabeled;
/// its masks are kept apart in `target_train_masks` for the supervised
/// reference only.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source_train: DatasetSplit,
    pub source_test: DatasetSplit,
    pub target_train: DatasetSplit,
    pub target_test: DatasetSplit,
    pub target_train_masks: Vec<BinaryMask>,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub layout: LayoutSpec,
}

impl DomainPair {
    /// Target-train with its held-out labels attached.
    pub fn target_train_labeled(&self) -> Result<DatasetSplit> {
        DatasetSplit::new(
            SplitRole::TargetTrain,
            self.target_train.ids().to_vec(),
            self.target_train.images().to_vec(),
            Some(self.target_train_masks.clone()),
        )
    }

    /// Writes `<dir>/<role>/manifest.json` for all four splits, a
    /// `target-train/labeled.json` manifest pointing at the held-out masks,
    /// and `<dir>/style.json`.
    pub fn write(&self, dir: &Path) -> Result<DomainPairPaths> {
        let source_train = write_split(
            &self.source_train,
            &dir.join("source-train"),
            "manifest.json",
            true,
        )?;
        let source_test = write_split(
            &self.source_test,
            &dir.join("source-test"),
            "manifest.json",
            true,
        )?;
        let tt_dir = dir.join("target-train");
        let labeled = self.target_train_labeled()?;
        let target_train = write_split(&labeled, &tt_dir, "manifest.json", false)?;
        let items = labeled
            .ids()
            .iter()
            .map(|id| ManifestItem {
                id: id.clone(),
                image: format!("images/{id}.png"),
                mask: Some(format!("heldout/{id}.png")),
            })
            .collect();
        let target_train_labeled = tt_dir.join("labeled.json");
        util::write_json(
            &target_train_labeled,
            &Manifest {
                role: SplitRole::TargetTrain,
                items,
            },
        )?;
        let target_test = write_split(
            &self.target_test,
            &dir.join("target-test"),
            "manifest.json",
            true,
        )?;
        util::write_json(
            &dir.join("style.json"),
            &serde_json::json!({
                "source_style": self.source_style,
                "source_contrast": self.source_style.contrast(),
                "target_style": self.target_style,
                "target_contrast": self.target_style.contrast(),
                "layout": self.layout,
                "counts": {
                    "source_train": self.source_train.len(),
                    "source_test": self.source_test.len(),
                    "target_train": self.target_train.len(),
                    "target_test": self.target_test.len(),
                },
            }),
        )?;
        Ok(DomainPairPaths {
            source_train,
            source_test,
            target_train,
            target_train_labeled,
            target_test,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DomainPairPaths {
    pub source_train: PathBuf,
    pub source_test: PathBuf,
    pub target_train: PathBuf,
    pub target_train_labeled: PathBuf,
    pub target_test: PathBuf,
}

/// Image counts of the desk-scale and full-scale protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Protocol {
    /// Roughly 1,500 tiles of 128x128 per domain, split 80:20.
    pub const FULL: Protocol = Protocol {
        image_size: 128,
        n_train: 1200,
        n_test: 300,
    };
    /// Shrunk for single-CPU runs.
    pub const DESK: Protocol = Protocol {
        image_size: 64,
        n_train: 200,
        n_test: 50,
    };
}

fn make_split(
    role: SplitRole,
    prefix: &str,
    stream: u64,
    n: usize,
    style: &DomainStyle,
    spec: &LayoutSpec,
) -> Result<DatasetSplit> {
    let mut ids = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let layout_spec = LayoutSpec {
            seed: derive_seed(spec.seed, stream, i as u64),
            ..spec.clone()
        };
        let mask = generate_layout(&layout_spec)?;
        let img = render(&mask, style, derive_seed(spec.seed, stream + 100, i as u64))?;
        ids.push(format!("{prefix}-{i:04}"));
        images.push(img.quantized());
        masks.push(mask);
    }
    DatasetSplit::new(role, ids, images, Some(masks))
}

/// Independent layouts for all four splits; images are quantized to 8 bits so
/// in-memory and on-disk datasets agree exactly.
pub fn generate_domain_pair(
    source_style: &DomainStyle,
    target_style: &DomainStyle,
    n_train: usize,
    n_test: usize,
    spec: &LayoutSpec,
) -> Result<DomainPair> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::arg("n_train and n_test must be positive"));
    }
    source_style.validate()?;
    target_style.validate()?;
    spec.validate()?;
    let source_train = make_split(
        SplitRole::SourceTrain,
        "src-train",
        1,
        n_train,
        source_style,
        spec,
    )?;
    let source_test = make_split(
        SplitRole::SourceTest,
        "src-test",
        2,
        n_test,
        source_style,
        spec,
    )?;
    let target_labeled = make_split(
        SplitRole::TargetTrain,
        "tgt-train",
        3,
        n_train,
        target_style,
        spec,
    )?;
    let target_test = make_split(
        SplitRole::TargetTest,
        "tgt-test",
        4,
        n_test,
        target_style,
        spec,
    )?;
    let target_train_masks = target_labeled
        .masks()
        .expect("generated with masks")
        .to_vec();
    Ok(DomainPair {
        source_train,
        source_test,
        target_train: target_labeled.without_masks(),
        target_test,
        target_train_masks,
        source_style: source_style.clone(),
        target_style: target_style.clone(),
        layout: spec.clone(),
    })
}
