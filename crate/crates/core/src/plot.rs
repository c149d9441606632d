//! Minimal raster plotting: grouped bar charts and the curation montage.
//!
//! Text uses a built-in 5x7 bitmap font (upper-case letters, digits and a
//! little punctuation) so no font files are needed.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imagecore::{GrayImage, Histogram};

pub const BLACK: [u8; 3] = [0, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const GREY: [u8; 3] = [200, 200, 200];
pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];
pub const RED: [u8; 3] = [214, 39, 40];

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
const ADVANCE: u32 = GLYPH_W + 1;

fn glyph(c: char) -> [u8; GLYPH_H as usize] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

/// Pixel width of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * ADVANCE).saturating_sub(1) * scale
}

/// An RGB canvas with clipped drawing primitives.
pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: [u8; 3]) -> Self {
        Self {
            img: RgbImage::from_pixel(width, height, Rgb(background)),
        }
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.img.get_pixel(x, y).0
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.width() && (y as u32) < self.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, color: [u8; 3]) {
        self.fill_rect(x0.min(x1), y, (x1 - x0).abs() + 1, 1, color);
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, color: [u8; 3]) {
        self.fill_rect(x, y0.min(y1), 1, (y1 - y0).abs() + 1, color);
    }

    /// Straight segment (Bresenham).
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, text: &str, scale: u32, color: [u8; 3]) {
        let s = scale as i64;
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c);
            let ox = x + i as i64 * ADVANCE as i64 * s;
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if bits & (1 << (GLYPH_W - 1 - rx)) != 0 {
                        self.fill_rect(ox + rx as i64 * s, y + ry as i64 * s, s, s, color);
                    }
                }
            }
        }
    }

    /// Draws a grayscale image with nearest-neighbour magnification.
    pub fn blit_gray(&mut self, x: i64, y: i64, img: &GrayImage, scale: u32) {
        let s = scale as i64;
        for py in 0..img.height() {
            for px in 0..img.width() {
                let v = (img.get(px, py) * 255.0).round() as u8;
                self.fill_rect(x + px as i64 * s, y + py as i64 * s, s, s, [v, v, v]);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            crate::util::create_dir(parent)?;
        }
        self.img.save(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn into_image(self) -> RgbImage {
        self.img
    }
}

/// One named series of a grouped bar chart.
pub struct Series<'a> {
    pub name: &'a str,
    pub color: [u8; 3],
    pub values: Vec<f64>,
}

const BAR_W: i64 = 18;
const MARGIN_L: i64 = 44;
const MARGIN_T: i64 = 30;
const PLOT_H: i64 = 200;

/// Grouped bars over `[0, 1]`: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[&str], series: &[Series<'_>]) -> Result<Canvas> {
    if labels.is_empty() || series.is_empty() {
        return Err(Error::arg(
            "bar chart needs at least one group and one series",
        ));
    }
    if let Some(s) = series.iter().find(|s| s.values.len() != labels.len()) {
        return Err(Error::arg(format!(
            "series {} has {} values for {} groups",
            s.name,
            s.values.len(),
            labels.len()
        )));
    }
    let group_w = BAR_W * series.len() as i64 + 16;
    let longest = labels.iter().map(|l| text_width(l, 1)).max().unwrap_or(0) as i64;
    let group_w = group_w.max(longest + 6);
    let width =
        (MARGIN_L + group_w * labels.len() as i64 + 20).max(text_width(title, 2) as i64 + 20);
    let legend_y = MARGIN_T + PLOT_H + 26;
    let height = legend_y + 12 * series.len() as i64 + 8;
    let mut c = Canvas::new(width as u32, height as u32, WHITE);
    c.text(10, 8, title, 2, BLACK);

    let base = MARGIN_T + PLOT_H;
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - (v * PLOT_H as f64).round() as i64;
        c.hline(MARGIN_L, width - 10, y, GREY);
        c.text(6, y - 3, &format!("{v:.2}"), 1, BLACK);
    }
    c.vline(MARGIN_L, MARGIN_T, base, BLACK);
    for (g, label) in labels.iter().enumerate() {
        let gx = MARGIN_L + 8 + g as i64 * group_w;
        for (k, s) in series.iter().enumerate() {
            let v = s.values[g];
            let h = if v.is_finite() {
                (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as i64
            } else {
                0
            };
            c.fill_rect(gx + k as i64 * BAR_W, base - h, BAR_W - 2, h, s.color);
        }
        c.text(gx, base + 6, label, 1, BLACK);
    }
    for (k, s) in series.iter().enumerate() {
        let y = legend_y + 12 * k as i64;
        c.fill_rect(MARGIN_L, y, 8, 8, s.color);
        c.text(MARGIN_L + 12, y, s.name, 1, BLACK);
    }
    Ok(c)
}

/// Number of bars drawn by [`bar_chart`] for the given inputs.
pub fn bar_count(labels: &[&str], series: &[Series<'_>]) -> usize {
    labels.len() * series.len()
}

/// One inspected image of a curation montage.
pub struct MontageRow<'a> {
    pub id: &'a str,
    pub image: &'a GrayImage,
    pub histogram: &'a Histogram,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub selected: bool,
}

const HIST_W: i64 = 256;
const HIST_H: i64 = 64;
const ROW_PAD: i64 = 6;
const HEADER_H: i64 = 24;

fn row_height(img_h: usize) -> i64 {
    (img_h as i64).max(HIST_H) + 2 * ROW_PAD
}

fn draw_hist(c: &mut Canvas, x: i64, y: i64, h: &Histogram, peak: f64, color: [u8; 3]) {
    let mut prev = None;
    for (b, &v) in h.bins().iter().enumerate() {
        let py = y + HIST_H - 1 - ((v / peak).min(1.0) * (HIST_H - 1) as f64).round() as i64;
        let px = x + b as i64;
        if let Some((qx, qy)) = prev {
            c.line(qx, qy, px, py, color);
        }
        prev = Some((px, py));
    }
}

/// One row per image: the image, its histogram (blue) over the target
/// profile (orange), then D, p and KEPT/REJECTED.
pub fn curation_montage(rows: &[MontageRow<'_>], profile: &Histogram) -> Result<Canvas> {
    if rows.is_empty() {
        return Err(Error::arg("montage needs at least one row"));
    }
    let img_w = rows.iter().map(|r| r.image.width()).max().unwrap_or(0) as i64;
    let img_h = rows.iter().map(|r| r.image.height()).max().unwrap_or(0);
    let rh = row_height(img_h);
    let text_x = 10 + img_w + 10 + HIST_W + 12;
    let width = text_x + text_width("P=0.000E-000  REJECTED", 1) as i64 + 10;
    let height = HEADER_H + rh * rows.len() as i64;
    let mut c = Canvas::new(width as u32, height as u32, WHITE);
    c.text(
        10,
        6,
        "CURATION: IMAGE / HISTOGRAM VS TARGET / KS",
        1,
        BLACK,
    );
    c.fill_rect(10 + img_w + 10, 15, 8, 4, BLUE);
    c.text(10 + img_w + 22, 14, "IMAGE", 1, BLACK);
    c.fill_rect(10 + img_w + 70, 15, 8, 4, ORANGE);
    c.text(10 + img_w + 82, 14, "TARGET", 1, BLACK);
    for (i, r) in rows.iter().enumerate() {
        let y = HEADER_H + i as i64 * rh + ROW_PAD;
        c.blit_gray(10, y, r.image, 1);
        let hx = 10 + img_w + 10;
        c.fill_rect(hx, y, HIST_W, HIST_H, [245, 245, 245]);
        let peak = r
            .histogram
            .bins()
            .iter()
            .chain(profile.bins())
            .copied()
            .fold(0.0f64, f64::max)
            .max(1e-12);
        draw_hist(&mut c, hx, y, profile, peak, ORANGE);
        draw_hist(&mut c, hx, y, r.histogram, peak, BLUE);
        c.text(text_x, y, r.id, 1, BLACK);
        c.text(
            text_x,
            y + 12,
            &format!("D={:.4}", r.ks_statistic),
            1,
            BLACK,
        );
        c.text(text_x, y + 24, &format!("P={:.3E}", r.p_value), 1, BLACK);
        let (flag, color) = if r.selected {
            ("KEPT", GREEN)
        } else {
            ("REJECTED", RED)
        };
        c.text(text_x, y + 36, flag, 1, color);
        c.hline(0, width, y + rh - ROW_PAD, GREY);
    }
    Ok(c)
}

/// Rows a montage of the given height holds, for images of height `img_h`.
pub fn montage_rows(canvas_height: u32, img_h: usize) -> usize {
    ((canvas_height as i64 - HEADER_H) / row_height(img_h)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::compute_histogram;

    #[test]
    fn text_draws_only_lit_pixels() {
        let mut c = Canvas::new(20, 10, WHITE);
        c.text(0, 0, "1", 1, BLACK);
        let lit: usize = (0..10)
            .flat_map(|y| (0..20).map(move |x| (x, y)))
            .filter(|&(x, y)| c.pixel(x, y) == BLACK)
            .count();
        let expected: u32 = glyph('1').iter().map(|b| b.count_ones()).sum();
        assert_eq!(lit as u32, expected);
        assert_eq!(text_width("AB", 2), 22);
    }

    #[test]
    fn singleton_chart_has_one_bar_per_metric() {
        let series = [
            Series {
                name: "SA",
                color: BLUE,
                values: vec![0.9],
            },
            Series {
                name: "IOU",
                color: ORANGE,
                values: vec![0.5],
            },
        ];
        let c = bar_chart("D1", &["hgit"], &series).unwrap();
        assert_eq!(bar_count(&["hgit"], &series), 2);
        // both bars reach the plot base
        let base = (MARGIN_T + PLOT_H - 1) as u32;
        let x0 = (MARGIN_L + 8) as u32;
        assert_eq!(c.pixel(x0 + 1, base), BLUE);
        assert_eq!(c.pixel(x0 + BAR_W as u32 + 1, base), ORANGE);
        assert!(bar_chart(
            "x",
            &["a"],
            &[Series {
                name: "s",
                color: RED,
                values: vec![]
            }]
        )
        .is_err());
    }

    #[test]
    fn montage_has_one_row_per_image() {
        let imgs: Vec<GrayImage> = (0..5)
            .map(|i| GrayImage::constant(16, 16, i as f32 / 5.0).unwrap())
            .collect();
        let hists: Vec<Histogram> = imgs.iter().map(compute_histogram).collect();
        let rows: Vec<MontageRow> = imgs
            .iter()
            .zip(&hists)
            .enumerate()
            .map(|(i, (img, h))| MontageRow {
                id: "x",
                image: img,
                histogram: h,
                ks_statistic: 0.1,
                p_value: 0.5,
                selected: i % 2 == 0,
            })
            .collect();
        let c = curation_montage(&rows, &hists[0]).unwrap();
        assert_eq!(montage_rows(c.height(), 16), 5);
    }
}
