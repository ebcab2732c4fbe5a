//! Minimal PNG line plots for the run reports: white canvas, framed plot
//! area, autoscaled y axis, categorical x ticks, a built-in 5x7 bitmap
//! font. No styling knobs beyond what the reports use.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 69, 65],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// `(x, y)` pairs in data coordinates.
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Tick positions with their labels; also defines the x range.
    pub x_ticks: Vec<(f64, String)>,
    pub series: Vec<Series>,
    /// Fixed y range; autoscaled over the data when absent.
    pub y_range: Option<(f64, f64)>,
}

const MARGIN_LEFT: u32 = 64;
const MARGIN_RIGHT: u32 = 16;
const MARGIN_TOP: u32 = 28;
const MARGIN_BOTTOM: u32 = 48;

const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

impl LinePlot {
    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        assert!(width >= 200 && height >= 150, "plot canvas too small");
        let mut img = RgbImage::from_pixel(width, height, WHITE);

        let x0 = MARGIN_LEFT;
        let y0 = MARGIN_TOP;
        let x1 = width - MARGIN_RIGHT;
        let y1 = height - MARGIN_BOTTOM;

        let (xmin, xmax) = self.x_span();
        let (ymin, ymax) = self.y_span();
        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let fx = (x - xmin) / (xmax - xmin);
            let fy = (y - ymin) / (ymax - ymin);
            let px = x0 as f64 + fx * (x1 - x0) as f64;
            let py = y1 as f64 - fy * (y1 - y0) as f64;
            (px.round() as i64, py.round() as i64)
        };

        // Horizontal gridlines and y tick labels.
        for tick in nice_ticks(ymin, ymax) {
            let (_, py) = to_px(xmin, tick);
            hline(&mut img, x0 as i64 + 1, x1 as i64 - 1, py, GRID);
            let label = trim_float(tick);
            let tw = text_width(&label);
            draw_text(
                &mut img,
                x0 as i64 - tw as i64 - 6,
                py - 3,
                &label,
                BLACK,
            );
        }

        // X ticks.
        for (pos, label) in &self.x_ticks {
            let (px, _) = to_px(*pos, ymin);
            vline(&mut img, px, y1 as i64, y1 as i64 + 4, BLACK);
            let tw = text_width(label);
            draw_text(&mut img, px - tw as i64 / 2, y1 as i64 + 8, label, BLACK);
        }

        // Series lines and markers, clipped to the plot area.
        let clip = (x0 as i64, y0 as i64, x1 as i64, y1 as i64);
        for series in &self.series {
            let color = Rgb(series.color);
            let px: Vec<(i64, i64)> = series.points.iter().map(|&(x, y)| to_px(x, y)).collect();
            for pair in px.windows(2) {
                line_clipped(&mut img, pair[0], pair[1], color, clip);
            }
            for &(cx, cy) in &px {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        put_clipped(&mut img, cx + dx, cy + dy, color, clip);
                    }
                }
            }
        }

        // Frame above gridlines so the border stays crisp.
        hline(&mut img, x0 as i64, x1 as i64, y0 as i64, BLACK);
        hline(&mut img, x0 as i64, x1 as i64, y1 as i64, BLACK);
        vline(&mut img, x0 as i64, y0 as i64, y1 as i64, BLACK);
        vline(&mut img, x1 as i64, y0 as i64, y1 as i64, BLACK);

        // Legend in the top-right corner of the plot area.
        let mut ly = y0 as i64 + 8;
        for series in &self.series {
            let tw = text_width(&series.label);
            let lx = x1 as i64 - tw as i64 - 30;
            hline(&mut img, lx, lx + 14, ly + 3, Rgb(series.color));
            hline(&mut img, lx, lx + 14, ly + 4, Rgb(series.color));
            draw_text(&mut img, lx + 20, ly, &series.label, BLACK);
            ly += 12;
        }

        draw_text(&mut img, x0 as i64, 8, &self.title, BLACK);
        let xw = text_width(&self.x_label);
        draw_text(
            &mut img,
            ((x0 + x1) / 2) as i64 - xw as i64 / 2,
            height as i64 - 14,
            &self.x_label,
            BLACK,
        );
        draw_text(&mut img, 4, y0 as i64 - 14, &self.y_label, BLACK);

        img
    }

    pub fn save(&self, path: &Path, width: u32, height: u32) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.render(width, height)
            .save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn x_span(&self) -> (f64, f64) {
        let xs: Vec<f64> = self
            .x_ticks
            .iter()
            .map(|&(p, _)| p)
            .chain(self.series.iter().flat_map(|s| s.points.iter().map(|&(x, _)| x)))
            .collect();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !min.is_finite() || !max.is_finite() {
            return (0.0, 1.0);
        }
        if min == max {
            return (min - 0.5, max + 0.5);
        }
        let pad = (max - min) * 0.04;
        (min - pad, max + pad)
    }

    fn y_span(&self) -> (f64, f64) {
        if let Some(r) = self.y_range {
            return r;
        }
        let ys: Vec<f64> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(_, y)| y))
            .filter(|y| y.is_finite())
            .collect();
        if ys.is_empty() {
            return (0.0, 1.0);
        }
        let min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return (min - 0.5, max + 0.5);
        }
        let pad = (max - min) * 0.08;
        (min - pad, max + pad)
    }
}

/// Around five round-numbered ticks covering `[min, max]`.
fn nice_ticks(min: f64, max: f64) -> Vec<f64> {
    let span = max - min;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let first = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= max + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Short decimal rendering for tick labels: strips trailing zeros.
fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn put_clipped(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>, clip: (i64, i64, i64, i64)) {
    let (cx0, cy0, cx1, cy1) = clip;
    if x >= cx0 && x <= cx1 && y >= cy0 && y <= cy1 {
        put(img, x, y, color);
    }
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, color: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, color);
    }
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, color: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, color);
    }
}

/// Bresenham segment, drawn 2 px thick, restricted to `clip`.
fn line_clipped(
    img: &mut RgbImage,
    from: (i64, i64),
    to: (i64, i64),
    color: Rgb<u8>,
    clip: (i64, i64, i64, i64),
) {
    let (mut x, mut y) = from;
    let (x1, y1) = to;
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_clipped(img, x, y, color, clip);
        put_clipped(img, x + 1, y, color, clip);
        put_clipped(img, x, y + 1, color, clip);
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

/// 5x7 glyphs, one bit per pixel, row-major, bit 4 = leftmost column.
/// Lowercase input is drawn with the uppercase shape; anything unknown
/// becomes a filled box so the gap is visible instead of silent.
const FONT: &[(char, [u8; 7])] = &[
    (' ', [0, 0, 0, 0, 0, 0, 0]),
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110]),
    ('E', [0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001]),
    ('X', [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b01010, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    ('.', [0, 0, 0, 0, 0, 0b01100, 0b01100]),
    (',', [0, 0, 0, 0, 0, 0b00100, 0b01000]),
    (':', [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0]),
    ('-', [0, 0, 0, 0b01110, 0, 0, 0]),
    ('_', [0, 0, 0, 0, 0, 0, 0b11111]),
    ('/', [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000]),
    ('(', [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010]),
    (')', [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000]),
    ('%', [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011]),
    ('+', [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0]),
    ('=', [0, 0, 0b11111, 0, 0b11111, 0, 0]),
];

const UNKNOWN: [u8; 7] = [0b11111; 7];

fn glyph(c: char) -> &'static [u8; 7] {
    let up = c.to_ascii_uppercase();
    FONT.iter()
        .find(|(g, _)| *g == up)
        .map(|(_, rows)| rows)
        .unwrap_or(&UNKNOWN)
}

pub fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * 6
}

pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>) {
    for (i, c) in s.chars().enumerate() {
        let rows = glyph(c);
        let gx = x + i as i64 * 6;
        for (ry, row) in rows.iter().enumerate() {
            for cx in 0..5 {
                if row & (1 << (4 - cx)) != 0 {
                    put(img, gx + cx as i64, y + ry as i64, color);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_plot() -> LinePlot {
        LinePlot {
            title: "accuracy vs ratio".into(),
            x_label: "train composition".into(),
            y_label: "accuracy".into(),
            x_ticks: vec![
                (0.0, "original".into()),
                (1.0, "1:1".into()),
                (2.0, "5:1".into()),
            ],
            series: vec![
                Series {
                    label: "original".into(),
                    points: vec![(0.0, 0.95), (1.0, 0.94), (2.0, 0.93)],
                    color: PALETTE[0],
                },
                Series {
                    label: "corrupted".into(),
                    points: vec![(0.0, 0.90), (1.0, 0.93), (2.0, 0.96)],
                    color: PALETTE[1],
                },
            ],
            y_range: None,
        }
    }

    #[test]
    fn renders_and_saves_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let plot = sample_plot();
        plot.save(&a, 640, 400).unwrap();
        plot.save(&b, 640, 400).unwrap();
        let ba = std::fs::read(&a).unwrap();
        let bb = std::fs::read(&b).unwrap();
        assert!(!ba.is_empty());
        assert_eq!(ba, bb, "identical plots must encode identically");

        let img = image::open(&a).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (640, 400));
        // Something non-white must have been drawn.
        assert!(img.pixels().any(|p| p.0 != [255, 255, 255]));
    }

    #[test]
    fn every_report_character_has_a_glyph() {
        for c in "abcdefghijklmnopqrstuvwxyz0123456789.,:-_/()%+= ".chars() {
            assert_ne!(glyph(c), &UNKNOWN, "missing glyph for {c:?}");
        }
        assert_eq!(glyph('@'), &UNKNOWN);
    }

    #[test]
    fn tick_helper_spans_the_range() {
        let ticks = nice_ticks(0.0, 1.0);
        assert!(ticks.len() >= 4 && ticks.len() <= 7, "{ticks:?}");
        assert!(ticks.first().unwrap() >= &0.0);
        assert!(ticks.last().unwrap() <= &1.0000001);
        assert_eq!(trim_float(0.9000), "0.9");
        assert_eq!(trim_float(1.0), "1");
    }

    #[test]
    fn single_point_series_does_not_collapse_the_scale() {
        let plot = LinePlot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_ticks: vec![(0.0, "only".into())],
            series: vec![Series { label: "s".into(), points: vec![(0.0, 0.5)], color: PALETTE[2] }],
            y_range: None,
        };
        let img = plot.render(300, 200);
        assert!(img.pixels().any(|p| p.0 != [255, 255, 255]));
    }
}
