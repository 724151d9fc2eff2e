//! Minimal static bar charts rendered straight into PNG files.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 20;

/// Vertical bars, one per value, scaled to the maximum; values are drawn in
/// the order given.
pub fn bar_chart(values: &[usize], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    // axes
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN - 1, y, Rgb([0, 0, 0]));
    }
    let max = values.iter().copied().max().unwrap_or(0);
    if max > 0 {
        let slot = plot_w as f64 / values.len() as f64;
        for (i, &v) in values.iter().enumerate() {
            let x0 = MARGIN + (i as f64 * slot) as u32;
            let x1 = (MARGIN + ((i as f64 + 0.8) * slot) as u32).max(x0 + 1);
            let h = ((v as f64 / max as f64) * plot_h as f64).round() as u32;
            for x in x0..x1.min(WIDTH - MARGIN) {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    img.put_pixel(x, y, Rgb([52, 101, 164]));
                }
            }
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}
