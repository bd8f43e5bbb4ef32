//! Direction-versus-position strip plots.

use std::path::Path;

use adwpf::types::DirectionTrace;
use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

pub const MAX_WIDTH: usize = 2000;
pub const HEIGHT: u32 = 64;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([170, 170, 170]);
const OUTGOING: Rgb<u8> = Rgb([31, 119, 180]);
const INCOMING: Rgb<u8> = Rgb([214, 39, 40]);

/// Outgoing cells are drawn above the axis and incoming cells below it. Long
/// traces are binned so one pixel column covers several cells; a column is drawn
/// in a direction when any of its cells has that direction.
pub fn render_strip(trace: &DirectionTrace) -> RgbImage {
    let values = trace.values();
    let per_col = values.len().div_ceil(MAX_WIDTH).max(1);
    let width = values.len().div_ceil(per_col).max(1);
    let mut img = RgbImage::from_pixel(width as u32, HEIGHT, BACKGROUND);
    let mid = HEIGHT / 2;
    for x in 0..width as u32 {
        img.put_pixel(x, mid, AXIS);
    }
    for (col, cells) in values.chunks(per_col).enumerate() {
        let x = col as u32;
        if cells.iter().any(|v| *v > 0) {
            for y in 4..mid {
                img.put_pixel(x, y, OUTGOING);
            }
        }
        if cells.iter().any(|v| *v < 0) {
            for y in mid + 1..HEIGHT - 4 {
                img.put_pixel(x, y, INCOMING);
            }
        }
    }
    img
}

pub fn save_strip(trace: &DirectionTrace, path: &Path) -> Result<()> {
    render_strip(trace).save(path).with_context(|| format!("writing {}", path.display()))
}
