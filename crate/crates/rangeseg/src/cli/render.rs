//! Range-image rendering: grayscale inverse range with a class-colored
//! overlay, written as PNG.

use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::projection::{RangeImage, CH_RANGE};

/// Deterministic class palette from a golden-angle hue walk.
pub fn class_color(id: u16) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 360.0;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0) as u8,
        ((g + m) * 255.0) as u8,
        ((b + m) * 255.0) as u8,
    ]
}

/// Write a `W x H` PNG: valid pixels shaded by inverse range, blended with
/// their class color where a nonzero label is present.
pub fn render_range_image(
    img: &RangeImage,
    labels: Option<ArrayView2<u16>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.geometry.height, img.geometry.width);
    if let Some(l) = labels {
        if l.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "label map {:?} does not match geometry {h}x{w}",
                l.dim()
            )));
        }
    }
    let mut max_range = 0.0f32;
    for v in 0..h {
        for u in 0..w {
            if img.valid[(v, u)] {
                max_range = max_range.max(img.data[(v, u, CH_RANGE)]);
            }
        }
    }
    if max_range <= 0.0 {
        max_range = 1.0;
    }

    let mut buffer = image::RgbImage::new(w as u32, h as u32);
    for v in 0..h {
        for u in 0..w {
            let pixel = if img.valid[(v, u)] {
                let r = img.data[(v, u, CH_RANGE)];
                let gray = (255.0 * (1.0 - r / max_range).clamp(0.0, 1.0)) as u8;
                match labels.as_ref().map(|l| l[(v, u)]).filter(|&l| l != 0) {
                    Some(label) => {
                        let color = class_color(label);
                        [
                            ((gray as u16 + color[0] as u16) / 2) as u8,
                            ((gray as u16 + color[1] as u16) / 2) as u8,
                            ((gray as u16 + color[2] as u16) / 2) as u8,
                        ]
                    }
                    None => [gray, gray, gray],
                }
            } else {
                [0, 0, 0]
            };
            buffer.put_pixel(u as u32, v as u32, image::Rgb(pixel));
        }
    }
    buffer
        .save(path)
        .map_err(|e| Error::State(format!("png write failed: {e}")))
}
