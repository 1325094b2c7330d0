//! Renders a sample with its decision-path patches outlined and numbered
//! in path order, as a binary PPM.

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::tree::NodeRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB triples, row-major.
    pub pixels: Vec<u8>,
}

/// Outline rectangle of one grid cell in image pixels, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 110, 240],
    [240, 180, 20],
    [200, 60, 220],
    [30, 200, 210],
];

/// 3x5 digit glyphs, one row per u8 (low three bits, MSB on the left).
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

impl Image {
    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    fn outline(&mut self, r: Rect, thickness: usize, rgb: [u8; 3]) {
        for t in 0..thickness {
            for x in r.x0..=r.x1 {
                self.put(x, r.y0 + t, rgb);
                self.put(x, r.y1.saturating_sub(t), rgb);
            }
            for y in r.y0..=r.y1 {
                self.put(r.x0 + t, y, rgb);
                self.put(r.x1.saturating_sub(t), y, rgb);
            }
        }
    }

    fn number(&mut self, mut x: usize, y: usize, n: usize, px: usize, rgb: [u8; 3]) {
        for ch in n.to_string().bytes() {
            let glyph = DIGITS[(ch - b'0') as usize];
            for (gy, row) in glyph.iter().enumerate() {
                for gx in 0..3 {
                    if row >> (2 - gx) & 1 == 1 {
                        for dy in 0..px {
                            for dx in 0..px {
                                self.put(x + gx * px + dx, y + gy * px + dy, rgb);
                            }
                        }
                    }
                }
            }
            x += 4 * px;
        }
    }
}

/// Pixel rectangle of grid cell `index` at the given scale.
pub fn cell_rect(layout: &Layout, index: usize, scale: usize) -> Result<Rect> {
    let k = layout.rows * layout.cols;
    if index >= k {
        return Err(Error::OutOfRange { index, len: k });
    }
    let side = layout.tile * scale;
    let (r, c) = (index / layout.cols, index % layout.cols);
    Ok(Rect {
        x0: c * side,
        y0: r * side,
        x1: (c + 1) * side - 1,
        y1: (r + 1) * side - 1,
    })
}

/// Draws the sample and marks each path node's patch with a coloured
/// outline and its 1-based position along the path.
pub fn render(patches: &[f64], layout: &Layout, path: &[NodeRecord], scale: usize) -> Result<Image> {
    let (t, ch) = (layout.tile, layout.channels);
    let p = t * t * ch;
    if patches.len() != layout.rows * layout.cols * p {
        return Err(Error::dim(format!(
            "{} values do not fill a {}x{} grid of {t}x{t}x{ch} tiles",
            patches.len(),
            layout.rows,
            layout.cols
        )));
    }
    let width = layout.cols * t * scale;
    let height = layout.rows * t * scale;
    let mut img = Image {
        width,
        height,
        pixels: vec![0; width * height * 3],
    };
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..height {
        for x in 0..width {
            let (iy, ix) = (y / scale, x / scale);
            let cell = (iy / t) * layout.cols + ix / t;
            let base = cell * p + ((iy % t) * t + ix % t) * ch;
            let rgb = if ch == 1 {
                [to_byte(patches[base]); 3]
            } else {
                [to_byte(patches[base]), to_byte(patches[base + 1]), to_byte(patches[base + 2])]
            };
            img.put(x, y, rgb);
        }
    }
    let thickness = (scale / 3).max(1);
    let glyph_px = (scale / 4).max(1);
    let mut labels_in_cell = vec![0usize; layout.rows * layout.cols];
    for (order, rec) in path.iter().enumerate() {
        let rect = cell_rect(layout, rec.patch_index, scale)?;
        let color = PALETTE[order % PALETTE.len()];
        img.outline(rect, thickness, color);
        let slot = labels_in_cell[rec.patch_index];
        labels_in_cell[rec.patch_index] += 1;
        let x = rect.x0 + thickness + 1 + slot * 4 * glyph_px * (order + 1).to_string().len();
        img.number(x, rect.y0 + thickness + 1, order + 1, glyph_px, color);
    }
    Ok(img)
}
