//! Candidate grid composition for batch reranking.
//!
//! Each candidate is letterboxed into a square cell, framed with a colored
//! box, and stamped with its rank index on a filled chip in the top-left
//! corner. Cells are laid out row-major into an `m × m` raster, so the label
//! on cell `i` is exactly the index the reranker must answer with.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("label index {index} out of range for a {m}x{m} grid")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("expected {expected} images for the grid, got {actual}")]
    WrongCount { expected: usize, actual: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

/// Eight well-separated box colors, cycled by index.
pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [0, 130, 200],   // blue
    [245, 130, 48],  // orange
    [145, 30, 180],  // purple
    [0, 160, 160],   // teal
    [240, 50, 230],  // magenta
    [128, 128, 0],   // olive
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub m: usize,
    pub cell_px: u32,
    pub border_px: u32,
    pub label_px: u32,
    pub palette: Vec<[u8; 3]>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            m: 4,
            cell_px: 256,
            border_px: 6,
            label_px: 28,
            palette: DEFAULT_PALETTE.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn with_m(m: usize) -> Self {
        Self { m, ..Self::default() }
    }

    pub fn cells(&self) -> usize {
        self.m * self.m
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.m < 2 {
            return Err(GridError::InvalidSpec(format!("m = {} (need m >= 2)", self.m)));
        }
        if self.cell_px < 64 {
            return Err(GridError::InvalidSpec(format!("cell_px = {} (need >= 64)", self.cell_px)));
        }
        if self.palette.is_empty() {
            return Err(GridError::InvalidSpec("empty palette".into()));
        }
        if self.border_px == 0 || self.label_px == 0 {
            return Err(GridError::InvalidSpec("border_px and label_px must be positive".into()));
        }
        if self.border_px * 2 >= self.cell_px {
            return Err(GridError::InvalidSpec("border wider than the cell".into()));
        }
        Ok(())
    }

    pub fn color(&self, index: usize) -> Rgb<u8> {
        Rgb(self.palette[index % self.palette.len()])
    }
}

#[derive(Debug, Clone)]
pub struct GridImage {
    pub pixels: RgbImage,
    pub m: usize,
    pub cell_px: u32,
    pub source_ids: Vec<String>,
}

impl GridImage {
    /// Row-major cell position of rank index `i`.
    pub fn cell_of(&self, i: usize) -> (usize, usize) {
        cell_of(i, self.m)
    }

    /// Pixel at the center of cell `i`.
    pub fn cell_center(&self, i: usize) -> Rgb<u8> {
        let (r, c) = self.cell_of(i);
        let half = self.cell_px / 2;
        *self.pixels.get_pixel(c as u32 * self.cell_px + half, r as u32 * self.cell_px + half)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, GridError> {
        encode_png(&self.pixels)
    }
}

pub fn cell_of(i: usize, m: usize) -> (usize, usize) {
    (i / m, i % m)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, GridError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

// 5×7 digit glyphs, one row per byte, bit 4 = leftmost column.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    let (iw, ih) = img.dimensions();
    for y in y0..(y0 + h).min(ih) {
        for x in x0..(x0 + w).min(iw) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Draws `index` in decimal on a filled chip at the top-left corner and
/// returns the chip size.
fn draw_label(img: &mut RgbImage, index: usize, label_px: u32, color: Rgb<u8>) -> (u32, u32) {
    let scale = (label_px / 7).max(1);
    let pad = scale.max(2);
    let digits: Vec<usize> = index.to_string().bytes().map(|b| (b - b'0') as usize).collect();
    let glyph_w = 5 * scale;
    let gap = scale;
    let text_w = digits.len() as u32 * glyph_w + (digits.len() as u32 - 1) * gap;
    let chip_w = text_w + 2 * pad;
    let chip_h = 7 * scale + 2 * pad;
    fill_rect(img, 0, 0, chip_w, chip_h, color);
    for (n, &d) in digits.iter().enumerate() {
        let x0 = pad + n as u32 * (glyph_w + gap);
        for (row, bits) in GLYPHS[d].iter().enumerate() {
            for col in 0..5u32 {
                if bits & (0b10000 >> col) != 0 {
                    fill_rect(img, x0 + col * scale, pad + row as u32 * scale, scale, scale, WHITE);
                }
            }
        }
    }
    (chip_w, chip_h)
}

/// Aspect-preserving fit into a `size × size` black canvas, centered.
fn letterbox(image: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let scale = f64::from(size) / f64::from(w.max(h));
    let nw = ((f64::from(w) * scale).round() as u32).clamp(1, size);
    let nh = ((f64::from(h) * scale).round() as u32).clamp(1, size);
    let resized = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, nw, nh, FilterType::Triangle)
    };
    let mut canvas = RgbImage::from_pixel(size, size, BLACK);
    imageops::replace(&mut canvas, &resized, i64::from((size - nw) / 2), i64::from((size - nh) / 2));
    canvas
}

/// Produces one annotated grid cell for rank index `index`.
pub fn annotate(image: &RgbImage, index: usize, spec: &GridSpec) -> Result<RgbImage, GridError> {
    spec.validate()?;
    if index >= spec.cells() {
        return Err(GridError::IndexOutOfRange { index, m: spec.m });
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(GridError::EmptyImage);
    }
    let size = spec.cell_px;
    let b = spec.border_px;
    let color = spec.color(index);
    let mut cell = letterbox(image, size);
    fill_rect(&mut cell, 0, 0, size, b, color);
    fill_rect(&mut cell, 0, size - b, size, b, color);
    fill_rect(&mut cell, 0, 0, b, size, color);
    fill_rect(&mut cell, size - b, 0, b, size, color);
    draw_label(&mut cell, index, spec.label_px, color);
    Ok(cell)
}

/// Lays out `m²` candidates (in rank order) into one annotated raster.
pub fn compose_grid(images: &[(String, RgbImage)], spec: &GridSpec) -> Result<GridImage, GridError> {
    spec.validate()?;
    let n = spec.cells();
    if images.len() != n {
        return Err(GridError::WrongCount {
            expected: n,
            actual: images.len(),
        });
    }
    let side = spec.cell_px * spec.m as u32;
    let mut pixels = RgbImage::from_pixel(side, side, BLACK);
    for (i, (_, img)) in images.iter().enumerate() {
        let cell = annotate(img, i, spec)?;
        let (r, c) = cell_of(i, spec.m);
        imageops::replace(
            &mut pixels,
            &cell,
            i64::from(c as u32 * spec.cell_px),
            i64::from(r as u32 * spec.cell_px),
        );
    }
    Ok(GridImage {
        pixels,
        m: spec.m,
        cell_px: spec.cell_px,
        source_ids: images.iter().map(|(id, _)| id.clone()).collect(),
    })
}

/// Renders the label chip of index `i` on a blank cell and returns the chip
/// region. Used to check that labels are visually distinct.
pub fn label_chip(index: usize, spec: &GridSpec) -> RgbImage {
    let mut canvas = RgbImage::from_pixel(spec.cell_px, spec.cell_px, BLACK);
    let (w, h) = draw_label(&mut canvas, index, spec.label_px, spec.color(index));
    imageops::crop_imm(&canvas, 0, 0, w.min(spec.cell_px), h.min(spec.cell_px)).to_image()
}
