//! Binary graymap (PGM, `P5`) images. Pixel values in [-1, 1] map to 0..=255.

use std::path::Path;

use agedit_core::synthface::IMAGE_SIZE;
use agedit_core::Tensor;

use crate::error::{AppError, AppResult};
use crate::format::write_file;

pub fn to_gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_gray(g: u8) -> f32 {
    g as f32 / 127.5 - 1.0
}

/// A `width × height` graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize) -> Self {
        Gray {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// From any tensor whose last two dims are `[h, w]` (leading dims must be 1).
    pub fn from_tensor(t: &Tensor<f32>) -> AppResult<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(AppError::Failed(format!("cannot write a tensor of shape {s:?} as one image")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(Gray {
            width: w,
            height: h,
            pixels: t.data().iter().map(|&v| to_gray(v)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width], self.pixels.iter().map(|&g| from_gray(g)).collect())
            .expect("size matches")
    }

    pub fn blit(&mut self, src: &Gray, x0: usize, y0: usize) {
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                self.pixels[(y0 + y) * self.width + x0 + x] = src.pixels[y * src.width + x];
            }
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad PGM header")?.to_string());
        }
        if fields[0] != "P5" {
            return Err(format!("unsupported image type {:?} (expected P5)", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != width * height {
            return Err(format!("expected {} pixels, found {}", width * height, data.len()));
        }
        Ok(Gray {
            width,
            height,
            pixels: data.to_vec(),
        })
    }
}

pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> AppResult<()> {
    write_file(path, &Gray::from_tensor(t)?.to_pgm())
}

pub fn read_pgm(path: &Path) -> AppResult<Gray> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    Gray::from_pgm(&bytes).map_err(|m| AppError::format(path, m))
}

/// Gap between tiles in a grid, in pixels.
pub const GRID_GAP: usize = 1;

/// Lay out `rows[r][c]` images (each `IMAGE_SIZE` square) on a mid-gray
/// background; rows may be ragged.
pub fn grid(rows: &[Vec<Tensor<f32>>]) -> AppResult<Gray> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let step = IMAGE_SIZE + GRID_GAP;
    let mut g = Gray::new(cols * step + GRID_GAP, rows.len() * step + GRID_GAP);
    g.pixels.fill(128);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            g.blit(&Gray::from_tensor(img)?, GRID_GAP + c * step, GRID_GAP + r * step);
        }
    }
    Ok(g)
}

/// Number of `(rows, cols)` tiles in a grid image produced by [`grid`].
pub fn grid_tiles(g: &Gray) -> (usize, usize) {
    let step = IMAGE_SIZE + GRID_GAP;
    ((g.height - GRID_GAP) / step, (g.width - GRID_GAP) / step)
}
