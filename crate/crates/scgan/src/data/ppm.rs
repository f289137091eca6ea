//! Binary PPM (P6) image I/O and the figure-grid montage writer.

use std::io::{Read, Write};
use std::path::Path;

use super::ImageBuffer;
use crate::{Error, Result};

/// Write one image as binary PPM with the exact header
/// `P6\n{width} {height}\n255\n`.
pub fn write_ppm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes())?;
    f.write_all(&image.pixels)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`] (or any P6 file with maxval
/// 255 and single-whitespace token separation).
pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(format!("missing {what} in header")));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token(what)?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(format!("bad {what} in header")))
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if cur.token("magic")? != b"P6" {
        return Err(Error::format("not a binary PPM (magic != P6)"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval} (want 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::format("missing separator after maxval"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let payload = &bytes[cur.pos + 1..];
    if payload.len() < need {
        return Err(Error::format(format!(
            "truncated payload: want {need} bytes, have {}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(Error::format(format!(
            "trailing data: {} extra bytes after payload",
            payload.len() - need
        )));
    }
    ImageBuffer::new(width, height, payload.to_vec())
}

/// Width of the white separator between grid tiles, in pixels.
pub const GRID_SEPARATOR: usize = 2;

/// Tile equally sized images row-major into one canvas with white
/// separators: a `rows x cols` grid of `S`-pixel tiles spans
/// `cols*S + (cols-1)*2` by `rows*S + (rows-1)*2` pixels.
pub fn grid(images: &[ImageBuffer], rows: usize, cols: usize) -> Result<ImageBuffer> {
    if rows == 0 || cols == 0 || images.len() != rows * cols {
        return Err(Error::shape(format!(
            "grid of {rows}x{cols} wants {} images, got {}",
            rows * cols,
            images.len()
        )));
    }
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(Error::shape("grid tiles must share one size"));
    }
    let canvas_w = cols * w + (cols - 1) * GRID_SEPARATOR;
    let canvas_h = rows * h + (rows - 1) * GRID_SEPARATOR;
    let mut pixels = vec![255u8; canvas_w * canvas_h * 3];
    for (idx, im) in images.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        let y0 = r * (h + GRID_SEPARATOR);
        let x0 = c * (w + GRID_SEPARATOR);
        for y in 0..h {
            let dst = ((y0 + y) * canvas_w + x0) * 3;
            let src = y * w * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&im.pixels[src..src + w * 3]);
        }
    }
    ImageBuffer::new(canvas_w, canvas_h, pixels)
}
