//! 8-bit RGB / grayscale rasters and binary Netpbm (P6 / P5) I/O.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Read-only view shared by every 8-bit raster the matcher can consume.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn channels(&self) -> usize;
    /// Row-major, channel-interleaved samples.
    fn data(&self) -> &[u8];
}

/// An H×W×3 RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&color);
        }
        Frame {
            height,
            width,
            pixels,
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB frame needs {} bytes, got {}",
                width,
                height,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Fill the rectangle with top-left `(x, y)`, clipped to the frame.
    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, color: [u8; 3]) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.set(xx, yy, color);
            }
        }
    }

    /// Copy of the `w`×`h` sub-image at `(x, y)`. Panics when out of bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Frame {
        assert!(x + w <= self.width && y + h <= self.height, "crop out of bounds");
        let mut pixels = Vec::with_capacity(w * h * 3);
        for yy in y..y + h {
            let start = (yy * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Frame {
            height: h,
            width: w,
            pixels,
        }
    }

    /// Most frequent color; ties go to the smallest RGB triple.
    pub fn modal_color(&self) -> [u8; 3] {
        let mut counts = std::collections::BTreeMap::new();
        for px in self.pixels.chunks_exact(3) {
            *counts.entry([px[0], px[1], px[2]]).or_insert(0usize) += 1;
        }
        let mut best = ([0u8; 3], 0usize);
        for (color, n) in counts {
            if n > best.1 {
                best = (color, n);
            }
        }
        best.0
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode(b"P6", self.width, self.height, &self.pixels)
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode(bytes, b"P6", 3)?;
        Frame::from_pixels(h, w, data)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Frame::from_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl Raster for Frame {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        3
    }
    fn data(&self) -> &[u8] {
        &self.pixels
    }
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{}x{} gray image needs {} bytes, got {}",
                width,
                height,
                height * width,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    /// Integer luma (ITU-R 601 weights, rounded).
    pub fn from_frame(frame: &Frame) -> Self {
        let pixels = frame
            .pixels
            .chunks_exact(3)
            .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
            .collect();
        GrayImage {
            height: frame.height,
            width: frame.width,
            pixels,
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode(b"P5", self.width, self.height, &self.pixels)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode(bytes, b"P5", 1)?;
        GrayImage::from_pixels(h, w, data)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::from_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl Raster for GrayImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        1
    }
    fn data(&self) -> &[u8] {
        &self.pixels
    }
}

fn encode(magic: &[u8], width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let header = format!("{}\n{} {}\n255\n", std::str::from_utf8(magic).unwrap(), width, height);
    let mut out = Vec::with_capacity(header.len() + data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

/// Parses a binary Netpbm header. Comments are allowed between tokens; maxval
/// must be 255 and the payload must be exactly `w * h * channels` bytes.
fn decode(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("header field overflows".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} payload bytes for {width}x{height}, got {}",
            payload.len()
        )));
    }
    Ok((width, height, payload.to_vec()))
}
