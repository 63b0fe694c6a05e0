//! Square RGB images with channel values in `[0, 1]`, plus binary PPM (P6)
//! and PGM (P5) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    /// Row-major `side × side × 3`.
    pixels: Vec<f64>,
}

impl Image {
    pub fn filled(side: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            pixels.extend_from_slice(&rgb);
        }
        Image { side, pixels }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side * 3 {
            return Err(Error::dim(format!(
                "{} values for a {side}x{side} RGB image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.side + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.side + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Non-overlapping `patch × patch` tiles in row-major tile order, each
    /// flattened as (row, column, channel).
    pub fn patches(&self, patch: usize) -> Result<Vec<f64>> {
        if patch == 0 || !self.side.is_multiple_of(patch) {
            return Err(Error::dim(format!(
                "patch side {patch} does not tile a {}-pixel image",
                self.side
            )));
        }
        let per = self.side / patch;
        let mut out = Vec::with_capacity(self.pixels.len());
        for gy in 0..per {
            for gx in 0..per {
                for y in gy * patch..(gy + 1) * patch {
                    let o = (y * self.side + gx * patch) * 3;
                    out.extend_from_slice(&self.pixels[o..o + patch * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_netpbm(bytes, b"P6")?;
        if w != h {
            return Err(Error::Data(format!("image is {w}x{h}, expected square")));
        }
        if body.len() != w * h * 3 {
            return Err(Error::Data("truncated PPM body".into()));
        }
        let pixels = body.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { side: w, pixels })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary greyscale PGM (P5, maxval 255) of a `width × height` map in `[0, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

/// Parses a binary netpbm header; returns width, height and the raster.
pub fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::Data(format!("netpbm: {m}"));
    if !bytes.starts_with(magic) {
        return Err(bad("wrong magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}
