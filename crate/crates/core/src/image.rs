//! 8-bit RGB images and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const SIZE: usize = 16;
pub const CHANNELS: usize = 3;
/// Values in a `SIZE x SIZE x CHANNELS` image.
pub const NUMEL: usize = SIZE * SIZE * CHANNELS;

/// Row-major RGB image, `height * width * 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Values mapped from `[0, 255]` to `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0 * 2.0 - 1.0).collect()
    }

    /// Inverse of [`Image::to_signed`], clamping and rounding to bytes.
    pub fn from_signed(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height * 3);
        let data = values
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8)
            .collect();
        Self { width, height, data }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
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
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("expected P6 magic, found {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
        let (width, height, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(format!("unsupported max value {max}"));
        }
        pos += 1;
        let need = width * height * 3;
        let data = bytes.get(pos..pos + need).ok_or("truncated pixel data")?.to_vec();
        Ok(Self { width, height, data })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_ppm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::filled(3, 2, [1, 2, 3]);
        img.set_pixel(1, 2, [255, 0, 128]);
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
        assert!(Image::from_ppm(b"P6\n3 2\n255\n\x01").is_err());
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn signed_round_trip_is_exact() {
        let img = Image {
            width: 16,
            height: 16,
            data: (0..NUMEL).map(|i| (i * 7 % 256) as u8).collect(),
        };
        assert_eq!(Image::from_signed(16, 16, &img.to_signed()), img);
    }
}
