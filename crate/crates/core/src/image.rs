//! RGB images and their on-disk formats: binary PPM (`P6`, 8-bit) and
//! little-endian PFM (32-bit float).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Values rounded through 8-bit storage, i.e. what a PPM round trip
    /// yields.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_u8(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::with_capacity(4);
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
                return Err("truncated PPM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported PPM magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PPM header field {s:?}: {e}"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported PPM maxval {maxval}"));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let n = w * h * 3;
        if bytes.len() < pos + n {
            return Err(format!("truncated PPM raster: need {n} bytes"));
        }
        let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// PFM stores rows bottom-to-top; a negative scale marks little endian.
    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            let row = &self.data[y * self.width * 3..(y + 1) * self.width * 3];
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_pfm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut lines = Vec::new();
        let mut pos = 0;
        while lines.len() < 3 {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err("truncated PFM header".into());
            }
            lines.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?.trim());
            pos += 1;
        }
        if lines[0] != "PF" {
            return Err(format!("unsupported PFM magic {:?}", lines[0]));
        }
        let dims: Vec<usize> = lines[1]
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| format!("bad PFM size: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if dims.len() != 2 {
            return Err("bad PFM size line".into());
        }
        let scale: f64 = lines[2].parse().map_err(|e| format!("bad PFM scale: {e}"))?;
        if scale >= 0.0 {
            return Err("big-endian PFM is not supported".into());
        }
        let (w, h) = (dims[0], dims[1]);
        let n = w * h * 3;
        if bytes.len() < pos + n * 4 {
            return Err("truncated PFM raster".into());
        }
        let vals: Vec<f64> = bytes[pos..pos + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut data = vec![0.0; n];
        for y in 0..h {
            let src = &vals[(h - 1 - y) * w * 3..(h - y) * w * 3];
            data[y * w * 3..(y + 1) * w * 3].copy_from_slice(src);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pfm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pfm(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
