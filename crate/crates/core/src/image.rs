//! Dense multi-channel float maps and their on-disk encodings.
//!
//! Flat map format (little-endian): `b"SSFM"`, `u32 width`, `u32 height`,
//! `u32 channels`, then `width * height * channels` `f32` values, row-major,
//! channels interleaved.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const MAP_MAGIC: &[u8; 4] = b"SSFM";

#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return invalid(format!("map data length {} != {width}x{height}x{channels}", data.len()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.width, self.height, self.channels)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y) + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &FloatMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn write_flat(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_flat_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_flat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MAP_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn read_flat(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_flat_bytes(&bytes)
    }

    pub fn from_flat_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Parse { offset: bytes.len(), msg: "truncated map header".into() });
        }
        if &bytes[0..4] != MAP_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad map magic".into() });
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (w, h, c) = (rd(4), rd(8), rd(12));
        let n = w * h * c;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Parse { offset: bytes.len(), msg: format!("expected {} bytes of map data", 4 * n) });
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { width: w, height: h, channels: c, data })
    }

    /// 8-bit PNG (1 or 3 channels), values clamped to [0, 1].
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return invalid(format!("cannot write {c}-channel map as png")),
        };
        let file = BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::InvalidInput(e.to_string()))?;
        w.write_image_data(&self.to_u8()).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let dec = png::Decoder::new(file);
        let mut reader = dec.read_info().map_err(|e| Error::Parse { offset: 0, msg: e.to_string() })?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Parse { offset: 0, msg: e.to_string() })?;
        if info.bit_depth != png::BitDepth::Eight {
            return invalid("only 8-bit png is supported");
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return invalid(format!("unsupported png color type {other:?}")),
        };
        let n = info.width as usize * info.height as usize * channels;
        let data = buf[..n].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { width: info.width as usize, height: info.height as usize, channels, data })
    }

    /// Binary PPM (P6) for quick debugging.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return invalid("ppm needs 3 channels");
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_u8())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_format_header_is_sixteen_bytes() {
        let mut m = FloatMap::new(3, 2, 1);
        m.set(2, 1, 0, 1.5);
        let b = m.to_flat_bytes();
        assert_eq!(b.len(), 16 + 6 * 4);
        assert_eq!(&b[..4], MAP_MAGIC);
        let back = FloatMap::from_flat_bytes(&b).unwrap();
        assert_eq!(back, m);
        assert!(FloatMap::from_flat_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = FloatMap::new(4, 3, 3);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = (i % 5) as f64 / 4.0;
        }
        let p = dir.path().join("x.png");
        m.write_png(&p).unwrap();
        let back = FloatMap::read_png(&p).unwrap();
        assert!(back.same_shape(&m));
        for (a, b) in back.data.iter().zip(&m.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
