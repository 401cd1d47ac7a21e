//! Single-plane rasters: binary masks and probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary raster, row-major, values strictly 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mask {}×{}", self.height, self.width)?;
        if self.height * self.width <= 64 * 64 {
            for r in 0..self.height {
                let row: String = (0..self.width)
                    .map(|c| if self.get(r, c) { '#' } else { '.' })
                    .collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from arbitrary bytes; any nonzero value is foreground.
    pub fn from_nonzero(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}×{width} needs {} bytes, got {}",
                height * width,
                raw.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: raw.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Parses rows of `#`/`.` (any other non-whitespace char counts as foreground
    /// except `.` and `0`). Handy for tests.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Self::from_fn(height, width, |r, c| {
            let ch = rows[r].as_bytes()[c];
            ch != b'.' && ch != b'0'
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    /// Signed lookup; out-of-bounds is background.
    #[inline]
    pub fn get_i(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.get(r as usize, c as usize)
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & b)
    }

    /// Pixels of `self` not in `other`.
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        Ok(self.and(other)?.count())
    }

    /// `0.0/1.0` values as `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// 8-bit grayscale rendering (0 or 255).
    pub fn to_u8_255(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Real-valued single-plane raster, typically probabilities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "prob map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_mask(m: &Mask) -> Self {
        Self {
            height: m.height(),
            width: m.width(),
            data: m.to_f64(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}
