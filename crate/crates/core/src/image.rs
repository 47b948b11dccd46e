//! Single-channel raster types shared by the pipeline stages.

use crate::error::{Error, Result};

/// Row-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::data(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Row-major binary image with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    /// Fails if any value is outside {0, 1}.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::data(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::data(format!("mask value {} at index {pos} is not binary", data[pos])));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Co-registered acquisitions at t1 and t2.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub t1: Grid,
    pub t2: Grid,
}

impl ImagePair {
    pub fn new(t1: Grid, t2: Grid) -> Result<Self> {
        if t1.dims() != t2.dims() {
            return Err(Error::data(format!("image extents differ: {:?} vs {:?}", t1.dims(), t2.dims())));
        }
        Ok(ImagePair { t1, t2 })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.t1.dims()
    }
}

/// Mirror index into `0..n` without repeating the edge sample (`-1 -> 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
