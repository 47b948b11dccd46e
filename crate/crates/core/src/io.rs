//! On-disk raster formats.
//!
//! * 16-bit binary PGM (`P5`, maxval 65535, big-endian samples) for viewing
//!   intensities, masks and label maps. Intensities are fixed-point scaled by
//!   a factor the caller records in its manifest.
//! * `CAMF`: float-exact rasters. A text header `CAMF\n<height> <width> <channels>\n`
//!   followed by little-endian `f64` values, channel-major then row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Grid, Mask};

pub const PGM_MAXVAL: u16 = 65535;
const CAMF_MAGIC: &str = "CAMF";

/// Raw PGM raster as stored: extents, maxval and samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Format(format!(
                "expected binary PGM (P5), found {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let width = parse_usize(next_token(bytes, &mut pos)?)?;
        let height = parse_usize(next_token(bytes, &mut pos)?)?;
        let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let need = width * height * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < need {
            return Err(Error::corrupt(format!("PGM raster has {} bytes, expected {need}", raster.len())));
        }
        let samples: Vec<u16> = if wide {
            raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster[..need].iter().map(|&b| b as u16).collect()
        };
        if let Some(bad) = samples.iter().find(|&&s| s as usize > maxval) {
            return Err(Error::corrupt(format!("PGM sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Pgm { width, height, maxval: maxval as u16, samples })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::corrupt("unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::corrupt(format!("bad header number {:?}", String::from_utf8_lossy(tok))))
}

/// Quantizes `grid / scale` to 16 bits. Returns the PGM and the scale used,
/// which is the grid maximum unless one is supplied.
pub fn grid_to_pgm(grid: &Grid, scale: Option<f64>) -> (Pgm, f64) {
    let scale = scale.unwrap_or_else(|| grid.data.iter().cloned().fold(0.0, f64::max));
    let samples = grid
        .data
        .iter()
        .map(|&v| {
            if scale > 0.0 {
                (v / scale * PGM_MAXVAL as f64).round().clamp(0.0, PGM_MAXVAL as f64) as u16
            } else {
                0
            }
        })
        .collect();
    (Pgm { width: grid.width, height: grid.height, maxval: PGM_MAXVAL, samples }, scale)
}

pub fn pgm_to_grid(pgm: &Pgm, scale: f64) -> Grid {
    let data = pgm.samples.iter().map(|&s| s as f64 / pgm.maxval as f64 * scale).collect();
    Grid { height: pgm.height, width: pgm.width, data }
}

/// Binary masks are stored as 0 / maxval.
pub fn mask_to_pgm(mask: &Mask) -> Pgm {
    Pgm {
        width: mask.width,
        height: mask.height,
        maxval: PGM_MAXVAL,
        samples: mask.data.iter().map(|&v| if v == 1 { PGM_MAXVAL } else { 0 }).collect(),
    }
}

/// Accepts only 0 and maxval samples.
pub fn pgm_to_mask(pgm: &Pgm) -> Result<Mask> {
    let data = pgm
        .samples
        .iter()
        .map(|&s| match s {
            0 => Ok(0u8),
            s if s == pgm.maxval => Ok(1u8),
            s => Err(Error::data(format!("mask sample {s} is neither 0 nor {}", pgm.maxval))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(pgm.height, pgm.width, data)
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    fs::write(path, pgm.encode())?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    Pgm::decode(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, &mask_to_pgm(mask))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    pgm_to_mask(&read_pgm(path)?)
}

/// Float-exact raster with one or more channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Camf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Camf {
    pub fn from_grid(grid: &Grid) -> Self {
        Camf { height: grid.height, width: grid.width, channels: 1, data: grid.data.clone() }
    }

    pub fn into_grid(self) -> Result<Grid> {
        if self.channels != 1 {
            return Err(Error::data(format!(
                "expected a single-channel raster, found {} channels",
                self.channels
            )));
        }
        Grid::new(self.height, self.width, self.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 8);
        // writing into a Vec cannot fail
        let _ = write!(out, "{CAMF_MAGIC}\n{} {} {}\n", self.height, self.width, self.channels);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if next_token(bytes, &mut pos)? != CAMF_MAGIC.as_bytes() {
            return Err(Error::Format("missing CAMF magic".into()));
        }
        let height = parse_usize(next_token(bytes, &mut pos)?)?;
        let width = parse_usize(next_token(bytes, &mut pos)?)?;
        let channels = parse_usize(next_token(bytes, &mut pos)?)?;
        pos += 1;
        let n = height * width * channels;
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != n * 8 {
            return Err(Error::corrupt(format!("CAMF body has {} bytes, expected {}", body.len(), n * 8)));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Camf { height, width, channels, data })
    }
}

pub fn write_camf(path: &Path, camf: &Camf) -> Result<()> {
    fs::write(path, camf.encode())?;
    Ok(())
}

pub fn read_camf(path: &Path) -> Result<Camf> {
    Camf::decode(&fs::read(path)?)
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    read_camf(path)?.into_grid()
}
