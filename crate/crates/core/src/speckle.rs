//! Synthetic bitemporal SAR-like scenes with known change masks.
//!
//! Intensities follow the L-look model: observed = reflectivity × S with
//! S ~ Gamma(shape L, scale 1/L), so E[S] = 1 and Var[S] = 1/L.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, ImagePair, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub base_reflectivity: Grid,
    pub change_mask: Mask,
    pub change_gain: f64,
    pub looks: u32,
    pub seed: u64,
}

/// Parameters of the default layout; the rasters are derived from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub change_gain: f64,
    pub looks: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { height: 128, width: 128, change_gain: 3.0, looks: 4, seed: 42 }
    }
}

impl SceneSpec {
    /// Builds the default layout: a smoothly varying background and two
    /// rectangles plus one ellipse of change, about 12% of the area.
    pub fn build(&self) -> SyntheticScene {
        let (h, w) = (self.height, self.width);
        let base = Grid::from_fn(h, w, |r, c| {
            let y = r as f64 / h.max(1) as f64;
            let x = c as f64 / w.max(1) as f64;
            // gentle ramp plus two land-cover bands
            let band = if (0.30..0.55).contains(&y) { 0.6 } else { 0.0 };
            let field = if x > 0.5 && y > 0.6 { 0.5 } else { 0.0 };
            0.8 + 0.6 * x + band + field
        });
        let rects = [(0.12, 0.35, 0.10, 0.33), (0.60, 0.85, 0.08, 0.20)];
        let (ey, ex, ry, rx) = (0.45, 0.70, 0.13, 0.10);
        let mut mask = Mask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let y = (r as f64 + 0.5) / h as f64;
                let x = (c as f64 + 0.5) / w as f64;
                let in_rect = rects.iter().any(|&(y0, y1, x0, x1)| y >= y0 && y < y1 && x >= x0 && x < x1);
                let in_ellipse = ((y - ey) / ry).powi(2) + ((x - ex) / rx).powi(2) <= 1.0;
                if in_rect || in_ellipse {
                    mask.data[r * w + c] = 1;
                }
            }
        }
        SyntheticScene {
            height: h,
            width: w,
            base_reflectivity: base,
            change_mask: mask,
            change_gain: self.change_gain,
            looks: self.looks,
            seed: self.seed,
        }
    }
}

/// Draws `n` i.i.d. Gamma(L, 1/L) speckle samples.
pub fn speckle(n: usize, looks: u32, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if looks == 0 {
        return Err(Error::invalid("looks must be at least 1"));
    }
    let gamma = Gamma::new(looks as f64, 1.0 / looks as f64)
        .map_err(|e| Error::invalid(format!("gamma speckle: {e}")))?;
    Ok((0..n).map(|_| gamma.sample(rng)).collect())
}

/// Renders the pair. Returns the pair and the ground-truth mask.
pub fn generate(scene: &SyntheticScene) -> Result<(ImagePair, Mask)> {
    let (h, w) = (scene.height, scene.width);
    if scene.base_reflectivity.dims() != (h, w) || scene.change_mask.dims() != (h, w) {
        return Err(Error::invalid("scene rasters do not match the scene extent"));
    }
    if let Some(bad) = scene.base_reflectivity.data.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!("base reflectivity must be strictly positive, found {bad}")));
    }
    if !(scene.change_gain.is_finite() && scene.change_gain > 0.0) {
        return Err(Error::invalid("change gain must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let s1 = speckle(h * w, scene.looks, &mut rng)?;
    let s2 = speckle(h * w, scene.looks, &mut rng)?;
    let base = &scene.base_reflectivity.data;
    let t1: Vec<f64> = base.iter().zip(&s1).map(|(b, s)| b * s).collect();
    let t2: Vec<f64> = base
        .iter()
        .zip(&scene.change_mask.data)
        .zip(&s2)
        .map(|((b, &m), s)| if m == 1 { b * scene.change_gain * s } else { b * s })
        .collect();
    let pair = ImagePair::new(Grid::new(h, w, t1)?, Grid::new(h, w, t2)?)?;
    Ok((pair, scene.change_mask.clone()))
}
