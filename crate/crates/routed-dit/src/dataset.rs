//! Procedural toy datasets. Class patterns are deterministic templates in
//! [0, 1] plus seeded pixel noise; model-space images live in [-1, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Per-class base intensity plus a class-determined rectangle.
    Shapes,
    /// Per-class constant intensity only (sampler sanity checks).
    Constant,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyDataset {
    pub kind: GeneratorKind,
    pub classes: usize,
    pub image_side: usize,
}

impl ToyDataset {
    pub fn new(kind: GeneratorKind, classes: usize, image_side: usize) -> Result<Self> {
        if classes == 0 || image_side == 0 {
            return Err(Error::Config("dataset needs classes >= 1 and image_side >= 1".into()));
        }
        Ok(ToyDataset { kind, classes, image_side })
    }

    /// Base intensity of a class, spread over (0.2, 0.8).
    pub fn base_intensity(&self, class: usize) -> f64 {
        0.2 + 0.6 * (class as f64 + 0.5) / self.classes as f64
    }

    /// Noiseless class pattern in [0, 1].
    pub fn template(&self, class: usize) -> Result<Vec<f64>> {
        if class >= self.classes {
            return Err(Error::Arg(format!(
                "class {class} out of range [0, {})",
                self.classes
            )));
        }
        let side = self.image_side;
        let base = self.base_intensity(class);
        let mut img = vec![base; side * side];
        if self.kind == GeneratorKind::Shapes {
            // Axis-aligned rectangle; position and size follow the class id.
            let half = (side / 2).max(1);
            let x0 = (class * 3) % half;
            let y0 = (class * 5) % half;
            let w = side / 4 + class % 3 + 1;
            let h = side / 4 + (class + 1) % 3 + 1;
            let delta = if base < 0.5 { 0.35 } else { -0.35 };
            for y in y0..(y0 + h).min(side) {
                for x in x0..(x0 + w).min(side) {
                    img[y * side + x] = (base + delta).clamp(0.0, 1.0);
                }
            }
        }
        Ok(img)
    }

    /// One image in model space [-1, 1]: template + seeded noise, clamped to
    /// [0, 1] in pixel space, then mapped by 2x - 1.
    pub fn sample(&self, class: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut img = self.template(class)?;
        for p in &mut img {
            *p = (*p + rng.normal() * NOISE_SIGMA).clamp(0.0, 1.0);
            *p = *p * 2.0 - 1.0;
        }
        Ok(img)
    }

    /// Pixel-space mean of the noiseless template.
    pub fn template_mean(&self, class: usize) -> Result<f64> {
        let t = self.template(class)?;
        Ok(t.iter().sum::<f64>() / t.len() as f64)
    }
}

/// Map a model-space image back to pixel space [0, 1].
pub fn to_pixel_space(img: &[f64]) -> Vec<f64> {
    img.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}
