//! Forward diffusion: corrupting clean data with schedule-scaled noise.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A flat raster image with intensities in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub pixels: Array1<f64>,
}

impl DataPoint {
    pub fn new(pixels: Array1<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "DataPoint::new".into(),
                detail: "non-finite pixel value".into(),
            });
        }
        Ok(DataPoint { pixels })
    }

    pub fn dim(&self) -> usize {
        self.pixels.len()
    }
}

/// A corrupted observation together with the time and noise that produced it.
#[derive(Clone, Debug)]
pub struct DiffusedSample {
    pub z: Array1<f64>,
    pub t: f64,
    pub eps: Array1<f64>,
}

/// Corrupts `x` at diffusion time `t` with the given noise realization:
/// `z = sqrt(alpha_bar(t)) * x + sqrt(1 - alpha_bar(t)) * eps`.
pub fn diffuse(
    x: &DataPoint,
    t: f64,
    eps: &Array1<f64>,
    sched: &NoiseSchedule,
) -> Result<DiffusedSample> {
    if eps.len() != x.dim() {
        return Err(Error::Config(format!(
            "noise dimension {} does not match data dimension {}",
            eps.len(),
            x.dim()
        )));
    }
    let ab = sched.alpha_bar_at(t)?;
    let z = &x.pixels * ab.sqrt() + eps * (1.0 - ab).sqrt();
    Ok(DiffusedSample {
        z,
        t,
        eps: eps.clone(),
    })
}
