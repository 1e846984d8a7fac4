//! Guided-filter smoothing of residual maps, using the input image as guide.
//!
//! Window sums come from summed-area tables. Windows are clipped at the
//! image border, so every mean divides by the clipped pixel count.

use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::raster::{GrayImage, ResidualMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterConfig {
    pub radius: usize,
    pub epsilon: f64,
}

impl GuidedFilterConfig {
    pub fn new(radius: usize, epsilon: f64) -> Result<Self> {
        let cfg = Self { radius, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(KistError::param("radius", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(KistError::param("epsilon", format!("{} is not > 0", self.epsilon)));
        }
        Ok(())
    }

    /// Full-resolution setting: radius 16, epsilon 0.001.
    pub fn paper() -> Self {
        Self {
            radius: 16,
            epsilon: 1e-3,
        }
    }

    /// Radius scaled down for 64x64 inputs.
    pub fn desk() -> Self {
        Self {
            radius: 4,
            epsilon: 1e-3,
        }
    }
}

impl Default for GuidedFilterConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Summed-area table with one row/column of zero padding.
struct Integral {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for r in 0..height {
            let mut row_sum = 0.0;
            for c in 0..width {
                row_sum += values[r * width + c];
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row_sum;
            }
        }
        Self {
            width,
            height,
            sums,
        }
    }

    /// Mean over the clipped `(2r+1)^2` window centred at every pixel.
    fn box_means(&self, radius: usize) -> Vec<f64> {
        let stride = self.width + 1;
        let mut out = Vec::with_capacity(self.width * self.height);
        for r in 0..self.height {
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius + 1).min(self.height);
            for c in 0..self.width {
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius + 1).min(self.width);
                let s = self.sums[r1 * stride + c1] - self.sums[r0 * stride + c1]
                    - self.sums[r1 * stride + c0]
                    + self.sums[r0 * stride + c0];
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
        out
    }
}

/// Clipped-window mean of a row-major grid.
pub fn box_mean(values: &[f64], width: usize, height: usize, radius: usize) -> Result<Vec<f64>> {
    if radius < 1 {
        return Err(KistError::param("radius", "must be at least 1"));
    }
    if values.len() != width * height {
        return Err(KistError::InvalidRaster(format!(
            "{} values for {width}x{height}",
            values.len()
        )));
    }
    Ok(Integral::new(values, width, height).box_means(radius))
}

/// The guided filter on arbitrary real inputs. Linear in `input`.
///
/// Both signals are shifted by their first pixel before the window
/// statistics are formed; the filter is shift-equivariant so the result is
/// unchanged, but a constant input comes back bit-exact.
pub fn guided_filter_values(guide: &GrayImage, input: &[f64], cfg: &GuidedFilterConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (w, h) = guide.dims();
    if input.len() != w * h {
        return Err(KistError::InvalidRaster(format!(
            "filter input has {} values, guide is {w}x{h}",
            input.len()
        )));
    }
    let x0 = guide.data()[0];
    let e0 = input[0];
    let x: Vec<f64> = guide.data().iter().map(|&v| v - x0).collect();
    let e: Vec<f64> = input.iter().map(|&v| v - e0).collect();
    let xe: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a * b).collect();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();

    let r = cfg.radius;
    let mean_x = Integral::new(&x, w, h).box_means(r);
    let mean_e = Integral::new(&e, w, h).box_means(r);
    let mean_xe = Integral::new(&xe, w, h).box_means(r);
    let mean_xx = Integral::new(&xx, w, h).box_means(r);

    let mut a = Vec::with_capacity(w * h);
    let mut b = Vec::with_capacity(w * h);
    for k in 0..w * h {
        let var = (mean_xx[k] - mean_x[k] * mean_x[k]).max(0.0);
        let cov = mean_xe[k] - mean_x[k] * mean_e[k];
        let ak = cov / (var + cfg.epsilon);
        a.push(ak);
        b.push(mean_e[k] - ak * mean_x[k]);
    }
    let mean_a = Integral::new(&a, w, h).box_means(r);
    let mean_b = Integral::new(&b, w, h).box_means(r);
    Ok((0..w * h)
        .map(|i| mean_a[i] * x[i] + mean_b[i] + e0)
        .collect())
}

/// Smooths a residual map along the edges of `guide`. Values that the local
/// linear model pushes below zero are clipped to zero.
pub fn guided_filter(guide: &GrayImage, input: &ResidualMap, cfg: &GuidedFilterConfig) -> Result<ResidualMap> {
    if guide.dims() != input.dims() {
        return Err(KistError::DimensionMismatch {
            expected: guide.dims(),
            actual: input.dims(),
        });
    }
    let q = guided_filter_values(guide, input.data(), cfg)?;
    ResidualMap::new(
        input.width(),
        input.height(),
        q.into_iter().map(|v| v.max(0.0)).collect(),
    )
}
