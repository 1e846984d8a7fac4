//! Pixel pseudo-labels for weakly labelled images: binarize the residual
//! at a ladder of thresholds, grade every connected region with the rule
//! base and keep the union of regions graded at least `alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::fuzzy::KnowledgeBase;
use crate::raster::{binarize, GrayImage, Mask, ResidualMap};
use crate::regions::{connected_components, standardize, Region, RegionProperties, DEFAULT_RADIALS};

/// Population mean and standard deviation of normal-image residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Pools every pixel of every map.
pub fn residual_stats(maps: &[ResidualMap]) -> Result<ResidualStats> {
    let count: usize = maps.iter().map(|m| m.data().len()).sum();
    if count == 0 {
        return Err(KistError::Empty("normal residual maps"));
    }
    let mu = maps.iter().flat_map(|m| m.data()).sum::<f64>() / count as f64;
    let var = maps
        .iter()
        .flat_map(|m| m.data())
        .map(|v| (v - mu).powi(2))
        .sum::<f64>()
        / count as f64;
    Ok(ResidualStats { mu, sigma: var.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// Threshold step as a fraction of sigma.
    pub s: f64,
    /// Minimum anomaly grade for a region to be labelled.
    pub alpha: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { s: 0.3, alpha: 0.8 }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(KistError::param("s", format!("{} outside (0, 1]", self.s)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(KistError::param("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Multipliers `n` with `ceil(1/s) <= n <= floor(3/s)`.
pub fn threshold_steps(s: f64) -> Result<std::ops::RangeInclusive<u64>> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(KistError::param("s", format!("{s} is not > 0")));
    }
    let lo = (1.0 / s - 1e-9).ceil().max(0.0) as u64;
    let hi = (3.0 / s + 1e-9).floor() as u64;
    if lo > hi {
        return Err(KistError::param("s", format!("no integer n with {lo} <= n <= {hi}")));
    }
    Ok(lo..=hi)
}

/// Ascending thresholds `mu + n s sigma`.
pub fn threshold_set(stats: ResidualStats, s: f64) -> Result<Vec<f64>> {
    Ok(threshold_steps(s)?
        .map(|n| stats.mu + n as f64 * s * stats.sigma)
        .collect())
}

/// A region with its measured properties and grades.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedRegion {
    pub region: Region,
    pub properties: RegionProperties,
    pub rule_grades: Vec<f64>,
    pub grade: f64,
}

/// Grades every connected region of `mask` on the intensities of `x`,
/// in descending grade order (ties keep scan order).
pub fn grade_regions(mask: &Mask, x: &GrayImage, kb: &KnowledgeBase) -> Result<Vec<GradedRegion>> {
    if mask.dims() != x.dims() {
        return Err(KistError::DimensionMismatch {
            expected: x.dims(),
            actual: mask.dims(),
        });
    }
    let mut out = Vec::new();
    for region in connected_components(mask) {
        let properties = standardize(&RegionProperties::measure(&region, x, DEFAULT_RADIALS)?, kb.gammas());
        let rule_grades = kb.rule_grades(&properties);
        let grade = rule_grades.iter().copied().fold(0.0, f64::max);
        out.push(GradedRegion {
            region,
            properties,
            rule_grades,
            grade,
        });
    }
    out.sort_by(|a, b| b.grade.total_cmp(&a.grade));
    Ok(out)
}

/// Regions of `e > t` whose anomaly grade reaches `alpha`.
pub fn anomalous_like_regions(
    e: &ResidualMap,
    x: &GrayImage,
    t: f64,
    kb: &KnowledgeBase,
    alpha: f64,
) -> Result<Vec<Region>> {
    if e.dims() != x.dims() {
        return Err(KistError::DimensionMismatch {
            expected: x.dims(),
            actual: e.dims(),
        });
    }
    Ok(grade_regions(&binarize(e, t), x, kb)?
        .into_iter()
        .filter(|g| g.grade >= alpha)
        .map(|g| g.region)
        .collect())
}

/// Kept regions at each threshold, one mask per threshold.
pub fn pseudo_label_layers(
    x: &GrayImage,
    e: &ResidualMap,
    kb: &KnowledgeBase,
    thresholds: &[f64],
    alpha: f64,
) -> Result<Vec<Mask>> {
    if thresholds.is_empty() {
        return Err(KistError::Empty("threshold set"));
    }
    let (w, h) = x.dims();
    thresholds
        .iter()
        .map(|&t| {
            let mut m = Mask::zeros(w, h);
            for reg in anomalous_like_regions(e, x, t, kb, alpha)? {
                for &(r, c) in reg.pixels() {
                    m.set(r, c, true);
                }
            }
            Ok(m)
        })
        .collect()
}

/// Union over thresholds of the anomalous-like regions.
pub fn produce_pseudo_label(
    x: &GrayImage,
    e: &ResidualMap,
    kb: &KnowledgeBase,
    thresholds: &[f64],
    alpha: f64,
) -> Result<Mask> {
    let layers = pseudo_label_layers(x, e, kb, thresholds, alpha)?;
    let mut out = Mask::zeros(x.width(), x.height());
    for l in &layers {
        out = out.or(l)?;
    }
    Ok(out)
}
