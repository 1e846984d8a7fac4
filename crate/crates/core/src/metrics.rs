//! Pixel-level AUROC and AUPRO. Pixels of all images are pooled into a
//! single threshold sweep.

use std::cmp::Ordering;

use crate::error::{KistError, Result};
use crate::raster::{Mask, ResidualMap};
use crate::regions::connected_components;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Score maps paired with ground-truth masks.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    scores: Vec<ResidualMap>,
    truths: Vec<Mask>,
}

impl EvalBatch {
    pub fn new(scores: Vec<ResidualMap>, truths: Vec<Mask>) -> Result<Self> {
        if scores.len() != truths.len() {
            return Err(KistError::param(
                "batch",
                format!("{} score maps but {} masks", scores.len(), truths.len()),
            ));
        }
        for (s, t) in scores.iter().zip(&truths) {
            if s.dims() != t.dims() {
                return Err(KistError::DimensionMismatch {
                    expected: t.dims(),
                    actual: s.dims(),
                });
            }
        }
        Ok(Self { scores, truths })
    }

    pub fn scores(&self) -> &[ResidualMap] {
        &self.scores
    }

    pub fn truths(&self) -> &[Mask] {
        &self.truths
    }

    pub fn positives(&self) -> usize {
        self.truths.iter().map(Mask::count).sum()
    }

    pub fn pixels(&self) -> usize {
        self.truths.iter().map(|t| t.data().len()).sum()
    }

    pub fn negatives(&self) -> usize {
        self.pixels() - self.positives()
    }

    /// `(score, tag)` for every pixel, sorted by descending score.
    fn sorted_pixels<T: Copy>(&self, mut tag: impl FnMut(usize, usize) -> T) -> Vec<(f64, T)> {
        let mut out = Vec::with_capacity(self.pixels());
        for (img, s) in self.scores.iter().enumerate() {
            for (i, &v) in s.data().iter().enumerate() {
                out.push((v, tag(img, i)));
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        out
    }
}

/// Iterates runs of equal score in a descending-sorted list.
fn tie_groups<T>(sorted: &[(f64, T)]) -> impl Iterator<Item = &[(f64, T)]> {
    sorted.chunk_by(|a, b| a.0.total_cmp(&b.0) == Ordering::Equal)
}

/// Area under the pixel ROC curve; tied scores share one operating point.
pub fn auroc(batch: &EvalBatch) -> Result<f64> {
    let (pos, neg) = (batch.positives(), batch.negatives());
    if pos == 0 {
        return Err(KistError::MetricUndefined("AUROC needs at least one anomalous pixel"));
    }
    if neg == 0 {
        return Err(KistError::MetricUndefined("AUROC needs at least one normal pixel"));
    }
    let sorted = batch.sorted_pixels(|img, i| batch.truths[img].data()[i] == 1);
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    for group in tie_groups(&sorted) {
        for &(_, positive) in group {
            if positive {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// One operating point of the PRO sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Sweep points from the strictest threshold down, starting at `(0, 0)`.
pub fn pro_curve(batch: &EvalBatch) -> Result<Vec<ProPoint>> {
    let neg = batch.negatives();
    if neg == 0 {
        return Err(KistError::MetricUndefined("PRO needs at least one normal pixel"));
    }
    // ground-truth region id per pixel, regions numbered across all images
    let mut region_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(batch.truths.len());
    let mut region_sizes = Vec::new();
    for t in &batch.truths {
        let mut ids = vec![None; t.data().len()];
        for reg in connected_components(t) {
            for &(r, c) in reg.pixels() {
                ids[r * t.width() + c] = Some(region_sizes.len());
            }
            region_sizes.push(reg.len());
        }
        region_of.push(ids);
    }
    if region_sizes.is_empty() {
        return Err(KistError::MetricUndefined("PRO needs at least one ground-truth region"));
    }
    let k = region_sizes.len() as f64;
    let sorted = batch.sorted_pixels(|img, i| region_of[img][i]);

    let mut points = vec![ProPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        pro: 0.0,
    }];
    let mut overlap = vec![0usize; region_sizes.len()];
    let mut fp = 0usize;
    for group in tie_groups(&sorted) {
        for &(_, region) in group {
            match region {
                Some(id) => overlap[id] += 1,
                None => fp += 1,
            }
        }
        let pro = overlap
            .iter()
            .zip(&region_sizes)
            .map(|(&o, &s)| o as f64 / s as f64)
            .sum::<f64>()
            / k;
        points.push(ProPoint {
            threshold: group[0].0,
            fpr: fp as f64 / neg as f64,
            pro,
        });
    }
    Ok(points)
}

/// Trapezoid area under `(fpr, value)` up to `limit`, interpolating the
/// final segment at the limit.
pub fn area_up_to(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((f0, p0), (f1, p1)) = (pair[0], pair[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let p_lim = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
    }
    area
}

/// Normalized area under the PRO curve for FPR in `[0, fpr_limit]`.
pub fn aupro(batch: &EvalBatch, fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(KistError::param("fpr_limit", format!("{fpr_limit} outside (0, 1]")));
    }
    let curve: Vec<(f64, f64)> = pro_curve(batch)?.into_iter().map(|p| (p.fpr, p.pro)).collect();
    Ok(area_up_to(&curve, fpr_limit) / fpr_limit)
}
