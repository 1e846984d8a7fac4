//! Connected regions of a binary mask and the properties graded by the
//! fuzzy rules: area, gray, shape (Boyce-Clark index), unevenness and
//! left/right symmetry.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::raster::{GrayImage, Mask};

/// Default number of rays for the shape index.
pub const DEFAULT_RADIALS: usize = 16;

/// Row/column offsets of the 8-neighbourhood.
const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One 8-connected component. Pixels are `(row, col)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pixels: Vec<(usize, usize)>,
    bbox: BoundingBox,
}

impl Region {
    /// Builds a region from an arbitrary pixel list. Connectivity is not checked.
    pub fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(KistError::Empty("region pixels"));
        }
        pixels.sort_unstable();
        pixels.dedup();
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        for &(r, c) in &pixels {
            top = top.min(r);
            left = left.min(c);
            bottom = bottom.max(r);
            right = right.max(c);
        }
        Ok(Self {
            pixels,
            bbox: BoundingBox {
                top,
                left,
                height: bottom - top + 1,
                width: right - left + 1,
            },
        })
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        self.bbox
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::zeros(width, height);
        for &(r, c) in &self.pixels {
            m.set(r, c, true);
        }
        m
    }
}

/// Maximal 8-connected components of the 1-pixels, ordered by their first
/// pixel in row-major scan order.
pub fn connected_components(m: &Mask) -> Vec<Region> {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || m.data()[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            for (dr, dc) in NEIGHBORS_8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if !seen[n] && m.data()[n] == 1 {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        regions.push(Region::from_pixels(pixels).expect("component has a seed pixel"));
    }
    regions
}

/// Pixel count of the region over the image pixel count.
pub fn area_fraction(reg: &Region, img_w: usize, img_h: usize) -> f64 {
    reg.len() as f64 / (img_w * img_h) as f64
}

pub fn mean_gray(reg: &Region, img: &GrayImage) -> f64 {
    let sum: f64 = reg.pixels.iter().map(|&(r, c)| img.get(r, c)).sum();
    sum / reg.len() as f64
}

/// Population standard deviation of the region intensities.
pub fn std_gray(reg: &Region, img: &GrayImage) -> f64 {
    let mean = mean_gray(reg, img);
    let ss: f64 = reg
        .pixels
        .iter()
        .map(|&(r, c)| {
            let d = img.get(r, c) - mean;
            d * d
        })
        .sum();
    (ss / reg.len() as f64).sqrt()
}

/// Boyce-Clark radial shape index, divided by 100 so it lies in `[0, 2)`.
///
/// Rays leave the pixel centroid at `n_radials` equally spaced angles. Each
/// pixel is assigned to the ray nearest its direction, and the ray length is
/// the largest centroid distance among its pixels. Rays with no pixel have
/// length 0 but still count towards `n_radials`.
pub fn bcs_index(reg: &Region, n_radials: usize) -> Result<f64> {
    if n_radials < 4 {
        return Err(KistError::param("n_radials", "must be at least 4"));
    }
    let n = reg.len() as f64;
    let (sr, sc) = reg
        .pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let (cr, cc) = (sr / n, sc / n);

    let half_sector = PI / n_radials as f64;
    let mut radii = vec![0.0f64; n_radials];
    for &(r, c) in &reg.pixels {
        let (dy, dx) = (r as f64 - cr, c as f64 - cc);
        let d = dy.hypot(dx);
        if d == 0.0 {
            continue;
        }
        let theta = dy.atan2(dx).rem_euclid(2.0 * PI);
        let sector = ((theta + half_sector) / (2.0 * half_sector)).floor() as usize % n_radials;
        radii[sector] = radii[sector].max(d);
    }
    let total: f64 = radii.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let even = 100.0 / n_radials as f64;
    let index: f64 = radii
        .iter()
        .map(|&ri| (100.0 * ri / total - even).abs())
        .sum();
    Ok(index / 100.0)
}

/// IoU of the left half of the bounding box with the mirrored right half.
/// The middle column of an odd-width box belongs to both halves.
pub fn symmetry(reg: &Region) -> f64 {
    let b = reg.bbox;
    let mut local = vec![false; b.width * b.height];
    for &(r, c) in &reg.pixels {
        local[(r - b.top) * b.width + (c - b.left)] = true;
    }
    let half = b.width.div_ceil(2);
    let (mut inter, mut union) = (0usize, 0usize);
    for row in 0..b.height {
        for j in 0..half {
            let left = local[row * b.width + j];
            let mirrored = local[row * b.width + (b.width - 1 - j)];
            inter += usize::from(left && mirrored);
            union += usize::from(left || mirrored);
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// The five graded properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Area,
    Gray,
    Shape,
    Unevenness,
    Symmetry,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::Area,
        Property::Gray,
        Property::Shape,
        Property::Unevenness,
        Property::Symmetry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Area => "area",
            Property::Gray => "gray",
            Property::Shape => "shape",
            Property::Unevenness => "unevenness",
            Property::Symmetry => "symmetry",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = KistError;

    fn from_str(s: &str) -> Result<Self> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| KistError::MissingProperty(s.to_string()))
    }
}

/// One value per [`Property`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyValues([f64; 5]);

impl PropertyValues {
    pub fn new(area: f64, gray: f64, shape: f64, unevenness: f64, symmetry: f64) -> Self {
        Self([area, gray, shape, unevenness, symmetry])
    }

    pub fn splat(v: f64) -> Self {
        Self([v; 5])
    }

    pub fn get(&self, p: Property) -> f64 {
        self.0[p.index()]
    }

    pub fn set(&mut self, p: Property, v: f64) {
        self.0[p.index()] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Property, f64)> + '_ {
        Property::ALL.into_iter().map(|p| (p, self.get(p)))
    }
}

/// Per-property scale factors; standardized value = raw / gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gammas(PropertyValues);

impl Gammas {
    pub fn new(values: PropertyValues) -> Result<Self> {
        for (p, g) in values.iter() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(KistError::param("gamma", format!("{p}: {g} is not > 0")));
            }
        }
        Ok(Self(values))
    }

    pub fn get(&self, p: Property) -> f64 {
        self.0.get(p)
    }

    pub fn values(&self) -> PropertyValues {
        self.0
    }
}

impl Default for Gammas {
    fn default() -> Self {
        Self(PropertyValues::new(0.0125, 1.0, 1.0, 0.25, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProperties {
    pub raw: PropertyValues,
    pub standardized: PropertyValues,
}

impl RegionProperties {
    /// Raw properties with `standardized` equal to `raw` (unit gammas).
    pub fn from_raw(raw: PropertyValues) -> Self {
        Self {
            raw,
            standardized: raw,
        }
    }

    /// Measures all five properties of `reg` on the intensities of `img`.
    pub fn measure(reg: &Region, img: &GrayImage, n_radials: usize) -> Result<Self> {
        let raw = PropertyValues::new(
            area_fraction(reg, img.width(), img.height()),
            mean_gray(reg, img),
            bcs_index(reg, n_radials)?,
            std_gray(reg, img),
            symmetry(reg),
        );
        Ok(Self::from_raw(raw))
    }
}

/// Divides every raw value by its gamma.
pub fn standardize(props: &RegionProperties, gammas: &Gammas) -> RegionProperties {
    let mut standardized = props.raw;
    for p in Property::ALL {
        standardized.set(p, props.raw.get(p) / gammas.get(p));
    }
    RegionProperties {
        raw: props.raw,
        standardized,
    }
}

/// Like [`standardize`] but validates raw gamma values first.
pub fn standardize_with(props: &RegionProperties, gammas: PropertyValues) -> Result<RegionProperties> {
    Ok(standardize(props, &Gammas::new(gammas)?))
}
