//! Dataset directories and the synthetic texture generator.
//!
//! Layout:
//!
//! ```text
//! root/normal/*.png
//! root/anomalous/*.png
//! root/test/images/*.png
//! root/test/masks/*.png     same file names as test/images
//! root/spec.json            written by the generator only
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::raster::{GrayImage, Mask};

/// Images of one size: trusted normals, weakly labelled anomalous images
/// (no masks) and a test set with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub normal: Vec<GrayImage>,
    pub anomalous: Vec<GrayImage>,
    pub test: Vec<(GrayImage, Mask)>,
}

impl Dataset {
    pub fn new(normal: Vec<GrayImage>, anomalous: Vec<GrayImage>, test: Vec<(GrayImage, Mask)>) -> Result<Self> {
        let Some(first) = normal.first() else {
            return Err(KistError::Empty("normal images"));
        };
        let dims = first.dims();
        let all = normal
            .iter()
            .chain(&anomalous)
            .map(GrayImage::dims)
            .chain(test.iter().flat_map(|(x, m)| [x.dims(), m.dims()]));
        for d in all {
            if d != dims {
                return Err(KistError::DimensionMismatch {
                    expected: dims,
                    actual: d,
                });
            }
        }
        Ok(Self {
            normal,
            anomalous,
            test,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.normal[0].dims()
    }

    pub fn test_images(&self) -> Vec<GrayImage> {
        self.test.iter().map(|(x, _)| x.clone()).collect()
    }

    pub fn test_masks(&self) -> Vec<Mask> {
        self.test.iter().map(|(_, m)| m.clone()).collect()
    }

    /// Writes the directory layout. Existing files with the same names are
    /// overwritten.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let dirs = [
            root.join("normal"),
            root.join("anomalous"),
            root.join("test/images"),
            root.join("test/masks"),
        ];
        for d in &dirs {
            fs::create_dir_all(d)?;
        }
        for (i, x) in self.normal.iter().enumerate() {
            x.save_png(dirs[0].join(file_name(i)))?;
        }
        for (i, x) in self.anomalous.iter().enumerate() {
            x.save_png(dirs[1].join(file_name(i)))?;
        }
        for (i, (x, m)) in self.test.iter().enumerate() {
            x.save_png(dirs[2].join(file_name(i)))?;
            m.save_png(dirs[3].join(file_name(i)))?;
        }
        Ok(())
    }
}

/// Subdirectory of a generated dataset holding the hidden ground truth.
pub const TRUTH_DIR: &str = "truth";

/// Masks saved by [`Synthetic::save`] for the weakly labelled images.
pub fn load_truth_masks(root: impl AsRef<Path>) -> Result<Vec<Mask>> {
    png_files(&root.as_ref().join(TRUTH_DIR).join("anomalous"))?
        .iter()
        .map(Mask::load_png)
        .collect()
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// PNG files directly inside `dir`, sorted by path; empty when `dir` is missing.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn resize_image(img: GrayImage, size: usize) -> GrayImage {
    if img.dims() == (size, size) {
        return img;
    }
    let (w, h) = img.dims();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|&v| v as f32).collect())
            .expect("buffer matches dimensions");
    let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    GrayImage::from_clamped(size, size, out.into_raw().into_iter().map(f64::from).collect())
        .expect("resized buffer is finite")
}

fn resize_mask(m: Mask, size: usize) -> Mask {
    if m.dims() == (size, size) {
        return m;
    }
    let buf = imageops::resize(&m.to_luma8(), size as u32, size as u32, FilterType::Nearest);
    Mask::from_luma8(&buf)
}

fn load_image(path: &Path, size: usize) -> Result<GrayImage> {
    let img = GrayImage::load_png(path).map_err(|e| KistError::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(resize_image(img, size))
}

/// Loads the directory layout, resizing every image to `size` x `size`
/// (bilinear for images, nearest for masks).
pub fn load_dataset(root: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(KistError::param("size", "must be positive"));
    }
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(KistError::Dataset {
            path: root.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let normal = png_files(&root.join("normal"))?
        .iter()
        .map(|p| load_image(p, size))
        .collect::<Result<Vec<_>>>()?;
    if normal.is_empty() {
        return Err(KistError::Dataset {
            path: root.join("normal"),
            reason: "no normal images".into(),
        });
    }
    let anomalous = png_files(&root.join("anomalous"))?
        .iter()
        .map(|p| load_image(p, size))
        .collect::<Result<Vec<_>>>()?;
    let mut test = Vec::new();
    for p in png_files(&root.join("test/images"))? {
        let mask_path = root.join("test/masks").join(p.file_name().expect("listed file has a name"));
        if !mask_path.is_file() {
            return Err(KistError::Dataset {
                path: mask_path,
                reason: "missing ground-truth mask".into(),
            });
        }
        let mask = Mask::load_png(&mask_path).map_err(|e| KistError::Dataset {
            path: mask_path.clone(),
            reason: e.to_string(),
        })?;
        test.push((load_image(&p, size)?, resize_mask(mask, size)));
    }
    Dataset::new(normal, anomalous, test)
}

/// Injected anomaly kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LargeDarkBlob,
    SmallDarkSpot,
    DarkSlenderScratch,
    BrightRectangle,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::LargeDarkBlob,
        Family::SmallDarkSpot,
        Family::DarkSlenderScratch,
        Family::BrightRectangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::LargeDarkBlob => "large-dark-blob",
            Family::SmallDarkSpot => "small-dark-spot",
            Family::DarkSlenderScratch => "dark-slender-scratch",
            Family::BrightRectangle => "bright-rectangle",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = KistError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| KistError::param("family", format!("unknown family {s:?}")))
    }
}

/// Fractions of each family; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FamilyMix {
    pub large_dark_blob: f64,
    pub small_dark_spot: f64,
    pub dark_slender_scratch: f64,
    pub bright_rectangle: f64,
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self {
            large_dark_blob: 0.4,
            small_dark_spot: 0.2,
            dark_slender_scratch: 0.3,
            bright_rectangle: 0.1,
        }
    }
}

impl FamilyMix {
    pub fn only(family: Family) -> Self {
        let mut mix = Self {
            large_dark_blob: 0.0,
            small_dark_spot: 0.0,
            dark_slender_scratch: 0.0,
            bright_rectangle: 0.0,
        };
        *mix.get_mut(family) = 1.0;
        mix
    }

    pub fn get(&self, f: Family) -> f64 {
        match f {
            Family::LargeDarkBlob => self.large_dark_blob,
            Family::SmallDarkSpot => self.small_dark_spot,
            Family::DarkSlenderScratch => self.dark_slender_scratch,
            Family::BrightRectangle => self.bright_rectangle,
        }
    }

    fn get_mut(&mut self, f: Family) -> &mut f64 {
        match f {
            Family::LargeDarkBlob => &mut self.large_dark_blob,
            Family::SmallDarkSpot => &mut self.small_dark_spot,
            Family::DarkSlenderScratch => &mut self.dark_slender_scratch,
            Family::BrightRectangle => &mut self.bright_rectangle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values = Family::ALL.map(|f| self.get(f));
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(KistError::param("mix", "fractions must be finite and >= 0"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(KistError::param("mix", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder split of `count` items; ties go to the earlier family.
    pub fn allocate(&self, count: usize) -> Vec<Family> {
        let quotas: Vec<f64> = Family::ALL.iter().map(|&f| self.get(f) * count as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        let missing = count - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        Family::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&f, n)| std::iter::repeat_n(f, n))
            .collect()
    }
}

/// Background texture: smoothed Gaussian noise rescaled to `mean` and `std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub mean: f64,
    pub std: f64,
    /// Gaussian smoothing radius in pixels at 64x64, scaled with the size.
    pub smoothing: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            mean: 0.5,
            std: 0.08,
            smoothing: 3.0,
        }
    }
}

/// Appearance of injected anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyParams {
    /// Centre of the dark families' gray level, jittered by +-0.03.
    pub dark_gray: f64,
    /// Centre of the bright family's gray level, jittered by +-0.025.
    pub bright_gray: f64,
    /// Fraction of the background texture variation kept inside an anomaly.
    pub texture_keep: f64,
    /// Blob semi-axis range in pixels at 64x64.
    pub blob_radius: (f64, f64),
}

impl Default for AnomalyParams {
    fn default() -> Self {
        Self {
            dark_gray: 0.15,
            bright_gray: 0.945,
            texture_keep: 0.75,
            blob_radius: (6.0, 9.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub normals: usize,
    pub anomalous: usize,
    pub test: usize,
    pub mix: FamilyMix,
    pub texture: TextureParams,
    pub anomaly: AnomalyParams,
    /// Std of Gaussian pixel noise added to test images only.
    pub test_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            normals: 60,
            anomalous: 3,
            test: 20,
            mix: FamilyMix::default(),
            texture: TextureParams::default(),
            anomaly: AnomalyParams::default(),
            test_noise: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(KistError::param("size", "must be at least 32"));
        }
        if self.normals == 0 {
            return Err(KistError::param("normals", "need at least one normal image"));
        }
        self.mix.validate()?;
        let t = &self.texture;
        if !(t.mean > 0.0 && t.mean < 1.0 && t.std >= 0.0 && t.std < 0.5 && t.smoothing >= 0.0) {
            return Err(KistError::param("texture", "mean in (0, 1), std in [0, 0.5), smoothing >= 0"));
        }
        let a = &self.anomaly;
        if !((0.03..=0.97).contains(&a.dark_gray)
            && (0.025..=0.975).contains(&a.bright_gray)
            && (0.0..=1.0).contains(&a.texture_keep)
            && a.blob_radius.0 >= 1.0
            && a.blob_radius.0 < a.blob_radius.1)
        {
            return Err(KistError::param("anomaly", "gray levels inside [0, 1], texture_keep in [0, 1], blob radii ascending"));
        }
        if !(self.test_noise >= 0.0 && self.test_noise.is_finite()) {
            return Err(KistError::param("test_noise", "must be >= 0"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.size as f64 / 64.0
    }
}

/// One generated anomalous image with its exact stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct Injected {
    pub image: GrayImage,
    pub mask: Mask,
    pub family: Family,
}

/// Generator output: the dataset plus the masks and families that are hidden
/// from training.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub anomalous_masks: Vec<Mask>,
    pub anomalous_families: Vec<Family>,
    pub test_families: Vec<Family>,
}

impl Synthetic {
    /// Writes the dataset layout plus `spec.json`. Ground truth of the
    /// weakly labelled images goes to `truth/`, which the loader ignores.
    pub fn save(&self, root: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
        let root = root.as_ref();
        self.dataset.save(root)?;
        fs::write(root.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
        let truth = root.join(TRUTH_DIR);
        fs::create_dir_all(truth.join("anomalous"))?;
        for (i, m) in self.anomalous_masks.iter().enumerate() {
            m.save_png(truth.join("anomalous").join(file_name(i)))?;
        }
        let families = serde_json::json!({
            "anomalous": self.anomalous_families,
            "test": self.test_families,
        });
        fs::write(truth.join("families.json"), serde_json::to_string_pretty(&families)? + "\n")?;
        Ok(())
    }
}

fn blur_1d(src: &[f64], dst: &mut [f64], n: usize, kernel: &[f64], horizontal: bool) {
    let r = (kernel.len() / 2) as isize;
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let off = (b as isize + k as isize - r).rem_euclid(n as isize) as usize;
                s += w * if horizontal { src[a * n + off] } else { src[off * n + a] };
            }
            if horizontal {
                dst[a * n + b] = s;
            } else {
                dst[b * n + a] = s;
            }
        }
    }
}

/// Raw texture values before clamping, with periodic smoothing.
fn texture(rng: &mut ChaCha8Rng, n: usize, params: &TextureParams, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = params.smoothing * scale;
    if sigma > 0.0 {
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let mut tmp = vec![0.0; n * n];
        blur_1d(&v, &mut tmp, n, &kernel, true);
        blur_1d(&tmp, &mut v, n, &kernel, false);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    v.iter()
        .map(|x| params.mean + params.std * if sd > 0.0 { (x - m) / sd } else { 0.0 })
        .collect()
}

/// 8-bit quantized image from raw values.
fn finish(n: usize, values: Vec<f64>) -> GrayImage {
    GrayImage::from_clamped(n, n, values)
        .expect("generated values are finite")
        .quantized()
}

fn stencil(n: usize, inside: impl Fn(f64, f64) -> bool) -> Mask {
    let mut m = Mask::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if inside(r as f64, c as f64) {
                m.set(r, c, true);
            }
        }
    }
    m
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Draws a family's stencil and target gray level.
fn anomaly_stencil(rng: &mut ChaCha8Rng, family: Family, n: usize, scale: f64, p: &AnomalyParams) -> (Mask, f64) {
    let nf = n as f64;
    let dark = p.dark_gray - 0.03..p.dark_gray + 0.03;
    loop {
        let (mask, level, ok) = match family {
            Family::LargeDarkBlob => {
                let radii = p.blob_radius.0..p.blob_radius.1;
                let (a, b) = (rng.gen_range(radii.clone()) * scale, rng.gen_range(radii) * scale);
                let theta = rng.gen_range(0.0..PI);
                let margin = (p.blob_radius.1 + 1.0) * scale;
                let (cy, cx) = (rng.gen_range(margin..nf - margin), rng.gen_range(margin..nf - margin));
                let (s, c) = theta.sin_cos();
                let m = stencil(n, |r, col| {
                    let (dy, dx) = (r - cy, col - cx);
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                });
                let area = m.count() as f64 / (nf * nf);
                (m, rng.gen_range(dark.clone()), area >= 0.0125 * 0.85)
            }
            Family::SmallDarkSpot => {
                let radius = (rng.gen_range(0.9..1.6) * scale).max(0.5);
                let margin = 3.0 * scale;
                let (cy, cx) = (rng.gen_range(margin..nf - margin), rng.gen_range(margin..nf - margin));
                let m = stencil(n, |r, c| (r - cy).hypot(c - cx) <= radius);
                let px = m.count() as f64;
                (m, rng.gen_range(dark.clone()), px >= 3.0_f64.min(0.0025 * nf * nf).floor().max(1.0) && px <= (0.0025 * nf * nf).max(1.0))
            }
            Family::DarkSlenderScratch => {
                let len = rng.gen_range(15.0..30.0) * scale;
                let half_width = if rng.gen_bool(0.5) { 0.5 } else { 1.0 } * scale;
                let theta = rng.gen_range(0.0..PI);
                let margin = len / 2.0 + 2.0;
                let (cy, cx) = (rng.gen_range(margin..nf - margin), rng.gen_range(margin..nf - margin));
                let (dy, dx) = (theta.sin() * len / 2.0, theta.cos() * len / 2.0);
                let (a, b) = ((cy - dy, cx - dx), (cy + dy, cx + dx));
                let m = stencil(n, |r, c| distance_to_segment((r, c), a, b) <= half_width);
                (m, rng.gen_range(dark.clone()), true)
            }
            Family::BrightRectangle => {
                let thick = ((2.0 * scale).round() as usize).max(1);
                let long = ((rng.gen_range(11..=14) as f64 * scale).round() as usize).max(thick + 2);
                let (h, w) = if rng.gen_bool(0.5) { (thick, long) } else { (long, thick) };
                let top = rng.gen_range(2..n - h - 2) as f64;
                let left = rng.gen_range(2..n - w - 2) as f64;
                let m = stencil(n, |r, c| r >= top && r < top + h as f64 && c >= left && c < left + w as f64);
                (m, rng.gen_range(p.bright_gray - 0.025..p.bright_gray + 0.025), true)
            }
        };
        if ok && mask.count() > 0 {
            return (mask, level);
        }
    }
}

fn inject(rng: &mut ChaCha8Rng, family: Family, spec: &SynthSpec) -> (Vec<f64>, Mask) {
    let n = spec.size;
    let mut values = texture(rng, n, &spec.texture, spec.scale());
    let (mask, level) = anomaly_stencil(rng, family, n, spec.scale(), &spec.anomaly);
    let inside = values.iter().zip(mask.data()).filter(|(_, &b)| b == 1).map(|(v, _)| v).sum::<f64>()
        / mask.count() as f64;
    for (v, &on) in values.iter_mut().zip(mask.data()) {
        if on == 1 {
            *v = level + spec.anomaly.texture_keep * (*v - inside);
        }
    }
    (values, mask)
}

/// Adds i.i.d. Gaussian noise, clamps to `[0, 1]` and quantizes to 8 bits.
pub fn add_noise(img: &GrayImage, std: f64, rng: &mut impl Rng) -> GrayImage {
    let values = img
        .data()
        .iter()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    finish(img.width(), values)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Procedural dataset. Each pool draws from its own random stream, so
/// changing one count or the test noise leaves the other pools unchanged.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let n = spec.size;
    let scale = spec.scale();

    let mut rng = stream(spec.seed, 1);
    let normal = (0..spec.normals)
        .map(|_| finish(n, texture(&mut rng, n, &spec.texture, scale)))
        .collect();

    let mut rng = stream(spec.seed, 2);
    let mut anomalous_families = spec.mix.allocate(spec.anomalous);
    rand::seq::SliceRandom::shuffle(anomalous_families.as_mut_slice(), &mut rng);
    let mut anomalous = Vec::with_capacity(spec.anomalous);
    let mut anomalous_masks = Vec::with_capacity(spec.anomalous);
    for &f in &anomalous_families {
        let (values, mask) = inject(&mut rng, f, spec);
        anomalous.push(finish(n, values));
        anomalous_masks.push(mask);
    }

    let mut rng = stream(spec.seed, 3);
    let mut noise_rng = stream(spec.seed, 4);
    let mut test_families = spec.mix.allocate(spec.test);
    rand::seq::SliceRandom::shuffle(test_families.as_mut_slice(), &mut rng);
    let mut test = Vec::with_capacity(spec.test);
    for &f in &test_families {
        let (values, mask) = inject(&mut rng, f, spec);
        let mut img = finish(n, values);
        if spec.test_noise > 0.0 {
            img = add_noise(&img, spec.test_noise, &mut noise_rng);
        }
        test.push((img, mask));
    }

    Ok(Synthetic {
        dataset: Dataset::new(normal, anomalous, test)?,
        anomalous_masks,
        anomalous_families,
        test_families,
    })
}
