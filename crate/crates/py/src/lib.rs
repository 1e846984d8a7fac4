//! Python module `kist`. Images, masks and score maps cross the boundary as
//! lists of rows.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kist_core::data::{generate as generate_set, SynthSpec};
use kist_core::fuzzy::{parse_knowledge_base, KnowledgeBase as CoreKb};
use kist_core::metrics::{self, EvalBatch, DEFAULT_FPR_LIMIT};
use kist_core::model::{Model as CoreModel, ModelConfig};
use kist_core::postfilter::{self, GuidedFilterConfig};
use kist_core::pseudolabel::{self, ResidualStats};
use kist_core::raster::{GrayImage, Mask, ResidualMap};
use kist_core::regions::{Property, PropertyValues, RegionProperties};
use kist_core::selftrain::{self, KistConfig};
use kist_core::KistError;

type Rows<T> = Vec<Vec<T>>;

fn py_err(e: KistError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn shape<T>(rows: &Rows<T>) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok((w, h))
}

fn image(rows: &Rows<f64>) -> PyResult<GrayImage> {
    let (w, h) = shape(rows)?;
    GrayImage::new(w, h, rows.concat()).map_err(py_err)
}

fn residual_map(rows: &Rows<f64>) -> PyResult<ResidualMap> {
    let (w, h) = shape(rows)?;
    ResidualMap::new(w, h, rows.concat()).map_err(py_err)
}

fn mask(rows: &Rows<u8>) -> PyResult<Mask> {
    let (w, h) = shape(rows)?;
    Mask::new(w, h, rows.concat()).map_err(py_err)
}

fn to_rows<T: Copy>(data: &[T], width: usize) -> Rows<T> {
    data.chunks(width).map(<[T]>::to_vec).collect()
}

fn props_dict(values: &PropertyValues) -> HashMap<String, f64> {
    values.iter().map(|(p, v)| (p.name().to_string(), v)).collect()
}

fn props_from(dict: &HashMap<String, f64>) -> PyResult<PropertyValues> {
    let mut values = PropertyValues::splat(0.0);
    for p in Property::ALL {
        let v = dict
            .get(p.name())
            .ok_or_else(|| PyValueError::new_err(format!("missing property {:?}", p.name())))?;
        values.set(p, *v);
    }
    Ok(values)
}

/// Fuzzy rule base with its property scale factors.
#[pyclass]
#[derive(Clone)]
struct KnowledgeBase {
    inner: CoreKb,
}

#[pymethods]
impl KnowledgeBase {
    #[staticmethod]
    fn kole_mvtec() -> Self {
        Self { inner: CoreKb::kole_mvtec() }
    }

    #[staticmethod]
    fn mtd() -> Self {
        Self { inner: CoreKb::mtd() }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_knowledge_base(text).map_err(py_err)?,
        })
    }

    #[getter]
    fn rule_count(&self) -> usize {
        self.inner.rules().len()
    }

    /// Grades of every rule for raw (unstandardized) properties.
    fn rule_grades(&self, raw: HashMap<String, f64>) -> PyResult<Vec<f64>> {
        let props = RegionProperties::from_raw(props_from(&raw)?);
        Ok(self.inner.rule_grades(&standardized(&props, &self.inner)))
    }

    fn anomaly_grade(&self, raw: HashMap<String, f64>) -> PyResult<f64> {
        let props = RegionProperties::from_raw(props_from(&raw)?);
        Ok(self.inner.anomaly_grade(&standardized(&props, &self.inner)))
    }
}

fn standardized(props: &RegionProperties, kb: &CoreKb) -> RegionProperties {
    kist_core::regions::standardize(props, kb.gammas())
}

/// Convolutional autoencoder.
#[pyclass]
#[derive(Clone)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_size=64, widths=vec![16, 32, 64], latent_channels=16, leaky_slope=0.2, seed=7))]
    fn new(input_size: usize, widths: Vec<usize>, latent_channels: usize, leaky_slope: f64, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            input_size,
            widths,
            latent_channels,
            leaky_slope,
            seed,
        };
        Ok(Self {
            inner: CoreModel::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn forward(&self, x: Rows<f64>) -> PyResult<Rows<f64>> {
        let out = self.inner.forward(&image(&x)?).map_err(py_err)?;
        Ok(to_rows(out.data(), out.width()))
    }

    fn residual(&self, x: Rows<f64>) -> PyResult<Rows<f64>> {
        let out = self.inner.residual(&image(&x)?).map_err(py_err)?;
        Ok(to_rows(out.data(), out.width()))
    }

    /// Per-image summed squared error averaged over `normals`.
    fn init_loss(&self, normals: Vec<Rows<f64>>) -> PyResult<f64> {
        let xs = normals.iter().map(image).collect::<PyResult<Vec<_>>>()?;
        Ok(self.inner.init_loss(&xs).map_err(py_err)?.per_image)
    }

    #[pyo3(signature = (normals, anomalous, labels, lam=1.0))]
    fn contrastive_loss(
        &self,
        normals: Vec<Rows<f64>>,
        anomalous: Vec<Rows<f64>>,
        labels: Vec<Rows<u8>>,
        lam: f64,
    ) -> PyResult<f64> {
        let xs = normals.iter().map(image).collect::<PyResult<Vec<_>>>()?;
        let pairs = pair_up(&anomalous, &labels)?;
        Ok(self.inner.contrastive_loss(&xs, &pairs, lam).map_err(py_err)?.total)
    }
}

fn pair_up(images: &[Rows<f64>], masks: &[Rows<u8>]) -> PyResult<Vec<(GrayImage, Mask)>> {
    if images.len() != masks.len() {
        return Err(PyValueError::new_err("need one mask per image"));
    }
    images.iter().zip(masks).map(|(x, m)| Ok((image(x)?, mask(m)?))).collect()
}

/// Graded connected regions of `mask` over `image`, highest grade first.
#[pyfunction]
fn grade_regions(py: Python<'_>, mask_rows: Rows<u8>, image_rows: Rows<f64>, kb: &KnowledgeBase) -> PyResult<Vec<PyObject>> {
    let graded = pseudolabel::grade_regions(&mask(&mask_rows)?, &image(&image_rows)?, &kb.inner).map_err(py_err)?;
    graded
        .iter()
        .map(|g| {
            let d = PyDict::new_bound(py);
            d.set_item("pixels", g.region.pixels().to_vec())?;
            d.set_item("raw", props_dict(&g.properties.raw))?;
            d.set_item("standardized", props_dict(&g.properties.standardized))?;
            d.set_item("rule_grades", g.rule_grades.clone())?;
            d.set_item("grade", g.grade)?;
            Ok(d.into_any().unbind())
        })
        .collect()
}

/// `mu + n * s * sigma` for every admissible `n`.
#[pyfunction]
#[pyo3(signature = (mu, sigma, s=0.3))]
fn threshold_set(mu: f64, sigma: f64, s: f64) -> PyResult<Vec<f64>> {
    pseudolabel::threshold_set(ResidualStats { mu, sigma }, s).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (image_rows, residual_rows, kb, thresholds, alpha=0.8))]
fn pseudo_label(
    image_rows: Rows<f64>,
    residual_rows: Rows<f64>,
    kb: &KnowledgeBase,
    thresholds: Vec<f64>,
    alpha: f64,
) -> PyResult<Rows<u8>> {
    let x = image(&image_rows)?;
    let m = pseudolabel::produce_pseudo_label(&x, &residual_map(&residual_rows)?, &kb.inner, &thresholds, alpha)
        .map_err(py_err)?;
    Ok(to_rows(m.data(), m.width()))
}

#[pyfunction]
#[pyo3(signature = (guide, input, radius=2, eps=1e-4))]
fn guided_filter(guide: Rows<f64>, input: Rows<f64>, radius: usize, eps: f64) -> PyResult<Rows<f64>> {
    let cfg = GuidedFilterConfig::new(radius, eps).map_err(py_err)?;
    let out = postfilter::guided_filter(&image(&guide)?, &residual_map(&input)?, &cfg).map_err(py_err)?;
    Ok(to_rows(out.data(), out.width()))
}

fn batch(scores: &[Rows<f64>], truths: &[Rows<u8>]) -> PyResult<EvalBatch> {
    let s = scores.iter().map(residual_map).collect::<PyResult<Vec<_>>>()?;
    let t = truths.iter().map(mask).collect::<PyResult<Vec<_>>>()?;
    EvalBatch::new(s, t).map_err(py_err)
}

/// Pixel-level AUROC.
#[pyfunction]
fn auroc(scores: Vec<Rows<f64>>, truths: Vec<Rows<u8>>) -> PyResult<f64> {
    metrics::auroc(&batch(&scores, &truths)?).map_err(py_err)
}

/// Normalized area under the per-region overlap curve up to `fpr_limit`.
#[pyfunction]
#[pyo3(signature = (scores, truths, fpr_limit=DEFAULT_FPR_LIMIT))]
fn aupro(scores: Vec<Rows<f64>>, truths: Vec<Rows<u8>>, fpr_limit: f64) -> PyResult<f64> {
    metrics::aupro(&batch(&scores, &truths)?, fpr_limit).map_err(py_err)
}

/// Synthetic textured dataset as a dict of image and mask lists.
#[pyfunction]
#[pyo3(signature = (size=64, normals=60, anomalous=3, test=20, seed=7))]
fn generate(py: Python<'_>, size: usize, normals: usize, anomalous: usize, test: usize, seed: u64) -> PyResult<PyObject> {
    let spec = SynthSpec {
        size,
        normals,
        anomalous,
        test,
        seed,
        ..SynthSpec::default()
    };
    let s = generate_set(&spec).map_err(py_err)?;
    let img = |x: &GrayImage| to_rows(x.data(), x.width());
    let msk = |m: &Mask| to_rows(m.data(), m.width());
    let d = PyDict::new_bound(py);
    d.set_item("normal", s.dataset.normal.iter().map(img).collect::<Vec<_>>())?;
    d.set_item("anomalous", s.dataset.anomalous.iter().map(img).collect::<Vec<_>>())?;
    d.set_item("anomalous_masks", s.anomalous_masks.iter().map(msk).collect::<Vec<_>>())?;
    d.set_item("test", s.dataset.test.iter().map(|(x, _)| img(x)).collect::<Vec<_>>())?;
    d.set_item("test_masks", s.dataset.test.iter().map(|(_, m)| msk(m)).collect::<Vec<_>>())?;
    Ok(d.into_any().unbind())
}

/// Pretraining plus self-training. Returns the final model and the
/// labelled pixel counts of each iteration.
#[pyfunction]
#[pyo3(signature = (normals, anomalous, kb, iterations=3, epochs=50, seed=7, widths=vec![16, 32, 64], latent_channels=16))]
#[allow(clippy::too_many_arguments)]
fn train(
    normals: Vec<Rows<f64>>,
    anomalous: Vec<Rows<f64>>,
    kb: &KnowledgeBase,
    iterations: usize,
    epochs: usize,
    seed: u64,
    widths: Vec<usize>,
    latent_channels: usize,
) -> PyResult<(Model, Vec<Vec<usize>>)> {
    let xs = normals.iter().map(image).collect::<PyResult<Vec<_>>>()?;
    let an = anomalous.iter().map(image).collect::<PyResult<Vec<_>>>()?;
    let size = xs.first().map_or(0, GrayImage::width);
    let model_cfg = ModelConfig {
        input_size: size,
        widths,
        latent_channels,
        ..ModelConfig::desk(seed)
    };
    let mut cfg = KistConfig::desk(seed);
    cfg.iterations = iterations;
    cfg.pretrain.epochs = epochs;
    cfg.train.epochs = epochs;
    let out = selftrain::kist(&model_cfg, &xs, &an, &kb.inner, &cfg, &mut |_, _| Ok(None)).map_err(py_err)?;
    let labels = out.reports.iter().map(|r| r.label_pixels.clone()).collect();
    Ok((Model { inner: out.model }, labels))
}

/// Raw or guided-filtered residual maps.
#[pyfunction]
#[pyo3(signature = (model, images, filtered=true, radius=2, eps=1e-4))]
fn score_maps(model: &Model, images: Vec<Rows<f64>>, filtered: bool, radius: usize, eps: f64) -> PyResult<Vec<Rows<f64>>> {
    let xs = images.iter().map(image).collect::<PyResult<Vec<_>>>()?;
    let cfg = GuidedFilterConfig::new(radius, eps).map_err(py_err)?;
    let maps = selftrain::score_maps(&model.inner, &xs, filtered.then_some(&cfg)).map_err(py_err)?;
    Ok(maps.iter().map(|m| to_rows(m.data(), m.width())).collect())
}

#[pymodule]
#[pyo3(name = "kist")]
fn kist_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KnowledgeBase>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(grade_regions, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_set, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_label, m)?)?;
    m.add_function(wrap_pyfunction!(guided_filter, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupro, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(score_maps, m)?)?;
    Ok(())
}
