//! Convolutional encoder-decoder, its two training losses and their exact
//! gradients.
//!
//! Encoder: one stride-2 3x3 convolution per stage, then a stride-1
//! bottleneck convolution to `latent_channels`. Decoder: per stage a nearest
//! x2 upsample followed by a 3x3 convolution, mirroring the encoder widths
//! and ending in a single sigmoid channel. Hidden activations are leaky
//! rectifiers.
//!
//! Parameters are held in `f64` but always lie on the `f32` grid, so a
//! checkpoint of `f32` blobs reproduces them bit for bit.

mod checkpoint;
mod layers;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::raster::{GrayImage, Mask, ResidualMap};

use layers::Tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{augment, Augmentation, EpochLoss, TrainConfig, TrainOutcome, TrainingSet};

/// Subtracted from every input pixel before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 64x64 input, widths (16, 32, 64).
    pub fn desk(seed: u64) -> Self {
        Self {
            input_size: 64,
            widths: vec![16, 32, 64],
            latent_channels: 16,
            leaky_slope: 0.2,
            seed,
        }
    }

    /// Same network on 256x256 inputs.
    pub fn paper(seed: u64) -> Self {
        Self {
            input_size: 256,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(KistError::param("widths", "need at least one encoder stage"));
        }
        if self.widths.contains(&0) || self.latent_channels == 0 {
            return Err(KistError::param("widths", "channel counts must be positive"));
        }
        let factor = 1usize << self.widths.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(KistError::param(
                "input_size",
                format!("{} is not divisible by {factor}", self.input_size),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(KistError::param("leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) enum Activation {
    Leaky,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub name_index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub upsample: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn name(&self) -> String {
        format!("conv{}", self.name_index)
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }
}

fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = 1;
    for &w in &cfg.widths {
        specs.push(LayerSpec {
            name_index: specs.len(),
            in_channels: prev,
            out_channels: w,
            stride: 2,
            upsample: false,
            activation: Activation::Leaky,
        });
        prev = w;
    }
    specs.push(LayerSpec {
        name_index: specs.len(),
        in_channels: prev,
        out_channels: cfg.latent_channels,
        stride: 1,
        upsample: false,
        activation: Activation::Leaky,
    });
    prev = cfg.latent_channels;
    for stage in (0..cfg.widths.len()).rev() {
        let (out, activation) = if stage == 0 {
            (1, Activation::Sigmoid)
        } else {
            (cfg.widths[stage - 1], Activation::Leaky)
        };
        specs.push(LayerSpec {
            name_index: specs.len(),
            in_channels: prev,
            out_channels: out,
            stride: 1,
            upsample: true,
            activation,
        });
        prev = out;
    }
    specs
}

/// Kernel and bias of one convolution. Kernels are `[out][in][3][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Round onto the `f32` grid.
fn f32_grid(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Network parameters plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<LayerSpec>,
    layers: Vec<ConvParams>,
    step: u64,
}

/// Which objective a gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    /// Mean over images of the summed squared residual.
    Init,
    /// Per-pixel normal term minus `lambda` times the pseudo-labelled mean.
    Contrastive { lambda: f64 },
}

/// Both normalizations of the pretraining objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitLoss {
    /// `(1/N) sum_i ||x_hat_i - x_i||^2`
    pub per_image: f64,
    /// The same divided by the pixel count.
    pub per_pixel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub normal_term: f64,
    /// Already multiplied by `-lambda`.
    pub anomalous_term: f64,
    pub total: f64,
    pub labeled_pixels: usize,
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<ConvParams>,
}

impl Gradient {
    fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| ConvParams {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Activations retained by a forward pass for the backward pass.
struct Trace {
    /// Input to each convolution (after any upsample).
    conv_inputs: Vec<(usize, usize, usize)>,
    cols: Vec<Vec<f64>>,
    /// Activation output of each layer.
    outputs: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = layer_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        let layers = specs
            .iter()
            .map(|s| {
                let fan_in = (s.in_channels * 9) as f64;
                let bound = (3.0 * gain / fan_in).sqrt();
                ConvParams {
                    weights: (0..s.weight_len())
                        .map(|_| f32_grid(rng.gen_range(-bound..bound)))
                        .collect(),
                    bias: vec![0.0; s.out_channels],
                }
            })
            .collect();
        Ok(Self {
            config,
            specs,
            layers,
            step: 0,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, layers: Vec<ConvParams>, step: u64) -> Result<Self> {
        config.validate()?;
        let specs = layer_specs(&config);
        if specs.len() != layers.len() {
            return Err(KistError::Checkpoint(format!(
                "expected {} layers, found {}",
                specs.len(),
                layers.len()
            )));
        }
        for (s, l) in specs.iter().zip(&layers) {
            if l.weights.len() != s.weight_len() || l.bias.len() != s.out_channels {
                return Err(KistError::Checkpoint(format!("layer {} has the wrong shape", s.name())));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(KistError::NonFinite { layer: s.name() });
            }
        }
        Ok(Self {
            config,
            specs,
            layers,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.specs.iter().map(LayerSpec::name).collect()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn reset_step(&mut self) {
        self.step = 0;
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable access to one scalar in the flat layout of [`flat_params`](Self::flat_params).
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// One plain gradient-descent step; parameters stay on the `f32` grid.
    pub fn apply_gradient(&mut self, grad: &Gradient, learning_rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (p, d) in l.weights.iter_mut().zip(&g.weights) {
                *p = f32_grid(*p - learning_rate * d);
            }
            for (p, d) in l.bias.iter_mut().zip(&g.bias) {
                *p = f32_grid(*p - learning_rate * d);
            }
        }
        self.step += 1;
    }

    fn check_input(&self, x: &GrayImage) -> Result<()> {
        let n = self.config.input_size;
        if x.dims() != (n, n) {
            return Err(KistError::DimensionMismatch {
                expected: (n, n),
                actual: x.dims(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &GrayImage, keep: bool) -> Result<(Tensor, Option<Trace>)> {
        self.check_input(x)?;
        let n = self.config.input_size;
        let mut cur = Tensor {
            channels: 1,
            rows: n,
            cols: n,
            data: x.data().iter().map(|v| v - INPUT_CENTER).collect(),
        };
        let mut trace = keep.then(|| Trace {
            conv_inputs: Vec::new(),
            cols: Vec::new(),
            outputs: Vec::new(),
        });
        for (spec, p) in self.specs.iter().zip(&self.layers) {
            if spec.upsample {
                cur = layers::upsample2(&cur);
            }
            let shape = (cur.channels, cur.rows, cur.cols);
            let (mut out, col) = layers::conv_forward(&cur, &p.weights, &p.bias, spec.out_channels, spec.stride);
            match spec.activation {
                Activation::Leaky => layers::leaky_relu(&mut out, self.config.leaky_slope),
                Activation::Sigmoid => layers::sigmoid(&mut out),
            }
            if out.data.iter().any(|v| !v.is_finite()) {
                return Err(KistError::NonFinite { layer: spec.name() });
            }
            if let Some(t) = trace.as_mut() {
                t.conv_inputs.push(shape);
                t.cols.push(col);
                t.outputs.push(out.clone());
            }
            cur = out;
        }
        Ok((cur, trace))
    }

    /// Reconstruction of `x`, values in `[0, 1]`.
    pub fn forward(&self, x: &GrayImage) -> Result<GrayImage> {
        let (out, _) = self.run(x, false)?;
        GrayImage::from_clamped(out.cols, out.rows, out.data)
    }

    /// Per-pixel squared reconstruction error.
    pub fn residual(&self, x: &GrayImage) -> Result<ResidualMap> {
        ResidualMap::squared_difference(&self.forward(x)?, x)
    }

    pub fn residuals(&self, images: &[GrayImage]) -> Result<Vec<ResidualMap>> {
        images.par_iter().map(|x| self.residual(x)).collect()
    }

    /// Backpropagates `d loss / d x_hat` through the network.
    fn backward(&self, trace: &Trace, grad_output: Tensor) -> Result<Gradient> {
        let mut grad = Gradient::zeros_like(self);
        let mut g = grad_output;
        for i in (0..self.specs.len()).rev() {
            let spec = &self.specs[i];
            match spec.activation {
                Activation::Leaky => {
                    layers::leaky_relu_backward(&mut g, &trace.outputs[i], self.config.leaky_slope)
                }
                Activation::Sigmoid => layers::sigmoid_backward(&mut g, &trace.outputs[i]),
            }
            let gl = &mut grad.layers[i];
            let gin = layers::conv_backward(
                &g,
                &trace.cols[i],
                &self.layers[i].weights,
                trace.conv_inputs[i],
                spec.stride,
                &mut gl.weights,
                &mut gl.bias,
                i > 0,
            );
            if gl.weights.iter().chain(&gl.bias).any(|v| !v.is_finite()) {
                return Err(KistError::NonFinite { layer: spec.name() });
            }
            if let Some(mut gin) = gin {
                if spec.upsample {
                    gin = layers::upsample2_backward(&gin);
                }
                g = gin;
            }
        }
        Ok(grad)
    }

    /// Loss contribution and gradient of one image whose loss is
    /// `weight * sum_p mask_p (x_hat_p - x_p)^2`.
    fn weighted_image_gradient(&self, x: &GrayImage, mask: Option<&Mask>, weight: f64) -> Result<(f64, Gradient)> {
        let (out, trace) = self.run(x, true)?;
        let trace = trace.expect("trace requested");
        let mut g = Tensor::zeros(1, out.rows, out.cols);
        let mut loss = 0.0;
        for (i, (&y, &t)) in out.data.iter().zip(x.data()).enumerate() {
            let on = mask.map_or(1.0, |m| f64::from(m.data()[i]));
            let d = y - t;
            loss += on * d * d;
            g.data[i] = 2.0 * weight * on * d;
        }
        Ok((weight * loss, self.backward(&trace, g)?))
    }

    /// Sums per-image gradients in input order.
    fn reduce<'a, I>(&self, jobs: I) -> Result<(f64, Gradient)>
    where
        I: IntoParallelIterator<Item = (&'a GrayImage, Option<&'a Mask>, f64)>,
    {
        let parts: Vec<(f64, Gradient)> = jobs
            .into_par_iter()
            .map(|(x, m, w)| self.weighted_image_gradient(x, m, w))
            .collect::<Result<_>>()?;
        let mut total = Gradient::zeros_like(self);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            total.add_assign(g);
        }
        Ok((loss, total))
    }

    pub fn init_loss(&self, normals: &[GrayImage]) -> Result<InitLoss> {
        init_objective(&self.residuals(normals)?)
    }

    pub fn contrastive_loss(
        &self,
        normals: &[GrayImage],
        anomalous: &[(GrayImage, Mask)],
        lambda: f64,
    ) -> Result<ContrastiveLoss> {
        let normal_res = self.residuals(normals)?;
        let anomalous_res = anomalous
            .par_iter()
            .map(|(x, m)| Ok((self.residual(x)?, m.clone())))
            .collect::<Result<Vec<_>>>()?;
        contrastive_objective(&normal_res, &anomalous_res, lambda)
    }

    /// Per-pixel weights of the two contrastive terms and the label count.
    fn contrastive_weights(
        &self,
        normals: &[GrayImage],
        anomalous: &[(GrayImage, Mask)],
        lambda: f64,
    ) -> Result<(f64, f64, usize)> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(KistError::param("lambda", format!("{lambda} is not >= 0")));
        }
        for (x, m) in anomalous {
            if x.dims() != m.dims() {
                return Err(KistError::DimensionMismatch {
                    expected: x.dims(),
                    actual: m.dims(),
                });
            }
        }
        let pixels = (self.config.input_size * self.config.input_size) as f64;
        let wn = if normals.is_empty() {
            0.0
        } else {
            1.0 / (normals.len() as f64 * pixels)
        };
        let labeled: usize = anomalous.iter().map(|(_, m)| m.count()).sum();
        let wa = if labeled == 0 {
            0.0
        } else {
            -lambda / labeled as f64
        };
        Ok((wn, wa, labeled))
    }

    /// Exact gradient of the selected loss over the given batches. Returns
    /// the loss value as well.
    pub fn gradients(
        &self,
        loss: LossSpec,
        normals: &[GrayImage],
        anomalous: &[(GrayImage, Mask)],
    ) -> Result<(f64, Gradient)> {
        match loss {
            LossSpec::Init => {
                if normals.is_empty() {
                    return Err(KistError::Empty("normal batch"));
                }
                let w = 1.0 / normals.len() as f64;
                self.reduce(normals.iter().map(|x| (x, None, w)).collect::<Vec<_>>())
            }
            LossSpec::Contrastive { lambda } => {
                let (wn, wa, _) = self.contrastive_weights(normals, anomalous, lambda)?;
                let mut jobs: Vec<(&GrayImage, Option<&Mask>, f64)> =
                    normals.iter().map(|x| (x, None, wn)).collect();
                if wa != 0.0 {
                    jobs.extend(anomalous.iter().map(|(x, m)| (x, Some(m), wa)));
                }
                self.reduce(jobs)
            }
        }
    }
}

/// Pretraining objective from precomputed residual maps.
pub fn init_objective(normal: &[ResidualMap]) -> Result<InitLoss> {
    if normal.is_empty() {
        return Err(KistError::Empty("normal batch"));
    }
    let total: f64 = normal.iter().map(|r| r.data().iter().sum::<f64>()).sum();
    let per_image = total / normal.len() as f64;
    Ok(InitLoss {
        per_image,
        per_pixel: per_image / normal[0].data().len() as f64,
    })
}

/// Contrastive objective from precomputed residual maps. An empty normal
/// batch or an all-zero label set contributes 0 for its term.
pub fn contrastive_objective(
    normal: &[ResidualMap],
    anomalous: &[(ResidualMap, Mask)],
    lambda: f64,
) -> Result<ContrastiveLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(KistError::param("lambda", format!("{lambda} is not >= 0")));
    }
    let mut normal_sum = 0.0;
    let mut normal_pixels = 0usize;
    for r in normal {
        normal_sum += r.data().iter().sum::<f64>();
        normal_pixels += r.data().len();
    }
    let mut labeled = 0usize;
    let mut masked_sum = 0.0;
    for (r, m) in anomalous {
        if r.dims() != m.dims() {
            return Err(KistError::DimensionMismatch {
                expected: r.dims(),
                actual: m.dims(),
            });
        }
        labeled += m.count();
        masked_sum += r.data().iter().zip(m.data()).map(|(v, &b)| v * f64::from(b)).sum::<f64>();
    }
    let normal_term = if normal_pixels == 0 { 0.0 } else { normal_sum / normal_pixels as f64 };
    let anomalous_term = if labeled == 0 { 0.0 } else { -lambda * masked_sum / labeled as f64 };
    Ok(ContrastiveLoss {
        normal_term,
        anomalous_term,
        total: normal_term + anomalous_term,
        labeled_pixels: labeled,
    })
}
