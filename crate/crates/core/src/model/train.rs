use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossSpec, Model};
use crate::error::{KistError, Result};
use crate::raster::{GrayImage, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the suppression term; unused by the pretraining loss.
    pub lambda: f64,
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(KistError::param("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KistError::param("learning_rate", "must be > 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(KistError::param("lambda", "must be >= 0"));
        }
        Ok(())
    }
}

/// Normal images plus pseudo-labelled anomalous images.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub normals: &'a [GrayImage],
    pub anomalous: &'a [(GrayImage, Mask)],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean of the mini-batch losses, each measured before its update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochLoss>,
}

/// The eight flips/right-angle rotations of a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        quarter_turns: 0,
        flip: false,
    };

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4),
            flip: rng.gen_bool(0.5),
        }
    }

    fn source(&self, n: usize, mut r: usize, mut c: usize) -> (usize, usize) {
        if self.flip {
            c = n - 1 - c;
        }
        for _ in 0..self.quarter_turns {
            (r, c) = (c, n - 1 - r);
        }
        (r, c)
    }

    fn apply<T: Copy>(&self, data: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(n, r, c);
                out.push(data[sr * n + sc]);
            }
        }
        out
    }
}

/// Applies `aug` to a square image; non-square images are returned unchanged.
pub fn augment(img: &GrayImage, aug: Augmentation) -> GrayImage {
    let (w, h) = img.dims();
    if w != h || aug == Augmentation::IDENTITY {
        return img.clone();
    }
    GrayImage::new(w, h, aug.apply(img.data(), w)).expect("permutation keeps values valid")
}

fn augment_mask(m: &Mask, aug: Augmentation) -> Mask {
    let (w, h) = m.dims();
    if w != h || aug == Augmentation::IDENTITY {
        return m.clone();
    }
    Mask::new(w, h, aug.apply(m.data(), w)).expect("permutation keeps values valid")
}

/// Start of chunk `b` when `len` items are split into `parts` near-equal chunks.
fn chunk_start(len: usize, parts: usize, b: usize) -> usize {
    b * len / parts
}

impl Model {
    /// Mini-batch gradient descent. Each batch takes a share of both pools
    /// proportional to the pool sizes.
    pub fn train(&self, cfg: &TrainConfig, loss: LossSpec, set: TrainingSet<'_>) -> Result<TrainOutcome> {
        cfg.validate()?;
        let mut model = self.clone();
        let anomalous: &[(GrayImage, Mask)] = match loss {
            LossSpec::Init => &[],
            LossSpec::Contrastive { .. } => set.anomalous,
        };
        if set.normals.is_empty() && anomalous.is_empty() {
            return Err(KistError::Empty("training set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal_idx: Vec<usize> = (0..set.normals.len()).collect();
        let mut anomalous_idx: Vec<usize> = (0..anomalous.len()).collect();
        let total = normal_idx.len() + anomalous_idx.len();
        let batches = total.div_ceil(cfg.batch_size).max(1);
        let mut trace = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            normal_idx.shuffle(&mut rng);
            anomalous_idx.shuffle(&mut rng);
            let (mut loss_sum, mut steps) = (0.0, 0usize);
            for b in 0..batches {
                let normals: Vec<GrayImage> = normal_idx
                    [chunk_start(normal_idx.len(), batches, b)..chunk_start(normal_idx.len(), batches, b + 1)]
                    .iter()
                    .map(|&i| {
                        let aug = if cfg.augment { Augmentation::random(&mut rng) } else { Augmentation::IDENTITY };
                        augment(&set.normals[i], aug)
                    })
                    .collect();
                let labeled: Vec<(GrayImage, Mask)> = anomalous_idx
                    [chunk_start(anomalous_idx.len(), batches, b)..chunk_start(anomalous_idx.len(), batches, b + 1)]
                    .iter()
                    .map(|&i| {
                        let aug = if cfg.augment { Augmentation::random(&mut rng) } else { Augmentation::IDENTITY };
                        (augment(&anomalous[i].0, aug), augment_mask(&anomalous[i].1, aug))
                    })
                    .collect();
                if normals.is_empty() && (labeled.is_empty() || loss == LossSpec::Init) {
                    continue;
                }
                let (value, grad) = model.gradients(loss, &normals, &labeled)?;
                model.apply_gradient(&grad, cfg.learning_rate);
                loss_sum += value;
                steps += 1;
            }
            let mean = if steps == 0 { 0.0 } else { loss_sum / steps as f64 };
            debug!("epoch {epoch}: loss {mean:.6}");
            trace.push(EpochLoss { epoch, loss: mean });
        }
        Ok(TrainOutcome { model, trace })
    }
}
