//! Self-training: pretrain on normals, then alternate pseudo-labelling of
//! the weakly labelled images with contrastive retraining.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KistError, Result};
use crate::fuzzy::KnowledgeBase;
use crate::metrics::{aupro, auroc, EvalBatch};
use crate::model::{EpochLoss, LossSpec, Model, ModelConfig, TrainConfig, TrainingSet};
use crate::postfilter::{guided_filter, GuidedFilterConfig};
use crate::pseudolabel::{produce_pseudo_label, residual_stats, threshold_set, LabelingConfig, ResidualStats};
use crate::raster::{GrayImage, Mask, ResidualMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KistConfig {
    pub iterations: usize,
    pub labeling: LabelingConfig,
    pub pretrain: TrainConfig,
    /// Contrastive phase; its seed is offset by the iteration index.
    pub train: TrainConfig,
}

impl KistConfig {
    /// 50 epochs per phase, 3 iterations.
    pub fn desk(seed: u64) -> Self {
        let pretrain = TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda: 1.0,
            augment: true,
            seed,
        };
        Self {
            iterations: 3,
            labeling: LabelingConfig::default(),
            pretrain,
            train: TrainConfig {
                learning_rate: DESK_CONTRASTIVE_LEARNING_RATE,
                ..pretrain
            },
        }
    }

    /// 200 epochs per phase, 5 iterations, learning rate 1e-3.
    pub fn paper(seed: u64) -> Self {
        let train = TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            ..Self::desk(seed).pretrain
        };
        Self {
            iterations: 5,
            labeling: LabelingConfig::default(),
            pretrain: train,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.labeling.validate()?;
        self.pretrain.validate()?;
        self.train.validate()
    }
}

/// Contrastive learning rate of the desk profile.
pub const DESK_CONTRASTIVE_LEARNING_RATE: f64 = 2e-3;

/// Pixel-level scores on held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub auroc: f64,
    pub aupro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: usize,
    pub stats: ResidualStats,
    pub thresholds: Vec<f64>,
    /// Labelled pixels per weakly labelled image.
    pub label_pixels: Vec<usize>,
    pub trace: Vec<EpochLoss>,
    pub metrics: Option<HeldOutMetrics>,
    #[serde(skip)]
    pub labels: Vec<Mask>,
}

#[derive(Debug, Clone)]
pub struct KistOutcome {
    pub initial: Model,
    pub pretrain_trace: Vec<EpochLoss>,
    /// Held-out metrics of the pretrained model, when a hook supplied them.
    pub initial_metrics: Option<HeldOutMetrics>,
    pub model: Model,
    pub reports: Vec<IterationReport>,
}

/// Called with `(iteration, model)` after pretraining (iteration 0) and
/// after every self-training iteration.
pub type Hook<'a> = dyn FnMut(usize, &Model) -> Result<Option<HeldOutMetrics>> + 'a;

/// Pseudo-labels for every weakly labelled image under `model`.
pub fn label_images(
    model: &Model,
    normals: &[GrayImage],
    anomalous: &[GrayImage],
    kb: &KnowledgeBase,
    labeling: &LabelingConfig,
) -> Result<(ResidualStats, Vec<f64>, Vec<Mask>)> {
    let stats = residual_stats(&model.residuals(normals)?)?;
    let thresholds = threshold_set(stats, labeling.s)?;
    let labels = anomalous
        .par_iter()
        .map(|x| produce_pseudo_label(x, &model.residual(x)?, kb, &thresholds, labeling.alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok((stats, thresholds, labels))
}

/// Self-training iterations starting from an already pretrained model.
pub fn self_train(
    pretrained: &Model,
    normals: &[GrayImage],
    anomalous: &[GrayImage],
    kb: &KnowledgeBase,
    config: &KistConfig,
    hook: &mut Hook<'_>,
) -> Result<(Model, Vec<IterationReport>)> {
    config.validate()?;
    if normals.is_empty() {
        return Err(KistError::Empty("normal images"));
    }
    let mut model = pretrained.clone();
    let mut reports = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let (stats, thresholds, labels) = label_images(&model, normals, anomalous, kb, &config.labeling)?;
        let label_pixels: Vec<usize> = labels.iter().map(Mask::count).collect();
        if label_pixels.iter().all(|&c| c == 0) {
            warn!("iteration {iteration}: every pseudo-label is empty; suppression term is 0");
        }
        info!(
            "iteration {iteration}: mu {:.6} sigma {:.6}, {} thresholds, labelled pixels {label_pixels:?}",
            stats.mu,
            stats.sigma,
            thresholds.len()
        );
        let labelled: Vec<(GrayImage, Mask)> = anomalous.iter().cloned().zip(labels.iter().cloned()).collect();
        let cfg = TrainConfig {
            seed: config.train.seed.wrapping_add(iteration as u64),
            ..config.train
        };
        model.reset_step();
        let outcome = model.train(
            &cfg,
            LossSpec::Contrastive {
                lambda: config.train.lambda,
            },
            TrainingSet {
                normals,
                anomalous: &labelled,
            },
        )?;
        model = outcome.model;
        let metrics = hook(iteration, &model)?;
        reports.push(IterationReport {
            iteration,
            stats,
            thresholds,
            label_pixels,
            trace: outcome.trace,
            metrics,
            labels,
        });
    }
    Ok((model, reports))
}

/// Pretraining on normals followed by `config.iterations` self-training
/// iterations.
pub fn kist(
    model_config: &ModelConfig,
    normals: &[GrayImage],
    anomalous: &[GrayImage],
    kb: &KnowledgeBase,
    config: &KistConfig,
    hook: &mut Hook<'_>,
) -> Result<KistOutcome> {
    config.validate()?;
    if normals.is_empty() {
        return Err(KistError::Empty("normal images"));
    }
    let initial = Model::new(model_config.clone())?;
    let pre = initial.train(
        &config.pretrain,
        LossSpec::Init,
        TrainingSet {
            normals,
            anomalous: &[],
        },
    )?;
    info!(
        "pretraining done: final loss {:.6}",
        pre.trace.last().map_or(f64::NAN, |e| e.loss)
    );
    let initial_metrics = hook(0, &pre.model)?;
    let (model, reports) = self_train(&pre.model, normals, anomalous, kb, config, hook)?;
    Ok(KistOutcome {
        initial: pre.model,
        pretrain_trace: pre.trace,
        initial_metrics,
        model,
        reports,
    })
}

/// Residual maps of `images`, guided-filtered when `filter` is given.
pub fn score_maps(model: &Model, images: &[GrayImage], filter: Option<&GuidedFilterConfig>) -> Result<Vec<ResidualMap>> {
    images
        .par_iter()
        .map(|x| {
            let e = model.residual(x)?;
            match filter {
                Some(cfg) => guided_filter(x, &e, cfg),
                None => Ok(e),
            }
        })
        .collect()
}

/// AUROC and AUPRO of `model` on a labelled set.
pub fn evaluate(
    model: &Model,
    test: &[(GrayImage, Mask)],
    filter: Option<&GuidedFilterConfig>,
    fpr_limit: f64,
) -> Result<HeldOutMetrics> {
    let images: Vec<GrayImage> = test.iter().map(|(x, _)| x.clone()).collect();
    let batch = EvalBatch::new(
        score_maps(model, &images, filter)?,
        test.iter().map(|(_, m)| m.clone()).collect(),
    )?;
    Ok(HeldOutMetrics {
        auroc: auroc(&batch)?,
        aupro: aupro(&batch, fpr_limit)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};

    fn tiny() -> (ModelConfig, KistConfig, Vec<GrayImage>, Vec<GrayImage>) {
        let s = generate(&SynthSpec {
            size: 32,
            normals: 6,
            anomalous: 2,
            test: 0,
            ..SynthSpec::default()
        })
        .unwrap();
        let model = ModelConfig {
            input_size: 32,
            widths: vec![4, 6],
            latent_channels: 4,
            leaky_slope: 0.2,
            seed: 1,
        };
        let mut cfg = KistConfig::desk(3);
        cfg.pretrain.epochs = 2;
        cfg.train.epochs = 2;
        cfg.iterations = 2;
        (model, cfg, s.dataset.normal, s.dataset.anomalous)
    }

    #[test]
    fn zero_iterations_return_pretrained_model() {
        let (mc, mut cfg, normals, anomalous) = tiny();
        cfg.iterations = 0;
        let kb = KnowledgeBase::kole_mvtec();
        let out = kist(&mc, &normals, &anomalous, &kb, &cfg, &mut |_, _| Ok(None)).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.model, out.initial);
        let (again, reports) = self_train(&out.model, &normals, &anomalous, &kb, &cfg, &mut |_, _| Ok(None)).unwrap();
        assert_eq!(again, out.model);
        assert!(reports.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_report_each_iteration() {
        let (mc, cfg, normals, anomalous) = tiny();
        let kb = KnowledgeBase::kole_mvtec();
        let mut seen = Vec::new();
        let a = kist(&mc, &normals, &anomalous, &kb, &cfg, &mut |i, _| {
            seen.push(i);
            Ok(None)
        })
        .unwrap();
        let b = kist(&mc, &normals, &anomalous, &kb, &cfg, &mut |_, _| Ok(None)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(a.model, b.model);
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.reports.len(), 2);
        for r in &a.reports {
            assert_eq!(r.label_pixels.len(), anomalous.len());
            assert_eq!(r.thresholds.len(), 7);
            assert_eq!(r.trace.len(), 2);
        }
    }

    #[test]
    fn empty_normal_set_is_rejected() {
        let (mc, cfg, _, anomalous) = tiny();
        let kb = KnowledgeBase::kole_mvtec();
        assert!(kist(&mc, &[], &anomalous, &kb, &cfg, &mut |_, _| Ok(None)).is_err());
    }
}
