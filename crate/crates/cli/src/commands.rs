use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kist::data::{generate, load_dataset, png_files, Family, FamilyMix, SynthSpec};
use kist::fuzzy::{parse_knowledge_base, KnowledgeBase};
use kist::metrics::{aupro, auroc, EvalBatch};
use kist::model::Model;
use kist::postfilter::{guided_filter, GuidedFilterConfig};
use kist::pseudolabel::{grade_regions, residual_stats};
use kist::raster::{binarize, GrayImage, Mask, ResidualMap};
use kist::regions::PropertyValues;
use kist::selftrain::{evaluate, kist, HeldOutMetrics};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::args::{EvalArgs, FilterArgs, GradeArgs, InferArgs, Profile, SynthArgs, TrainArgs};
use crate::report::{fmt_opt, table, Phase, Record, ReportWriter};

pub const REPORT_FILE: &str = "report.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// `checkpoints/iter_NNN.ckpt`; iteration 0 is the pretrained model.
pub fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:03}.ckpt"))
}

/// `labels/iter_NNN/`, pseudo-labels named after the weakly labelled images.
pub fn labels_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join("labels").join(format!("iter_{iteration:03}"))
}

/// A rule file path or a built-in set name.
pub fn load_rules(spec: &str) -> Result<KnowledgeBase> {
    match spec {
        "kole-mvtec" => Ok(KnowledgeBase::kole_mvtec()),
        "mtd" => Ok(KnowledgeBase::mtd()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading rule file {path}"))?;
            parse_knowledge_base(&text).with_context(|| format!("parsing rule file {path}"))
        }
    }
}

impl FilterArgs {
    pub fn config(&self, profile: Profile) -> Result<Option<GuidedFilterConfig>> {
        if self.no_postprocess {
            return Ok(None);
        }
        let base = profile.filter();
        Ok(Some(GuidedFilterConfig::new(
            self.gf_radius.unwrap_or(base.radius),
            self.gf_eps.unwrap_or(base.epsilon),
        )?))
    }
}

/// `family=fraction` pairs separated by commas; unnamed families get 0.
pub fn parse_mix(text: &str) -> Result<FamilyMix> {
    let mut mix = FamilyMix {
        large_dark_blob: 0.0,
        small_dark_spot: 0.0,
        dark_slender_scratch: 0.0,
        bright_rectangle: 0.0,
    };
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .with_context(|| format!("mix entry {part:?} is not family=fraction"))?;
        let value: f64 = value.trim().parse().with_context(|| format!("mix fraction {value:?}"))?;
        let slot = match name.trim().parse::<Family>()? {
            Family::LargeDarkBlob => &mut mix.large_dark_blob,
            Family::SmallDarkSpot => &mut mix.small_dark_spot,
            Family::DarkSlenderScratch => &mut mix.dark_slender_scratch,
            Family::BrightRectangle => &mut mix.bright_rectangle,
        };
        *slot = value;
    }
    mix.validate()?;
    Ok(mix)
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .with_context(|| format!("bad file name {}", path.display()))
}

fn write_report(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = ReportWriter::create(path)?;
    for r in records {
        w.emit(r)?;
    }
    w.finish()
}

pub fn cmd_synth(profile: Profile, seed: u64, args: &SynthArgs) -> Result<Vec<Record>> {
    let mix = match &args.mix {
        Some(text) => parse_mix(text)?,
        None => FamilyMix::default(),
    };
    let spec = SynthSpec {
        size: args.size.unwrap_or(profile.size()),
        normals: args.normals,
        anomalous: args.anomalous,
        test: args.test,
        mix,
        test_noise: args.test_noise,
        seed,
        ..SynthSpec::default()
    };
    let synthetic = generate(&spec)?;
    synthetic.save(&args.out, &spec)?;
    println!(
        "{} normal, {} anomalous, {} test images ({}x{}) written to {}",
        spec.normals,
        spec.anomalous,
        spec.test,
        spec.size,
        spec.size,
        args.out.display()
    );
    Ok(vec![Record::Run {
        command: "synth".into(),
        profile: profile.name().into(),
        seed,
        config: serde_json::to_value(&spec)?,
    }])
}

pub fn cmd_train(profile: Profile, seed: u64, args: &TrainArgs) -> Result<Vec<Record>> {
    let kb = load_rules(&args.rules)?;
    let model_config = profile.model(seed);
    let mut config = profile.kist(seed);
    if let Some(i) = args.iterations {
        config.iterations = i;
    }
    if let Some(e) = args.epochs {
        config.pretrain.epochs = e;
        config.train.epochs = e;
    }
    config.validate()?;
    let filter = args.filter.config(profile)?;
    let data = load_dataset(&args.data, model_config.input_size)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let names = png_files(&args.data.join("anomalous"))?
        .iter()
        .map(|p| stem(p))
        .collect::<Result<Vec<_>>>()?;
    let evaluated = !args.no_eval
        && data.test.iter().any(|(_, m)| m.count() > 0)
        && data.test.iter().any(|(_, m)| m.count() < m.data().len());
    fs::create_dir_all(args.out.join("checkpoints"))?;

    let mut filtered: Vec<Option<HeldOutMetrics>> = Vec::new();
    let outcome = {
        let mut hook = |i: usize, m: &Model| -> kist::Result<Option<HeldOutMetrics>> {
            m.save(checkpoint_path(&args.out, i))?;
            if !evaluated {
                filtered.push(None);
                return Ok(None);
            }
            let raw = evaluate(m, &data.test, None, args.fpr_limit)?;
            let post = filter
                .as_ref()
                .map(|f| evaluate(m, &data.test, Some(f), args.fpr_limit))
                .transpose()?;
            info!("iteration {i}: auroc {:.4} aupro {:.4}", raw.auroc, raw.aupro);
            filtered.push(post);
            Ok(Some(raw))
        };
        kist(&model_config, &data.normal, &data.anomalous, &kb, &config, &mut hook)?
    };
    outcome.model.save(args.out.join(FINAL_CHECKPOINT))?;

    let mut records = vec![Record::Run {
        command: "train".into(),
        profile: profile.name().into(),
        seed,
        config: json!({
            "data": args.data,
            "rules": args.rules,
            "model": model_config,
            "kist": config,
            "filter": filter,
            "fpr_limit": args.fpr_limit,
            "evaluated": evaluated,
        }),
    }];
    records.extend(outcome.pretrain_trace.iter().map(|e| Record::Epoch {
        phase: Phase::Pretrain,
        iteration: 0,
        epoch: e.epoch,
        loss: e.loss,
    }));
    let summary = |iteration: usize, final_loss: Option<f64>, raw: Option<HeldOutMetrics>| Record::Iteration {
        iteration,
        final_loss,
        auroc: raw.map(|m| m.auroc),
        aupro: raw.map(|m| m.aupro),
        auroc_filtered: filtered[iteration].map(|m| m.auroc),
        aupro_filtered: filtered[iteration].map(|m| m.aupro),
    };
    let checkpoint = |iteration: usize| Record::Checkpoint {
        iteration,
        file: format!("checkpoints/iter_{iteration:03}.ckpt"),
    };
    records.push(summary(0, outcome.pretrain_trace.last().map(|e| e.loss), outcome.initial_metrics));
    records.push(checkpoint(0));
    for r in &outcome.reports {
        records.push(Record::Labels {
            iteration: r.iteration,
            mu: r.stats.mu,
            sigma: r.stats.sigma,
            thresholds: r.thresholds.clone(),
            label_pixels: r.label_pixels.clone(),
        });
        records.extend(r.trace.iter().map(|e| Record::Epoch {
            phase: Phase::Contrastive,
            iteration: r.iteration,
            epoch: e.epoch,
            loss: e.loss,
        }));
        records.push(summary(r.iteration, r.trace.last().map(|e| e.loss), r.metrics));
        records.push(checkpoint(r.iteration));
        let dir = labels_dir(&args.out, r.iteration);
        fs::create_dir_all(&dir)?;
        for (name, label) in names.iter().zip(&r.labels) {
            label.save_png(dir.join(format!("{name}.png")))?;
        }
    }
    write_report(&args.out.join(REPORT_FILE), &records)?;

    let rows: Vec<Vec<String>> = records
        .iter()
        .filter_map(|r| match r {
            Record::Iteration {
                iteration,
                final_loss,
                auroc,
                aupro,
                auroc_filtered,
                aupro_filtered,
            } => {
                let labelled = outcome
                    .reports
                    .iter()
                    .find(|x| x.iteration == *iteration)
                    .map_or_else(|| "-".into(), |x| x.label_pixels.iter().sum::<usize>().to_string());
                Some(vec![
                    iteration.to_string(),
                    final_loss.map_or_else(|| "-".into(), |v| format!("{v:.5}")),
                    labelled,
                    fmt_opt(*auroc),
                    fmt_opt(*aupro),
                    fmt_opt(*auroc_filtered),
                    fmt_opt(*aupro_filtered),
                ])
            }
            _ => None,
        })
        .collect();
    print!(
        "{}",
        table(
            &["iteration", "loss", "labelled px", "AUROC", "AUPRO", "AUROC gf", "AUPRO gf"],
            &rows
        )
    );
    Ok(records)
}

/// Raw residual and optional filtered residual, both rounded through `f32`
/// so they equal what is written to disk.
fn score(model: &Model, x: &GrayImage, filter: Option<&GuidedFilterConfig>) -> Result<(ResidualMap, Option<ResidualMap>)> {
    let raw = model.residual(x)?.to_f32_precision();
    let filtered = match filter {
        Some(cfg) => Some(guided_filter(x, &raw, cfg)?.to_f32_precision()),
        None => None,
    };
    Ok((raw, filtered))
}

pub fn cmd_infer(profile: Profile, seed: u64, args: &InferArgs) -> Result<Vec<Record>> {
    let model = Model::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let n = model.config().input_size;
    let filter = args.filter.config(profile)?;
    let load = |p: &PathBuf| -> Result<GrayImage> {
        let img = GrayImage::load_png(p).with_context(|| format!("reading {}", p.display()))?;
        ensure!(
            img.dims() == (n, n),
            "{}: image is {}x{}, the checkpoint expects {n}x{n}",
            p.display(),
            img.width(),
            img.height()
        );
        Ok(img)
    };
    let normal_dir = args.data.join("normal");
    let normals = png_files(&normal_dir)?.iter().map(load).collect::<Result<Vec<_>>>()?;
    ensure!(!normals.is_empty(), "no normal images in {}", normal_dir.display());
    let normal_scores = normals
        .par_iter()
        .map(|x| score(&model, x, filter.as_ref()).map(|(raw, f)| f.unwrap_or(raw)))
        .collect::<Result<Vec<_>>>()?;
    let stats = residual_stats(&normal_scores)?;
    let threshold = stats.mu + 2.0 * stats.sigma;

    let image_dir = args.images.clone().unwrap_or_else(|| args.data.join("test").join("images"));
    let files = png_files(&image_dir)?;
    ensure!(!files.is_empty(), "no images in {}", image_dir.display());
    let raw_dir = args.out.join("raw");
    let filtered_dir = args.out.join("filtered");
    let overlay_dir = args.out.join("overlay");
    fs::create_dir_all(&raw_dir)?;
    fs::create_dir_all(&overlay_dir)?;
    if filter.is_some() {
        fs::create_dir_all(&filtered_dir)?;
    }
    let scored = files
        .par_iter()
        .map(|p| Ok((stem(p)?, score(&model, &load(p)?, filter.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    for (name, (raw, filtered)) in &scored {
        raw.save_f32(raw_dir.join(format!("{name}.f32")))?;
        let used = match filtered {
            Some(f) => {
                f.save_f32(filtered_dir.join(format!("{name}.f32")))?;
                f
            }
            None => raw,
        };
        binarize(used, threshold).save_png(overlay_dir.join(format!("{name}.png")))?;
    }
    let records = vec![
        Record::Run {
            command: "infer".into(),
            profile: profile.name().into(),
            seed,
            config: json!({
                "checkpoint": args.checkpoint,
                "data": args.data,
                "images": image_dir,
                "filter": filter,
            }),
        },
        Record::Threshold {
            mu: stats.mu,
            sigma: stats.sigma,
            value: threshold,
            postprocess: filter.is_some(),
        },
    ];
    write_report(&args.out.join(REPORT_FILE), &records)?;
    println!(
        "{} images scored; overlay threshold {threshold:.6} (mu {:.6} + 2 sigma {:.6})",
        scored.len(),
        stats.mu,
        stats.sigma
    );
    Ok(records)
}

pub fn cmd_eval(profile: Profile, seed: u64, args: &EvalArgs) -> Result<Vec<Record>> {
    let mask_files = png_files(&args.masks)?;
    ensure!(!mask_files.is_empty(), "no masks in {}", args.masks.display());
    let mut scores = Vec::with_capacity(mask_files.len());
    let mut truths = Vec::with_capacity(mask_files.len());
    for p in &mask_files {
        let m = Mask::load_png(p).with_context(|| format!("reading {}", p.display()))?;
        let score_path = args.scores.join(format!("{}.f32", stem(p)?));
        let s = ResidualMap::load_f32(&score_path, m.width(), m.height())
            .with_context(|| format!("reading {}", score_path.display()))?;
        scores.push(s);
        truths.push(m);
    }
    let batch = EvalBatch::new(scores, truths)?;
    let (pixels, positives, negatives) = (batch.pixels(), batch.positives(), batch.negatives());
    let records = vec![
        Record::Run {
            command: "eval".into(),
            profile: profile.name().into(),
            seed,
            config: json!({ "scores": args.scores, "masks": args.masks, "fpr_limit": args.fpr_limit }),
        },
        Record::Metric {
            name: "auroc".into(),
            value: auroc(&batch)?,
            fpr_limit: None,
            pixels,
            positives,
            negatives,
        },
        Record::Metric {
            name: "aupro".into(),
            value: aupro(&batch, args.fpr_limit)?,
            fpr_limit: Some(args.fpr_limit),
            pixels,
            positives,
            negatives,
        },
    ];
    if let Some(path) = &args.report {
        write_report(path, &records)?;
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .filter_map(|r| match r {
            Record::Metric {
                name, value, fpr_limit, ..
            } => Some(vec![
                name.clone(),
                format!("{value:.6}"),
                fpr_limit.map_or_else(|| "-".into(), |f| f.to_string()),
            ]),
            _ => None,
        })
        .collect();
    print!("{}", table(&["metric", "value", "fpr limit"], &rows));
    println!("{pixels} pixels, {positives} anomalous");
    Ok(records)
}

fn property_map(values: &PropertyValues) -> BTreeMap<String, f64> {
    values.iter().map(|(p, v)| (p.name().to_string(), v)).collect()
}

pub fn cmd_grade(profile: Profile, seed: u64, args: &GradeArgs) -> Result<Vec<Record>> {
    let kb = load_rules(&args.rules)?;
    let x = GrayImage::load_png(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let mask = match (&args.mask, &args.residual, args.threshold) {
        (Some(p), _, _) => Mask::load_png(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(r), Some(t)) => binarize(&ResidualMap::load_f32(r, x.width(), x.height())?, t),
        _ => bail!("either --mask or --residual with --threshold is required"),
    };
    let graded = grade_regions(&mask, &x, &kb)?;
    let mut records = vec![Record::Run {
        command: "grade".into(),
        profile: profile.name().into(),
        seed,
        config: json!({ "image": args.image, "mask": args.mask, "residual": args.residual, "threshold": args.threshold, "rules": args.rules }),
    }];
    records.extend(graded.iter().enumerate().map(|(i, g)| Record::Region {
        rank: i + 1,
        pixels: g.region.len(),
        raw: property_map(&g.properties.raw),
        standardized: property_map(&g.properties.standardized),
        rule_grades: g.rule_grades.clone(),
        grade: g.grade,
    }));
    if let Some(path) = &args.report {
        write_report(path, &records)?;
    }
    if graded.is_empty() {
        println!("no regions");
        return Ok(records);
    }
    let rows: Vec<Vec<String>> = graded
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut row = vec![(i + 1).to_string(), g.region.len().to_string()];
            row.extend(g.properties.standardized.iter().map(|(_, v)| format!("{v:.3}")));
            row.push(g.rule_grades.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
            row.push(format!("{:.4}", g.grade));
            row
        })
        .collect();
    print!(
        "{}",
        table(
            &["rank", "pixels", "area", "gray", "shape", "unevenness", "symmetry", "rule grades", "grade"],
            &rows
        )
    );
    Ok(records)
}
