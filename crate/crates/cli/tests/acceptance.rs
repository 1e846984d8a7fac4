//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use kist::data::{load_truth_masks, png_files};
use kist::fuzzy::{Antecedent, FuzzyRule, KnowledgeBase, TrapezoidMF};
use kist::metrics::{aupro, auroc, EvalBatch};
use kist::model::{LossSpec, Model, ModelConfig};
use kist::postfilter::{guided_filter_values, GuidedFilterConfig};
use kist::pseudolabel::{produce_pseudo_label, threshold_set, threshold_steps, ResidualStats};
use kist::raster::{GrayImage, Mask, ResidualMap};
use kist::regions::{Gammas, Property, PropertyValues, RegionProperties};
use kist_cli::commands::{checkpoint_path, labels_dir, FINAL_CHECKPOINT, REPORT_FILE};
use kist_cli::{read_report, run_from, Record};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: &str = "7";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn cli(args: &[&str]) -> Result<Vec<Record>> {
    run_from(["kist", "--seed", SEED].into_iter().chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Outputs of the shared desk-profile pipeline.
struct Pipeline {
    data: PathBuf,
    run_a: PathBuf,
    run_b: PathBuf,
    train_time: Duration,
    iterations: Vec<(usize, f64, f64)>,
    noisy_raw: f64,
    noisy_filtered: f64,
}

fn metric(records: &[Record], wanted: &str) -> Result<f64> {
    records
        .iter()
        .find_map(|r| match r {
            Record::Metric { name, value, .. } if name == wanted => Some(*value),
            _ => None,
        })
        .ok_or_else(|| anyhow!("no {wanted} record"))
}

fn pipeline(root: &Path) -> Result<Pipeline> {
    let data = root.join("data");
    let noisy = root.join("noisy");
    cli(&["synth", "--out", p(&data)])?;
    cli(&["synth", "--out", p(&noisy), "--test-noise", "0.05"])?;

    let run_a = root.join("run_a");
    let run_b = root.join("run_b");
    let t = Instant::now();
    let records = cli(&["train", "--data", p(&data), "--out", p(&run_a)])?;
    let train_time = t.elapsed();
    cli(&["train", "--data", p(&data), "--out", p(&run_b)])?;

    let iterations = records
        .iter()
        .filter_map(|r| match r {
            Record::Iteration {
                iteration,
                auroc: Some(a),
                aupro: Some(p),
                ..
            } => Some((*iteration, *a, *p)),
            _ => None,
        })
        .collect();

    let ckpt = run_a.join(FINAL_CHECKPOINT);
    let inf = root.join("infer");
    cli(&["infer", "--checkpoint", p(&ckpt), "--data", p(&noisy), "--out", p(&inf)])?;
    let masks = noisy.join("test").join("masks");
    let raw = cli(&["eval", "--scores", p(&inf.join("raw")), "--masks", p(&masks)])?;
    let filtered = cli(&["eval", "--scores", p(&inf.join("filtered")), "--masks", p(&masks)])?;
    Ok(Pipeline {
        data,
        run_a,
        run_b,
        train_time,
        iterations,
        noisy_raw: metric(&raw, "auroc")?,
        noisy_filtered: metric(&filtered, "auroc")?,
    })
}

fn self_training_gain(pl: &Pipeline) -> Result<Verdict> {
    let first = pl.iterations.first().context("no baseline metrics")?;
    let last = pl.iterations.last().context("no final metrics")?;
    let (da, dp) = (last.1 - first.1, last.2 - first.2);
    let minutes = pl.train_time.as_secs_f64() / 60.0;
    verdict(
        da >= 0.05 && dp >= 0.05 && minutes <= 10.0 && last.0 == 3,
        format!(
            "AUROC {:.4} -> {:.4} ({da:+.4}), AUPRO {:.4} -> {:.4} ({dp:+.4}), train {:.1} s",
            first.1,
            last.1,
            first.2,
            last.2,
            pl.train_time.as_secs_f64()
        ),
    )
}

fn postprocessing_gain(pl: &Pipeline) -> Result<Verdict> {
    let d = pl.noisy_filtered - pl.noisy_raw;
    verdict(
        d >= 0.005,
        format!("noisy AUROC raw {:.4}, filtered {:.4} ({d:+.4})", pl.noisy_raw, pl.noisy_filtered),
    )
}

fn iteration_monotonicity(pl: &Pipeline) -> Result<Verdict> {
    let a: Vec<f64> = pl.iterations.iter().map(|x| x.1).collect();
    let ok = a.len() == 4 && a.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let shown: Vec<String> = a.iter().map(|v| format!("{v:.4}")).collect();
    verdict(ok, format!("AUROC by iteration [{}]", shown.join(", ")))
}

fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let union = a.or(b)?.count();
    Ok(if union == 0 {
        1.0
    } else {
        a.and(b)?.count() as f64 / union as f64
    })
}

fn pseudo_label_fidelity(pl: &Pipeline) -> Result<Verdict> {
    let truth = load_truth_masks(&pl.data)?;
    let mut means = Vec::new();
    for it in 1..=3 {
        let labels = png_files(&labels_dir(&pl.run_a, it))?
            .iter()
            .map(Mask::load_png)
            .collect::<kist::Result<Vec<_>>>()?;
        anyhow::ensure!(labels.len() == truth.len(), "iteration {it}: {} labels", labels.len());
        let total = labels
            .iter()
            .zip(&truth)
            .map(|(l, t)| iou(l, t))
            .sum::<Result<f64>>()?;
        means.push(total / truth.len() as f64);
    }
    let ok = means[0] >= 0.5 && means.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let shown: Vec<String> = means.iter().map(|v| format!("{v:.3}")).collect();
    verdict(ok, format!("mean IoU by iteration [{}]", shown.join(", ")))
}

fn determinism(pl: &Pipeline) -> Result<Verdict> {
    let mut files = vec![PathBuf::from(REPORT_FILE), PathBuf::from(FINAL_CHECKPOINT)];
    for it in 0..=3 {
        files.push(checkpoint_path(Path::new(""), it));
    }
    let mut differing = Vec::new();
    for f in &files {
        if fs::read(pl.run_a.join(f))? != fs::read(pl.run_b.join(f))? {
            differing.push(f.display().to_string());
        }
    }
    let a = read_report(pl.run_a.join(REPORT_FILE))?;
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical, {} report records", files.len(), a.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> GrayImage {
    GrayImage::new(n, n, (0..n * n).map(|_| rng.gen()).collect()).expect("valid image")
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Mask {
    Mask::new(n, n, (0..n * n).map(|_| u8::from(rng.gen_bool(p))).collect()).expect("valid mask")
}

fn gradient_correctness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = Model::new(ModelConfig {
        input_size: 8,
        widths: vec![2, 3],
        latent_channels: 2,
        leaky_slope: 0.2,
        seed: 3,
    })?;
    let normals: Vec<GrayImage> = (0..3).map(|_| random_image(&mut rng, 8)).collect();
    let anomalous: Vec<(GrayImage, Mask)> = (0..2)
        .map(|_| (random_image(&mut rng, 8), random_mask(&mut rng, 8, 0.3)))
        .collect();
    let value = |m: &Model, loss: LossSpec| -> Result<f64> {
        Ok(match loss {
            LossSpec::Init => m.init_loss(&normals)?.per_image,
            LossSpec::Contrastive { lambda } => m.contrastive_loss(&normals, &anomalous, lambda)?.total,
        })
    };
    let h = 1e-4;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, loss) in [("init", LossSpec::Init), ("contrastive", LossSpec::Contrastive { lambda: 1.0 })] {
        let (_, g) = model.gradients(loss, &normals, &anomalous)?;
        let g = g.flat();
        let mut candidates: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-7).collect();
        candidates.shuffle(&mut rng);
        anyhow::ensure!(candidates.len() >= 20, "{name}: only {} non-zero gradients", candidates.len());
        let mut worst: f64 = 0.0;
        for &i in &candidates[..20] {
            let mut plus = model.clone();
            *plus.param_mut(i) += h;
            let mut minus = model.clone();
            *minus.param_mut(i) -= h;
            let numeric = (value(&plus, loss)? - value(&minus, loss)?) / (2.0 * h);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs());
            worst = worst.max(rel);
        }
        ok &= worst < 1e-3;
        parts.push(format!("{name} max rel err {worst:.2e} over 20 params"));
    }
    verdict(ok, parts.join(", "))
}

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Recomputes every PRO point from scratch at each distinct threshold.
fn sweep_aupro(scores: &[f64], regions: &[Vec<usize>], negatives: &[usize], limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = negatives.iter().filter(|&&i| scores[i] >= t).count() as f64 / negatives.len() as f64;
        let pro = regions
            .iter()
            .map(|r| r.iter().filter(|&&i| scores[i] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        points.push((fpr, pro));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((f0, p0), (f1, p1)) = (w[0], w[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let pl = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + pl) / 2.0;
            break;
        }
    }
    area / limit
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_roc: f64 = 0.0;
    for case in 0..50 {
        let levels = if case % 2 == 0 { 6 } else { 1000 };
        let scores: Vec<f64> = (0..100).map(|_| f64::from(rng.gen_range(0..levels)) / 7.0).collect();
        let mut labels: Vec<u8> = (0..100).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let batch = EvalBatch::new(
            vec![ResidualMap::new(10, 10, scores.clone())?],
            vec![Mask::new(10, 10, labels.clone())?],
        )?;
        worst_roc = worst_roc.max((auroc(&batch)? - pairwise_auroc(&scores, &labels)).abs());
    }
    let mut worst_pro: f64 = 0.0;
    for _ in 0..20 {
        let n = 8;
        let mut mask = Mask::zeros(n, n);
        let mut regions = Vec::new();
        // rows 0-2 and 4-7, so the rectangles never touch
        for (r0, r1) in [(0, 3), (4, 8)] {
            let (top, bottom) = (rng.gen_range(r0..r1), rng.gen_range(r0..r1));
            let (top, bottom) = (top.min(bottom), top.max(bottom));
            let (left, right) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let (left, right) = (left.min(right), left.max(right));
            let mut pixels = Vec::new();
            for r in top..=bottom {
                for c in left..=right {
                    mask.set(r, c, true);
                    pixels.push(r * n + c);
                }
            }
            regions.push(pixels);
        }
        let scores: Vec<f64> = (0..n * n).map(|_| f64::from(rng.gen_range(0..12u8)) / 11.0).collect();
        let negatives: Vec<usize> = (0..n * n).filter(|&i| mask.data()[i] == 0).collect();
        let batch = EvalBatch::new(vec![ResidualMap::new(n, n, scores.clone())?], vec![mask])?;
        let got = aupro(&batch, 0.3)?;
        worst_pro = worst_pro.max((got - sweep_aupro(&scores, &regions, &negatives, 0.3)).abs());
    }
    verdict(
        worst_roc <= 1e-12 && worst_pro <= 1e-9,
        format!("AUROC max |diff| {worst_roc:.1e} (50 cases), AUPRO max |diff| {worst_pro:.1e} (20 cases)"),
    )
}

fn naive_guided_filter(x: &[f64], e: &[f64], n: usize, r: usize, eps: f64) -> Vec<f64> {
    let window = |k: usize| {
        let (row, col) = (k / n, k % n);
        let rows = row.saturating_sub(r)..=(row + r).min(n - 1);
        let cols = col.saturating_sub(r)..=(col + r).min(n - 1);
        rows.flat_map(move |i| cols.clone().map(move |j| i * n + j)).collect::<Vec<_>>()
    };
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    for k in 0..n * n {
        let w = window(k);
        let m = w.len() as f64;
        let mx = w.iter().map(|&i| x[i]).sum::<f64>() / m;
        let me = w.iter().map(|&i| e[i]).sum::<f64>() / m;
        let var = w.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / m;
        let cov = w.iter().map(|&i| (x[i] - mx) * (e[i] - me)).sum::<f64>() / m;
        a[k] = cov / (var + eps);
        b[k] = me - a[k] * mx;
    }
    (0..n * n)
        .map(|i| {
            let w = window(i);
            let m = w.len() as f64;
            let ma = w.iter().map(|&k| a[k]).sum::<f64>() / m;
            let mb = w.iter().map(|&k| b[k]).sum::<f64>() / m;
            ma * x[i] + mb
        })
        .collect()
}

fn guided_filter_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 32;
    let cfg = GuidedFilterConfig::new(4, 1e-3)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = random_image(&mut rng, n).quantized();
        let e: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>().powi(3)).collect();
        let fast = guided_filter_values(&x, &e, &cfg)?;
        let slow = naive_guided_filter(x.data(), &e, n, 4, 1e-3);
        worst = worst.max(fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let x = random_image(&mut rng, n).quantized();
    let tiny = GuidedFilterConfig::new(4, 1e-12)?;
    let self_guided = guided_filter_values(&x, x.data(), &tiny)?;
    let self_err = self_guided.iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let constant = guided_filter_values(&x, &vec![0.37; n * n], &cfg)?;
    let exact = constant.iter().all(|&v| v == 0.37);
    verdict(
        worst <= 1e-9 && self_err <= 1e-6 && exact,
        format!("naive max |diff| {worst:.1e}, self-guided max |diff| {self_err:.1e}, constant exact {exact}"),
    )
}

fn trapezoid(a: f64, b: f64, c: f64, d: f64, v: f64) -> f64 {
    if v < a || v > d {
        0.0
    } else if v < b {
        (v - a) / (b - a)
    } else if v <= c {
        1.0
    } else {
        (d - v) / (d - c)
    }
}

fn fuzzy_algebra() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut sets = BTreeMap::new();
        let mut raw_sets = Vec::new();
        for s in 0..3 {
            let mut bp: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..2.5)).collect();
            bp.sort_by(f64::total_cmp);
            if bp.windows(2).any(|w| w[1] - w[0] < 1e-6) {
                bp = vec![0.0, 0.5, 1.0, 1.5];
            }
            let name = format!("s{s}");
            sets.insert(name.clone(), TrapezoidMF::new(bp[0], bp[1], bp[2], bp[3])?);
            raw_sets.push(bp);
        }
        let mut rules = Vec::new();
        let mut raw_rules = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let mut props = Property::ALL.to_vec();
            props.shuffle(&mut rng);
            let k = rng.gen_range(1..4);
            let ants: Vec<(Property, usize)> = props[..k].iter().map(|&p| (p, rng.gen_range(0..3))).collect();
            let tv = rng.gen_range(0.05..=1.0);
            rules.push(FuzzyRule::new(
                ants.iter()
                    .map(|&(p, s)| Antecedent {
                        property: p,
                        set: format!("s{s}"),
                    })
                    .collect(),
                tv,
            )?);
            raw_rules.push((ants, tv));
        }
        let kb = KnowledgeBase::new(sets, Gammas::default(), rules)?;
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.2..2.8)).collect();
        let props = RegionProperties::from_raw(PropertyValues::new(v[0], v[1], v[2], v[3], v[4]));
        let expected = raw_rules
            .iter()
            .map(|(ants, tv)| {
                tv * ants
                    .iter()
                    .map(|&(p, s)| {
                        let bp = &raw_sets[s];
                        trapezoid(bp[0], bp[1], bp[2], bp[3], props.standardized.get(p))
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        worst = worst.max((kb.anomaly_grade(&props) - expected).abs());
    }

    let kb = KnowledgeBase::kole_mvtec();
    let mut subset_failures = 0;
    for _ in 0..50 {
        let n = 32;
        let x = random_image(&mut rng, n).quantized();
        let e = ResidualMap::new(n, n, (0..n * n).map(|_| rng.gen::<f64>().powi(2)).collect())?;
        let stats = ResidualStats {
            mu: rng.gen_range(0.1..0.4),
            sigma: rng.gen_range(0.05..0.2),
        };
        let thresholds = threshold_set(stats, 0.3)?;
        let (a1, a2) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let loose = produce_pseudo_label(&x, &e, &kb, &thresholds, lo)?;
        let strict = produce_pseudo_label(&x, &e, &kb, &thresholds, hi)?;
        if !strict.is_subset_of(&loose) {
            subset_failures += 1;
        }
    }
    verdict(
        worst <= 1e-12 && subset_failures == 0,
        format!("grade max |diff| {worst:.1e} over 1000 draws, alpha subset violations {subset_failures}/50"),
    )
}

fn threshold_conformance() -> Result<Verdict> {
    let stats = ResidualStats { mu: 0.01, sigma: 0.004 };
    let expected: [(f64, u64, u64); 4] = [(1.0, 1, 3), (0.5, 2, 6), (0.3, 4, 10), (0.25, 4, 12)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (s, lo, hi) in expected {
        let steps = threshold_steps(s)?;
        let set = threshold_set(stats, s)?;
        let symbolic: Vec<f64> = (lo..=hi).map(|n| stats.mu + n as f64 * s * stats.sigma).collect();
        ok &= steps == (lo..=hi) && set == symbolic;
        parts.push(format!("s={s}: n={}..={} ({})", steps.start(), steps.end(), set.len()));
    }
    verdict(ok, format!("{}; s=0.3 gives 7 thresholds, not 10", parts.join(", ")))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let pipeline = pipeline(root.path());
    let from_pipeline = |f: fn(&Pipeline) -> Result<Verdict>| match &pipeline {
        Ok(pl) => f(pl),
        Err(e) => Err(anyhow!("pipeline failed: {e:#}")),
    };
    let results: Vec<(u8, &str, Result<Verdict>)> = vec![
        (1, "self-training gain", from_pipeline(self_training_gain)),
        (2, "post-processing gain", from_pipeline(postprocessing_gain)),
        (3, "iteration monotonicity", from_pipeline(iteration_monotonicity)),
        (4, "gradient correctness", gradient_correctness()),
        (5, "metric oracles", metric_oracles()),
        (6, "guided-filter oracle", guided_filter_oracle()),
        (7, "fuzzy-engine algebra", fuzzy_algebra()),
        (8, "pseudo-label fidelity", from_pipeline(pseudo_label_fidelity)),
        (9, "determinism", from_pipeline(determinism)),
        (10, "threshold-set conformance", threshold_conformance()),
    ];
    let mut failed = 0;
    for (id, name, result) in results {
        let (pass, detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
