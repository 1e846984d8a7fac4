use kist::data::{generate, SynthSpec};
use kist::model::{
    contrastive_objective, init_objective, LossSpec, Model, ModelConfig, TrainConfig, TrainingSet, INPUT_CENTER,
};
use kist::raster::{GrayImage, Mask, ResidualMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        widths: vec![2, 3],
        latent_channels: 2,
        leaky_slope: 0.2,
        seed,
    }
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> GrayImage {
    GrayImage::new(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Mask {
    Mask::new(n, n, (0..n * n).map(|_| u8::from(rng.gen_bool(p))).collect()).unwrap()
}

type Plane = Vec<Vec<Vec<f64>>>;

fn naive_conv(x: &Plane, w: &[f64], b: &[f64], out_ch: usize, stride: usize) -> Plane {
    let (ic, n) = (x.len(), x[0].len());
    let m = (n - 1) / stride + 1;
    let mut y = vec![vec![vec![0.0; m]; m]; out_ch];
    for o in 0..out_ch {
        for r in 0..m {
            for c in 0..m {
                let mut acc = b[o];
                for i in 0..ic {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let sr = (r * stride + kr) as isize - 1;
                            let sc = (c * stride + kc) as isize - 1;
                            if sr < 0 || sc < 0 || sr >= n as isize || sc >= n as isize {
                                continue;
                            }
                            acc += w[((o * ic + i) * 3 + kr) * 3 + kc] * x[i][sr as usize][sc as usize];
                        }
                    }
                }
                y[o][r][c] = acc;
            }
        }
    }
    y
}

fn naive_forward(model: &Model, x: &GrayImage) -> Vec<f64> {
    let cfg = model.config();
    let n = cfg.input_size;
    let stages = cfg.widths.len();
    let mut cur: Plane = vec![(0..n).map(|r| (0..n).map(|c| x.get(r, c) - INPUT_CENTER).collect()).collect()];
    for (k, p) in model.layers().iter().enumerate() {
        let decoder = k > stages;
        if decoder {
            cur = cur
                .iter()
                .map(|pl| (0..pl.len() * 2).map(|r| (0..pl.len() * 2).map(|c| pl[r / 2][c / 2]).collect()).collect())
                .collect();
        }
        let stride = if k < stages { 2 } else { 1 };
        cur = naive_conv(&cur, &p.weights, &p.bias, p.bias.len(), stride);
        let last = k + 1 == model.layers().len();
        for v in cur.iter_mut().flatten().flatten() {
            *v = if last {
                1.0 / (1.0 + (-*v).exp())
            } else if *v > 0.0 {
                *v
            } else {
                cfg.leaky_slope * *v
            };
        }
    }
    cur[0].iter().flatten().copied().collect()
}

#[test]
fn forward_matches_nested_loop_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..3 {
        let cfg = ModelConfig {
            input_size: 16,
            widths: vec![3, 4],
            latent_channels: 2,
            leaky_slope: 0.1,
            seed,
        };
        let model = Model::new(cfg).unwrap();
        let x = random_image(&mut rng, 16);
        let fast = model.forward(&x).unwrap();
        let slow = naive_forward(&model, &x);
        for (a, e) in fast.data().iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

fn finite_difference_check(loss: LossSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny(seed)).unwrap();
    let normals: Vec<GrayImage> = (0..2).map(|_| random_image(&mut rng, 8)).collect();
    let anomalous: Vec<(GrayImage, Mask)> = (0..2)
        .map(|_| (random_image(&mut rng, 8), random_mask(&mut rng, 8, 0.3)))
        .collect();
    let (_, grad) = model.gradients(loss, &normals, &anomalous).unwrap();
    let analytic = grad.flat();
    let value = |m: &Model| -> f64 {
        match loss {
            LossSpec::Init => m.init_loss(&normals).unwrap().per_image,
            LossSpec::Contrastive { lambda } => m.contrastive_loss(&normals, &anomalous, lambda).unwrap().total,
        }
    };
    let h = 1e-4;
    let count = model.parameter_count();
    let base = value(&model);
    let mut checked = 0;
    while checked < 20 {
        let i = rng.gen_range(0..count);
        let mut plus = model.clone();
        *plus.param_mut(i) += h;
        let mut minus = model.clone();
        *minus.param_mut(i) -= h;
        let (up, down) = (value(&plus), value(&minus));
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-6) {
            // a rectifier kink lies within the step
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        assert!(rel < 1e-3, "param {i}: numeric {numeric}, analytic {}", analytic[i]);
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn init_gradient_matches_finite_differences(seed in 0u64..1000) {
        finite_difference_check(LossSpec::Init, seed);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences(seed in 0u64..1000, lambda in 0.1f64..2.0) {
        finite_difference_check(LossSpec::Contrastive { lambda }, seed);
    }

    #[test]
    fn residual_matches_pixel_loop(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(tiny(seed)).unwrap();
        let x = random_image(&mut rng, 8);
        let recon = model.forward(&x).unwrap();
        let res = model.residual(&x).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let d = recon.get(r, c) - x.get(r, c);
                prop_assert!((res.get(r, c) - d * d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objectives_match_loops(seed in 0u64..1000, lambda in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = |rng: &mut ChaCha8Rng| {
            ResidualMap::new(6, 5, (0..30).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let normal: Vec<ResidualMap> = (0..3).map(|_| map(&mut rng)).collect();
        let anomalous: Vec<(ResidualMap, Mask)> = (0..2)
            .map(|_| {
                let m = Mask::new(6, 5, (0..30).map(|_| u8::from(rng.gen_bool(0.4))).collect()).unwrap();
                (map(&mut rng), m)
            })
            .collect();

        let mut per_image = 0.0;
        for r in &normal {
            for &v in r.data() {
                per_image += v;
            }
        }
        per_image /= 3.0;
        let init = init_objective(&normal).unwrap();
        prop_assert!((init.per_image - per_image).abs() < 1e-12);
        prop_assert!((init.per_pixel - per_image / 30.0).abs() < 1e-12);

        let (mut masked, mut labeled) = (0.0, 0usize);
        for (r, m) in &anomalous {
            for i in 0..30 {
                if m.data()[i] == 1 {
                    masked += r.data()[i];
                    labeled += 1;
                }
            }
        }
        let normal_mean = per_image / 30.0;
        let expected = if labeled == 0 { normal_mean } else { normal_mean - lambda * masked / labeled as f64 };
        let got = contrastive_objective(&normal, &anomalous, lambda).unwrap();
        prop_assert!((got.total - expected).abs() < 1e-9);
        prop_assert_eq!(got.labeled_pixels, labeled);
    }
}

fn mean_over(model: &Model, images: &[GrayImage], masks: Option<&[Mask]>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, x) in images.iter().enumerate() {
        let res = model.residual(x).unwrap();
        for (i, v) in res.data().iter().enumerate() {
            if masks.map_or(true, |m| m[k].data()[i] == 1) {
                sum += v;
                count += 1;
            }
        }
    }
    sum / count as f64
}

#[test]
fn contrastive_steps_separate_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::new(tiny(3)).unwrap();
    let flat = GrayImage::filled(8, 8, 0.5).unwrap();
    let out = model.forward(&flat).unwrap();
    let level = out.data().iter().sum::<f64>() / 64.0 + 0.15;
    let normals: Vec<GrayImage> = (0..4)
        .map(|_| GrayImage::new(8, 8, (0..64).map(|_| level + rng.gen_range(-0.02..0.02)).collect()).unwrap())
        .collect();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..2 {
        let mut x = normals[0].data().to_vec();
        let mut m = vec![0u8; 64];
        for r in 2..5 {
            for c in 3..6 {
                x[r * 8 + c] = 0.05;
                m[r * 8 + c] = 1;
            }
        }
        images.push(GrayImage::new(8, 8, x).unwrap());
        masks.push(Mask::new(8, 8, m).unwrap());
    }
    let anomalous: Vec<(GrayImage, Mask)> = images.iter().cloned().zip(masks.iter().cloned()).collect();
    let mut masked = mean_over(&model, &images, Some(&masks));
    let mut normal = mean_over(&model, &normals, None);
    for step in 0..10 {
        let (_, grad) = model
            .gradients(LossSpec::Contrastive { lambda: 1.0 }, &normals, &anomalous)
            .unwrap();
        model.apply_gradient(&grad, 1e-3);
        let m = mean_over(&model, &images, Some(&masks));
        let n = mean_over(&model, &normals, None);
        assert!(m >= masked - 1e-12, "step {step}: masked residual fell {masked} -> {m}");
        assert!(n <= normal + 1e-12, "step {step}: normal residual rose {normal} -> {n}");
        masked = m;
        normal = n;
    }
}

#[test]
fn pretraining_halves_the_loss() {
    let spec = SynthSpec {
        size: 32,
        normals: 8,
        anomalous: 0,
        test: 0,
        ..SynthSpec::default()
    };
    let normals = generate(&spec).unwrap().dataset.normal;
    let model = Model::new(ModelConfig {
        input_size: 32,
        widths: vec![8, 16],
        latent_channels: 8,
        leaky_slope: 0.2,
        seed: 2,
    })
    .unwrap();
    let before = model.init_loss(&normals).unwrap().per_image;
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 2,
        learning_rate: 3e-3,
        lambda: 1.0,
        augment: false,
        seed: 2,
    };
    let set = TrainingSet {
        normals: &normals,
        anomalous: &[],
    };
    let trained = model.train(&cfg, LossSpec::Init, set).unwrap().model;
    let after = trained.init_loss(&normals).unwrap().per_image;
    assert!(after < 0.5 * before, "{before} -> {after}");
}
