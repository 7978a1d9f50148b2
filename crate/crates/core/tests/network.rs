use crowd_hat::compress::{compress_scene, CompressedFeatures, CompressionConfig};
use crowd_hat::net::{
    init_output_priors, load_model, save_model, save_model_versioned, train, HatArchitecture,
    HatModel, LossWeights, TrainOptions, TrainSample, MODEL_VERSION,
};
use crowd_hat::nms::{search_thresholds, SearchConfig};
use crowd_hat::rng::stream;
use crowd_hat::synth::{generate_dataset, SynthConfig};
use rand::Rng;

fn tiny_arch() -> HatArchitecture {
    HatArchitecture {
        in_channels: 4,
        grid_size: 8,
        hist_len: 16,
        k: 2,
        enc2d: vec![3, 4],
        enc1d: vec![3, 4],
        local_enc: vec![3, 4],
        pn_hidden: 5,
        pc_hidden: 5,
        count_scale: 10.0,
    }
}

fn random_features(arch: &HatArchitecture, seed: u64) -> CompressedFeatures {
    let mut rng = stream(seed, &[99]);
    let mut f = CompressedFeatures::zeros(arch.in_channels, arch.grid_size, arch.hist_len);
    for v in &mut f.t2d {
        if rng.random_bool(0.6) {
            *v = rng.random_range(0.0..0.02);
        }
    }
    for v in &mut f.t1d {
        *v = rng.random_range(0..12) as f64;
    }
    f
}

fn random_sample(arch: &HatArchitecture, seed: u64) -> TrainSample {
    let mut rng = stream(seed, &[98]);
    TrainSample {
        id: format!("s{seed}"),
        features: random_features(arch, seed),
        thresholds: (0..arch.regions())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
        count: rng.random_range(0..60),
    }
}

/// Model with random weights and small random biases so every ReLU sees
/// both signs.
fn random_model(arch: HatArchitecture, seed: u64) -> HatModel {
    let mut m = HatModel::new(arch, seed).unwrap();
    let mut rng = stream(seed, &[97]);
    for p in &mut m.params {
        if *p == 0.0 {
            *p = rng.random_range(-0.1..0.1);
        }
    }
    m
}

fn finite_difference(model: &HatModel, batch: &[TrainSample], w: LossWeights) -> Vec<f64> {
    let h = 1e-5;
    let mut m = model.clone();
    (0..m.params.len())
        .map(|i| {
            let p = m.params[i];
            m.params[i] = p + h;
            let up = m.loss_value(batch, w).unwrap().total;
            m.params[i] = p - h;
            let down = m.loss_value(batch, w).unwrap().total;
            m.params[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

#[test]
fn full_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let model = random_model(tiny_arch(), seed);
        let batch: Vec<TrainSample> = (0..2)
            .map(|i| random_sample(model.arch(), seed * 10 + i))
            .collect();
        let w = LossWeights {
            nms: 1.0,
            count: 0.7,
        };
        let analytic = model.loss(&batch, w).unwrap().gradient;
        let numeric = finite_difference(&model, &batch, w);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn shapes_follow_the_architecture() {
    let arch = tiny_arch();
    let model = random_model(arch.clone(), 1);
    let f = random_features(&arch, 1);
    let g = model.forward_global(&f.t2d, &f.t1d).unwrap();
    assert_eq!(g.len(), 4 + 4);
    let locals = model.forward_local(&f.t2d).unwrap();
    assert_eq!(locals.len(), 4);
    assert!(locals.iter().all(|l| l.len() == 4));
    assert!(model.forward_global(&f.t2d[1..], &f.t1d).is_err());
    assert!(model.forward_global(&f.t2d, &f.t1d[1..]).is_err());
}

#[test]
fn default_arch_has_sixteen_regions() {
    let arch = HatArchitecture::default();
    let model = HatModel::new(arch.clone(), 0).unwrap();
    let f = CompressedFeatures::zeros(4, 64, 256);
    assert_eq!(model.forward_local(&f.t2d).unwrap().len(), 16);
}

#[test]
fn k_must_divide_grid() {
    let mut arch = tiny_arch();
    arch.k = 3;
    assert!(HatModel::new(arch, 0).is_err());
}

#[test]
fn zero_model_outputs() {
    let arch = tiny_arch();
    let model = HatModel::zeros(arch.clone()).unwrap();
    let f = CompressedFeatures::zeros(4, 8, 16);
    let g = model.forward_global(&f.t2d, &f.t1d).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    let n = model.predict_count(&g).unwrap();
    assert!((n - arch.count_scale * std::f64::consts::LN_2).abs() < 1e-15);
    let locals = model.forward_local(&f.t2d).unwrap();
    let t = model.predict_thresholds(&g, &locals).unwrap();
    assert!(t.iter().all(|v| *v == 0.5));
}

#[test]
fn zero_patch_gives_zero_local_feature() {
    // fresh models have zero biases
    let arch = tiny_arch();
    let model = HatModel::new(arch.clone(), 3).unwrap();
    let f = random_features(&arch, 3);
    let mut t2d = f.t2d.clone();
    // clear region 0 (top-left 4x4 patch) in every channel
    for c in 0..4 {
        for j in 0..4 {
            for i in 0..4 {
                t2d[c * 64 + j * 8 + i] = 0.0;
            }
        }
    }
    let locals = model.forward_local(&t2d).unwrap();
    assert!(locals[0].iter().all(|v| *v == 0.0));
}

#[test]
fn swapping_patches_swaps_local_features() {
    let arch = tiny_arch();
    let model = random_model(arch.clone(), 5);
    let f = random_features(&arch, 5);
    let mut swapped = f.t2d.clone();
    // regions 1 (x 4..8, y 0..4) and 2 (x 0..4, y 4..8)
    for c in 0..4 {
        for j in 0..4 {
            for i in 0..4 {
                let a = c * 64 + j * 8 + (i + 4);
                let b = c * 64 + (j + 4) * 8 + i;
                swapped.swap(a, b);
            }
        }
    }
    let l0 = model.forward_local(&f.t2d).unwrap();
    let l1 = model.forward_local(&swapped).unwrap();
    assert_eq!(l0[0], l1[0]);
    assert_eq!(l0[3], l1[3]);
    assert_eq!(l0[1], l1[2]);
    assert_eq!(l0[2], l1[1]);
}

#[test]
fn outputs_stay_in_range() {
    for seed in 0..10 {
        let arch = tiny_arch();
        let model = random_model(arch.clone(), seed);
        let p = model.infer(&random_features(&arch, seed)).unwrap();
        assert!(p.thresholds.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(p.count >= 0.0);
    }
}

#[test]
fn forward_is_reproducible() {
    let arch = tiny_arch();
    let f = random_features(&arch, 8);
    let a = HatModel::new(arch.clone(), 8).unwrap().infer(&f).unwrap();
    let b = HatModel::new(arch, 8).unwrap().infer(&f).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_locals_give_identical_thresholds() {
    let arch = tiny_arch();
    let model = random_model(arch.clone(), 2);
    let g: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let l = vec![vec![0.3, 0.0, 1.2, 0.5]; 4];
    let t = model.predict_thresholds(&g, &l).unwrap();
    assert!(t.windows(2).all(|w| w[0] == w[1]));
}

/// Moves the decoder output biases so the prediction hits the targets.
fn model_matching(arch: HatArchitecture, sample: &TrainSample) -> HatModel {
    let mut m = HatModel::zeros(arch).unwrap();
    // a zero net outputs sigmoid(b) per region, so a uniform label is exact
    m.set_output_priors(sample.thresholds[0], sample.count as f64);
    m
}

#[test]
fn loss_examples() {
    let arch = tiny_arch();
    let mut s = random_sample(&arch, 4);
    s.thresholds = vec![0.4; 4];
    s.count = 20;
    let m = model_matching(arch.clone(), &s);
    let l = m
        .loss_value(std::slice::from_ref(&s), LossWeights::default())
        .unwrap();
    assert!(l.total.abs() < 1e-9, "{l:?}");

    let mut off = s.clone();
    off.thresholds = vec![0.5; 4];
    for count_weight in [0.0, 1.0, 3.0] {
        let w = LossWeights {
            nms: 1.0,
            count: count_weight,
        };
        let l = m.loss_value(std::slice::from_ref(&off), w).unwrap();
        assert!((l.total - 0.1).abs() < 1e-9, "{l:?}");
    }
    assert!(m.loss(&[], LossWeights::default()).is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let arch = tiny_arch();
    let mut m = random_model(arch.clone(), 6);
    let before = m.params.clone();
    let data: Vec<TrainSample> = (0..5).map(|i| random_sample(&arch, i)).collect();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 2,
        lr: 0.0,
        ..TrainOptions::default()
    };
    train(&mut m, &data, &opts).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn training_is_reproducible() {
    let arch = tiny_arch();
    let data: Vec<TrainSample> = (0..7).map(|i| random_sample(&arch, i)).collect();
    let opts = TrainOptions {
        epochs: 4,
        batch_size: 3,
        lr: 1e-3,
        ..TrainOptions::default()
    };
    let run = || {
        let mut m = random_model(arch.clone(), 1);
        let curve = train(&mut m, &data, &opts).unwrap();
        (curve, m.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_dataset_is_rejected() {
    let mut m = random_model(tiny_arch(), 0);
    assert!(train(&mut m, &[], &TrainOptions::default()).is_err());
}

fn synthetic_samples(n: usize) -> (Vec<TrainSample>, HatArchitecture) {
    let synth = SynthConfig {
        num_scenes: n,
        count_range: (20, 120),
        ..SynthConfig::default()
    };
    let comp = CompressionConfig {
        grid_size: 16,
        hist_len: 32,
        ..CompressionConfig::default()
    };
    let arch = HatArchitecture {
        in_channels: 4,
        grid_size: 16,
        hist_len: 32,
        k: 4,
        enc2d: vec![4, 8],
        enc1d: vec![4, 8],
        local_enc: vec![4, 8],
        pn_hidden: 8,
        pc_hidden: 8,
        count_scale: 1.0,
    };
    let search = SearchConfig {
        step: 0.05,
        ..SearchConfig::default()
    };
    let samples = generate_dataset(&synth)
        .unwrap()
        .iter()
        .map(|s| TrainSample {
            id: s.id.clone(),
            features: compress_scene(&s.detector_view(), &comp).unwrap(),
            thresholds: search_thresholds(s, &search).unwrap().values,
            count: s.count(),
        })
        .collect();
    (samples, arch)
}

#[test]
fn training_lowers_the_loss() {
    let (data, arch) = synthetic_samples(24);
    let mut m = HatModel::new(arch, 7).unwrap();
    init_output_priors(&mut m, &data);
    let opts = TrainOptions {
        epochs: 15,
        batch_size: 4,
        lr: 3e-3,
        ..TrainOptions::default()
    };
    let curve = train(&mut m, &data, &opts).unwrap();
    assert!(curve.last().unwrap().total < curve[0].total, "{curve:?}");
}

#[test]
fn overfits_one_sample() {
    let (data, arch) = synthetic_samples(1);
    let mut m = HatModel::new(arch, 7).unwrap();
    init_output_priors(&mut m, &data);
    let opts = TrainOptions {
        epochs: 200,
        batch_size: 1,
        lr: 1e-3,
        ..TrainOptions::default()
    };
    let curve = train(&mut m, &data, &opts).unwrap();
    let last = m.loss_value(&data, opts.loss_weights()).unwrap().total;
    assert!(last < 0.05, "final loss {last}");
    assert!(curve.len() == 200);
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch();
    let mut m = random_model(arch.clone(), 4);
    let data: Vec<TrainSample> = (0..3).map(|i| random_sample(&arch, i)).collect();
    train(
        &mut m,
        &data,
        &TrainOptions {
            epochs: 2,
            lr: 1e-3,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let path = dir.path().join("m.bin");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let f = random_features(&arch, 11);
    assert_eq!(back.infer(&f).unwrap(), m.infer(&f).unwrap());

    let old = dir.path().join("old.bin");
    save_model_versioned(&m, &old, MODEL_VERSION + 1).unwrap();
    let err = load_model(&old).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn sample_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = random_sample(&tiny_arch(), 12);
    let p = dir.path().join("s.bin");
    s.save(&p).unwrap();
    assert_eq!(TrainSample::load(&p).unwrap(), s);
}
