use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfcal_core::backbone::BackboneKind;
use selfcal_core::datasets::{
    generate_synthetic, load_gray_map, load_image, render_synthetic, rgb_to_tensor, BackgroundMode, SyntheticConfig,
};
use selfcal_core::exec::ExecMode;
use selfcal_core::saliency::{infer, DecoderConfig, SaliencyModel};
use selfcal_core::tensor::ImageTensor;

fn synth(n: usize, size: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_images: n,
        image_size: size,
        num_categories: 4,
        background_mode: BackgroundMode::Textured,
        seed,
    }
}

fn image(size: usize, seed: u64) -> ImageTensor {
    rgb_to_tensor(&render_synthetic(&synth(1, size, seed), 0).image)
}

fn small() -> DecoderConfig {
    DecoderConfig { mid_channels: 8 }
}

#[test]
fn fresh_models_start_near_the_output_prior() {
    let img = image(64, 3);
    for seed in 0..10 {
        let m = SaliencyModel::new(BackboneKind::Tiny, small(), seed).unwrap();
        let mean = m.forward(&img).unwrap().mean();
        assert!((0.3..=0.7).contains(&mean), "seed {seed}: mean {mean}");
    }
}

#[test]
fn forward_is_pure_and_follows_input_resolution() {
    let m = SaliencyModel::new(BackboneKind::Tiny, small(), 1).unwrap();
    let img = image(64, 5);
    let a = m.forward(&img).unwrap();
    let b = m.forward(&img).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height, a.width), (64, 64));
    let big = m.forward(&img.resized(128, 128)).unwrap();
    assert_eq!((big.height, big.width), (128, 128));
    assert!(a.values.iter().chain(&big.values).all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn backward_matches_finite_differences() {
    let mut m = SaliencyModel::new(BackboneKind::Tiny, small(), 2).unwrap();
    let img = image(32, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, cache) = m.forward_train(&img).unwrap();
    let weights: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |m: &SaliencyModel| {
        let p = m.forward(&img).unwrap();
        p.values.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut grads = vec![0.0; m.num_params()];
    m.backward(&cache, &weights, &mut grads);
    let n = m.num_params();
    // a spread of parameters across backbone and decoder
    let picks: Vec<usize> = (0..24)
        .map(|_| rng.random_range(0..n))
        .chain([n - 1, m.backbone_len()])
        .collect();
    let h = 1e-5;
    for &i in &picks {
        let orig = m.params[i];
        m.params[i] = orig + h;
        let up = objective(&m);
        m.params[i] = orig - h;
        let dn = objective(&m);
        m.params[i] = orig;
        let fd = (up - dn) / (2.0 * h);
        let tol = 1e-5 * (1.0 + fd.abs().max(grads[i].abs()));
        assert!((fd - grads[i]).abs() < tol, "param {i}: fd {fd} vs {}", grads[i]);
    }
}

#[test]
fn infer_writes_one_map_per_image_at_eight_bit_precision() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&synth(5, 64, 11), &dir.path().join("data"), "test").unwrap();
    let m = SaliencyModel::new(BackboneKind::Tiny, small(), 4).unwrap();
    let out = dir.path().join("pred");
    let paths = infer(&manifest, &m, 64, &out, ExecMode::Parallel).unwrap();
    assert_eq!(paths.len(), 5);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 5);
    for (i, p) in paths.iter().enumerate() {
        assert_eq!(p.file_stem().unwrap().to_string_lossy(), manifest.entries[i].stem());
        let back = load_gray_map(p).unwrap();
        let direct = m.forward(&load_image(&manifest.image_path(i), 64).unwrap()).unwrap();
        for (a, b) in back.values.iter().zip(&direct.values) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
    // sequential execution writes the same bytes
    let seq = dir.path().join("pred_seq");
    infer(&manifest, &m, 64, &seq, ExecMode::Sequential).unwrap();
    for p in &paths {
        let q = seq.join(p.file_name().unwrap());
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
    }
}
