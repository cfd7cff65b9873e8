#[path = "support/metric_oracle.rs"]
mod metric_oracle;

use metric_oracle::Grid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfcal_core::datasets::{save_gray_map, save_mask};
use selfcal_core::exec::ExecMode;
use selfcal_core::metrics::{
    e_measure, evaluate_dataset, evaluate_pairs, f_measure, mae, s_measure, FProtocol, BETA2, S_ALPHA,
};
use selfcal_core::tensor::{BinaryMask, SaliencyMap};
use selfcal_core::Error;

fn grid_p(p: &SaliencyMap) -> Grid {
    p.values.chunks(p.width).map(|r| r.to_vec()).collect()
}

fn grid_g(g: &BinaryMask) -> Grid {
    g.values
        .chunks(g.width)
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (SaliencyMap, BinaryMask) {
    let fg_rate = rng.random_range(0.0..1.0);
    let g: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(fg_rate))).collect();
    let p: Vec<f64> = match rng.random_range(0..4) {
        // correlated with the mask
        0 => g
            .iter()
            .map(|&v| (0.7 * f64::from(v) + 0.3 * rng.random::<f64>()).min(1.0))
            .collect(),
        // coarse levels, many ties
        1 => (0..h * w).map(|_| rng.random_range(0..4) as f64 / 3.0).collect(),
        _ => (0..h * w).map(|_| rng.random::<f64>()).collect(),
    };
    (SaliencyMap::new(h, w, p).unwrap(), BinaryMask::new(h, w, g).unwrap())
}

#[test]
fn structure_and_alignment_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..300 {
        let (h, w) = if i % 3 == 0 {
            (8, 8)
        } else {
            (rng.random_range(2..12), rng.random_range(2..12))
        };
        let (p, g) = random_pair(&mut rng, h, w);
        let s = s_measure(&p, &g, S_ALPHA).unwrap();
        let s_ref = metric_oracle::s_measure(&grid_p(&p), &grid_g(&g));
        assert!((s - s_ref.min(1.0)).abs() < 1e-9, "case {i}: S {s} vs {s_ref}");
        let e = e_measure(&p, &g).unwrap();
        let e_ref = metric_oracle::e_measure(&grid_p(&p), &grid_g(&g));
        assert!((e - e_ref).abs() < 1e-9, "case {i}: E {e} vs {e_ref}");
    }
}

#[test]
fn inverted_prediction_on_balanced_mask_scores_low() {
    // left half foreground, prediction is its complement
    let g: Vec<u8> = (0..64).map(|i| u8::from(i % 8 < 4)).collect();
    let p: Vec<f64> = g.iter().map(|&v| 1.0 - f64::from(v)).collect();
    let (p, g) = (SaliencyMap::new(8, 8, p).unwrap(), BinaryMask::new(8, 8, g).unwrap());
    assert!(e_measure(&p, &g).unwrap() <= 0.25);
    assert!(s_measure(&p, &g, S_ALPHA).unwrap() < 0.1);
    assert_eq!(mae(&p, &g).unwrap(), 1.0);
    assert_eq!(f_measure(&p, &g, BETA2, FProtocol::MaxOverThresholds).unwrap(), 0.0);
}

fn pair_strategy() -> impl Strategy<Value = (SaliencyMap, BinaryMask)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0.0f64..=1.0, h * w),
            proptest::collection::vec(0u8..=1, h * w),
        )
            .prop_map(move |(p, g)| (SaliencyMap::new(h, w, p).unwrap(), BinaryMask::new(h, w, g).unwrap()))
    })
}

proptest! {
    #[test]
    fn scores_lie_in_unit_interval((p, g) in pair_strategy()) {
        for v in [
            s_measure(&p, &g, S_ALPHA).unwrap(),
            e_measure(&p, &g).unwrap(),
            f_measure(&p, &g, BETA2, FProtocol::MaxOverThresholds).unwrap(),
            f_measure(&p, &g, BETA2, FProtocol::Adaptive).unwrap(),
            mae(&p, &g).unwrap(),
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn horizontal_flip_preserves_scores((p, g) in pair_strategy()) {
        let (pf, gf) = (p.horizontal_flip(), g.horizontal_flip());
        prop_assert!((mae(&p, &g).unwrap() - mae(&pf, &gf).unwrap()).abs() < 1e-12);
        prop_assert!((e_measure(&p, &g).unwrap() - e_measure(&pf, &gf).unwrap()).abs() < 1e-9);
        for proto in [FProtocol::MaxOverThresholds, FProtocol::Adaptive] {
            let a = f_measure(&p, &g, BETA2, proto).unwrap();
            let b = f_measure(&pf, &gf, BETA2, proto).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_f_dominates_adaptive_f((p, g) in pair_strategy()) {
        let max = f_measure(&p, &g, BETA2, FProtocol::MaxOverThresholds).unwrap();
        let adp = f_measure(&p, &g, BETA2, FProtocol::Adaptive).unwrap();
        prop_assert!(max + 1e-12 >= adp);
    }

    #[test]
    fn mae_is_zero_exactly_on_equal_maps((p, g) in pair_strategy()) {
        let same = SaliencyMap::new(g.height, g.width, g.values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        prop_assert_eq!(mae(&same, &g).unwrap(), 0.0);
        let equal = p.values.iter().zip(&g.values).all(|(&a, &b)| a == f64::from(b));
        prop_assert_eq!(mae(&p, &g).unwrap() == 0.0, equal);
    }
}

#[test]
fn scores_degrade_with_label_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let levels = [0.0, 0.1, 0.2, 0.3];
    let mut means = vec![[0.0f64; 4]; levels.len()];
    let trials = 20;
    for _ in 0..trials {
        let g: Vec<u8> = (0..32 * 32)
            .map(|i| {
                let (y, x) = (i / 32, i % 32);
                u8::from((8..24).contains(&y) && (6..20).contains(&x))
            })
            .collect();
        let g = BinaryMask::new(32, 32, g).unwrap();
        for (li, &noise) in levels.iter().enumerate() {
            let p: Vec<f64> = g
                .values
                .iter()
                .map(|&v| {
                    if rng.random_bool(noise) {
                        1.0 - f64::from(v)
                    } else {
                        f64::from(v)
                    }
                })
                .collect();
            let p = SaliencyMap::new(32, 32, p).unwrap();
            let m = &mut means[li];
            m[0] += s_measure(&p, &g, S_ALPHA).unwrap() / trials as f64;
            m[1] += e_measure(&p, &g).unwrap() / trials as f64;
            m[2] += f_measure(&p, &g, BETA2, FProtocol::MaxOverThresholds).unwrap() / trials as f64;
            m[3] += mae(&p, &g).unwrap() / trials as f64;
        }
    }
    for w in means.windows(2) {
        assert!(w[1][0] < w[0][0], "S not decreasing: {means:?}");
        assert!(w[1][1] < w[0][1], "E not decreasing: {means:?}");
        assert!(w[1][2] < w[0][2], "F not decreasing: {means:?}");
        assert!(w[1][3] > w[0][3], "MAE not increasing: {means:?}");
    }
}

fn fixtures(n: usize) -> Vec<(String, SaliencyMap, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|i| {
            let (p, g) = random_pair(&mut rng, 12, 10);
            (format!("img{i:02}"), p, g)
        })
        .collect()
}

#[test]
fn identical_maps_score_perfectly_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (pd, gd) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pd).unwrap();
    std::fs::create_dir_all(&gd).unwrap();
    for i in 0..6 {
        let g: Vec<u8> = (0..120).map(|j| u8::from((j / 10 + i) % 5 < 2 || j == 0)).collect();
        let g = BinaryMask::new(12, 10, g).unwrap();
        let p = SaliencyMap::new(12, 10, g.values.iter().map(|&v| f64::from(v)).collect()).unwrap();
        save_mask(&gd.join(format!("{i}.png")), &g).unwrap();
        save_gray_map(&pd.join(format!("{i}.png")), &p).unwrap();
    }
    // a ground truth without prediction is reported, not scored
    save_mask(&gd.join("orphan.png"), &BinaryMask::new(12, 10, vec![1; 120]).unwrap()).unwrap();
    let r = evaluate_dataset(&pd, &gd, FProtocol::MaxOverThresholds, ExecMode::Parallel).unwrap();
    assert_eq!(r.per_image.len(), 6);
    assert_eq!(r.missing, vec!["orphan".to_string()]);
    assert!((r.mean.s - 1.0).abs() < 1e-9);
    assert!((r.mean.e - 1.0).abs() < 1e-9);
    assert!((r.mean.f - 1.0).abs() < 1e-9);
    assert_eq!(r.mean.mae, 0.0);
}

#[test]
fn empty_pairing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pd, gd) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pd).unwrap();
    std::fs::create_dir_all(&gd).unwrap();
    let err = evaluate_dataset(&pd, &gd, FProtocol::MaxOverThresholds, ExecMode::Sequential).unwrap_err();
    assert!(matches!(err, Error::NoPairs));
}

#[test]
fn aggregation_ignores_pair_order_and_execution_mode() {
    let pairs = fixtures(12);
    let base = evaluate_pairs(&pairs, FProtocol::Adaptive, ExecMode::Sequential).unwrap();
    let mut shuffled = pairs.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    let other = evaluate_pairs(&shuffled, FProtocol::Adaptive, ExecMode::Parallel).unwrap();
    assert_eq!(base, other);
    assert_eq!(base.to_csv(), other.to_csv());
}
