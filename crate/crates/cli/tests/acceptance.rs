//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.
//!
//! Criterion 9 optionally scores released ECSSD maps: point
//! `SELFCAL_WSOD_ECSSD_PRED` and `SELFCAL_WSOD_ECSSD_GT` at the prediction and
//! ground-truth directories. Without them that part is reported as skipped.

#[path = "../../core/tests/support/metric_oracle.rs"]
mod metric_oracle;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfcal_core::backbone::BackboneKind;
use selfcal_core::calibration::{
    bce, blend, lambda_at, sc_logit_gradient, sc_loss, update_labels, LambdaMode, LambdaPolicy,
};
use selfcal_core::classifier::{
    class_activation_map, classification_scores, raw_class_map, ClassScores, ClassifierHead,
};
use selfcal_core::exec::ExecMode;
use selfcal_core::metrics::{
    e_measure, evaluate_dataset, evaluate_pairs, f_measure, mae, s_measure, FProtocol, BETA2, S_ALPHA,
};
use selfcal_core::refinement::{binarize, refine_with_kernel, AffinityConfig, AffinityKernel};
use selfcal_core::tensor::{BinaryMask, FeatureMap, ImageTensor, SaliencyMap};
use selfcal_wsod::ablation::{run_ablation, AblationConfig, AblationReport};
use selfcal_wsod::config::{Overrides, Preset, RunConfig};

// Tolerances and budgets.
const LOSS_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const GAP_TOL: f64 = 1e-5;
const ROW_SUM_TOL: f64 = 1e-6;
const LINEARITY_TOL: f64 = 1e-5;
const METRIC_TOL: f64 = 1e-9;
const SEED_TIE_MAE: f64 = 0.002;
const MIN_TRAIN_ACCURACY: f64 = 0.95;
const MIN_LABEL_IOU: f64 = 0.5;
const MIN_LABEL_PASS_RATE: f64 = 0.8;
const ECSSD_TOL: f64 = 0.005;
/// Released-map scores on ECSSD: S, E, F, MAE.
const ECSSD_REFERENCE: [f64; 4] = [0.858, 0.901, 0.853, 0.071];

const BUDGET_IDENTITIES: Duration = Duration::from_secs(1);
const BUDGET_LOSS: Duration = Duration::from_secs(10);
const BUDGET_CAM: Duration = Duration::from_secs(5);
const BUDGET_REFINE: Duration = Duration::from_secs(30);
const BUDGET_ABLATION: Duration = Duration::from_secs(20 * 60);

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn map(values: Vec<f64>) -> SaliencyMap {
    SaliencyMap::new(1, values.len(), values).unwrap()
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || {
        format!("took {:.2}s, budget {:.0}s", t.as_secs_f64(), budget.as_secs_f64())
    })
}

// 1
fn label_update_identities() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..64);
        let y1 = map((0..n).map(|_| rng.random()).collect());
        let p = BinaryMask::new(1, n, (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect()).unwrap();
        let at0 = update_labels(&y1, &p, 0.0).map_err(|e| e.to_string())?;
        let at1 = update_labels(&y1, &p, 1.0).map_err(|e| e.to_string())?;
        ensure(
            at0.values
                .iter()
                .zip(&y1.values)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || "lambda = 0 does not return Y1 bit-exactly".into(),
        )?;
        ensure(
            at1.values
                .iter()
                .zip(&p.values)
                .all(|(a, &b)| a.to_bits() == f64::from(b).to_bits()),
            || "lambda = 1 does not return P' bit-exactly".into(),
        )?;
    }
    let b = binarize(&map(vec![0.40, 0.41]), 0.4);
    ensure(b.values == [0, 1], || format!("binarize(0.40, 0.41) = {:?}", b.values))?;
    for max in [1, 2, 10, 25] {
        let s: Vec<f64> = (1..=max)
            .map(|n| lambda_at(n, max, &LambdaPolicy::scheduled()).unwrap())
            .collect();
        ensure(*s.last().unwrap() == 1.0, || {
            format!("scheduled lambda at N={max} is {}", s[max - 1])
        })?;
        ensure(s.windows(2).all(|w| w[0] <= w[1]), || {
            format!("scheduled lambda not monotone for N={max}")
        })?;
    }
    within(BUDGET_IDENTITIES, start)?;
    Ok("blend endpoints bit-exact, strict threshold, schedule ends at 1".into())
}

// 2
fn loss_gradient_coherence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (mut worst_loss, mut worst_grad, mut worst_fd) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..32);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let probs = |z: &[f64]| map(z.iter().map(|&v| sigmoid(v)).collect());
        let p = probs(&z);
        let y1 = map((0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect());
        let q = map((0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect());
        let lam = rng.random::<f64>();
        let t = blend(&y1, &q, lam).unwrap();
        let l = sc_loss(&p, &y1, &q, lam).unwrap();
        worst_loss = worst_loss.max((l - bce(&p, &t).unwrap()).abs());
        let g = sc_logit_gradient(&p, &y1, &q, lam).unwrap();
        for i in 0..n {
            // the loss is a mean, so the per-pixel gradient carries a 1/n factor
            worst_grad = worst_grad.max((g[i] * n as f64 - (p.values[i] - t.values[i])).abs());
            let h = 1e-5;
            let (mut zu, mut zd) = (z.clone(), z.clone());
            zu[i] += h;
            zd[i] -= h;
            let fd =
                (sc_loss(&probs(&zu), &y1, &q, lam).unwrap() - sc_loss(&probs(&zd), &y1, &q, lam).unwrap()) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3 / n as f64);
            worst_fd = worst_fd.max(rel);
        }
    }
    ensure(worst_loss <= LOSS_TOL, || {
        format!("loss vs blended BCE off by {worst_loss:e}")
    })?;
    ensure(worst_grad <= GRAD_TOL, || {
        format!("gradient vs p - t off by {worst_grad:e}")
    })?;
    ensure(worst_fd <= FD_REL_TOL, || {
        format!("finite differences off by {worst_fd:e} relative")
    })?;
    within(BUDGET_LOSS, start)?;
    Ok(format!(
        "100 fixtures: loss {worst_loss:.1e}, gradient {worst_grad:.1e}, finite-difference rel {worst_fd:.1e}"
    ))
}

fn random_head(rng: &mut ChaCha8Rng, k: usize, c: usize, bias: bool) -> ClassifierHead {
    ClassifierHead::new(
        k,
        c,
        (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..k)
            .map(|_| if bias { rng.random_range(-0.5..0.5) } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

// 3
fn cam_algebra() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let (k, c, h, w) = (
            rng.random_range(1..6),
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let f5 = FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..3.0)).collect()).unwrap();
        let head = random_head(&mut rng, k, c, true);
        let scores = classification_scores(&f5, &head).unwrap();
        for kk in 0..k {
            let m = raw_class_map(&f5, &head, kk);
            let gap = m.iter().sum::<f64>() / m.len() as f64;
            worst_gap = worst_gap.max((gap - scores.scores[kk]).abs());
        }
        let cam = class_activation_map(&f5, &head, &scores).unwrap();
        let alpha = rng.random_range(0.1..10.0);
        let scaled = ClassScores {
            scores: scores.scores.iter().map(|s| alpha * s).collect(),
        };
        let cam2 = class_activation_map(&f5, &head, &scaled).unwrap();
        for (a, b) in cam.fused.data.iter().zip(&cam2.fused.data) {
            ensure(close(alpha * a, *b, 1e-9 * (1.0 + b.abs())), || {
                format!("fused CAM not homogeneous: {alpha} * {a} vs {b}")
            })?;
        }
        let zero = FeatureMap::zeros(c, h, w);
        let unbiased = random_head(&mut rng, k, c, false);
        let zs = classification_scores(&zero, &unbiased).unwrap();
        let zc = class_activation_map(&zero, &unbiased, &zs).unwrap();
        ensure(zc.fused.data.iter().all(|&v| v == 0.0), || {
            "zero features gave a non-zero CAM".into()
        })?;
    }
    ensure(worst_gap <= GAP_TOL, || format!("GAP identity off by {worst_gap:e}"))?;
    within(BUDGET_CAM, start)?;
    Ok(format!(
        "GAP identity {worst_gap:.1e}, homogeneity and zero-feature cases hold"
    ))
}

// 4
fn refinement_properties() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = AffinityConfig::default();
    let (mut worst_row, mut worst_lin) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        let img = ImageTensor::new(
            FeatureMap::from_vec(3, 64, 64, (0..3 * 64 * 64).map(|_| rng.random()).collect()).unwrap(),
        )
        .unwrap();
        let kernel = AffinityKernel::build(&img, &cfg).map_err(|e| e.to_string())?;
        worst_row = kernel.row_sums().iter().fold(worst_row, |m, s| m.max((s - 1.0).abs()));
        let c = rng.random::<f64>();
        let constant = refine_with_kernel(&SaliencyMap::filled(64, 64, c), &kernel, cfg.iterations);
        ensure(constant.values.iter().all(|&v| close(v, c, 1e-12)), || {
            "constant mask moved".into()
        })?;
        let m1 = SaliencyMap::new(64, 64, (0..4096).map(|_| rng.random()).collect()).unwrap();
        let m2 = SaliencyMap::new(64, 64, (0..4096).map(|_| rng.random()).collect()).unwrap();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix = SaliencyMap::new(
            64,
            64,
            m1.values.iter().zip(&m2.values).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let (r1, r2, rm) = (
            refine_with_kernel(&m1, &kernel, cfg.iterations),
            refine_with_kernel(&m2, &kernel, cfg.iterations),
            refine_with_kernel(&mix, &kernel, cfg.iterations),
        );
        for i in 0..rm.len() {
            worst_lin = worst_lin.max((rm.values[i] - (a * r1.values[i] + b * r2.values[i])).abs());
        }
        let (lo, hi) = m1
            .values
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        ensure(r1.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12), || {
            "refined values left the input range".into()
        })?;
    }
    ensure(worst_row <= ROW_SUM_TOL, || format!("row sums off by {worst_row:e}"))?;
    ensure(worst_lin <= LINEARITY_TOL, || format!("linearity off by {worst_lin:e}"))?;
    within(BUDGET_REFINE, start)?;
    Ok(format!(
        "64x64: row sums {worst_row:.1e}, linearity {worst_lin:.1e}, fixed point and range hold"
    ))
}

// 5
fn metric_oracles() -> Check {
    let p = SaliencyMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let g = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let m = mae(&p, &g).unwrap();
    ensure(close(m, 0.25, METRIC_TOL), || format!("MAE fixture {m}"))?;
    for proto in [FProtocol::MaxOverThresholds, FProtocol::Adaptive] {
        let f = f_measure(&p, &g, BETA2, proto).unwrap();
        ensure(close(f, 0.8125, METRIC_TOL), || format!("F fixture ({proto}) {f}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let rate = rng.random_range(0.05..0.95);
        let g = BinaryMask::new(8, 8, (0..64).map(|_| u8::from(rng.random_bool(rate))).collect()).unwrap();
        let p = SaliencyMap::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap();
        let gp: metric_oracle::Grid = p.values.chunks(8).map(|r| r.to_vec()).collect();
        let gg: metric_oracle::Grid = g
            .values
            .chunks(8)
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .collect();
        worst = worst.max((s_measure(&p, &g, S_ALPHA).unwrap() - metric_oracle::s_measure(&gp, &gg).min(1.0)).abs());
        worst = worst.max((e_measure(&p, &g).unwrap() - metric_oracle::e_measure(&gp, &gg)).abs());
    }
    ensure(worst <= METRIC_TOL, || {
        format!("S/E differ from the brute-force oracle by {worst:e}")
    })?;
    let pairs: Vec<(String, SaliencyMap, BinaryMask)> = (0..10)
        .map(|i| {
            let g = BinaryMask::new(16, 16, (0..256).map(|j| u8::from((j * 7 + i) % 5 < 2)).collect()).unwrap();
            (format!("{i}"), SaliencyMap::from(&g), g)
        })
        .collect();
    let r = evaluate_pairs(&pairs, FProtocol::MaxOverThresholds, ExecMode::Parallel).unwrap();
    let got = [r.mean.s, r.mean.e, r.mean.f, r.mean.mae];
    ensure(
        close(got[0], 1.0, METRIC_TOL)
            && close(got[1], 1.0, METRIC_TOL)
            && close(got[2], 1.0, METRIC_TOL)
            && got[3] == 0.0,
        || format!("identity dataset scored {got:?}"),
    )?;
    Ok(format!(
        "hand fixtures exact, 200 8x8 oracle fixtures within {worst:.1e}, identity (1,1,1,0)"
    ))
}

// 6
fn ablation_direction(report: &AblationReport, elapsed: Duration) -> Check {
    let (mae_sc, mae_base) = report.mean_mae();
    let (f_sc, f_base) = report.mean_f();
    for s in &report.seeds {
        ensure(s.with_sc.test.mae <= s.without_sc.test.mae + SEED_TIE_MAE, || {
            format!(
                "seed {}: MAE {:.4} with vs {:.4} without",
                s.seed, s.with_sc.test.mae, s.without_sc.test.mae
            )
        })?;
    }
    ensure(mae_sc <= mae_base, || {
        format!("mean MAE {mae_sc:.4} with vs {mae_base:.4} without")
    })?;
    ensure(f_sc >= f_base, || {
        format!("mean F {f_sc:.4} with vs {f_base:.4} without")
    })?;
    ensure(elapsed <= BUDGET_ABLATION, || {
        format!("took {:.0}s", elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "{} seeds: MAE {mae_sc:.4} vs {mae_base:.4}, F {f_sc:.4} vs {f_base:.4} ({:.0}s)",
        report.seeds.len(),
        elapsed.as_secs_f64()
    ))
}

// 7
fn stage_one_sanity(report: &AblationReport, epochs: usize) -> Check {
    let mut parts = Vec::new();
    for s in &report.seeds {
        ensure(s.classifier_accuracy >= MIN_TRAIN_ACCURACY, || {
            format!(
                "seed {}: training accuracy {:.3} after {epochs} epochs",
                s.seed, s.classifier_accuracy
            )
        })?;
        ensure(s.label_iou_pass >= MIN_LABEL_PASS_RATE, || {
            format!(
                "seed {}: only {:.1}% of labels reach IoU {MIN_LABEL_IOU}",
                s.seed,
                100.0 * s.label_iou_pass
            )
        })?;
        parts.push(format!(
            "seed {} acc {:.3} iou-pass {:.3}",
            s.seed, s.classifier_accuracy, s.label_iou_pass
        ));
    }
    Ok(parts.join(", "))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_selfcal-wsod"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SELFCAL_WSOD_CACHE")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const DETERMINISM_CONFIG: &str = r#"preset = "tiny"
seed = 3

[synth]
train_images = 24
test_images = 8

[classifier]
max_epochs = 3

[saliency]
max_epochs = 2
"#;

// 8
fn determinism() -> Check {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for (run, extra) in [("a", None), ("b", Some("--sequential"))] {
        let dir = base.path().join(run);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        fs::write(dir.join("run.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
        for cmd in [
            "synth",
            "train-cls",
            "gen-pseudo",
            "train-sal",
            "infer",
            "export-labels",
        ] {
            let mut args = vec!["--config", "run.toml", cmd];
            args.extend(extra);
            run_cli(&dir, &args)?;
        }
        trees.push((tree(&dir.join("data")), tree(&dir.join("runs"))));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let mut checked = 0;
    for (x, y) in [(&a.0, &b.0), (&a.1, &b.1)] {
        ensure(x.keys().eq(y.keys()), || {
            "the two runs wrote different file sets".into()
        })?;
        for (path, bytes) in x {
            ensure(&y[path] == bytes, || format!("{} differs between runs", path.display()))?;
            checked += 1;
        }
    }
    for must in ["classifier/classifier.ckpt", "saliency/final.ckpt"] {
        ensure(a.1.contains_key(Path::new(must)), || format!("{must} missing"))?;
    }
    Ok(format!(
        "{checked} files byte-identical across a parallel and a sequential rerun"
    ))
}

// 9
fn full_scale_hooks() -> Check {
    let cfg = RunConfig::resolve(
        None,
        &Overrides {
            preset: Some(Preset::Paper),
            ..Overrides::default()
        },
    )
    .map_err(|e| format!("{e:#}"))?;
    let (c, s) = (&cfg.classifier, &cfg.saliency);
    let expected = [
        (
            "backbone",
            c.backbone == BackboneKind::Densenet169 && s.input_size == 256,
        ),
        ("stage-1 lr", c.lr == 1e-4),
        ("stage-2 lr", s.lr == 3e-6),
        ("stage-1 epochs", c.max_epochs == 20),
        ("stage-2 epochs", s.max_epochs == 25),
        ("batch", c.batch_size == 20 && s.batch_size == 20),
        ("input size", c.input_size == 256 && cfg.labels.input_size == 256),
        (
            "lambda",
            s.lambda.mode == LambdaMode::Fixed && s.lambda.fixed_value == 0.6,
        ),
        ("decoder", s.decoder.mid_channels == 64),
    ];
    for (name, ok) in expected {
        ensure(ok, || format!("paper preset {name} does not resolve as documented"))?;
    }
    let pred = std::env::var_os("SELFCAL_WSOD_ECSSD_PRED");
    let gt = std::env::var_os("SELFCAL_WSOD_ECSSD_GT");
    let (Some(pred), Some(gt)) = (pred, gt) else {
        return Ok("preset resolves as documented; ECSSD comparison SKIPPED (set SELFCAL_WSOD_ECSSD_PRED and SELFCAL_WSOD_ECSSD_GT)".into());
    };
    let r = evaluate_dataset(
        Path::new(&pred),
        Path::new(&gt),
        FProtocol::MaxOverThresholds,
        ExecMode::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let got = [r.mean.s, r.mean.e, r.mean.f, r.mean.mae];
    for ((name, g), want) in ["S", "E", "F", "MAE"].iter().zip(got).zip(ECSSD_REFERENCE) {
        ensure(close(g, want, ECSSD_TOL), || {
            format!("ECSSD {name} {g:.4}, reference {want:.3}")
        })?;
    }
    Ok(format!(
        "preset resolves as documented; ECSSD S {:.3} E {:.3} F {:.3} MAE {:.3} over {} images",
        got[0],
        got[1],
        got[2],
        got[3],
        r.per_image.len()
    ))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // libtest flags (e.g. --nocapture) are accepted and ignored; `--list` is
    // answered so test discovery tools see one entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(usize, &str, Check, Duration)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let r = guarded(f);
        let line = (n, name, r, start.elapsed());
        print_line(&line);
        results.push(line);
    };

    record(1, "label update identities", &mut label_update_identities);
    record(2, "loss and gradient coherence", &mut loss_gradient_coherence);
    record(3, "class activation map algebra", &mut cam_algebra);
    record(4, "affinity refinement properties", &mut refinement_properties);
    record(5, "metric oracles", &mut metric_oracles);

    let cfg = AblationConfig::default();
    let start = Instant::now();
    let report = guarded(|| run_ablation(&cfg, ExecMode::Parallel).map_err(|e| e.to_string()));
    let elapsed = start.elapsed();
    record(6, "self-calibration ablation direction", &mut || {
        ablation_direction(report.as_ref().map_err(Clone::clone)?, elapsed)
    });
    record(7, "stage-1 sanity", &mut || {
        stage_one_sanity(report.as_ref().map_err(Clone::clone)?, cfg.classifier.max_epochs)
    });
    record(8, "determinism across reruns", &mut determinism);
    record(9, "full-scale hooks", &mut full_scale_hooks);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line((n, name, r, t): &(usize, &str, Check, Duration)) {
    let (status, detail) = match r {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("{status} [{n}] {name}: {detail} ({:.2}s)", t.as_secs_f64());
}
