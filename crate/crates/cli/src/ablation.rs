//! Desk-scale ablation: the same stage-1 labels and initialization trained
//! with and without self-calibration on the synthetic shapes set.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use selfcal_core::calibration::{train_saliency, LambdaPolicy, TrainConfig, TrainOutputs, Validation};
use selfcal_core::classifier::{fit_classifier, ClassifierConfig, ClassifierModel};
use selfcal_core::datasets::{render_synthetic, rgb_to_tensor, BackgroundMode, SyntheticConfig};
use selfcal_core::exec::ExecMode;
use selfcal_core::metrics::{evaluate_pairs, FProtocol, ImageMetrics};
use selfcal_core::refinement::{pseudo_label, CrfPlugin, LabelConfig, WindowedCrf};
use selfcal_core::saliency::SaliencyModel;
use selfcal_core::store::PseudoLabelStore;
use selfcal_core::tensor::{BinaryMask, ImageTensor, SaliencyMap};
use selfcal_core::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub num_categories: usize,
    pub background: BackgroundMode,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierConfig,
    pub labels: LabelConfig,
    pub saliency: TrainConfig,
    /// λ policy of the self-calibrated arm; the baseline uses `fixed:0`.
    pub lambda: LambdaPolicy,
    pub crf: bool,
    pub protocol: FProtocol,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let size = 64;
        Self {
            train_images: 200,
            test_images: 50,
            image_size: size,
            num_categories: 4,
            background: BackgroundMode::Textured,
            seeds: vec![0, 1, 2],
            classifier: ClassifierConfig::tiny(),
            labels: LabelConfig {
                input_size: size,
                ..LabelConfig::default()
            },
            saliency: TrainConfig::tiny(),
            lambda: LambdaPolicy::fixed(0.6),
            crf: true,
            protocol: FProtocol::MaxOverThresholds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub lambda: String,
    pub test: ImageMetrics,
    /// Validation MAE after every epoch.
    pub mae_curve: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub classifier_accuracy: f64,
    /// Fraction of training images whose Y₁ reaches IoU ≥ 0.5 with the
    /// generator mask.
    pub label_iou_pass: f64,
    pub mean_label_iou: f64,
    pub with_sc: ArmResult,
    pub without_sc: ArmResult,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedResult>,
}

impl AblationReport {
    fn mean(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len().max(1) as f64
    }

    pub fn mean_mae(&self) -> (f64, f64) {
        (self.mean(|s| s.with_sc.test.mae), self.mean(|s| s.without_sc.test.mae))
    }

    pub fn mean_f(&self) -> (f64, f64) {
        (self.mean(|s| s.with_sc.test.f), self.mean(|s| s.without_sc.test.f))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,arm,lambda,s_measure,e_measure,f_measure,mae,cls_acc,label_iou_pass\n");
        for s in &self.seeds {
            for (arm, r) in [("sc", &s.with_sc), ("baseline", &s.without_sc)] {
                out.push_str(&format!(
                    "{},{arm},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    s.seed, r.lambda, r.test.s, r.test.e, r.test.f, r.test.mae, s.classifier_accuracy, s.label_iou_pass
                ));
            }
        }
        out
    }
}

pub struct SyntheticSplit {
    pub images: Vec<ImageTensor>,
    pub masks: Vec<BinaryMask>,
    pub categories: Vec<usize>,
}

/// Renders a split in memory; `salt` separates train from test.
pub fn synthetic_split(cfg: &AblationConfig, count: usize, seed: u64, salt: u64) -> Result<SyntheticSplit> {
    let sc = SyntheticConfig {
        num_images: count,
        image_size: cfg.image_size,
        num_categories: cfg.num_categories,
        background_mode: cfg.background,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(salt),
    };
    sc.validate()?;
    let mut split = SyntheticSplit {
        images: Vec::with_capacity(count),
        masks: Vec::with_capacity(count),
        categories: Vec::with_capacity(count),
    };
    for i in 0..count {
        let s = render_synthetic(&sc, i);
        split.images.push(rgb_to_tensor(&s.image));
        split.masks.push(s.mask);
        split.categories.push(s.category);
    }
    Ok(split)
}

pub struct StageOne {
    pub classifier: ClassifierModel,
    pub accuracy: f64,
    pub store: PseudoLabelStore,
    pub ious: Vec<f64>,
}

pub fn stage_one(cfg: &AblationConfig, train: &SyntheticSplit, seed: u64, exec: ExecMode) -> Result<StageOne> {
    let samples: Vec<(ImageTensor, usize)> = train
        .images
        .iter()
        .cloned()
        .zip(train.categories.iter().copied())
        .collect();
    let ccfg = ClassifierConfig {
        seed,
        ..cfg.classifier.clone()
    };
    let trained = fit_classifier(&samples, cfg.num_categories, &ccfg, exec)?;
    let accuracy = trained.log.last().map(|s| s.accuracy).unwrap_or(0.0);
    let crf = WindowedCrf::default();
    let plugin: Option<&dyn CrfPlugin> = if cfg.crf { Some(&crf) } else { None };
    let model = &trained.model;
    let labels = exec.map(train.images.len(), |i| {
        pseudo_label(&train.images[i], model, &cfg.labels, plugin)
    });
    let mut maps = Vec::with_capacity(labels.len());
    for l in labels {
        maps.push(l?.0);
    }
    let ious = maps.iter().zip(&train.masks).map(|(m, g)| binary(m).iou(g)).collect();
    let ids = (0..maps.len()).map(|i| format!("train_{i:05}")).collect();
    let store = PseudoLabelStore::new(ids, maps)?;
    Ok(StageOne {
        classifier: trained.model,
        accuracy,
        store,
        ious,
    })
}

fn binary(m: &SaliencyMap) -> BinaryMask {
    BinaryMask {
        height: m.height,
        width: m.width,
        values: m.values.iter().map(|&v| u8::from(v > 0.5)).collect(),
    }
}

fn run_arm(
    cfg: &AblationConfig,
    one: &StageOne,
    train: &SyntheticSplit,
    test: &SyntheticSplit,
    lambda: LambdaPolicy,
    seed: u64,
    exec: ExecMode,
) -> Result<ArmResult> {
    let tcfg = TrainConfig {
        lambda,
        seed,
        ..cfg.saliency.clone()
    };
    let init = SaliencyModel::from_classifier(&one.classifier, tcfg.decoder, seed)?;
    let mut store = one.store.clone();
    let validation = Validation {
        images: test.images.clone(),
        masks: test.masks.clone(),
    };
    let trainer = train_saliency(
        &train.images,
        &mut store,
        init,
        &tcfg,
        Some(&validation),
        &TrainOutputs::default(),
        exec,
    )?;
    let model = &trainer.model;
    let preds = exec.map(test.images.len(), |i| model.forward(&test.images[i]));
    let mut pairs = Vec::with_capacity(preds.len());
    for (i, p) in preds.into_iter().enumerate() {
        pairs.push((format!("test_{i:05}"), p?, test.masks[i].clone()));
    }
    let report = evaluate_pairs(&pairs, cfg.protocol, exec)?;
    Ok(ArmResult {
        lambda: lambda.to_string(),
        test: report.mean,
        mae_curve: trainer.log.iter().filter_map(|r| r.val_mae).collect(),
    })
}

pub fn run_seed(cfg: &AblationConfig, seed: u64, exec: ExecMode) -> Result<SeedResult> {
    let start = Instant::now();
    let train = synthetic_split(cfg, cfg.train_images, seed, 0)?;
    let test = synthetic_split(cfg, cfg.test_images, seed, 0x7e57)?;
    let one = stage_one(cfg, &train, seed, exec)?;
    let pass = one.ious.iter().filter(|&&v| v >= 0.5).count() as f64 / one.ious.len() as f64;
    let mean_iou = one.ious.iter().sum::<f64>() / one.ious.len() as f64;
    info!(
        "seed {seed}: classifier accuracy {:.3}, labels with IoU>=0.5: {:.3} (mean IoU {:.3})",
        one.accuracy, pass, mean_iou
    );
    let with_sc = run_arm(cfg, &one, &train, &test, cfg.lambda, seed, exec)?;
    let without_sc = run_arm(cfg, &one, &train, &test, LambdaPolicy::fixed(0.0), seed, exec)?;
    info!(
        "seed {seed}: SC mae {:.4} F {:.4} | baseline mae {:.4} F {:.4}",
        with_sc.test.mae, with_sc.test.f, without_sc.test.mae, without_sc.test.f
    );
    Ok(SeedResult {
        seed,
        classifier_accuracy: one.accuracy,
        label_iou_pass: pass,
        mean_label_iou: mean_iou,
        with_sc,
        without_sc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(cfg: &AblationConfig, exec: ExecMode) -> Result<AblationReport> {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, seed, exec)?);
    }
    Ok(AblationReport { seeds })
}
