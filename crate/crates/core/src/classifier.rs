//! Stage-1 classification network: GAP + 1×1-convolution head on F⁵, class
//! activation maps, multi-scale CAM inference and softmax cross-entropy
//! training.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneKind};
use crate::datasets::{load_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::nn::{sum_gradients, Adam, ParamAlloc};
use crate::tensor::{FeatureMap, ImageTensor, SaliencyMap};

/// Default inference scales for multi-scale CAM.
pub const DEFAULT_CAM_SCALES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// Linear head applied to globally pooled features: `weights` is
/// `num_categories × channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub num_categories: usize,
    pub channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(num_categories: usize, channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != num_categories * channels || bias.len() != num_categories {
            return Err(Error::ShapeMismatch {
                expected: format!("{num_categories}x{channels} weights, {num_categories} biases"),
                actual: format!("{} weights, {} biases", weights.len(), bias.len()),
            });
        }
        Ok(Self {
            num_categories,
            channels,
            weights,
            bias,
        })
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.channels..(k + 1) * self.channels]
    }

    fn check(&self, f5: &FeatureMap) -> Result<()> {
        if f5.channels != self.channels {
            return Err(Error::ChannelMismatch {
                features: f5.channels,
                head: self.channels,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
}

impl ClassScores {
    pub fn argmax(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }
}

/// Per-class normalized activation maps and their score-weighted fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    /// `K × h × w`, each class map max-normalized into `[0, 1]`.
    pub maps: FeatureMap,
    /// Single-channel `h × w` fused map, non-negative.
    pub fused: FeatureMap,
}

/// `scores_k = Σ_c weights[k,c]·GAP(f5)[c] + bias[k]`.
pub fn classification_scores(f5: &FeatureMap, head: &ClassifierHead) -> Result<ClassScores> {
    head.check(f5)?;
    let gap = f5.global_average();
    let scores = (0..head.num_categories)
        .map(|k| head.row(k).iter().zip(&gap).map(|(w, g)| w * g).sum::<f64>() + head.bias[k])
        .collect();
    Ok(ClassScores { scores })
}

/// Pre-activation class map `Σ_c weights[k,c]·f5[c] + bias[k]` for class `k`.
pub fn raw_class_map(f5: &FeatureMap, head: &ClassifierHead, k: usize) -> Vec<f64> {
    let n = f5.plane_len();
    let mut m = vec![head.bias[k]; n];
    for (c, w) in head.row(k).iter().enumerate() {
        for (v, x) in m.iter_mut().zip(f5.plane(c)) {
            *v += w * x;
        }
    }
    m
}

/// Class activation maps: each class map is `ReLU(raw)` divided by its max
/// (all-zero maps stay zero); the fused map weights class `k` by its score
/// clamped at zero.
pub fn class_activation_map(f5: &FeatureMap, head: &ClassifierHead, scores: &ClassScores) -> Result<CamStack> {
    head.check(f5)?;
    if scores.scores.len() != head.num_categories {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scores", head.num_categories),
            actual: format!("{} scores", scores.scores.len()),
        });
    }
    let (h, w) = (f5.height, f5.width);
    let mut maps = FeatureMap::zeros(head.num_categories, h, w);
    let mut fused = FeatureMap::zeros(1, h, w);
    for k in 0..head.num_categories {
        let mut m = raw_class_map(f5, head, k);
        let mut max = 0.0f64;
        for v in &mut m {
            *v = v.max(0.0);
            max = max.max(*v);
        }
        if max > 0.0 {
            for v in &mut m {
                *v /= max;
            }
        }
        let weight = scores.scores[k].max(0.0);
        for (f, v) in fused.data.iter_mut().zip(&m) {
            *f += weight * v;
        }
        maps.plane_mut(k).copy_from_slice(&m);
    }
    Ok(CamStack { maps, fused })
}

/// Backbone plus classification head over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: Backbone,
    pub num_categories: usize,
    head_weights: usize,
    head_bias: usize,
    pub params: Vec<f64>,
}

impl ClassifierModel {
    /// Builds the layout without initializing weights.
    pub fn layout(kind: BackboneKind, num_categories: usize) -> Self {
        let mut alloc = ParamAlloc::default();
        let backbone = Backbone::new(kind, &mut alloc);
        let c5 = backbone.channels()[2];
        let head_weights = alloc.take(num_categories * c5);
        let head_bias = alloc.take(num_categories);
        Self {
            backbone,
            num_categories,
            head_weights,
            head_bias,
            params: vec![0.0; alloc.len()],
        }
    }

    pub fn new(kind: BackboneKind, num_categories: usize, seed: u64) -> Self {
        let mut model = Self::layout(kind, num_categories);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.backbone.init(&mut model.params, &mut rng);
        let c5 = model.backbone.channels()[2];
        let normal = Normal::new(0.0, (1.0 / c5 as f64).sqrt()).expect("std");
        let range = model.head_weights..model.head_weights + num_categories * c5;
        for w in &mut model.params[range] {
            *w = normal.sample(&mut rng);
        }
        model
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Length of the backbone's leading slice of the parameter vector.
    pub fn backbone_len(&self) -> usize {
        self.head_weights
    }

    pub fn head(&self) -> ClassifierHead {
        let c5 = self.backbone.channels()[2];
        let k = self.num_categories;
        ClassifierHead {
            num_categories: k,
            channels: c5,
            weights: self.params[self.head_weights..self.head_weights + k * c5].to_vec(),
            bias: self.params[self.head_bias..self.head_bias + k].to_vec(),
        }
    }

    pub fn f5(&self, image: &ImageTensor) -> FeatureMap {
        self.backbone.features(&self.params, image.pixels()).f5
    }

    pub fn scores(&self, image: &ImageTensor) -> ClassScores {
        classification_scores(&self.f5(image), &self.head()).expect("head matches backbone")
    }

    pub fn cam(&self, image: &ImageTensor) -> CamStack {
        let f5 = self.f5(image);
        let head = self.head();
        let scores = classification_scores(&f5, &head).expect("head matches backbone");
        class_activation_map(&f5, &head, &scores).expect("head matches backbone")
    }

    /// Mean softmax cross-entropy over `samples`.
    pub fn loss(&self, samples: &[(ImageTensor, usize)]) -> f64 {
        let head = self.head();
        samples
            .iter()
            .map(|(img, label)| {
                let s = classification_scores(&self.f5(img), &head).expect("head");
                softmax_cross_entropy(&s.scores, *label).0
            })
            .sum::<f64>()
            / samples.len() as f64
    }
}

/// Returns `(loss, d loss / d scores)` for one sample.
pub fn softmax_cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - scores[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Gradients of the mean cross-entropy over a batch of F⁵ maps with respect
/// to the head and to each F⁵.
pub struct HeadGradients {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub features: Vec<FeatureMap>,
    pub correct: usize,
}

pub fn head_cross_entropy(f5s: &[FeatureMap], labels: &[usize], head: &ClassifierHead) -> Result<HeadGradients> {
    let b = f5s.len() as f64;
    let mut out = HeadGradients {
        loss: 0.0,
        weights: vec![0.0; head.weights.len()],
        bias: vec![0.0; head.num_categories],
        features: Vec::with_capacity(f5s.len()),
        correct: 0,
    };
    for (f5, &label) in f5s.iter().zip(labels) {
        let s = classification_scores(f5, head)?;
        if s.argmax() == label {
            out.correct += 1;
        }
        let (loss, ds) = softmax_cross_entropy(&s.scores, label);
        out.loss += loss / b;
        let gap = f5.global_average();
        let mut dgap = vec![0.0; head.channels];
        for (k, d) in ds.iter().enumerate() {
            let d = d / b;
            out.bias[k] += d;
            for c in 0..head.channels {
                out.weights[k * head.channels + c] += d * gap[c];
                dgap[c] += head.weights[k * head.channels + c] * d;
            }
        }
        let n = f5.plane_len() as f64;
        let mut df = FeatureMap::zeros(f5.channels, f5.height, f5.width);
        for (c, g) in dgap.iter().enumerate() {
            df.plane_mut(c).fill(g / n);
        }
        out.features.push(df);
    }
    Ok(out)
}

/// Spatial size an image of `size` pixels takes at `scale`, snapped to a
/// multiple of the backbone stride.
pub fn scaled_size(size: usize, scale: f64, stride: usize) -> usize {
    let s = (size as f64 * scale / stride as f64).round() as usize;
    s.max(1) * stride
}

/// Mean of per-scale fused CAMs (each upsampled to the image resolution),
/// min-max rescaled to `[0, 1]`. A constant mean map yields zeros.
pub fn multiscale_cam(image: &ImageTensor, model: &ClassifierModel, scales: &[f64]) -> Result<SaliencyMap> {
    if scales.is_empty() {
        return Err(Error::Config("at least one CAM scale is required".into()));
    }
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config("CAM scales must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    let stride = model.backbone.stride();
    let mut acc = vec![0.0; h * w];
    for &s in scales {
        let scaled = image.resized(scaled_size(h, s, stride), scaled_size(w, s, stride));
        let cam = model.cam(&scaled);
        let up = cam.fused.resized(h, w);
        for (a, v) in acc.iter_mut().zip(&up.data) {
            *a += v;
        }
    }
    let n = scales.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    let (min, max) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if max - min > 0.0 {
        for a in &mut acc {
            *a = (*a - min) / (max - min);
        }
    } else {
        acc.fill(0.0);
    }
    SaliencyMap::new(h, w, acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: BackboneKind,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Full-scale stage-1 settings.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneKind::Densenet169,
            lr: 1e-4,
            max_epochs: 20,
            batch_size: 20,
            input_size: 256,
            seed: 0,
        }
    }

    /// Desk-scale settings for the synthetic set.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            lr: 2e-3,
            max_epochs: 20,
            batch_size: 20,
            input_size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.input_size == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and input_size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub log: Vec<EpochStats>,
    /// Mean batch loss for every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Sample order for `epoch`, a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// One optimizer step on a batch; returns `(mean loss, correct count)`.
pub fn classifier_step(
    model: &mut ClassifierModel,
    adam: &mut Adam,
    batch: &[&(ImageTensor, usize)],
    exec: ExecMode,
) -> Result<(f64, usize)> {
    let head = model.head();
    let b = batch.len() as f64;
    let len = model.num_params();
    let model_ref = &*model;
    let parts = exec.map(batch.len(), |i| {
        let (img, label) = batch[i];
        let (pyr, cache) = model_ref.backbone.forward(&model_ref.params, img.pixels());
        let hg = head_cross_entropy(std::slice::from_ref(&pyr.f5), &[*label], &head)?;
        let mut g = vec![0.0; len];
        let df5 = hg.features.into_iter().next().expect("one sample");
        model_ref
            .backbone
            .backward(&model_ref.params, &cache, [None, None, Some(df5)], &mut g);
        let hw = model_ref.head_weights;
        for (d, v) in g[hw..hw + hg.weights.len()].iter_mut().zip(&hg.weights) {
            *d += v;
        }
        let hb = model_ref.head_bias;
        for (d, v) in g[hb..hb + hg.bias.len()].iter_mut().zip(&hg.bias) {
            *d += v;
        }
        Ok::<_, Error>((g, hg.loss, hg.correct))
    });
    let mut grads = Vec::with_capacity(parts.len());
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (g, l, c) = p?;
        grads.push(g);
        loss += l;
        correct += c;
    }
    let mut total = sum_gradients(grads, len);
    for g in &mut total {
        *g /= b;
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!("classifier step {}", adam.step + 1),
        });
    }
    adam.update(&mut model.params, &total);
    Ok((loss, correct))
}

/// Trains from scratch on in-memory samples.
pub fn fit_classifier(
    samples: &[(ImageTensor, usize)],
    num_categories: usize,
    cfg: &ClassifierConfig,
    exec: ExecMode,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if let Some((_, l)) = samples.iter().find(|(_, l)| *l >= num_categories) {
        return Err(Error::CategoryOutOfRange {
            line: 0,
            category: *l,
            num_categories,
        });
    }
    let mut model = ClassifierModel::new(cfg.backbone, num_categories, cfg.seed);
    let mut adam = Adam::new(cfg.lr, model.num_params());
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(ImageTensor, usize)> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, c) = classifier_step(&mut model, &mut adam, &batch, exec)?;
            step_losses.push(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        info!(
            "classifier epoch {}: loss {:.4} accuracy {:.3}",
            stats.epoch, stats.loss, stats.accuracy
        );
        log.push(stats);
    }
    Ok(TrainedClassifier {
        model,
        log,
        step_losses,
    })
}

/// Loads every manifest image at `cfg.input_size` and trains.
pub fn train_classifier(
    manifest: &DatasetManifest,
    cfg: &ClassifierConfig,
    exec: ExecMode,
) -> Result<TrainedClassifier> {
    manifest.validate()?;
    manifest.require_categories()?;
    let loaded = exec.map(manifest.len(), |i| load_image(&manifest.image_path(i), cfg.input_size));
    let mut samples = Vec::with_capacity(manifest.len());
    for (img, e) in loaded.into_iter().zip(&manifest.entries) {
        samples.push((img?, e.category_id.expect("checked above")));
    }
    fit_classifier(&samples, manifest.num_categories, cfg, exec)
}
