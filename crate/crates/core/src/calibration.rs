//! Stage-2 self-calibration: the λ policy, the label blend, the blended
//! cross-entropy, and the training loop that refines the network's own
//! predictions into supervision on every batch.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::checkpoint::Checkpoint;
use crate::classifier::epoch_order;
use crate::datasets::{load_image, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::exec::ExecMode;
use crate::metrics::mae;
use crate::nn::{sum_gradients, Adam};
use crate::refinement::{binarize, pamr_refine, AffinityConfig, DEFAULT_THRESHOLD};
use crate::saliency::{DecoderConfig, SaliencyModel};
use crate::store::PseudoLabelStore;
use crate::tensor::{BinaryMask, ImageTensor, SaliencyMap};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Scheduled,
    Fixed,
    ScheduledCapped,
}

/// How the blend weight between Y₁ and the refined prediction evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPolicy {
    pub mode: LambdaMode,
    pub fixed_value: f64,
    pub exponent: f64,
    pub cap: f64,
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        Self::fixed(0.6)
    }
}

impl LambdaPolicy {
    pub fn fixed(value: f64) -> Self {
        Self {
            mode: LambdaMode::Fixed,
            fixed_value: value,
            exponent: 0.5,
            cap: 0.6,
        }
    }

    /// `(n / N)^0.5`.
    pub fn scheduled() -> Self {
        Self {
            mode: LambdaMode::Scheduled,
            ..Self::fixed(0.6)
        }
    }

    pub fn scheduled_capped(cap: f64) -> Self {
        Self {
            mode: LambdaMode::ScheduledCapped,
            cap,
            ..Self::fixed(0.6)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.fixed_value) || !unit(self.cap) {
            return Err(Error::Config(format!(
                "lambda value and cap must lie in [0,1] (got {} and {})",
                self.fixed_value, self.cap
            )));
        }
        if !(self.exponent.is_finite() && self.exponent >= 0.0) {
            return Err(Error::Config("lambda exponent must be non-negative".into()));
        }
        Ok(())
    }
}

impl fmt::Display for LambdaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            LambdaMode::Fixed => write!(f, "fixed:{}", self.fixed_value),
            LambdaMode::Scheduled => write!(f, "scheduled"),
            LambdaMode::ScheduledCapped => write!(f, "capped:{}", self.cap),
        }
    }
}

impl FromStr for LambdaPolicy {
    type Err = Error;

    /// Accepts `fixed:V`, `scheduled` and `capped:V`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, value) = match s.split_once(':') {
            Some((m, v)) => (m, Some(v)),
            None => (s, None),
        };
        let parse = |v: Option<&str>| -> Result<f64> {
            let v = v.ok_or_else(|| Error::Config(format!("lambda mode {mode:?} needs a value")))?;
            v.parse().map_err(|_| Error::Config(format!("bad lambda value {v:?}")))
        };
        let policy = match mode {
            "fixed" => Self::fixed(parse(value)?),
            "scheduled" if value.is_none() => Self::scheduled(),
            "capped" | "scheduled_capped" => Self::scheduled_capped(parse(value)?),
            _ => return Err(Error::Config(format!("unknown lambda policy {s:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// The blend weight for epoch `n` (1-based) of `max_epochs`.
pub fn lambda_at(n: usize, max_epochs: usize, policy: &LambdaPolicy) -> Result<f64> {
    if n == 0 || n > max_epochs {
        return Err(Error::Config(format!("epoch {n} outside 1..={max_epochs}")));
    }
    policy.validate()?;
    let ramp = || (n as f64 / max_epochs as f64).powf(policy.exponent);
    Ok(match policy.mode {
        LambdaMode::Fixed => policy.fixed_value,
        LambdaMode::Scheduled => ramp(),
        LambdaMode::ScheduledCapped => ramp().min(policy.cap),
    })
}

fn check_lambda(lam: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lam) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lam} outside [0,1]")))
    }
}

/// Pixelwise `(1 − λ)·y₁ + λ·p`.
pub fn blend(y1: &SaliencyMap, p: &SaliencyMap, lam: f64) -> Result<SaliencyMap> {
    check_lambda(lam)?;
    p.same_shape(y1.height, y1.width)?;
    let values = y1
        .values
        .iter()
        .zip(&p.values)
        .map(|(&y, &q)| ((1.0 - lam) * y + lam * q).clamp(0.0, 1.0))
        .collect();
    Ok(SaliencyMap {
        height: y1.height,
        width: y1.width,
        values,
    })
}

/// The label update: Y₁ blended with the binarized refined prediction.
pub fn update_labels(y1: &SaliencyMap, p_refined_binary: &BinaryMask, lam: f64) -> Result<SaliencyMap> {
    blend(y1, &SaliencyMap::from(p_refined_binary), lam)
}

fn check_finite(name: &str, m: &SaliencyMap) -> Result<()> {
    if m.values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} contains non-finite values")))
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy of prediction `p` against soft target `t`.
pub fn bce(p: &SaliencyMap, t: &SaliencyMap) -> Result<f64> {
    t.same_shape(p.height, p.width)?;
    check_finite("prediction", p)?;
    check_finite("target", t)?;
    let sum: f64 = p
        .values
        .iter()
        .zip(&t.values)
        .map(|(&p, &t)| {
            let p = clamp_p(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// The self-calibration loss: cross-entropy against Y₁ weighted by `1 − λ`
/// plus cross-entropy against the refined prediction weighted by `λ`,
/// averaged over pixels.
pub fn sc_loss(p: &SaliencyMap, y1: &SaliencyMap, p_prime: &SaliencyMap, lam: f64) -> Result<f64> {
    check_lambda(lam)?;
    y1.same_shape(p.height, p.width)?;
    p_prime.same_shape(p.height, p.width)?;
    for (name, m) in [("prediction", p), ("y1", y1), ("refined prediction", p_prime)] {
        check_finite(name, m)?;
    }
    let mut sum = 0.0;
    for ((&p, &y), &q) in p.values.iter().zip(&y1.values).zip(&p_prime.values) {
        let p = clamp_p(p);
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        sum -= (1.0 - lam) * (y * lp + (1.0 - y) * lq) + lam * (q * lp + (1.0 - q) * lq);
    }
    Ok(sum / p.len() as f64)
}

/// Gradient of [`sc_loss`] with respect to the pre-sigmoid logits:
/// `(p − t) / n` with `t` the blended target.
pub fn sc_logit_gradient(p: &SaliencyMap, y1: &SaliencyMap, p_prime: &SaliencyMap, lam: f64) -> Result<Vec<f64>> {
    let t = blend(y1, p_prime, lam)?;
    t.same_shape(p.height, p.width)?;
    let n = p.len() as f64;
    Ok(p.values.iter().zip(&t.values).map(|(&p, &t)| (p - t) / n).collect())
}

/// Gradient of the mean cross-entropy with respect to the probabilities.
fn bce_prob_gradient(p: &SaliencyMap, t: &SaliencyMap) -> Vec<f64> {
    let n = p.len() as f64;
    p.values
        .iter()
        .zip(&t.values)
        .map(|(&p, &t)| {
            let p = clamp_p(p);
            (p - t) / (p * (1.0 - p) * n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub lambda: LambdaPolicy,
    pub binarize_threshold: f64,
    pub seed: u64,
    pub affinity: AffinityConfig,
    pub decoder: DecoderConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr: 3e-6,
            max_epochs: 25,
            batch_size: 20,
            input_size: 256,
            lambda: LambdaPolicy::default(),
            binarize_threshold: DEFAULT_THRESHOLD,
            seed: 0,
            affinity: AffinityConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 8,
            batch_size: 10,
            input_size: 64,
            decoder: DecoderConfig { mid_channels: 16 },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
        }
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config("input_size must be a positive multiple of 32".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0,1)".into()));
        }
        self.lambda.validate()?;
        self.affinity.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub lambda: f64,
    pub loss: f64,
    /// Filled on the last batch of an epoch when ground truth is available.
    pub val_mae: Option<f64>,
}

/// Held-out images with masks, used only to log an MAE curve.
#[derive(Debug, Clone)]
pub struct Validation {
    pub images: Vec<ImageTensor>,
    pub masks: Vec<BinaryMask>,
}

impl Validation {
    pub fn mean_mae(&self, model: &SaliencyModel, exec: ExecMode) -> Result<f64> {
        let maes = exec.map(self.images.len(), |i| {
            let m = &self.masks[i];
            let p = model.forward(&self.images[i])?.resized(m.height, m.width);
            mae(&p, m)
        });
        let mut sum = 0.0;
        for m in maes {
            sum += m?;
        }
        Ok(sum / self.images.len().max(1) as f64)
    }
}

/// Per-batch self-calibration. `batch` indexes both `images` and `store`.
///
/// The network's predictions are refined by affinity propagation and
/// binarized; the loss pulls them towards the blend of Y₁ and that refined
/// map, and the store's current labels are set to the same blend.
#[allow(clippy::too_many_arguments)]
pub fn calibration_step(
    model: &mut SaliencyModel,
    adam: &mut Adam,
    store: &mut PseudoLabelStore,
    images: &[ImageTensor],
    batch: &[usize],
    lam: f64,
    cfg: &TrainConfig,
    exec: ExecMode,
) -> Result<f64> {
    check_lambda(lam)?;
    let len = model.num_params();
    let model_ref = &*model;
    let store_ref = &*store;
    let parts = exec.map(batch.len(), |b| {
        let i = batch[b];
        let (p, cache) = model_ref.forward_train(&images[i])?;
        let refined = pamr_refine(&p, &images[i], &cfg.affinity)?;
        let p_prime = binarize(&refined, cfg.binarize_threshold);
        let y1 = store_ref.original(i);
        let soft = SaliencyMap::from(&p_prime);
        let loss = sc_loss(&p, y1, &soft, lam)?;
        let target = blend(y1, &soft, lam)?;
        let mut g = vec![0.0; len];
        model_ref.backward(&cache, &bce_prob_gradient(&p, &target), &mut g);
        Ok::<_, Error>((loss, g, p_prime))
    });
    let mut grads = Vec::with_capacity(batch.len());
    let mut refined = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (b, part) in parts.into_iter().enumerate() {
        let (l, g, p_prime) = part?;
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                context: format!("image {}", store.ids()[batch[b]]),
            });
        }
        loss += l;
        grads.push(g);
        refined.push(p_prime);
    }
    let n = batch.len() as f64;
    let mut total = sum_gradients(grads, len);
    for g in &mut total {
        *g /= n;
    }
    adam.update(&mut model.params, &total);
    for (&i, p_prime) in batch.iter().zip(&refined) {
        let next = update_labels(store.original(i), p_prime, lam)?;
        store.set_current(i, next)?;
    }
    Ok(loss / n)
}

/// Model, optimizer and progress of a stage-2 run.
pub struct SaliencyTrainer {
    pub cfg: TrainConfig,
    pub model: SaliencyModel,
    pub adam: Adam,
    pub epochs_done: usize,
    pub log: Vec<LogRow>,
}

impl SaliencyTrainer {
    pub fn new(model: SaliencyModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.lr, model.num_params());
        Ok(Self {
            cfg,
            model,
            adam,
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.cfg.max_epochs
    }

    /// Runs the next epoch; returns its mean loss.
    pub fn run_epoch(
        &mut self,
        images: &[ImageTensor],
        store: &mut PseudoLabelStore,
        validation: Option<&Validation>,
        exec: ExecMode,
    ) -> Result<f64> {
        if images.len() != store.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} images", store.len()),
                actual: format!("{} images", images.len()),
            });
        }
        if store.is_empty() {
            return Err(Error::NoLabels);
        }
        let epoch = self.epochs_done + 1;
        let lam = lambda_at(epoch, self.cfg.max_epochs, &self.cfg.lambda)?;
        let order = epoch_order(images.len(), self.cfg.seed, epoch - 1);
        let mut sum = 0.0;
        let first_row = self.log.len();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let loss = calibration_step(
                &mut self.model,
                &mut self.adam,
                store,
                images,
                chunk,
                lam,
                &self.cfg,
                exec,
            )?;
            sum += loss * chunk.len() as f64;
            self.log.push(LogRow {
                epoch,
                batch: b + 1,
                lambda: lam,
                loss,
                val_mae: None,
            });
        }
        let mean = sum / images.len() as f64;
        let val = validation.map(|v| v.mean_mae(&self.model, exec)).transpose()?;
        if self.log.len() > first_row {
            if let Some(row) = self.log.last_mut() {
                row.val_mae = val;
            }
        }
        self.epochs_done = epoch;
        store.epoch_tag = epoch;
        match val {
            Some(v) => info!("saliency epoch {epoch}: lambda {lam:.3} loss {mean:.4} val mae {v:.4}"),
            None => info!("saliency epoch {epoch}: lambda {lam:.3} loss {mean:.4}"),
        }
        Ok(mean)
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let adam = with_optimizer.then_some(&self.adam);
        Checkpoint::from_saliency(&self.model, adam, self.cfg.input_size, self.epochs_done, self.cfg.seed)
    }

    /// Rebuilds a trainer from an epoch checkpoint that carries optimizer state.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig, log: Vec<LogRow>) -> Result<Self> {
        let model = ck.saliency()?;
        let mut t = Self::new(model, cfg)?;
        t.adam = ck
            .adam
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        t.adam.lr = t.cfg.lr;
        t.epochs_done = ck.meta.epoch;
        t.log = log.into_iter().filter(|r| r.epoch <= ck.meta.epoch).collect();
        Ok(t)
    }
}

/// Output locations of [`train_saliency`].
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Receives `epoch_<n>.ckpt` (with optimizer state), `epoch_<n>.labels`,
    /// `final.ckpt` and `train_log.csv`.
    pub run_dir: Option<PathBuf>,
    /// Label store directory; receives `Y_epoch<n>/` snapshots and the
    /// current labels after every epoch.
    pub store_dir: Option<PathBuf>,
    /// Continue from the newest epoch checkpoint in `run_dir`.
    pub resume: bool,
}

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn labels_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch_{epoch:03}.labels"))
}

/// Newest `epoch_<n>.ckpt` whose label state is also present.
pub fn latest_epoch(run_dir: &Path) -> Option<usize> {
    let entries = fs::read_dir(run_dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?
                .strip_suffix(".ckpt")?
                .parse::<usize>()
                .ok()
        })
        .filter(|&n| labels_path(run_dir, n).exists())
        .max()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let has_val = rows.iter().any(|r| r.val_mae.is_some());
    let mut out = String::from("epoch,batch,lambda,loss");
    if has_val {
        out.push_str(",val_mae");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}", r.epoch, r.batch, r.lambda, r.loss));
        if has_val {
            out.push(',');
            if let Some(v) = r.val_mae {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    fs::write(path, out).at(path)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::MalformedRow {
            line: i + 1,
            reason: format!("bad training log row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(bad());
        }
        rows.push(LogRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            batch: f[1].parse().map_err(|_| bad())?,
            lambda: f[2].parse().map_err(|_| bad())?,
            loss: f[3].parse().map_err(|_| bad())?,
            val_mae: match f.get(4) {
                Some(v) if !v.is_empty() => Some(v.parse().map_err(|_| bad())?),
                _ => None,
            },
        });
    }
    Ok(rows)
}

/// Full stage-2 run over in-memory images aligned with `store`.
pub fn train_saliency(
    images: &[ImageTensor],
    store: &mut PseudoLabelStore,
    init: SaliencyModel,
    cfg: &TrainConfig,
    validation: Option<&Validation>,
    outputs: &TrainOutputs,
    exec: ExecMode,
) -> Result<SaliencyTrainer> {
    if store.is_empty() {
        return Err(Error::NoLabels);
    }
    let first = store.original(0);
    if (first.height, first.width) != (cfg.input_size, cfg.input_size) {
        return Err(Error::Config(format!(
            "labels are {}x{} but input_size is {}",
            first.height, first.width, cfg.input_size
        )));
    }
    let mut trainer = match (&outputs.run_dir, outputs.resume) {
        (Some(dir), true) => match latest_epoch(dir) {
            Some(n) => {
                let ck = Checkpoint::load(&epoch_checkpoint_path(dir, n))?;
                let log_path = dir.join("train_log.csv");
                let log = if log_path.exists() {
                    read_log(&log_path)?
                } else {
                    Vec::new()
                };
                let lp = labels_path(dir, n);
                store.restore_current(&fs::read(&lp).at(&lp)?)?;
                store.epoch_tag = n;
                info!("resuming stage 2 after epoch {n}");
                SaliencyTrainer::resume(&ck, cfg.clone(), log)?
            }
            None => {
                warn!("no epoch checkpoint in {}; starting fresh", dir.display());
                SaliencyTrainer::new(init, cfg.clone())?
            }
        },
        _ => SaliencyTrainer::new(init, cfg.clone())?,
    };
    if let Some(dir) = &outputs.run_dir {
        fs::create_dir_all(dir).at(dir)?;
    }
    while !trainer.is_finished() {
        trainer.run_epoch(images, store, validation, exec)?;
        let n = trainer.epochs_done;
        if let Some(dir) = &outputs.store_dir {
            store.save_snapshot(dir, n)?;
            store.save_state(dir)?;
        }
        if let Some(dir) = &outputs.run_dir {
            let lp = labels_path(dir, n);
            fs::write(&lp, store.encode_current()).at(&lp)?;
            trainer.checkpoint(true).save(&epoch_checkpoint_path(dir, n))?;
            write_log(&dir.join("train_log.csv"), &trainer.log)?;
        }
    }
    if let Some(dir) = &outputs.run_dir {
        trainer.checkpoint(false).save(&dir.join("final.ckpt"))?;
        write_log(&dir.join("train_log.csv"), &trainer.log)?;
    }
    Ok(trainer)
}

/// Loads the manifest images that have a label in `store`, in store order.
pub fn load_store_images(
    manifest: &DatasetManifest,
    store: &PseudoLabelStore,
    input_size: usize,
    exec: ExecMode,
) -> Result<Vec<ImageTensor>> {
    let stems: Vec<String> = manifest.entries.iter().map(|e| e.stem()).collect();
    let mut index = Vec::with_capacity(store.len());
    for id in store.ids() {
        let i = stems
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Config(format!("label {id} has no image in the manifest")))?;
        index.push(i);
    }
    exec.map(index.len(), |k| load_image(&manifest.image_path(index[k]), input_size))
        .into_iter()
        .collect()
}

/// Encoder/decoder for stage 2, with the encoder taken from a stage-1 checkpoint.
pub fn init_saliency_model(
    classifier: Option<&crate::classifier::ClassifierModel>,
    kind: BackboneKind,
    cfg: &TrainConfig,
) -> Result<SaliencyModel> {
    match classifier {
        Some(c) => SaliencyModel::from_classifier(c, cfg.decoder, cfg.seed),
        None => SaliencyModel::new(kind, cfg.decoder, cfg.seed),
    }
}
