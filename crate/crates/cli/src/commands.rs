//! One function per subcommand. Each takes the resolved [`RunConfig`], locks
//! the directory it writes, and leaves `config.toml` plus `run.json` next to
//! its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use selfcal_core::calibration::{init_saliency_model, load_store_images, train_saliency, TrainOutputs, Validation};
use selfcal_core::checkpoint::{file_hash, Checkpoint};
use selfcal_core::classifier::{train_classifier, ClassifierModel};
use selfcal_core::datasets::{
    generate_synthetic, load_image, load_manifest, load_mask, save_gray_map, DatasetManifest, SyntheticConfig,
};
use selfcal_core::exec::ExecMode;
use selfcal_core::lock::DirLock;
use selfcal_core::metrics::{evaluate_dataset, evaluate_pairs, MetricReport};
use selfcal_core::refinement::{crf_refine, generate_pseudo_labels, CrfPlugin, WindowedCrf};
use selfcal_core::saliency::SaliencyModel;
use selfcal_core::store::PseudoLabelStore;
use selfcal_core::tensor::SaliencyMap;

use crate::ablation::{run_ablation, AblationConfig, AblationReport};
use crate::config::{Preset, RunConfig};
use crate::UsageError;

/// Directory for cached multi-scale CAMs during `gen-pseudo`.
pub const CACHE_ENV: &str = "SELFCAL_WSOD_CACHE";

pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const SALIENCY_FILE: &str = "final.ckpt";

/// `run.json`: enough to tell which inputs produced a directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub preset: Preset,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub manifest_hash: Option<String>,
    #[serde(default)]
    pub input_hashes: Vec<(String, String)>,
    #[serde(default)]
    pub output_hash: Option<String>,
    pub version: String,
}

impl RunMeta {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            preset: cfg.preset,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            manifest_hash: None,
            input_hashes: Vec::new(),
            output_hash: None,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("run.json");
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", p.display()))
    }
}

fn finish(dir: &Path, cfg: &RunConfig, meta: &RunMeta) -> Result<()> {
    cfg.write_to(dir)?;
    meta.write(dir)
}

/// Loads a manifest, turning a missing file into a usage error and refusing
/// the paper preset on synthetic data.
pub fn open_manifest(path: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    if !path.is_file() {
        bail!(UsageError(format!("manifest {} not found", path.display())));
    }
    let m = load_manifest(path)?;
    m.validate()?;
    if cfg.preset == Preset::Paper && m.synthetic {
        bail!(UsageError(format!(
            "{} is the synthetic stand-in; the paper preset only runs on real data",
            path.display()
        )));
    }
    Ok(m)
}

fn crf_plugin(cfg: &RunConfig) -> Option<WindowedCrf> {
    cfg.crf.then(WindowedCrf::default)
}

pub fn classifier_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.classifier_dir.join(CLASSIFIER_FILE)
}

pub fn saliency_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.saliency_dir.join(SALIENCY_FILE)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!(UsageError(format!(
            "{what} checkpoint {} not found; run the previous stage first",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

/// Renders the train and test splits next to the configured manifests.
pub fn synth(cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    if cfg.preset == Preset::Paper {
        bail!(UsageError(
            "synth produces the synthetic stand-in; use --preset tiny".into()
        ));
    }
    let s = &cfg.synth;
    let make = |manifest: &Path, count: usize, seed: u64| -> Result<DatasetManifest> {
        let dir = manifest
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let split = manifest
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .ok_or_else(|| UsageError(format!("bad manifest path {}", manifest.display())))?;
        let sc = SyntheticConfig {
            num_images: count,
            image_size: s.image_size,
            num_categories: s.num_categories,
            background_mode: s.background,
            seed,
        };
        sc.validate().map_err(|e| UsageError(e.to_string()))?;
        let _lock = DirLock::acquire(dir)?;
        Ok(generate_synthetic(&sc, dir, &split)?)
    };
    let train = make(&cfg.paths.train_manifest, s.train_images, cfg.seed)?;
    let test = make(
        &cfg.paths.test_manifest,
        s.test_images,
        cfg.seed.wrapping_mul(1_000_003).wrapping_add(0x7e57),
    )?;
    info!(
        "wrote {} train and {} test images ({} categories)",
        train.len(),
        test.len(),
        s.num_categories
    );
    Ok((train, test))
}

pub fn train_cls(cfg: &RunConfig, exec: ExecMode) -> Result<PathBuf> {
    let manifest = open_manifest(&cfg.paths.train_manifest, cfg)?;
    manifest.require_categories()?;
    let dir = &cfg.paths.classifier_dir;
    let _lock = DirLock::acquire(dir)?;
    let trained = train_classifier(&manifest, &cfg.classifier, exec)?;
    let path = classifier_path(cfg);
    let ck = Checkpoint::from_classifier(
        &trained.model,
        cfg.classifier.input_size,
        cfg.classifier.max_epochs,
        cfg.classifier.seed,
    );
    let hash = ck.save(&path)?;
    let mut log = String::from("epoch,loss,accuracy\n");
    for s in &trained.log {
        log.push_str(&format!("{},{:.6},{:.6}\n", s.epoch, s.loss, s.accuracy));
    }
    fs::write(dir.join("epochs.csv"), log)?;
    let mut meta = RunMeta::new("train-cls", cfg);
    meta.manifest_hash = Some(manifest.content_hash());
    meta.output_hash = Some(hash);
    finish(dir, cfg, &meta)?;
    if let Some(last) = trained.log.last() {
        info!("classifier: final training accuracy {:.3}", last.accuracy);
    }
    Ok(path)
}

pub fn gen_pseudo(cfg: &RunConfig, exec: ExecMode) -> Result<PseudoLabelStore> {
    let manifest = open_manifest(&cfg.paths.train_manifest, cfg)?;
    let ck_path = classifier_path(cfg);
    let model: ClassifierModel = load_checkpoint(&ck_path, "classifier")?.classifier()?;
    let ck_hash = file_hash(&ck_path)?;
    let mut labels = cfg.labels.clone();
    labels.cam_cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let crf = crf_plugin(cfg);
    let dir = &cfg.paths.store_dir;
    let _lock = DirLock::acquire(dir)?;
    let store = generate_pseudo_labels(
        &manifest,
        &model,
        &ck_hash,
        &labels,
        crf.as_ref().map(|c| c as &dyn CrfPlugin),
        exec,
    )?;
    store.save(dir)?;
    let mut meta = RunMeta::new("gen-pseudo", cfg);
    meta.manifest_hash = Some(manifest.content_hash());
    meta.input_hashes.push(("classifier".into(), ck_hash));
    meta.output_hash = Some(store.original_hash());
    finish(dir, cfg, &meta)?;
    Ok(store)
}

/// Test-split images and masks for the per-epoch MAE curve, when available.
fn validation_set(cfg: &RunConfig, exec: ExecMode) -> Result<Option<Validation>> {
    let path = &cfg.paths.test_manifest;
    if !path.is_file() {
        return Ok(None);
    }
    let m = open_manifest(path, cfg)?;
    if m.entries.iter().any(|e| e.label_path.is_none()) {
        return Ok(None);
    }
    let size = cfg.saliency.input_size;
    let loaded = exec.map(m.len(), |i| {
        let img = load_image(&m.image_path(i), size)?;
        let mask = load_mask(&m.label_path(i).expect("checked above"))?;
        Ok::<_, selfcal_core::Error>((img, mask))
    });
    let mut v = Validation {
        images: Vec::with_capacity(m.len()),
        masks: Vec::with_capacity(m.len()),
    };
    for r in loaded {
        let (img, mask) = r?;
        v.images.push(img);
        v.masks.push(mask);
    }
    Ok(Some(v))
}

pub fn train_sal(cfg: &RunConfig, resume: bool, exec: ExecMode) -> Result<PathBuf> {
    let manifest = open_manifest(&cfg.paths.train_manifest, cfg)?;
    if !cfg.paths.store_dir.join("store.json").is_file() {
        bail!(UsageError(format!(
            "no label store in {}; run gen-pseudo first",
            cfg.paths.store_dir.display()
        )));
    }
    let mut store = PseudoLabelStore::load(&cfg.paths.store_dir)?;
    let images = load_store_images(&manifest, &store, cfg.saliency.input_size, exec)?;
    let cls_path = classifier_path(cfg);
    let classifier = if cls_path.is_file() {
        Some(Checkpoint::load(&cls_path)?.classifier()?)
    } else {
        warn!(
            "no classifier checkpoint at {}; stage 2 starts from scratch",
            cls_path.display()
        );
        None
    };
    let init = init_saliency_model(classifier.as_ref(), cfg.classifier.backbone, &cfg.saliency)?;
    let validation = validation_set(cfg, exec)?;
    let dir = &cfg.paths.saliency_dir;
    let _lock = DirLock::acquire(dir)?;
    let outputs = TrainOutputs {
        run_dir: Some(dir.clone()),
        store_dir: Some(dir.join("labels")),
        resume,
    };
    let trainer = train_saliency(
        &images,
        &mut store,
        init,
        &cfg.saliency,
        validation.as_ref(),
        &outputs,
        exec,
    )?;
    let path = saliency_path(cfg);
    let mut meta = RunMeta::new("train-sal", cfg);
    meta.manifest_hash = Some(manifest.content_hash());
    meta.input_hashes.push(("labels".into(), store.original_hash()));
    if cls_path.is_file() {
        meta.input_hashes.push(("classifier".into(), file_hash(&cls_path)?));
    }
    meta.output_hash = Some(file_hash(&path)?);
    finish(dir, cfg, &meta)?;
    if let Some(v) = trainer.log.iter().rev().find_map(|r| r.val_mae) {
        info!("stage 2 done: held-out MAE {v:.4}");
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = UsageError;
    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(UsageError(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

fn native_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((h as usize, w as usize))
}

/// Predicts every manifest image at the network input size and writes the
/// map back at the image's native resolution. `post` may refine the map
/// (with the resized image) before it is upsampled.
fn predict_into<F>(
    manifest: &DatasetManifest,
    model: &SaliencyModel,
    size: usize,
    out_dir: &Path,
    exec: ExecMode,
    post: F,
) -> Result<Vec<bool>>
where
    F: Fn(SaliencyMap, &selfcal_core::tensor::ImageTensor) -> (SaliencyMap, bool) + Sync + Send,
{
    fs::create_dir_all(out_dir)?;
    let results = exec.map(manifest.len(), |i| {
        let path = manifest.image_path(i);
        let image = load_image(&path, size)?;
        let (map, flag) = post(model.forward(&image)?, &image);
        let (h, w) = native_size(&path)?;
        save_gray_map(
            &out_dir.join(format!("{}.png", manifest.entries[i].stem())),
            &map.resized(h, w),
        )?;
        Ok::<_, anyhow::Error>(flag)
    });
    results.into_iter().collect()
}

pub fn infer(cfg: &RunConfig, split: Split, exec: ExecMode) -> Result<PathBuf> {
    let mpath = match split {
        Split::Train => &cfg.paths.train_manifest,
        Split::Test => &cfg.paths.test_manifest,
    };
    let manifest = open_manifest(mpath, cfg)?;
    let ck_path = saliency_path(cfg);
    let ck = load_checkpoint(&ck_path, "saliency")?;
    let model = ck.saliency()?;
    let dir = &cfg.paths.predictions_dir;
    let _lock = DirLock::acquire(dir)?;
    predict_into(&manifest, &model, ck.meta.input_size, dir, exec, |m, _| (m, false))?;
    let mut meta = RunMeta::new("infer", cfg);
    meta.manifest_hash = Some(manifest.content_hash());
    meta.input_hashes.push(("saliency".into(), file_hash(&ck_path)?));
    finish(dir, cfg, &meta)?;
    info!("wrote {} predictions to {}", manifest.len(), dir.display());
    Ok(dir.clone())
}

/// Scores predictions. With `pred` and `gt` both given the two directories
/// are matched by file stem; otherwise predictions in the configured
/// directory are matched to the test manifest's masks.
pub fn eval(cfg: &RunConfig, pred: Option<&Path>, gt: Option<&Path>, exec: ExecMode) -> Result<MetricReport> {
    let report = match (pred, gt) {
        (Some(p), Some(g)) => {
            for d in [p, g] {
                if !d.is_dir() {
                    bail!(UsageError(format!("{} is not a directory", d.display())));
                }
            }
            evaluate_dataset(p, g, cfg.protocol, exec)?
        }
        (None, None) => {
            let manifest = open_manifest(&cfg.paths.test_manifest, cfg)?;
            let pred_dir = &cfg.paths.predictions_dir;
            let mut jobs = Vec::new();
            let mut missing = Vec::new();
            for (i, e) in manifest.entries.iter().enumerate() {
                let Some(gt) = manifest.label_path(i) else { continue };
                let p = pred_dir.join(format!("{}.png", e.stem()));
                if p.is_file() {
                    jobs.push((e.stem(), p, gt));
                } else {
                    missing.push(e.stem());
                }
            }
            if !missing.is_empty() {
                warn!(
                    "{} test images have no prediction in {}",
                    missing.len(),
                    pred_dir.display()
                );
            }
            let loaded = exec.map_slice(&jobs, |(id, p, g)| {
                Ok::<_, selfcal_core::Error>((id.clone(), selfcal_core::datasets::load_gray_map(p)?, load_mask(g)?))
            });
            let pairs = loaded.into_iter().collect::<selfcal_core::Result<Vec<_>>>()?;
            let mut r = evaluate_pairs(&pairs, cfg.protocol, exec)?;
            r.missing = missing;
            r
        }
        _ => bail!(UsageError("--pred and --gt must be given together".into())),
    };
    let dir = &cfg.paths.report_dir;
    let _lock = DirLock::acquire(dir)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    finish(dir, cfg, &RunMeta::new("eval", cfg))?;
    Ok(report)
}

/// Contents of `export.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportInfo {
    pub count: usize,
    pub crf: Option<String>,
    pub crf_applied: usize,
    /// Set when no CRF ran, i.e. the files are raw network predictions.
    pub raw_predictions: bool,
}

pub fn export_labels(cfg: &RunConfig, exec: ExecMode) -> Result<ExportInfo> {
    let manifest = open_manifest(&cfg.paths.train_manifest, cfg)?;
    let ck_path = saliency_path(cfg);
    let ck = load_checkpoint(&ck_path, "saliency")?;
    let model = ck.saliency()?;
    let crf = crf_plugin(cfg);
    let plugin = crf.as_ref().map(|c| c as &dyn CrfPlugin);
    let dir = &cfg.paths.export_dir;
    let _lock = DirLock::acquire(dir)?;
    let flags = predict_into(&manifest, &model, ck.meta.input_size, dir, exec, |m, img| {
        let out = crf_refine(&m, img, plugin);
        (out.map, out.refined)
    })?;
    let applied = flags.iter().filter(|&&f| f).count();
    let info = ExportInfo {
        count: manifest.len(),
        crf: plugin.map(|p| p.name().to_string()),
        crf_applied: applied,
        raw_predictions: applied == 0,
    };
    if info.raw_predictions {
        warn!("no CRF applied: exported maps are raw predictions");
    }
    fs::write(dir.join("export.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    let mut meta = RunMeta::new("export-labels", cfg);
    meta.manifest_hash = Some(manifest.content_hash());
    meta.input_hashes.push(("saliency".into(), file_hash(&ck_path)?));
    finish(dir, cfg, &meta)?;
    Ok(info)
}

pub fn ablation_config(cfg: &RunConfig) -> AblationConfig {
    AblationConfig {
        train_images: cfg.synth.train_images,
        test_images: cfg.synth.test_images,
        image_size: cfg.synth.image_size,
        num_categories: cfg.synth.num_categories,
        background: cfg.synth.background,
        seeds: cfg.ablation_seeds.clone(),
        classifier: cfg.classifier.clone(),
        labels: cfg.labels.clone(),
        saliency: cfg.saliency.clone(),
        lambda: cfg.saliency.lambda,
        crf: cfg.crf,
        protocol: cfg.protocol,
    }
}

pub fn ablation(cfg: &RunConfig, exec: ExecMode) -> Result<AblationReport> {
    if cfg.preset == Preset::Paper {
        bail!(UsageError(
            "the ablation runs on the synthetic set; use --preset tiny".into()
        ));
    }
    let acfg = ablation_config(cfg);
    if acfg.image_size != acfg.saliency.input_size || acfg.image_size != acfg.labels.input_size {
        bail!(UsageError(format!(
            "synth.image_size ({}) must match the network input size ({})",
            acfg.image_size, acfg.saliency.input_size
        )));
    }
    let dir = &cfg.paths.report_dir;
    let _lock = DirLock::acquire(dir)?;
    let report = run_ablation(&acfg, exec)?;
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    finish(dir, cfg, &RunMeta::new("ablation", cfg))?;
    Ok(report)
}
