//! Appearance-driven refinement of coarse maps: color-affinity propagation,
//! thresholding, the CRF plugin boundary, and stage-1 pseudo-label generation.

use std::fs;
use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{multiscale_cam, ClassifierModel, DEFAULT_CAM_SCALES};
use crate::datasets::{load_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::store::PseudoLabelStore;
use crate::tensor::{BinaryMask, ImageTensor, SaliencyMap};

/// Threshold used both for stage-1 labels and for binarizing refined
/// predictions during calibration (strict `>`).
pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub iterations: usize,
    pub dilations: Vec<usize>,
    /// Multiplies the per-pixel standard deviation used as the kernel width.
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
}

fn default_sigma_scale() -> f64 {
    0.5
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            dilations: vec![1, 2, 4, 8, 12, 24],
            sigma_scale: default_sigma_scale(),
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("affinity iterations must be at least 1".into()));
        }
        if self.dilations.is_empty() || self.dilations[0] == 0 {
            return Err(Error::Config("dilations must be non-empty and at least 1".into()));
        }
        if !(self.sigma_scale.is_finite() && self.sigma_scale > 0.0) {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dilations must be strictly increasing".into()));
        }
        Ok(())
    }
}

const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const SIGMA_FLOOR: f64 = 1e-3;

/// Row-stochastic neighbour weights derived from image color alone.
///
/// Each pixel's neighbourhood is the eight off-centre taps of a 3×3 window
/// at every dilation, with coordinates clamped at the border.
#[derive(Debug, Clone)]
pub struct AffinityKernel {
    pub height: usize,
    pub width: usize,
    pub neighbours: usize,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl AffinityKernel {
    pub fn build(image: &ImageTensor, cfg: &AffinityConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = (image.height(), image.width());
        let k = OFFSETS.len() * cfg.dilations.len();
        let mut index = Vec::with_capacity(h * w * k);
        let mut weight = Vec::with_capacity(h * w * k);
        let mut dist = vec![0.0; k];
        for y in 0..h {
            for x in 0..w {
                let ci = image.rgb(y, x);
                let mut n = 0;
                for &d in &cfg.dilations {
                    for &(dy, dx) in &OFFSETS {
                        let ny = (y as isize + dy * d as isize).clamp(0, h as isize - 1) as usize;
                        let nx = (x as isize + dx * d as isize).clamp(0, w as isize - 1) as usize;
                        let cj = image.rgb(ny, nx);
                        dist[n] = (ci[0] - cj[0]).abs() + (ci[1] - cj[1]).abs() + (ci[2] - cj[2]).abs();
                        index.push((ny * w + nx) as u32);
                        n += 1;
                    }
                }
                let mean = dist.iter().sum::<f64>() / k as f64;
                let var = dist.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / k as f64;
                let sigma = (cfg.sigma_scale * var.sqrt()).max(SIGMA_FLOOR);
                let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
                let start = weight.len();
                let mut z = 0.0;
                for d in &dist {
                    let a = (-(d - min) / sigma).exp();
                    z += a;
                    weight.push(a);
                }
                for a in &mut weight[start..] {
                    *a /= z;
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            neighbours: k,
            index,
            weight,
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weight.chunks(self.neighbours).map(|r| r.iter().sum()).collect()
    }

    /// One propagation step: `out_i = Σ_j a_ij · values_j`.
    pub fn propagate(&self, values: &[f64]) -> Vec<f64> {
        self.index
            .chunks(self.neighbours)
            .zip(self.weight.chunks(self.neighbours))
            .map(|(idx, w)| idx.iter().zip(w).map(|(&j, a)| a * values[j as usize]).sum())
            .collect()
    }
}

/// Iterated color-affinity smoothing of `mask` guided by `image`.
pub fn pamr_refine(mask: &SaliencyMap, image: &ImageTensor, cfg: &AffinityConfig) -> Result<SaliencyMap> {
    mask.same_shape(image.height(), image.width())?;
    let kernel = AffinityKernel::build(image, cfg)?;
    Ok(refine_with_kernel(mask, &kernel, cfg.iterations))
}

pub fn refine_with_kernel(mask: &SaliencyMap, kernel: &AffinityKernel, iterations: usize) -> SaliencyMap {
    let mut values = mask.values.clone();
    for _ in 0..iterations {
        values = kernel.propagate(&values);
    }
    SaliencyMap {
        height: mask.height,
        width: mask.width,
        values,
    }
}

/// `1` where the value is strictly above `threshold`, else `0`.
///
/// # Panics
/// If `threshold` is outside `(0, 1)`.
pub fn binarize(mask: &SaliencyMap, threshold: f64) -> BinaryMask {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie in (0,1), got {threshold}"
    );
    BinaryMask {
        height: mask.height,
        width: mask.width,
        values: mask.values.iter().map(|&v| u8::from(v > threshold)).collect(),
    }
}

/// A dense-CRF style refinement backend.
pub trait CrfPlugin: Send + Sync {
    fn name(&self) -> &str;
    /// Returns the foreground marginal for a soft or binary mask.
    fn refine(&self, mask: &SaliencyMap, image: &ImageTensor) -> Result<SaliencyMap>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutcome {
    pub map: SaliencyMap,
    pub refined: bool,
}

/// Runs the plugin if one is given. Absent plugins and plugin failures both
/// return the input unchanged with `refined = false`.
pub fn crf_refine(mask: &SaliencyMap, image: &ImageTensor, plugin: Option<&dyn CrfPlugin>) -> CrfOutcome {
    let Some(plugin) = plugin else {
        return CrfOutcome {
            map: mask.clone(),
            refined: false,
        };
    };
    match plugin.refine(mask, image) {
        Ok(map) if map.values.iter().all(|v| (0.0..=1.0).contains(v)) => CrfOutcome { map, refined: true },
        Ok(_) => {
            warn!(
                "crf plugin {} returned values outside [0,1]; keeping input",
                plugin.name()
            );
            CrfOutcome {
                map: mask.clone(),
                refined: false,
            }
        }
        Err(e) => {
            warn!("crf plugin {} failed: {e}; keeping input", plugin.name());
            CrfOutcome {
                map: mask.clone(),
                refined: false,
            }
        }
    }
}

/// Two-label mean-field CRF with Potts compatibility and Gaussian
/// appearance + smoothness kernels truncated to a square window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedCrf {
    pub iterations: usize,
    pub radius: usize,
    pub appearance_weight: f64,
    pub theta_position: f64,
    pub theta_color: f64,
    pub smoothness_weight: f64,
    pub theta_smoothness: f64,
    /// Input probabilities are clipped to `[confidence_floor, 1 - confidence_floor]`.
    pub confidence_floor: f64,
}

impl Default for WindowedCrf {
    fn default() -> Self {
        Self {
            iterations: 5,
            radius: 5,
            appearance_weight: 3.0,
            theta_position: 5.0,
            theta_color: 0.1,
            smoothness_weight: 1.0,
            theta_smoothness: 1.0,
            confidence_floor: 0.05,
        }
    }
}

impl CrfPlugin for WindowedCrf {
    fn name(&self) -> &str {
        "windowed-meanfield"
    }

    fn refine(&self, mask: &SaliencyMap, image: &ImageTensor) -> Result<SaliencyMap> {
        mask.same_shape(image.height(), image.width())?;
        let (h, w) = (mask.height, mask.width);
        let eps = self.confidence_floor;
        // Unary energies for (background, foreground).
        let unary: Vec<[f64; 2]> = mask
            .values
            .iter()
            .map(|&p| {
                let p = p.clamp(eps, 1.0 - eps);
                [-(1.0 - p).ln(), -p.ln()]
            })
            .collect();
        let mut q: Vec<f64> = unary.iter().map(|u| 1.0 / (1.0 + (u[1] - u[0]).exp())).collect();
        let r = self.radius as isize;
        let (ta2, tb2, tg2) = (
            2.0 * self.theta_position * self.theta_position,
            2.0 * self.theta_color * self.theta_color,
            2.0 * self.theta_smoothness * self.theta_smoothness,
        );
        for _ in 0..self.iterations {
            let mut next = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let ci = image.rgb(y, x);
                    let (mut m_fg, mut m_bg) = (0.0, 0.0);
                    for dy in -r..=r {
                        let ny = y as isize + dy;
                        if ny < 0 || ny >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let nx = x as isize + dx;
                            if nx < 0 || nx >= w as isize || (dx == 0 && dy == 0) {
                                continue;
                            }
                            let j = ny as usize * w + nx as usize;
                            let cj = image.rgb(ny as usize, nx as usize);
                            let dpos = (dx * dx + dy * dy) as f64;
                            let dcol = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                            let k = self.appearance_weight * (-dpos / ta2 - dcol / tb2).exp()
                                + self.smoothness_weight * (-dpos / tg2).exp();
                            m_fg += k * q[j];
                            m_bg += k * (1.0 - q[j]);
                        }
                    }
                    let i = y * w + x;
                    // Potts: a label pays for the mass of the other label.
                    let e_bg = unary[i][0] + m_fg;
                    let e_fg = unary[i][1] + m_bg;
                    next[i] = 1.0 / (1.0 + (e_fg - e_bg).exp());
                }
            }
            q = next;
        }
        SaliencyMap::new(h, w, q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub scales: Vec<f64>,
    pub affinity: AffinityConfig,
    pub threshold: f64,
    pub input_size: usize,
    /// Directory for cached multi-scale CAMs (optional).
    #[serde(skip)]
    pub cam_cache: Option<PathBuf>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_CAM_SCALES.to_vec(),
            affinity: AffinityConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            input_size: 256,
            cam_cache: None,
        }
    }
}

/// Stage-1 label for one image: multi-scale CAM, affinity refinement,
/// threshold, optional CRF. Values are quantized to 8-bit levels so the
/// in-memory label equals its on-disk PNG.
pub fn pseudo_label(
    image: &ImageTensor,
    model: &ClassifierModel,
    cfg: &LabelConfig,
    crf: Option<&dyn CrfPlugin>,
) -> Result<(SaliencyMap, bool)> {
    let cam = multiscale_cam(image, model, &cfg.scales)?;
    label_from_cam(&cam, image, cfg, crf)
}

fn label_from_cam(
    cam: &SaliencyMap,
    image: &ImageTensor,
    cfg: &LabelConfig,
    crf: Option<&dyn CrfPlugin>,
) -> Result<(SaliencyMap, bool)> {
    let refined = pamr_refine(cam, image, &cfg.affinity)?;
    let mask = binarize(&refined, cfg.threshold);
    let out = crf_refine(&SaliencyMap::from(&mask), image, crf);
    let q = SaliencyMap::from_u8(out.map.height, out.map.width, &out.map.to_u8())?;
    Ok((q, out.refined))
}

fn cached_cam(dir: &PathBuf, key: &str, compute: impl FnOnce() -> Result<SaliencyMap>) -> Result<SaliencyMap> {
    let path = dir.join(format!("{key}.cam"));
    if let Ok(bytes) = fs::read(&path) {
        if bytes.len() >= 16 {
            let h = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
            let w = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
            if bytes.len() == 16 + 8 * h * w {
                let values = bytes[16..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                return SaliencyMap::new(h, w, values);
            }
        }
    }
    let cam = compute()?;
    let mut bytes = Vec::with_capacity(16 + 8 * cam.len());
    bytes.extend_from_slice(&(cam.height as u64).to_le_bytes());
    bytes.extend_from_slice(&(cam.width as u64).to_le_bytes());
    for v in &cam.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, bytes)) {
        warn!("could not write CAM cache {}: {e}", path.display());
    }
    Ok(cam)
}

/// Per-image outcome of label generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub reason: String,
}

/// Generates Y₁ for every manifest image. Per-image failures are logged and
/// skipped; at least one label must be produced.
pub fn generate_pseudo_labels(
    manifest: &DatasetManifest,
    model: &ClassifierModel,
    checkpoint_hash: &str,
    cfg: &LabelConfig,
    crf: Option<&dyn CrfPlugin>,
    exec: ExecMode,
) -> Result<PseudoLabelStore> {
    cfg.affinity.validate()?;
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::Config("threshold must lie in (0,1)".into()));
    }
    let results = exec.map(manifest.len(), |i| {
        let id = manifest.entries[i].stem();
        let image = load_image(&manifest.image_path(i), cfg.input_size)?;
        let cam = match &cfg.cam_cache {
            Some(dir) => {
                let mut key = Sha256::new();
                key.update(checkpoint_hash.as_bytes());
                key.update(manifest.image_path(i).to_string_lossy().as_bytes());
                key.update(cfg.input_size.to_le_bytes());
                for s in &cfg.scales {
                    key.update(s.to_le_bytes());
                }
                let key = hex::encode(key.finalize());
                cached_cam(dir, &key, || multiscale_cam(&image, model, &cfg.scales))?
            }
            None => multiscale_cam(&image, model, &cfg.scales)?,
        };
        let (label, refined) = label_from_cam(&cam, &image, cfg, crf)?;
        Ok::<_, Error>((id, label, refined))
    });
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    let mut crf_applied = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((id, label, refined)) => {
                crf_applied += usize::from(refined);
                ids.push(id);
                labels.push(label);
            }
            Err(e) => {
                let id = manifest.entries[i].stem();
                warn!("skipping {id}: {e}");
                skipped.push(SkippedImage {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    info!(
        "generated {} pseudo labels ({} skipped, crf applied to {})",
        labels.len(),
        skipped.len(),
        crf_applied
    );
    let mut store = PseudoLabelStore::new(ids, labels)?;
    store.meta.threshold = cfg.threshold;
    store.meta.scales = cfg.scales.clone();
    store.meta.affinity = cfg.affinity.clone();
    store.meta.checkpoint_hash = checkpoint_hash.to_string();
    store.meta.crf = crf.map(|p| p.name().to_string());
    store.meta.crf_applied = crf_applied;
    store.meta.skipped = skipped;
    store.meta.pipeline = "multiscale_cam > pamr > binarize > crf".into();
    Ok(store)
}
