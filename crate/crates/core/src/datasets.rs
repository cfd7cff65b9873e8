//! Dataset manifests, PNG image/mask IO, and the seeded synthetic shapes set.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::{BinaryMask, FeatureMap, ImageTensor, SaliencyMap};

pub const MANIFEST_HEADER: [&str; 3] = ["image_path", "category_id", "label_path"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub category_id: Option<usize>,
    pub label_path: Option<String>,
}

impl ManifestEntry {
    /// File stem of the image, used as the id in label stores and reports.
    pub fn stem(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

/// Optional JSON sidecar next to a manifest (`<name>.meta.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub num_categories: usize,
    pub split_name: String,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_categories: usize,
    pub split_name: String,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    /// Set when the manifest was written by [`generate_synthetic`].
    pub synthetic: bool,
}

pub fn meta_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.with_file_name(format!("{stem}.meta.json"))
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.resolve(&self.entries[i].image_path)
    }

    pub fn label_path(&self, i: usize) -> Option<PathBuf> {
        self.entries[i].label_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(c) = e.category_id {
                if c >= self.num_categories {
                    return Err(Error::CategoryOutOfRange {
                        line: i + 2,
                        category: c,
                        num_categories: self.num_categories,
                    });
                }
            }
            if !seen.insert(e.image_path.as_str()) {
                return Err(Error::DuplicateImage(e.image_path.clone()));
            }
        }
        Ok(())
    }

    pub fn require_categories(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.category_id.is_none()) {
            Some(e) => Err(Error::MissingCategory(e.image_path.clone())),
            None => Ok(()),
        }
    }

    /// Writes the CSV and its meta sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            let cat = e.category_id.map(|c| c.to_string()).unwrap_or_default();
            let label = e.label_path.clone().unwrap_or_default();
            w.write_record([e.image_path.as_str(), cat.as_str(), label.as_str()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().at(path)?;
        let meta = ManifestMeta {
            num_categories: self.num_categories,
            split_name: self.split_name.clone(),
            synthetic: self.synthetic,
        };
        let mp = meta_path(path);
        fs::write(&mp, serde_json::to_string_pretty(&meta).at(&mp)?).at(&mp)
    }

    /// SHA-256 over the manifest's entries, independent of where it lives.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.num_categories.to_le_bytes());
        for e in &self.entries {
            h.update(e.image_path.as_bytes());
            h.update([0]);
            h.update(e.category_id.map(|c| c.to_string()).unwrap_or_default());
            h.update([0]);
            h.update(e.label_path.as_deref().unwrap_or_default());
            h.update([1]);
        }
        hex::encode(h.finalize())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Loads a manifest. `num_categories` comes from the meta sidecar when
/// present, otherwise from the largest category id (at least 1).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mp = meta_path(path);
    let meta: Option<ManifestMeta> = if mp.exists() {
        let text = fs::read_to_string(&mp).at(&mp)?;
        Some(serde_json::from_str(&text).at(&mp)?)
    } else {
        None
    };
    let manifest = parse_manifest(path, meta.as_ref().map(|m| m.num_categories))?;
    Ok(DatasetManifest {
        split_name: meta
            .as_ref()
            .map(|m| m.split_name.clone())
            .unwrap_or(manifest.split_name),
        synthetic: meta.map(|m| m.synthetic).unwrap_or(false),
        ..manifest
    })
}

/// Loads a manifest with an explicit category count, ignoring any sidecar.
pub fn load_manifest_with(path: &Path, num_categories: usize) -> Result<DatasetManifest> {
    parse_manifest(path, Some(num_categories))
}

fn parse_manifest(path: &Path, num_categories: Option<usize>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).at(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::EmptyManifest);
    }
    if headers.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut entries = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        let image_path = row[0].trim().to_string();
        if image_path.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty image_path".into(),
            });
        }
        let cat = row[1].trim();
        let category_id = if cat.is_empty() {
            None
        } else {
            Some(cat.parse::<usize>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("bad category_id {cat:?}"),
            })?)
        };
        let label = row[2].trim();
        entries.push(ManifestEntry {
            image_path,
            category_id,
            label_path: (!label.is_empty()).then(|| label.to_string()),
        });
    }
    let num_categories =
        num_categories.unwrap_or_else(|| entries.iter().filter_map(|e| e.category_id).max().map_or(1, |m| m + 1));
    let manifest = DatasetManifest {
        entries,
        num_categories,
        split_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        synthetic: false,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).at(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroSized(path.to_path_buf()));
    }
    // Grayscale is replicated, alpha dropped.
    Ok(img.to_rgb8())
}

pub fn rgb_to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut fm = FeatureMap::zeros(3, h, w);
    let n = w * h;
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            fm.data[c * n + i] = f64::from(px[c]) / 255.0;
        }
    }
    ImageTensor::new(fm).expect("8-bit pixels lie in [0,1]")
}

pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = img.rgb(y as usize, x as usize);
        Rgb(p.map(|v| (v * 255.0).round() as u8))
    })
}

/// Decodes an image to RGB in `[0,1]` and bilinearly resizes it to
/// `target_size × target_size`.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    if target_size == 0 {
        return Err(Error::Config("target_size must be positive".into()));
    }
    let t = rgb_to_tensor(&decode_rgb(path)?);
    Ok(t.resized(target_size, target_size))
}

/// Decodes an image at its native resolution.
pub fn load_image_native(path: &Path) -> Result<ImageTensor> {
    Ok(rgb_to_tensor(&decode_rgb(path)?))
}

fn decode_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).at(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroSized(path.to_path_buf()));
    }
    Ok(img.to_luma8())
}

/// Reads an 8-bit grayscale map as values in `[0,1]`.
pub fn load_gray_map(path: &Path) -> Result<SaliencyMap> {
    let g = decode_gray(path)?;
    SaliencyMap::from_u8(g.height() as usize, g.width() as usize, g.as_raw())
}

/// Reads a ground-truth mask (foreground where the byte exceeds 127).
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let g = decode_gray(path)?;
    BinaryMask::from_gray(g.height() as usize, g.width() as usize, g.as_raw())
}

pub fn save_gray_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_raw(map.width as u32, map.height as u32, map.to_u8()).expect("buffer size");
    img.save(path).at(path)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes = mask.values.iter().map(|&v| v * 255).collect();
    let img: GrayImage = ImageBuffer::from_raw(mask.width as u32, mask.height as u32, bytes).expect("buffer size");
    img.save(path).at(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Plain,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub num_categories: usize,
    pub background_mode: BackgroundMode,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(Error::Config("synthetic set needs at least 2 categories".into()));
        }
        if self.num_categories > ShapeFamily::ALL.len() {
            return Err(Error::Config(format!(
                "synthetic set supports at most {} categories",
                ShapeFamily::ALL.len()
            )));
        }
        if self.num_images < self.num_categories {
            return Err(Error::Config("num_images must be at least num_categories".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        Ok(())
    }
}

/// One shape family per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Diamond,
    ];

    pub fn for_category(k: usize) -> ShapeFamily {
        Self::ALL[k % Self::ALL.len()]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Diamond => "diamond",
        }
    }
}

/// A placed shape: centre and radius in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeInstance {
    pub family: ShapeFamily,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl ShapeInstance {
    /// Whether the point (pixel centres are at `+0.5`) lies inside the shape.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.radius);
        match self.family {
            ShapeFamily::Disk => dx * dx + dy * dy <= r * r,
            ShapeFamily::Square => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
            ShapeFamily::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeFamily::Cross => (dx.abs() <= r && dy.abs() <= r / 3.0) || (dy.abs() <= r && dx.abs() <= r / 3.0),
            ShapeFamily::Diamond => dx.abs() + dy.abs() <= r,
            ShapeFamily::Triangle => {
                // Upward equilateral triangle with circumradius r.
                let s3 = 3f64.sqrt();
                let top = (0.0, -r);
                let left = (-r * s3 / 2.0, r / 2.0);
                let right = (r * s3 / 2.0, r / 2.0);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (e1, e2, e3) = (edge(top, right), edge(right, left), edge(left, top));
                (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> BinaryMask {
        let mut values = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                values[y * size + x] = u8::from(self.contains(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        BinaryMask {
            height: size,
            width: size,
            values,
        }
    }
}

/// Foreground fraction bounds enforced on every generated mask.
pub const SYNTHETIC_FG_RANGE: (f64, f64) = (0.05, 0.6);

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One rendered synthetic sample.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub shape: ShapeInstance,
    pub category: usize,
}

/// Renders sample `index` of a synthetic set. Each sample draws from its own
/// RNG stream, so samples are independent of generation order.
pub fn render_synthetic(config: &SyntheticConfig, index: usize) -> SyntheticSample {
    let size = config.image_size;
    let category = index % config.num_categories;
    let family = ShapeFamily::for_category(category);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);

    let (lo, hi) = SYNTHETIC_FG_RANGE;
    let s = size as f64;
    let (shape, mask) = loop {
        let radius = rng.random_range(0.12 * s..0.42 * s);
        let margin = radius.min(s / 2.0 - 1.0);
        let cx = rng.random_range(margin..=s - margin);
        let cy = rng.random_range(margin..=s - margin);
        let shape = ShapeInstance { family, cx, cy, radius };
        let mask = shape.rasterize(size);
        let frac = mask.foreground() as f64 / (size * size) as f64;
        if (lo..=hi).contains(&frac) {
            break (shape, mask);
        }
    };

    let hue = category as f64 / config.num_categories as f64 + rng.random_range(-0.02..0.02);
    let fg = hsv_to_rgb(hue, rng.random_range(0.75..0.95), rng.random_range(0.8..0.95));
    let bg_base = rng.random_range(0.25..0.6);
    let tint = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let (freq, phase, angle) = (
        rng.random_range(0.15..0.5),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::PI),
    );
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let inside = mask.values[y * size + x] == 1;
            let noise = rng.random_range(-0.03..0.03);
            let px = if inside {
                fg.map(|c| c + noise)
            } else {
                let texture = match config.background_mode {
                    BackgroundMode::Plain => 0.0,
                    BackgroundMode::Textured => 0.15 * ((x as f64 * ca + y as f64 * sa) * freq + phase).sin(),
                };
                let g = bg_base + texture + noise;
                [g + tint[0], g + tint[1], g + tint[2]]
            };
            image.put_pixel(
                x as u32,
                y as u32,
                Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
            );
        }
    }
    SyntheticSample {
        image,
        mask,
        shape,
        category,
    }
}

/// Writes a synthetic split under `out_dir`: `images/`, `masks/`,
/// `<split>.csv` and its meta sidecar. Returns the manifest.
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: &Path, split_name: &str) -> Result<DatasetManifest> {
    config.validate()?;
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&img_dir).at(&img_dir)?;
    fs::create_dir_all(&mask_dir).at(&mask_dir)?;
    let mut entries = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let sample = render_synthetic(config, i);
        let stem = format!("{split_name}_{i:05}");
        let img_rel = format!("images/{stem}.png");
        let mask_rel = format!("masks/{stem}.png");
        let p = out_dir.join(&img_rel);
        sample.image.save(&p).at(&p)?;
        save_mask(&out_dir.join(&mask_rel), &sample.mask)?;
        entries.push(ManifestEntry {
            image_path: img_rel,
            category_id: Some(sample.category),
            label_path: Some(mask_rel),
        });
    }
    let manifest = DatasetManifest {
        entries,
        num_categories: config.num_categories,
        split_name: split_name.to_string(),
        base_dir: out_dir.to_path_buf(),
        synthetic: true,
    };
    manifest.save(&out_dir.join(format!("{split_name}.csv")))?;
    Ok(manifest)
}
