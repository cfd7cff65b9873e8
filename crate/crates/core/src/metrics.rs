//! Saliency evaluation: MAE, F-measure (β² = 0.3), S-measure and E-measure,
//! plus dataset-level aggregation and the report CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_gray_map, load_mask};
use crate::error::{Error, IoContext, Result};
use crate::exec::ExecMode;
use crate::tensor::{BinaryMask, SaliencyMap};

pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;

fn check_pair(p: &SaliencyMap, g: &BinaryMask) -> Result<()> {
    p.same_shape(g.height, g.width)?;
    if p.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction contains non-finite values".into()));
    }
    Ok(())
}

pub fn mae(p: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_pair(p, g)?;
    let sum: f64 = p
        .values
        .iter()
        .zip(&g.values)
        .map(|(&p, &g)| (p - f64::from(g)).abs())
        .sum();
    Ok(sum / p.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FProtocol {
    /// Maximum over the 255 thresholds `k/255`, `k = 1..=255`.
    #[default]
    MaxOverThresholds,
    /// Single threshold at twice the mean prediction, capped at 1.
    Adaptive,
}

impl fmt::Display for FProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FProtocol::MaxOverThresholds => "max_over_thresholds",
            FProtocol::Adaptive => "adaptive",
        })
    }
}

impl FromStr for FProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "max_over_thresholds" => Ok(FProtocol::MaxOverThresholds),
            "adaptive" | "adp" => Ok(FProtocol::Adaptive),
            _ => Err(Error::Config(format!("unknown F-measure protocol {s:?}"))),
        }
    }
}

fn f_score(tp: f64, pred_fg: f64, gt_fg: f64, beta2: f64) -> f64 {
    if pred_fg == 0.0 || tp == 0.0 {
        return 0.0;
    }
    let prec = tp / pred_fg;
    let rec = tp / gt_fg;
    (1.0 + beta2) * prec * rec / (beta2 * prec + rec)
}

/// Predictions are quantized to 8-bit levels, as if read back from PNG.
fn levels(p: &SaliencyMap) -> Vec<usize> {
    p.values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as usize)
        .collect()
}

/// Smallest level selected by the adaptive rule `q ≥ min(2·mean(q), 1), q > 0`.
fn adaptive_level(lv: &[usize]) -> usize {
    let mean = lv.iter().map(|&l| l as f64 / 255.0).sum::<f64>() / lv.len() as f64;
    let thr = (2.0 * mean).min(1.0);
    (1..=255).find(|&k| k as f64 / 255.0 >= thr).unwrap_or(255)
}

/// F-measure with `p ≥ t` as predicted foreground. An all-background ground
/// truth scores 0 and logs a warning.
pub fn f_measure(p: &SaliencyMap, g: &BinaryMask, beta2: f64, protocol: FProtocol) -> Result<f64> {
    check_pair(p, g)?;
    let gt_fg = g.foreground() as f64;
    if gt_fg == 0.0 {
        warn!("F-measure undefined for an all-background ground truth; scoring 0");
        return Ok(0.0);
    }
    let lv = levels(p);
    // hist[k]: (pixels at level k, of which foreground)
    let mut hist = [(0usize, 0usize); 256];
    for (&l, &gv) in lv.iter().zip(&g.values) {
        hist[l].0 += 1;
        hist[l].1 += usize::from(gv);
    }
    let mut best = 0.0f64;
    let mut at_level = [0.0; 256];
    let (mut pred, mut tp) = (0usize, 0usize);
    for k in (1..=255).rev() {
        pred += hist[k].0;
        tp += hist[k].1;
        at_level[k] = f_score(tp as f64, pred as f64, gt_fg, beta2);
        best = best.max(at_level[k]);
    }
    Ok(match protocol {
        FProtocol::MaxOverThresholds => best,
        FProtocol::Adaptive => at_level[adaptive_level(&lv)],
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn s_object(values: &[f64]) -> f64 {
    let n = values.len();
    let x = mean(values);
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn object_score(p: &SaliencyMap, g: &BinaryMask) -> f64 {
    let fg: Vec<f64> = p
        .values
        .iter()
        .zip(&g.values)
        .filter(|(_, &g)| g == 1)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = p
        .values
        .iter()
        .zip(&g.values)
        .filter(|(_, &g)| g == 0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / p.len() as f64;
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// Structural similarity of one rectangular block (`N − 1 + eps` normalizer).
fn block_ssim(p: &SaliencyMap, g: &BinaryMask, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut sp, mut sg) = (0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            sp += p.get(y, x);
            sg += f64::from(g.get(y, x));
        }
    }
    let (mx, my) = (sp / n, sg / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = p.get(y, x) - mx;
            let dy = f64::from(g.get(y, x)) - my;
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    }
    let d = n - 1.0 + f64::EPSILON;
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based, rounded centroid of the foreground (column, row).
fn centroid(g: &BinaryMask) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..g.height {
        for x in 0..g.width {
            if g.get(y, x) == 1 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (
            (g.width as f64 / 2.0).round() as usize,
            (g.height as f64 / 2.0).round() as usize,
        );
    }
    ((sx / n as f64).round() as usize, (sy / n as f64).round() as usize)
}

fn region_score(p: &SaliencyMap, g: &BinaryMask) -> f64 {
    let (h, w) = (g.height, g.width);
    let (cx, cy) = centroid(g);
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block_ssim(p, g, 0, cy, 0, cx)
        + w2 * block_ssim(p, g, 0, cy, cx, w)
        + w3 * block_ssim(p, g, cy, h, 0, cx)
        + w4 * block_ssim(p, g, cy, h, cx, w)
}

/// Structure measure: `α·object + (1 − α)·region`, clamped to `[0, 1]`.
/// Degenerate ground truths score `1 − mean(p)` (all background) or
/// `mean(p)` (all foreground).
pub fn s_measure(p: &SaliencyMap, g: &BinaryMask, alpha: f64) -> Result<f64> {
    check_pair(p, g)?;
    let fg = g.foreground();
    if fg == 0 {
        return Ok(1.0 - p.mean());
    }
    if fg == g.len() {
        return Ok(p.mean());
    }
    let s = alpha * object_score(p, g) + (1.0 - alpha) * region_score(p, g);
    Ok(s.clamp(0.0, 1.0))
}

/// Enhanced-alignment measure of the adaptively binarized prediction
/// (`p ≥ min(2·mean(p), 1)` and `p > 0`).
pub fn e_measure(p: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check_pair(p, g)?;
    let n = p.len() as f64;
    let thr = (2.0 * p.mean()).min(1.0);
    // counts[fm][gt]
    let mut counts = [[0usize; 2]; 2];
    for (&v, &gv) in p.values.iter().zip(&g.values) {
        let fm = usize::from(v >= thr && v > 0.0);
        counts[fm][usize::from(gv)] += 1;
    }
    let gt_fg = (counts[0][1] + counts[1][1]) as f64;
    let fm_fg = (counts[1][0] + counts[1][1]) as f64;
    if gt_fg == 0.0 {
        return Ok(1.0 - fm_fg / n);
    }
    if gt_fg == n {
        return Ok(fm_fg / n);
    }
    let (mu_fm, mu_gt) = (fm_fg / n, gt_fg / n);
    let mut sum = 0.0;
    for (fm, row) in counts.iter().enumerate() {
        for (gt, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let a = fm as f64 - mu_fm;
            let b = gt as f64 - mu_gt;
            let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
            sum += c as f64 * (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    Ok(sum / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub s: f64,
    pub e: f64,
    pub f: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by id.
    pub per_image: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
    pub f_protocol: FProtocol,
    /// Ground-truth stems without a prediction.
    pub missing: Vec<String>,
}

pub fn score_pair(id: &str, p: &SaliencyMap, g: &BinaryMask, protocol: FProtocol) -> Result<ImageMetrics> {
    let p = if (p.height, p.width) == (g.height, g.width) {
        p.clone()
    } else {
        p.resized(g.height, g.width)
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        s: s_measure(&p, g, S_ALPHA)?,
        e: e_measure(&p, g)?,
        f: f_measure(&p, g, BETA2, protocol)?,
        mae: mae(&p, g)?,
    })
}

impl MetricReport {
    /// Aggregates per-image scores; the result does not depend on input order.
    pub fn from_scores(mut per_image: Vec<ImageMetrics>, f_protocol: FProtocol, missing: Vec<String>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::NoPairs);
        }
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len() as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let mean = ImageMetrics {
            id: "MEAN".into(),
            s: sum(|m| m.s),
            e: sum(|m| m.e),
            f: sum(|m| m.f),
            mae: sum(|m| m.mae),
        };
        Ok(Self {
            per_image,
            mean,
            f_protocol,
            missing,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,s_measure,e_measure,f_measure,mae\n");
        for m in self.per_image.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!("{},{:.4},{:.4},{:.4},{:.4}\n", m.id, m.s, m.e, m.f, m.mae));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).at(path)
    }

    /// One-line, three-decimal summary.
    pub fn summary(&self) -> String {
        format!(
            "S {:.3}  E {:.3}  F({}) {:.3}  MAE {:.3}  over {} images",
            self.mean.s,
            self.mean.e,
            self.f_protocol,
            self.mean.f,
            self.mean.mae,
            self.per_image.len()
        )
    }
}

/// Scores in-memory `(id, prediction, ground truth)` triples.
pub fn evaluate_pairs(
    pairs: &[(String, SaliencyMap, BinaryMask)],
    protocol: FProtocol,
    exec: ExecMode,
) -> Result<MetricReport> {
    let scores = exec.map_slice(pairs, |(id, p, g)| score_pair(id, p, g, protocol));
    MetricReport::from_scores(scores.into_iter().collect::<Result<_>>()?, protocol, Vec::new())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).at(dir)? {
        let path = e.at(dir)?.path();
        if path
            .extension()
            .and_then(|x| x.to_str())
            .map(|x| x.eq_ignore_ascii_case("png"))
            == Some(true)
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs `<pred_dir>/<stem>.png` with `<gt_dir>/<stem>.png` and scores every
/// pair at the ground truth's resolution.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, protocol: FProtocol, exec: ExecMode) -> Result<MetricReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (stem, gt) in &gts {
        match preds.get(stem) {
            Some(p) => jobs.push((stem.clone(), p.clone(), gt.clone())),
            None => missing.push(stem.clone()),
        }
    }
    if !missing.is_empty() {
        warn!(
            "{} ground-truth maps have no prediction: {}",
            missing.len(),
            missing.join(", ")
        );
    }
    if jobs.is_empty() {
        return Err(Error::NoPairs);
    }
    let scores = exec.map_slice(&jobs, |(id, p, g)| {
        let p = load_gray_map(p)?;
        let g = load_mask(g)?;
        score_pair(id, &p, &g, protocol)
    });
    MetricReport::from_scores(scores.into_iter().collect::<Result<_>>()?, protocol, missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p2(v: [f64; 4]) -> SaliencyMap {
        SaliencyMap::new(2, 2, v.to_vec()).unwrap()
    }

    fn g2(v: [u8; 4]) -> BinaryMask {
        BinaryMask::new(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_fixtures() {
        let p = p2([1.0, 0.0, 0.0, 0.0]);
        let g = g2([1, 1, 0, 0]);
        assert!((mae(&p, &g).unwrap() - 0.25).abs() < 1e-12);
        for proto in [FProtocol::MaxOverThresholds, FProtocol::Adaptive] {
            assert!((f_measure(&p, &g, BETA2, proto).unwrap() - 0.8125).abs() < 1e-12);
        }
        assert_eq!(mae(&p2([0.5; 4]), &g).unwrap(), 0.5);
        assert_eq!(
            f_measure(&p2([0.0; 4]), &g, BETA2, FProtocol::MaxOverThresholds).unwrap(),
            0.0
        );
        assert_eq!(f_measure(&p2([0.0; 4]), &g, BETA2, FProtocol::Adaptive).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let g = BinaryMask::new(3, 3, vec![0, 1, 1, 0, 1, 0, 0, 0, 0]).unwrap();
        let p = SaliencyMap::from(&g);
        assert!((s_measure(&p, &g, S_ALPHA).unwrap() - 1.0).abs() < 1e-12);
        assert!((e_measure(&p, &g).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f_measure(&p, &g, BETA2, FProtocol::MaxOverThresholds).unwrap(), 1.0);
        assert_eq!(f_measure(&p, &g, BETA2, FProtocol::Adaptive).unwrap(), 1.0);
        assert_eq!(mae(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_ground_truth() {
        let bg = g2([0; 4]);
        assert_eq!(s_measure(&p2([0.0; 4]), &bg, S_ALPHA).unwrap(), 1.0);
        assert!((s_measure(&p2([0.2; 4]), &bg, S_ALPHA).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(s_measure(&p2([0.3; 4]), &g2([1; 4]), S_ALPHA).unwrap(), 0.3);
        assert_eq!(
            f_measure(&p2([1.0; 4]), &bg, BETA2, FProtocol::MaxOverThresholds).unwrap(),
            0.0
        );
        assert_eq!(e_measure(&p2([0.0; 4]), &bg).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = SaliencyMap::filled(3, 2, 0.5);
        assert!(mae(&p, &g2([0; 4])).is_err());
        assert!(s_measure(&p, &g2([0; 4]), S_ALPHA).is_err());
    }

    #[test]
    fn report_csv_and_order() {
        let a = ("b".to_string(), p2([1.0, 0.0, 0.0, 0.0]), g2([1, 1, 0, 0]));
        let b = ("a".to_string(), p2([1.0, 1.0, 0.0, 0.0]), g2([1, 1, 0, 0]));
        let r1 = evaluate_pairs(
            &[a.clone(), b.clone()],
            FProtocol::MaxOverThresholds,
            ExecMode::Sequential,
        )
        .unwrap();
        let r2 = evaluate_pairs(&[b, a], FProtocol::MaxOverThresholds, ExecMode::Parallel).unwrap();
        assert_eq!(r1, r2);
        let csv = r1.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,s_measure,e_measure,f_measure,mae");
        assert!(lines[1].starts_with("a,1.0000,1.0000,1.0000,0.0000"));
        assert!(lines[3].starts_with("MEAN,"));
        assert!(lines[3].ends_with(",0.1250"));
        assert!(matches!(
            evaluate_pairs(&[], FProtocol::Adaptive, ExecMode::Sequential),
            Err(Error::NoPairs)
        ));
    }
}
