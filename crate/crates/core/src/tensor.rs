//! Dense planar maps: multi-channel feature maps, RGB images, single-channel
//! saliency maps and binary masks, plus bilinear resampling.

use crate::error::{Error, Result};

/// A `channels × height × width` block of reals, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Spatial mean per channel.
    pub fn global_average(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }

    /// Bilinear resize of every channel.
    pub fn resized(&self, height: usize, width: usize) -> FeatureMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let op = Resize::new(self.height, self.width, height, width);
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            op.apply(self.plane(c), out.plane_mut(c));
        }
        out
    }

    /// Channel concatenation of maps with equal spatial size.
    pub fn concat(parts: &[&FeatureMap]) -> FeatureMap {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        FeatureMap {
            channels,
            height: h,
            width: w,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// An RGB image with every channel value in `[0, 1]`, stored planar.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(FeatureMap);

impl ImageTensor {
    pub fn new(pixels: FeatureMap) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 channels".into(),
                actual: format!("{} channels", pixels.channels),
            });
        }
        if pixels.height == 0 || pixels.width == 0 {
            return Err(Error::ShapeMismatch {
                expected: "non-empty image".into(),
                actual: "0 pixels".into(),
            });
        }
        if pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("image values outside [0,1]".into()));
        }
        Ok(Self(pixels))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn pixels(&self) -> &FeatureMap {
        &self.0
    }

    /// `(r, g, b)` at row `y`, column `x`.
    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let n = self.0.plane_len();
        let i = y * self.0.width + x;
        [self.0.data[i], self.0.data[n + i], self.0.data[2 * n + i]]
    }

    pub fn resized(&self, height: usize, width: usize) -> ImageTensor {
        let mut r = self.0.resized(height, width);
        // Bilinear weights are convex, but guard against rounding drift.
        for v in &mut r.data {
            *v = v.clamp(0.0, 1.0);
        }
        ImageTensor(r)
    }

    pub fn into_inner(self) -> FeatureMap {
        self.0
    }
}

/// Single-channel map with values in `[0, 1]` (predictions, soft labels).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}"),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn resized(&self, height: usize, width: usize) -> SaliencyMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let op = Resize::new(self.height, self.width, height, width);
        let mut values = vec![0.0; height * width];
        op.apply(&self.values, &mut values);
        SaliencyMap { height, width, values }
    }

    pub fn same_shape(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}"),
                actual: format!("{}x{}", self.height, self.width),
            });
        }
        Ok(())
    }

    /// Quantizes to 8-bit levels, as stored on disk.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn horizontal_flip(&self) -> SaliencyMap {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        SaliencyMap {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

impl From<&BinaryMask> for SaliencyMap {
    fn from(mask: &BinaryMask) -> Self {
        SaliencyMap {
            height: mask.height,
            width: mask.width,
            values: mask.values.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

/// Strictly binary `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}"),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Config("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Reads an 8-bit mask: values above 127 are foreground.
    pub fn from_gray(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| u8::from(b > 127)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn horizontal_flip(&self) -> BinaryMask {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resampling.
#[derive(Debug, Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            lo.push(x0);
            hi.push(x1);
            frac.push(if x1 == x0 { 0.0 } else { x - x0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize between two fixed plane sizes, with its adjoint for
/// backpropagation. Sample positions use the half-pixel convention, so a
/// same-size resize is the identity.
#[derive(Debug, Clone)]
pub struct Resize {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    rows: Taps,
    cols: Taps,
}

impl Resize {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        assert!(src_h > 0 && src_w > 0 && dst_h > 0 && dst_w > 0, "empty resize");
        Self {
            src_h,
            src_w,
            dst_h,
            dst_w,
            rows: Taps::new(src_h, dst_h),
            cols: Taps::new(src_w, dst_w),
        }
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.src_h * self.src_w);
        debug_assert_eq!(dst.len(), self.dst_h * self.dst_w);
        // Horizontal pass into a src_h × dst_w buffer, then vertical.
        let mut tmp = vec![0.0; self.src_h * self.dst_w];
        for y in 0..self.src_h {
            let row = &src[y * self.src_w..(y + 1) * self.src_w];
            let out = &mut tmp[y * self.dst_w..(y + 1) * self.dst_w];
            for x in 0..self.dst_w {
                let f = self.cols.frac[x];
                out[x] = row[self.cols.lo[x]] * (1.0 - f) + row[self.cols.hi[x]] * f;
            }
        }
        for y in 0..self.dst_h {
            let f = self.rows.frac[y];
            let a = &tmp[self.rows.lo[y] * self.dst_w..(self.rows.lo[y] + 1) * self.dst_w];
            let b = &tmp[self.rows.hi[y] * self.dst_w..(self.rows.hi[y] + 1) * self.dst_w];
            let out = &mut dst[y * self.dst_w..(y + 1) * self.dst_w];
            for x in 0..self.dst_w {
                out[x] = a[x] * (1.0 - f) + b[x] * f;
            }
        }
    }

    /// Accumulates the transpose of [`Resize::apply`]: `src_grad += Rᵀ dst_grad`.
    pub fn adjoint(&self, dst_grad: &[f64], src_grad: &mut [f64]) {
        let mut tmp = vec![0.0; self.src_h * self.dst_w];
        for y in 0..self.dst_h {
            let f = self.rows.frac[y];
            let g = &dst_grad[y * self.dst_w..(y + 1) * self.dst_w];
            let (lo, hi) = (self.rows.lo[y], self.rows.hi[y]);
            for x in 0..self.dst_w {
                tmp[lo * self.dst_w + x] += g[x] * (1.0 - f);
                tmp[hi * self.dst_w + x] += g[x] * f;
            }
        }
        for y in 0..self.src_h {
            let t = &tmp[y * self.dst_w..(y + 1) * self.dst_w];
            let out = &mut src_grad[y * self.src_w..(y + 1) * self.src_w];
            for x in 0..self.dst_w {
                let f = self.cols.frac[x];
                out[self.cols.lo[x]] += t[x] * (1.0 - f);
                out[self.cols.hi[x]] += t[x] * f;
            }
        }
    }
}
