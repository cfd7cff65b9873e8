//! Stage-2 encoder–decoder saliency network.
//!
//! Each of F³, F⁴, F⁵ passes two 3×3 convolutions (with ReLU) to
//! `mid_channels`; the F⁵ and F⁴ branches are bilinearly upsampled to the F³
//! branch size, the three are concatenated, and one 3×3 convolution plus a
//! sigmoid gives the prediction, which is finally upsampled to the input
//! resolution. No post-processing happens at inference.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneKind, Pyramid};
use crate::classifier::ClassifierModel;
use crate::datasets::{load_image, save_gray_map, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::exec::ExecMode;
use crate::nn::{sigmoid, Conv2d, ConvCache, Layer, ParamAlloc, Sequential, SequentialCache};
use crate::tensor::{FeatureMap, ImageTensor, Resize, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mid_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { mid_channels: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    branches: [Sequential; 3],
    fuse: Conv2d,
}

impl Decoder {
    pub fn new(alloc: &mut ParamAlloc, in_channels: [usize; 3], cfg: DecoderConfig) -> Result<Self> {
        if cfg.mid_channels == 0 {
            return Err(Error::Config("mid_channels must be at least 1".into()));
        }
        let mid = cfg.mid_channels;
        let branch = |alloc: &mut ParamAlloc, c: usize| {
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(alloc, c, mid, 3, 1, true)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(alloc, mid, mid, 3, 1, true)),
                Layer::Relu,
            ])
        };
        let branches = [
            branch(alloc, in_channels[0]),
            branch(alloc, in_channels[1]),
            branch(alloc, in_channels[2]),
        ];
        let fuse = Conv2d::new(alloc, 3 * mid, 1, 3, 1, true);
        Ok(Self { cfg, branches, fuse })
    }

    /// Parameter range of the final fusion convolution's weights.
    pub fn fuse_weight_range(&self) -> std::ops::Range<usize> {
        self.fuse.weight_range()
    }

    fn init(&self, params: &mut [f64], rng: &mut ChaCha8Rng) {
        for b in &self.branches {
            b.init_he(params, rng);
        }
        // Small fusion weights keep a fresh decoder's output near the prior
        // whatever the branch activations look like.
        let fan_in = (self.fuse.in_channels * 9) as f64;
        self.fuse
            .init_normal(params, rng, FUSE_INIT_GAIN * (1.0 / fan_in).sqrt());
        if let Some(r) = self.fuse.bias_range() {
            params[r].fill((OUTPUT_PRIOR / (1.0 - OUTPUT_PRIOR)).ln());
        }
    }
}

/// Mean saliency of a freshly initialized decoder. Kept below the 0.4
/// binarization threshold so that early self-calibration targets P′ start
/// out as background instead of locking the whole image in as foreground.
pub const OUTPUT_PRIOR: f64 = 0.35;

const FUSE_INIT_GAIN: f64 = 0.1;

fn power_of_two_ratio(big: usize, small: usize) -> bool {
    small > 0 && big >= small && big.is_multiple_of(small) && (big / small).is_power_of_two()
}

fn check_pyramid(p: &Pyramid) -> Result<()> {
    let ok = power_of_two_ratio(p.f3.height, p.f4.height)
        && power_of_two_ratio(p.f3.width, p.f4.width)
        && power_of_two_ratio(p.f4.height, p.f5.height)
        && power_of_two_ratio(p.f4.width, p.f5.width);
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: "F3 >= F4 >= F5 related by powers of two".into(),
            actual: format!(
                "{}x{}, {}x{}, {}x{}",
                p.f3.height, p.f3.width, p.f4.height, p.f4.width, p.f5.height, p.f5.width
            ),
        })
    }
}

pub struct DecodeCache {
    branches: [SequentialCache; 3],
    branch_shapes: [(usize, usize, usize); 3],
    fuse: ConvCache,
    low: Vec<f64>,
    low_size: (usize, usize),
    out_size: (usize, usize),
}

/// Fuses the pyramid into a prediction of size `out_h × out_w`.
pub fn decode(decoder: &Decoder, params: &[f64], pyramid: &Pyramid, out_h: usize, out_w: usize) -> Result<SaliencyMap> {
    Ok(decode_with_cache(decoder, params, pyramid, out_h, out_w)?.0)
}

fn decode_with_cache(
    decoder: &Decoder,
    params: &[f64],
    pyramid: &Pyramid,
    out_h: usize,
    out_w: usize,
) -> Result<(SaliencyMap, DecodeCache)> {
    check_pyramid(pyramid)?;
    let (h3, w3) = (pyramid.f3.height, pyramid.f3.width);
    let (b3, c3) = decoder.branches[0].forward(params, &pyramid.f3);
    let (b4, c4) = decoder.branches[1].forward(params, &pyramid.f4);
    let (b5, c5) = decoder.branches[2].forward(params, &pyramid.f5);
    let shapes = [b3.shape(), b4.shape(), b5.shape()];
    let up4 = b4.resized(h3, w3);
    let up5 = b5.resized(h3, w3);
    let cat = FeatureMap::concat(&[&up5, &up4, &b3]);
    let (z, fuse_cache) = decoder.fuse.forward(params, &cat);
    let low: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
    let low_map = SaliencyMap::new(h3, w3, low.clone())?;
    let mut out = low_map.resized(out_h, out_w);
    // Interpolating values in (0,1) stays in (0,1) up to rounding.
    for v in &mut out.values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((
        out,
        DecodeCache {
            branches: [c3, c4, c5],
            branch_shapes: shapes,
            fuse: fuse_cache,
            low,
            low_size: (h3, w3),
            out_size: (out_h, out_w),
        },
    ))
}

/// Encoder plus decoder over one flat parameter vector. The backbone occupies
/// the leading slice, laid out exactly as in [`ClassifierModel`].
#[derive(Debug, Clone)]
pub struct SaliencyModel {
    pub backbone: Backbone,
    pub decoder: Decoder,
    backbone_len: usize,
    pub params: Vec<f64>,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    decode: DecodeCache,
}

impl SaliencyModel {
    pub fn layout(kind: BackboneKind, cfg: DecoderConfig) -> Result<Self> {
        let mut alloc = ParamAlloc::default();
        let backbone = Backbone::new(kind, &mut alloc);
        let backbone_len = alloc.len();
        let decoder = Decoder::new(&mut alloc, backbone.channels(), cfg)?;
        Ok(Self {
            backbone,
            decoder,
            backbone_len,
            params: vec![0.0; alloc.len()],
        })
    }

    pub fn new(kind: BackboneKind, cfg: DecoderConfig, seed: u64) -> Result<Self> {
        let mut model = Self::layout(kind, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.backbone.init(&mut model.params, &mut rng);
        model.decoder.init(&mut model.params, &mut rng);
        Ok(model)
    }

    /// Fresh decoder with the encoder copied from a stage-1 classifier when
    /// the backbones match; otherwise everything starts from scratch.
    pub fn from_classifier(classifier: &ClassifierModel, cfg: DecoderConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(classifier.backbone.kind, cfg, seed)?;
        if classifier.backbone.kind == model.backbone.kind && classifier.backbone_len() == model.backbone_len {
            model.params[..model.backbone_len].copy_from_slice(&classifier.params[..model.backbone_len]);
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    /// End-to-end prediction at the image's resolution.
    pub fn forward(&self, image: &ImageTensor) -> Result<SaliencyMap> {
        let pyr = self.backbone.features(&self.params, image.pixels());
        decode(&self.decoder, &self.params, &pyr, image.height(), image.width())
    }

    pub fn forward_train(&self, image: &ImageTensor) -> Result<(SaliencyMap, ForwardCache)> {
        let (pyr, bcache) = self.backbone.forward(&self.params, image.pixels());
        let (p, dcache) = decode_with_cache(&self.decoder, &self.params, &pyr, image.height(), image.width())?;
        Ok((
            p,
            ForwardCache {
                backbone: bcache,
                decode: dcache,
            },
        ))
    }

    /// Accumulates `d loss / d params` given `d loss / d prediction`.
    pub fn backward(&self, cache: &ForwardCache, d_pred: &[f64], grads: &mut [f64]) {
        let params = &self.params;
        let dc = &cache.decode;
        let (lh, lw) = dc.low_size;
        let (oh, ow) = dc.out_size;
        let mut d_low = vec![0.0; lh * lw];
        if (lh, lw) == (oh, ow) {
            d_low.copy_from_slice(d_pred);
        } else {
            Resize::new(lh, lw, oh, ow).adjoint(d_pred, &mut d_low);
        }
        for (d, &p) in d_low.iter_mut().zip(&dc.low) {
            *d *= p * (1.0 - p);
        }
        let dz = FeatureMap::from_vec(1, lh, lw, d_low).expect("shape");
        let dcat = self
            .decoder
            .fuse
            .backward(params, &dc.fuse, &dz, grads, true)
            .expect("input grad requested");
        let mid = self.decoder.cfg.mid_channels;
        let plane = lh * lw;
        let part = |i: usize| {
            FeatureMap::from_vec(mid, lh, lw, dcat.data[i * mid * plane..(i + 1) * mid * plane].to_vec())
                .expect("split")
        };
        // Concatenation order is (F5', F4', F3').
        let d_up5 = part(0);
        let d_up4 = part(1);
        let d_b3 = part(2);
        let down = |d_up: &FeatureMap, shape: (usize, usize, usize)| {
            let (c, h, w) = shape;
            if (h, w) == (lh, lw) {
                return d_up.clone();
            }
            let op = Resize::new(h, w, lh, lw);
            let mut out = FeatureMap::zeros(c, h, w);
            for ch in 0..c {
                op.adjoint(d_up.plane(ch), out.plane_mut(ch));
            }
            out
        };
        let d_b4 = down(&d_up4, dc.branch_shapes[1]);
        let d_b5 = down(&d_up5, dc.branch_shapes[2]);
        let b = &self.decoder.branches;
        let d3 = b[0].backward(params, &dc.branches[0], d_b3, grads, true);
        let d4 = b[1].backward(params, &dc.branches[1], d_b4, grads, true);
        let d5 = b[2].backward(params, &dc.branches[2], d_b5, grads, true);
        self.backbone.backward(params, &cache.backbone, [d3, d4, d5], grads);
    }
}

/// Writes one 8-bit grayscale prediction per manifest image into `out_dir`
/// and returns the written paths in manifest order.
pub fn infer(
    manifest: &DatasetManifest,
    model: &SaliencyModel,
    input_size: usize,
    out_dir: &Path,
    exec: ExecMode,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let results = exec.map(manifest.len(), |i| {
        let image = load_image(&manifest.image_path(i), input_size)?;
        let pred = model.forward(&image)?;
        let path = out_dir.join(format!("{}.png", manifest.entries[i].stem()));
        save_gray_map(&path, &pred)?;
        Ok::<_, Error>(path)
    });
    results.into_iter().collect()
}
