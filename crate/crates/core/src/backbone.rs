//! Convolutional encoders producing the last three feature blocks (F³, F⁴, F⁵).
//!
//! Two presets share one staged representation: `tiny`, a five-block strided
//! CNN for desk-scale runs (output stride 8, so 64-pixel inputs still give
//! an 8×8 class map), and `densenet169`, the DenseNet-169 topology
//! (growth 32, blocks 6/12/32/32, bottleneck 4×, compression 0.5).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{ChannelAffine, Conv2d, Layer, ParamAlloc, Pool, Sequential, SequentialCache};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Tiny,
    Densenet169,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Densenet169 => "densenet169",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(BackboneKind::Tiny),
            "densenet169" | "densenet-169" => Ok(BackboneKind::Densenet169),
            other => Err(format!("unknown backbone {other:?}")),
        }
    }
}

/// The three encoder outputs consumed by the classifier head and decoder.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub f3: FeatureMap,
    pub f4: FeatureMap,
    pub f5: FeatureMap,
}

#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<Sequential>,
}

struct DenseCache {
    layer_caches: Vec<SequentialCache>,
    feature_channels: Vec<usize>,
    spatial: (usize, usize),
}

impl DenseBlock {
    fn new(alloc: &mut ParamAlloc, in_channels: usize, num_layers: usize, growth: usize) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let c = in_channels + i * growth;
                Sequential::new(vec![
                    Layer::Affine(ChannelAffine::new(alloc, c)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(alloc, c, 4 * growth, 1, 1, false)),
                    Layer::Affine(ChannelAffine::new(alloc, 4 * growth)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(alloc, 4 * growth, growth, 3, 1, false)),
                ])
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, DenseCache) {
        let mut features = vec![x.clone()];
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let refs: Vec<&FeatureMap> = features.iter().collect();
            let input = FeatureMap::concat(&refs);
            let (y, cache) = layer.forward(params, &input);
            layer_caches.push(cache);
            features.push(y);
        }
        let feature_channels = features.iter().map(|f| f.channels).collect();
        let refs: Vec<&FeatureMap> = features.iter().collect();
        let out = FeatureMap::concat(&refs);
        (
            out,
            DenseCache {
                layer_caches,
                feature_channels,
                spatial: (x.height, x.width),
            },
        )
    }

    fn backward(&self, params: &[f64], cache: &DenseCache, dy: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let (h, w) = cache.spatial;
        let plane = h * w;
        // Split the output gradient into one gradient per concatenated feature.
        let mut dfeat: Vec<FeatureMap> = Vec::with_capacity(cache.feature_channels.len());
        let mut at = 0;
        for &c in &cache.feature_channels {
            let data = dy.data[at * plane..(at + c) * plane].to_vec();
            dfeat.push(FeatureMap::from_vec(c, h, w, data).expect("split"));
            at += c;
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let d_new = std::mem::replace(&mut dfeat[l + 1], FeatureMap::zeros(0, h, w));
            let d_in = layer
                .backward(params, &cache.layer_caches[l], d_new, grads, true)
                .expect("input grad requested");
            let mut at = 0;
            for f in dfeat.iter_mut().take(l + 1) {
                let n = f.data.len();
                for (a, b) in f.data.iter_mut().zip(&d_in.data[at..at + n]) {
                    *a += b;
                }
                at += n;
            }
        }
        dfeat.swap_remove(0)
    }

    fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for l in &self.layers {
            l.init_he(params, rng);
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Seq(Sequential),
    Dense(DenseBlock),
}

enum StageCache {
    Seq(SequentialCache),
    Dense(DenseCache),
}

pub struct BackboneCache {
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    stages: Vec<Stage>,
    /// Stage indices whose outputs are F³, F⁴, F⁵.
    taps: [usize; 3],
    channels: [usize; 3],
    stride: usize,
}

/// Channel widths of the tiny preset's five blocks.
/// Per-channel RGB mean and standard deviation subtracted from inputs.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Standardizes RGB inputs so zero padding sits at the mean color.
fn normalize_input(image: &FeatureMap) -> FeatureMap {
    let mut x = image.clone();
    if x.channels == 3 {
        for c in 0..3 {
            for v in x.plane_mut(c) {
                *v = (*v - INPUT_MEAN[c]) / INPUT_STD[c];
            }
        }
    }
    x
}

pub const TINY_WIDTHS: [usize; 5] = [8, 16, 32, 48, 64];
const TINY_STRIDES: [usize; 5] = [1, 2, 2, 2, 1];

impl Backbone {
    pub fn new(kind: BackboneKind, alloc: &mut ParamAlloc) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(alloc),
            BackboneKind::Densenet169 => Self::densenet169(alloc),
        }
    }

    fn tiny(alloc: &mut ParamAlloc) -> Self {
        let mut stages = Vec::new();
        let mut in_c = 3;
        for (&out_c, &stride) in TINY_WIDTHS.iter().zip(&TINY_STRIDES) {
            stages.push(Stage::Seq(Sequential::new(vec![
                Layer::Conv(Conv2d::new(alloc, in_c, out_c, 3, stride, true)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(alloc, out_c, out_c, 3, 1, true)),
                Layer::Relu,
            ])));
            in_c = out_c;
        }
        Self {
            kind: BackboneKind::Tiny,
            stages,
            taps: [2, 3, 4],
            channels: [TINY_WIDTHS[2], TINY_WIDTHS[3], TINY_WIDTHS[4]],
            stride: TINY_STRIDES.iter().product(),
        }
    }

    fn densenet169(alloc: &mut ParamAlloc) -> Self {
        const GROWTH: usize = 32;
        const BLOCKS: [usize; 4] = [6, 12, 32, 32];
        let mut stages = vec![Stage::Seq(Sequential::new(vec![
            Layer::Conv(Conv2d::new(alloc, 3, 64, 7, 2, false)),
            Layer::Affine(ChannelAffine::new(alloc, 64)),
            Layer::Relu,
            Layer::MaxPool(Pool {
                kernel: 3,
                stride: 2,
                padding: 1,
            }),
        ]))];
        let mut c = 64;
        let mut block_ends = Vec::new();
        for (i, &n) in BLOCKS.iter().enumerate() {
            stages.push(Stage::Dense(DenseBlock::new(alloc, c, n, GROWTH)));
            c += n * GROWTH;
            block_ends.push(c);
            if i + 1 < BLOCKS.len() {
                stages.push(Stage::Seq(Sequential::new(vec![
                    Layer::Affine(ChannelAffine::new(alloc, c)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(alloc, c, c / 2, 1, 1, false)),
                    Layer::AvgPool(Pool {
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    }),
                ])));
                c /= 2;
            }
        }
        stages.push(Stage::Seq(Sequential::new(vec![
            Layer::Affine(ChannelAffine::new(alloc, c)),
            Layer::Relu,
        ])));
        // stem(0) b1(1) t1(2) b2(3) t2(4) b3(5) t3(6) b4(7) norm(8)
        Self {
            kind: BackboneKind::Densenet169,
            stages,
            taps: [3, 5, 8],
            channels: [block_ends[1], block_ends[2], c],
            stride: 32,
        }
    }

    /// Channels of F³, F⁴, F⁵.
    pub fn channels(&self) -> [usize; 3] {
        self.channels
    }

    /// Total downsampling factor of F⁵ relative to the input.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for s in &self.stages {
            match s {
                Stage::Seq(seq) => seq.init_he(params, rng),
                Stage::Dense(d) => d.init(params, rng),
            }
        }
    }

    pub fn forward(&self, params: &[f64], image: &FeatureMap) -> (Pyramid, BackboneCache) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut outs = Vec::with_capacity(3);
        let mut cur = normalize_input(image);
        for (i, stage) in self.stages.iter().enumerate() {
            cur = match stage {
                Stage::Seq(seq) => {
                    let (y, c) = seq.forward(params, &cur);
                    caches.push(StageCache::Seq(c));
                    y
                }
                Stage::Dense(d) => {
                    let (y, c) = d.forward(params, &cur);
                    caches.push(StageCache::Dense(c));
                    y
                }
            };
            if self.taps.contains(&i) {
                outs.push(cur.clone());
            }
        }
        let mut outs = outs.into_iter();
        let pyramid = Pyramid {
            f3: outs.next().expect("f3"),
            f4: outs.next().expect("f4"),
            f5: outs.next().expect("f5"),
        };
        (pyramid, BackboneCache { stages: caches })
    }

    pub fn features(&self, params: &[f64], image: &FeatureMap) -> Pyramid {
        self.forward(params, image).0
    }

    /// Backpropagates gradients arriving at F³/F⁴/F⁵ into the parameters.
    pub fn backward(&self, params: &[f64], cache: &BackboneCache, d: [Option<FeatureMap>; 3], grads: &mut [f64]) {
        let [mut d3, mut d4, mut d5] = d;
        let mut g: Option<FeatureMap> = None;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let tap = if i == self.taps[2] {
                d5.take()
            } else if i == self.taps[1] {
                d4.take()
            } else if i == self.taps[0] {
                d3.take()
            } else {
                None
            };
            g = match (g, tap) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(dy) = g.take() else { continue };
            g = match (stage, &cache.stages[i]) {
                (Stage::Seq(seq), StageCache::Seq(c)) => seq.backward(params, c, dy, grads, i > 0),
                (Stage::Dense(db), StageCache::Dense(c)) => Some(db.backward(params, c, &dy, grads)),
                _ => unreachable!("stage cache mismatch"),
            };
        }
    }
}
