//! Localizer and classifier networks sharing one convolutional backbone.
//!
//! The backbone is three stages of 3×3 conv → ReLU → 2×2 mean-pool (total
//! stride 8). The localizer head is a 1×1 conv to `classes · modalities` CAMs
//! pooled WILDCAT-style into class scores; the classifier head is a 1×1 conv
//! to `classes` maps pooled the same way (one modality per class).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskedImage;
use crate::prob::Posterior;
use crate::tensor::Tensor;

/// Total spatial stride of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

/// Fixed input standardization `(x − INPUT_CENTER) · INPUT_GAIN` applied by
/// the backbone before its first convolution.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

/// Class activation maps: `classes · modalities` maps of `h×w` at `stride`
/// relative to the input. Maps of one class are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    maps: Tensor,
    classes: usize,
    modalities: usize,
    stride: usize,
}

impl CamStack {
    pub fn new(maps: Tensor, classes: usize, modalities: usize, stride: usize) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[0] != classes * modalities || classes == 0 {
            return Err(Error::Shape(format!(
                "cam stack {:?} does not hold {classes}×{modalities} maps",
                maps.shape()
            )));
        }
        Ok(CamStack {
            maps,
            classes,
            modalities,
            stride,
        })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    /// One map per class: the mean over that class's modalities.
    pub fn class_maps(&self) -> Tensor {
        let hw = self.height() * self.width();
        let mut out = vec![0.0; self.classes * hw];
        for (i, plane) in self.maps.data().chunks(hw).enumerate() {
            let dst = &mut out[(i / self.modalities) * hw..(i / self.modalities + 1) * hw];
            for (o, v) in dst.iter_mut().zip(plane) {
                *o += v / self.modalities as f64;
            }
        }
        Tensor::new(vec![self.classes, self.height(), self.width()], out).expect("sized above")
    }
}

/// WILDCAT pooling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Fraction of positions averaged from the top.
    pub kmax: f64,
    /// Fraction of positions averaged from the bottom; `0` disables the term.
    pub kmin: f64,
    /// Weight of the bottom term.
    pub alpha: f64,
    /// CAMs per class in the localizer head.
    pub modalities: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            kmax: 0.3,
            kmin: 0.0,
            alpha: 0.6,
            modalities: 5,
        }
    }
}

fn ceil_count(fraction: f64, n: usize) -> usize {
    // guard against 0.1 · 10 = 1.0000000000000002 rounding up to 2
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kmax > 0.0 && self.kmax <= 1.0) {
            return Err(Error::Config(format!("pool.kmax must lie in (0, 1], got {}", self.kmax)));
        }
        if !(self.kmin >= 0.0 && self.kmin < 1.0) || self.kmax + self.kmin > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "pool.kmin must lie in [0, 1) with kmax + kmin ≤ 1, got {}",
                self.kmin
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("pool.alpha must be ≥ 0, got {}", self.alpha)));
        }
        if self.modalities == 0 {
            return Err(Error::Config("pool.modalities must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of top and bottom positions selected out of `n`.
    pub fn counts(&self, n: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let top = ceil_count(self.kmax, n);
        if top == 0 {
            return Err(Error::Config(format!(
                "pool.kmax = {} selects no position out of {n}",
                self.kmax
            )));
        }
        let bottom = if self.kmin > 0.0 { ceil_count(self.kmin, n) } else { 0 };
        Ok((top, bottom))
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub modalities: usize,
    pub widths: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            classes: 2,
            modalities: 5,
            widths: [16, 32, 32],
        }
    }
}

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 10] = [
    "backbone.conv1.weight",
    "backbone.conv1.bias",
    "backbone.conv2.weight",
    "backbone.conv2.bias",
    "backbone.conv3.weight",
    "backbone.conv3.bias",
    "localizer.head.weight",
    "localizer.head.bias",
    "classifier.head.weight",
    "classifier.head.bias",
];

const BACKBONE_PARAMS: usize = 6;

/// All trainable weights. The backbone block is stored once and used by both
/// the localizer and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn shapes(config: &NetConfig) -> Vec<Vec<usize>> {
        let [w1, w2, w3] = config.widths;
        let cm = config.classes * config.modalities;
        vec![
            vec![w1, config.in_channels, 3, 3],
            vec![w1],
            vec![w2, w1, 3, 3],
            vec![w2],
            vec![w3, w2, 3, 3],
            vec![w3],
            vec![cm, w3, 1, 1],
            vec![cm],
            vec![config.classes, w3, 1, 1],
            vec![config.classes],
        ]
    }

    /// Variance-scaling initialization: `N(0, 2/fan_in)` for the backbone,
    /// `N(0, 1/fan_in)` for the heads, zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 || config.modalities == 0 || config.in_channels == 0 {
            return Err(Error::Config(format!("invalid network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = ModelParams::shapes(&config)
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let gain = if i < BACKBONE_PARAMS { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    .expect("sized above")
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    /// Rebuilds from stored tensors, checking every shape against `config`.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = ModelParams::shapes(&config);
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(&shapes).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("{name} has non-finite values")));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Inserts every parameter into `g` as a leaf; with `trainable` false they
    /// are constants.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for a [`ModelParams`] set, in storage order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn backbone(&self) -> &[Var] {
        &self.vars[..BACKBONE_PARAMS]
    }

    fn localizer_head(&self) -> (Var, Var) {
        (self.vars[6], self.vars[7])
    }

    fn classifier_head(&self) -> (Var, Var) {
        (self.vars[8], self.vars[9])
    }
}

/// Graph handles produced by [`localizer_graph`].
#[derive(Debug, Clone, Copy)]
pub struct LocalizerVars {
    /// `(classes · modalities) × h × w`
    pub cams: Var,
    /// `classes × h × w`, modality-averaged
    pub class_maps: Var,
    pub scores: Var,
    pub posterior: Var,
    /// Normalized fused map at input resolution, values in `[0, 1]`.
    pub raw_mask: Var,
}

fn check_input(g: &Graph, x: Var, in_channels: usize) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != in_channels {
        return Err(Error::Shape(format!(
            "expected a {in_channels}×H×W image, got {s:?}"
        )));
    }
    if !s[1].is_multiple_of(BACKBONE_STRIDE) || !s[2].is_multiple_of(BACKBONE_STRIDE) || s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape(format!(
            "image {}×{} is not divisible by the backbone stride {BACKBONE_STRIDE}",
            s[1], s[2]
        )));
    }
    Ok((s[1], s[2]))
}

/// Shared feature extractor; `x: C×H×W` → `widths[2] × H/8 × W/8`.
pub fn backbone_graph(g: &mut Graph, x: Var, pv: &ParamVars, config: &NetConfig) -> Result<Var> {
    check_input(g, x, config.in_channels)?;
    let centered = g.add_scalar(x, -INPUT_CENTER);
    let mut h = g.scale(centered, INPUT_GAIN);
    for stage in pv.backbone().chunks(2) {
        let conv = g.conv2d(h, stage[0], stage[1])?;
        let act = g.relu(conv);
        h = g.mean_pool2(act)?;
    }
    Ok(h)
}

/// WILDCAT pooling of `classes × h × w` maps into class scores.
pub fn wildcat_graph(g: &mut Graph, maps: Var, pool: &PoolConfig) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    let (top, bottom) = pool.counts(s[1] * s[2])?;
    let hi = g.top_k_mean(maps, top)?;
    if bottom == 0 {
        return Ok(hi);
    }
    let lo = g.bottom_k_mean(maps, bottom)?;
    let lo = g.scale(lo, pool.alpha);
    g.add(hi, lo)
}

/// Forward pass of the localizer: CAMs, posterior `p̂` and the fused mask.
pub fn localizer_graph(
    g: &mut Graph,
    x: Var,
    pv: &ParamVars,
    config: &NetConfig,
    pool: &PoolConfig,
) -> Result<LocalizerVars> {
    let (height, width) = check_input(g, x, config.in_channels)?;
    let features = backbone_graph(g, x, pv, config)?;
    let (w, b) = pv.localizer_head();
    let cams = g.conv2d(features, w, b)?;
    let class_maps = g.group_mean(cams, config.modalities)?;
    let scores = wildcat_graph(g, class_maps, pool)?;
    let posterior = g.softmax(scores)?;
    let fused = g.weighted_channel_sum(class_maps, posterior)?;
    let normalized = g.min_max_normalize(fused);
    let raw_mask = g.upsample_bilinear(normalized, height, width)?;
    Ok(LocalizerVars {
        cams,
        class_maps,
        scores,
        posterior,
        raw_mask,
    })
}

/// Forward pass of the classifier on a (masked) image; returns the posterior.
pub fn classifier_graph(
    g: &mut Graph,
    x: Var,
    pv: &ParamVars,
    config: &NetConfig,
    pool: &PoolConfig,
) -> Result<Var> {
    let features = backbone_graph(g, x, pv, config)?;
    let (w, b) = pv.classifier_head();
    let maps = g.conv2d(features, w, b)?;
    let scores = wildcat_graph(g, maps, pool)?;
    g.softmax(scores)
}

fn posterior_of(g: &Graph, v: Var) -> Result<Posterior> {
    Posterior::new(g.value(v).data().to_vec())
}

/// Backbone features of an image under fixed parameters.
pub fn backbone_forward(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let xv = g.constant(x.clone());
    let f = backbone_graph(&mut g, xv, &pv, params.config())?;
    Ok(g.value(f).clone())
}

/// Class scores from a CAM stack: per class, modalities are averaged, then
/// `mean(top ⌈kmax·hw⌉) + α · mean(bottom ⌈kmin·hw⌉)`.
pub fn wildcat_pool(cams: &CamStack, pool: &PoolConfig) -> Result<Vec<f64>> {
    let hw = cams.height() * cams.width();
    let (top, bottom) = pool.counts(hw)?;
    let per_class = cams.class_maps();
    Ok(per_class
        .data()
        .chunks(hw)
        .map(|plane| {
            let mean_of = |idx: Vec<usize>| idx.iter().map(|&i| plane[i]).sum::<f64>() / idx.len() as f64;
            let mut score = mean_of(kernels::select_indices(plane, top, true));
            if bottom > 0 {
                score += pool.alpha * mean_of(kernels::select_indices(plane, bottom, false));
            }
            score
        })
        .collect())
}

/// Localizer output under fixed parameters.
#[derive(Debug, Clone)]
pub struct LocalizerOutput {
    pub cams: CamStack,
    /// Fused, normalized map at input resolution.
    pub raw_mask: Tensor,
    pub posterior: Posterior,
}

pub fn localizer_forward(x: &Tensor, params: &ModelParams, pool: &PoolConfig) -> Result<LocalizerOutput> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let xv = g.constant(x.clone());
    let out = localizer_graph(&mut g, xv, &pv, params.config(), pool)?;
    let cfg = params.config();
    Ok(LocalizerOutput {
        cams: CamStack::new(g.value(out.cams).clone(), cfg.classes, cfg.modalities, BACKBONE_STRIDE)?,
        raw_mask: g.value(out.raw_mask).clone(),
        posterior: posterior_of(&g, out.posterior)?,
    })
}

pub fn classifier_forward(x: &MaskedImage, params: &ModelParams, pool: &PoolConfig) -> Result<Posterior> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let xv = g.constant(x.pixels.clone());
    let p = classifier_graph(&mut g, xv, &pv, params.config(), pool)?;
    posterior_of(&g, p)
}
