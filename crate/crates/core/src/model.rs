//! Network components: weight-shared feature extractor, AdaIN generator with
//! residual blocks, global discriminator and the fusion classifier with its
//! CAM head.
//!
//! Every module owns a set of named parameters in one [`ParamStore`]; names
//! are prefixed with the module (`extractor.`, `generator.`, ...) so the
//! checkpoint archive is keyed by module. Forward passes record onto a
//! [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CgnError, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard-deviation floor inside AdaIN.
pub const ADAIN_EPS: f64 = 1e-5;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Stack of stride-2 3×3 conv + ReLU blocks.
    SmallConv,
    /// Wide 5×5 stem, stride-2 blocks, one extra stride-1 conv at the end.
    AlexnetLike,
    /// Stride-2 stem followed by residual stages.
    ResnetLike,
}

impl std::str::FromStr for Backbone {
    type Err = CgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-conv" => Ok(Backbone::SmallConv),
            "alexnet-like" => Ok(Backbone::AlexnetLike),
            "resnet-like" => Ok(Backbone::ResnetLike),
            other => Err(CgnError::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Side length of the (square) input images.
    pub image_size: usize,
    pub feature_channels: usize,
    /// Number of stride-2 stages in the extractor.
    pub extractor_blocks: usize,
    pub generator_blocks: usize,
    pub alpha: f64,
    pub discriminator_depth: usize,
    /// Output channels of the fusion conv; defaults to `feature_channels`.
    pub fusion_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::SmallConv,
            image_size: 224,
            feature_channels: 64,
            extractor_blocks: 4,
            generator_blocks: 9,
            alpha: 0.5,
            discriminator_depth: 2,
            fusion_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generator_blocks == 0 {
            return Err(CgnError::Config("generator_blocks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CgnError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.feature_channels == 0 || self.extractor_blocks == 0 {
            return Err(CgnError::Config(
                "feature_channels and extractor_blocks must be positive".into(),
            ));
        }
        let (_, h, w) = self.feature_shape();
        if h == 0 || w == 0 {
            return Err(CgnError::Config(format!(
                "image_size {} too small for {} extractor stages",
                self.image_size, self.extractor_blocks
            )));
        }
        Ok(())
    }

    /// `(C, h, w)` of extracted features.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let mut s = self.image_size;
        for _ in 0..self.extractor_blocks {
            // 3×3 (or 5×5 with pad 2), stride 2, pad 1: ceil(s / 2)
            s = s.div_ceil(2);
        }
        (self.feature_channels, s, s)
    }

    pub fn fusion_channels(&self) -> usize {
        self.fusion_channels.unwrap_or(self.feature_channels)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He,
    Zero,
    /// Normal with the given std (for heads that should start near zero).
    Small(f64),
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::He => he_normal(&shape, cin * k * k, rng),
            Init::Zero => Tensor::zeros(&shape),
            Init::Small(sd) => normal_tensor(&shape, sd, rng),
        };
        Self {
            w: store.insert(format!("{name}.w"), w),
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        sd: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.insert(format!("{name}.w"), normal_tensor(&[dout, din], sd, rng)),
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], sd: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, sd).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

#[derive(Debug, Clone)]
enum Stage {
    ConvRelu(Conv),
    /// `relu(x + conv2(relu(conv1(x))))`
    Residual(Conv, Conv),
}

#[derive(Debug, Clone)]
pub struct Extractor {
    stages: Vec<Stage>,
}

impl Extractor {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.feature_channels;
        let mut stages = Vec::new();
        let name = |i: usize| format!("extractor.s{i}");
        match cfg.backbone {
            Backbone::SmallConv => {
                for i in 0..cfg.extractor_blocks {
                    let cin = if i == 0 { 1 } else { c };
                    stages.push(Stage::ConvRelu(Conv::new(store, &name(i), cin, c, 3, 2, Init::He, rng)));
                }
            }
            Backbone::AlexnetLike => {
                stages.push(Stage::ConvRelu(Conv::new(store, &name(0), 1, c, 5, 2, Init::He, rng)));
                for i in 1..cfg.extractor_blocks {
                    stages.push(Stage::ConvRelu(Conv::new(store, &name(i), c, c, 3, 2, Init::He, rng)));
                }
                let i = cfg.extractor_blocks;
                stages.push(Stage::ConvRelu(Conv::new(store, &name(i), c, c, 3, 1, Init::He, rng)));
            }
            Backbone::ResnetLike => {
                for i in 0..cfg.extractor_blocks {
                    let cin = if i == 0 { 1 } else { c };
                    stages.push(Stage::ConvRelu(Conv::new(
                        store,
                        &format!("{}.down", name(i)),
                        cin,
                        c,
                        3,
                        2,
                        Init::He,
                        rng,
                    )));
                    let a = Conv::new(store, &format!("{}.a", name(i)), c, c, 3, 1, Init::He, rng);
                    let b = Conv::new(store, &format!("{}.b", name(i)), c, c, 3, 1, Init::Small(0.01), rng);
                    stages.push(Stage::Residual(a, b));
                }
            }
        }
        Self { stages }
    }

    /// Images `(N, 1, S, S)` in [0, 1] → features `(N, C, h, w)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::ConvRelu(conv) => {
                    let y = conv.forward(g, store, h);
                    g.relu(y)
                }
                Stage::Residual(a, b) => {
                    let y = a.forward(g, store, h);
                    let y = g.relu(y);
                    let y = b.forward(g, store, y);
                    let y = g.add(h, y);
                    g.relu(y)
                }
            };
        }
        h
    }
}

/// How the generator input combines target and reference features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// `(1−α)·H_T + α·AdaIN(H_T, H_R)`
    AdaIn,
    /// `H_T`
    TargetOnly,
    /// `(1−α)·H_T + α·H_R`
    Plain,
}

#[derive(Debug, Clone)]
pub struct Generator {
    blocks: Vec<(Conv, Conv)>,
}

impl Generator {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.feature_channels;
        let blocks = (0..cfg.generator_blocks)
            .map(|i| {
                let a = Conv::new(store, &format!("generator.b{i}.a"), c, c, 3, 1, Init::He, rng);
                // zero-initialized last conv: each block starts as the identity
                let b = Conv::new(store, &format!("generator.b{i}.b"), c, c, 3, 1, Init::Zero, rng);
                (a, b)
            })
            .collect();
        Self { blocks }
    }

    pub fn mix<T: Scalar>(g: &mut Graph<T>, ht: Var, hr: Var, alpha: f64, mode: MixMode) -> Var {
        let a = T::from_f64_lossy(alpha);
        let keep = T::from_f64_lossy(1.0 - alpha);
        match mode {
            MixMode::TargetOnly => ht,
            MixMode::AdaIn => {
                let styled = g.adain(ht, hr, T::from_f64_lossy(ADAIN_EPS));
                mix_pair(g, ht, styled, keep, a)
            }
            MixMode::Plain => mix_pair(g, ht, hr, keep, a),
        }
    }

    /// Residual blocks `x + conv_b(relu(conv_a(x)))` applied to the mixed input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Var {
        let mut h = input;
        for (a, b) in &self.blocks {
            let y = a.forward(g, store, h);
            let y = g.relu(y);
            let y = b.forward(g, store, y);
            h = g.add(h, y);
        }
        h
    }
}

fn mix_pair<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, wx: T, wy: T) -> Var {
    // skip the arithmetic at the endpoints so α ∈ {0, 1} is exact
    if wy == T::zero() {
        return x;
    }
    if wx == T::zero() {
        return y;
    }
    let x = g.scale(x, wx);
    let y = g.scale(y, wy);
    g.add(x, y)
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv>,
    head: Dense,
}

impl Discriminator {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.feature_channels;
        let convs = (0..cfg.discriminator_depth)
            .map(|i| Conv::new(store, &format!("discriminator.c{i}"), c, c, 3, 1, Init::He, rng))
            .collect();
        let head = Dense::new(store, "discriminator.head", c, 1, 0.1 / (c as f64).sqrt(), rng);
        Self { convs, head }
    }

    /// Logit of "real reference feature map", shape `(N,)`.
    pub fn logit<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Var {
        let mut x = h;
        for conv in &self.convs {
            let y = conv.forward(g, store, x);
            x = g.leaky_relu(y, T::from_f64_lossy(LEAKY_SLOPE));
        }
        let pooled = g.global_avg_pool(x);
        let out = self.head.forward(g, store, pooled);
        g.column(out, 0)
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub in_channels: usize,
    fusion: Conv,
    pub head: Dense,
}

/// Graph handles of one classifier pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierOut {
    /// `(N, 2)`: benign, malignant.
    pub logits: Var,
    /// FusionLayer output `(N, F, h, w)`.
    pub fused: Var,
}

impl Classifier {
    fn new<T: Scalar>(cfg: &ModelConfig, in_channels: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.fusion_channels();
        let fusion = Conv::new(store, "classifier.fusion", in_channels, f, 3, 1, Init::He, rng);
        let head = Dense::new(store, "classifier.head", f, 2, 1.0 / (f as f64).sqrt(), rng);
        Self {
            in_channels,
            fusion,
            head,
        }
    }

    /// FusionLayer (3×3 conv + ReLU) → global average pool → 2-way linear.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> ClassifierOut {
        let y = self.fusion.forward(g, store, input);
        let fused = g.relu(y);
        let pooled = g.global_avg_pool(fused);
        let logits = self.head.forward(g, store, pooled);
        ClassifierOut { logits, fused }
    }

    /// Raw class activation map `Σ_k W[class, k] · F_k`, shape `(N, h, w)`.
    pub fn cam<T: Scalar>(&self, store: &ParamStore<T>, fused: &Tensor<T>, class: usize) -> Tensor<T> {
        class_activation(fused, store.value(self.head.w), class)
    }
}

/// `Σ_k W[class, k] · F_k` for `fused: (N, F, h, w)` and `w: (2, F)`.
pub fn class_activation<T: Scalar>(fused: &Tensor<T>, w: &Tensor<T>, class: usize) -> Tensor<T> {
    let s = fused.shape();
    let (n, f, p) = (s[0], s[1], s[2] * s[3]);
    let wr = &w.data()[class * f..(class + 1) * f];
    let mut out = vec![T::zero(); n * p];
    for i in 0..n {
        let o = &mut out[i * p..(i + 1) * p];
        for (k, &wk) in wr.iter().enumerate() {
            let ch = &fused.data()[(i * f + k) * p..(i * f + k + 1) * p];
            for (a, &v) in o.iter_mut().zip(ch) {
                *a += wk * v;
            }
        }
    }
    Tensor::from_vec(&[n, s[2], s[3]], out).expect("cam shape")
}

/// Full network: parameters plus module layouts.
#[derive(Debug, Clone)]
pub struct Cgn<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub extractor: Extractor,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub classifier: Classifier,
}

pub const MODULES: [&str; 4] = ["extractor", "generator", "discriminator", "classifier"];

impl<T: Scalar> Cgn<T> {
    /// Fresh network. `classifier_inputs` is the channel count fed to the
    /// FusionLayer (2·C when residual and target are concatenated).
    pub fn new(config: ModelConfig, classifier_inputs: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let extractor = Extractor::new(&config, &mut store, &mut rng);
        let generator = Generator::new(&config, &mut store, &mut rng);
        let discriminator = Discriminator::new(&config, &mut store, &mut rng);
        let classifier = Classifier::new(&config, classifier_inputs, &mut store, &mut rng);
        Ok(Self {
            config,
            store,
            extractor,
            generator,
            discriminator,
            classifier,
        })
    }

    pub fn module_params(&self, module: &str) -> Vec<ParamId> {
        self.store.ids_with_prefix(module).collect()
    }

    pub fn extract(&self, g: &mut Graph<T>, images: Var) -> Var {
        self.extractor.forward(g, &self.store, images)
    }

    /// `G(mix(H_T, H_R))`.
    pub fn counterfactual(&self, g: &mut Graph<T>, ht: Var, hr: Var, mode: MixMode) -> Var {
        let input = Generator::mix(g, ht, hr, self.config.alpha, mode);
        self.generator.forward(g, &self.store, input)
    }

    pub fn discriminator_logit(&self, g: &mut Graph<T>, h: Var) -> Var {
        self.discriminator.logit(g, &self.store, h)
    }

    pub fn classify(&self, g: &mut Graph<T>, input: Var) -> ClassifierOut {
        self.classifier.forward(g, &self.store, input)
    }

    pub fn check_feature_shape(&self, t: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.config.feature_shape();
        let s = t.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(CgnError::Shape(format!(
                "expected features (N, {c}, {h}, {w}), got {s:?}"
            )));
        }
        Ok(())
    }

    // -- eager conveniences --------------------------------------------------

    /// Features of a batch of images `(N, 1, S, S)`.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1..] != [1, size, size] {
            return Err(CgnError::Shape(format!(
                "expected images (N, 1, {size}, {size}), got {s:?}"
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let h = self.extract(&mut g, x);
        Ok(g.value(h).clone())
    }

    pub fn generate_counterfactual(&self, ht: &Tensor<T>, hr: &Tensor<T>, mode: MixMode) -> Result<Tensor<T>> {
        self.check_feature_shape(ht)?;
        self.check_feature_shape(hr)?;
        let mut g = Graph::new();
        let a = g.constant(ht.clone());
        let b = g.constant(hr.clone());
        let hc = self.counterfactual(&mut g, a, b, mode);
        Ok(g.value(hc).clone())
    }

    /// Probability that each feature map is a real reference map.
    pub fn discriminate(&self, h: &Tensor<T>) -> Result<Vec<T>> {
        self.check_feature_shape(h)?;
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let l = self.discriminator_logit(&mut g, x);
        Ok(g.value(l).data().iter().map(|&v| crate::autodiff::sigmoid(v)).collect())
    }

    /// `(p_malignant, min-max normalized malignant CAM)` per sample for a
    /// `(residual, h_t)` pair.
    pub fn classify_pair(&self, residual: &Tensor<T>, ht: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        self.check_feature_shape(residual)?;
        self.check_feature_shape(ht)?;
        let mut g = Graph::new();
        let r = g.constant(residual.clone());
        let t = g.constant(ht.clone());
        let input = g.concat(r, t);
        if g.shape(input)[1] != self.classifier.in_channels {
            return Err(CgnError::Shape(format!(
                "classifier expects {} input channels",
                self.classifier.in_channels
            )));
        }
        let out = self.classify(&mut g, input);
        let p = malignant_probability(g.value(out.logits));
        let cam = self.classifier.cam(&self.store, g.value(out.fused), 1);
        Ok((p, minmax_per_sample(&cam)))
    }
}

/// `softmax(logits)[1]` per row of an `(N, 2)` matrix, i.e. `σ(l1 − l0)`.
pub fn malignant_probability<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    logits
        .data()
        .chunks(2)
        .map(|r| crate::autodiff::sigmoid(r[1] - r[0]))
        .collect()
}

/// Min-max normalization of each `(h, w)` slice; constant slices → 0.
pub fn minmax_per_sample<T: Scalar>(maps: &Tensor<T>) -> Tensor<T> {
    let n = maps.dim(0);
    let p = maps.len() / n;
    let mut out = maps.data().to_vec();
    for chunk in out.chunks_mut(p) {
        let lo = chunk.iter().copied().fold(T::infinity(), T::min);
        let hi = chunk.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        for v in chunk.iter_mut() {
            *v = if range > T::zero() {
                (*v - lo) / range
            } else {
                T::zero()
            };
        }
    }
    Tensor::from_vec(maps.shape(), out).expect("same shape")
}

/// AdaIN on plain tensors `(N, C, h, w)` with the standard floor.
pub fn adain<T: Scalar>(content: &Tensor<T>, style: &Tensor<T>) -> Result<Tensor<T>> {
    if content.shape() != style.shape() || content.shape().len() != 4 {
        return Err(CgnError::Shape(format!(
            "adain needs equal NCHW shapes, got {:?} and {:?}",
            content.shape(),
            style.shape()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let s = g.constant(style.clone());
    let out = g.adain(c, s, T::from_f64_lossy(ADAIN_EPS));
    Ok(g.value(out).clone())
}

/// Batch of 8-bit images as `(N, 1, S, S)` in [0, 1].
pub fn images_to_tensor<T: Scalar>(images: &[&image::GrayImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| CgnError::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let mut data = Vec::with_capacity(images.len() * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(CgnError::Shape("images in a batch must share dimensions".into()));
        }
        data.extend(img.as_raw().iter().map(|&v| T::from_f64_lossy(v as f64) * scale));
    }
    Tensor::from_vec(&[images.len(), 1, h as usize, w as usize], data)
}
