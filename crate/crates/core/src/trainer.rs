//! Joint optimization with alternating generator/discriminator updates,
//! best-on-validation model selection, evaluation and the ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cam_to_bbox, cam_to_omega, omega_mass_inside_outside, top1_localization_error, IOU_THRESHOLD};
use crate::autodiff::{Graph, Var};
use crate::error::{CgnError, Result};
use crate::geometry::BBox;
use crate::losses::{
    graph_cls, graph_d_tc, graph_feedback_triplet, graph_neg_log_one_minus_sigmoid, graph_neg_log_sigmoid,
    logit_margin, LossBundle, OmegaVariant, TcDenominator,
};
use crate::metrics::{auc, fid_quartet, FidQuartet};
use crate::model::{
    class_activation, images_to_tensor, malignant_probability, minmax_per_sample, Cgn, MixMode, ModelConfig,
};
use crate::params::{Adam, AdamConfig, ParamId};
use crate::preprocess::mirror_reference;
use crate::scalar::Scalar;
use crate::synth::{Manifest, ManifestEntry, Split};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "best.ckpt.json";
pub const RECORD_FILE: &str = "record.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CAMS_FILE: &str = "cams.json";
pub const FEATURES_DIR: &str = "features";
pub const ABLATION_FILE: &str = "ablation.csv";

const EVAL_BATCH: usize = 64;
const UNIT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Vanilla,
    Sbf,
    TfGan,
    BfGan,
    AdainGan,
    NoNe,
    NonFeedback,
    NoBilateral,
    NoFt,
    Variant1,
    Variant2,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Vanilla,
        Variant::Sbf,
        Variant::TfGan,
        Variant::BfGan,
        Variant::AdainGan,
        Variant::NoFt,
        Variant::NoNe,
        Variant::NonFeedback,
        Variant::NoBilateral,
        Variant::Full,
        Variant::Variant1,
        Variant::Variant2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Vanilla => "vanilla",
            Variant::Sbf => "sbf",
            Variant::TfGan => "tf_gan",
            Variant::BfGan => "bf_gan",
            Variant::AdainGan => "adain_gan",
            Variant::NoNe => "no_ne",
            Variant::NonFeedback => "non_feedback",
            Variant::NoBilateral => "no_bilateral",
            Variant::NoFt => "no_ft",
            Variant::Variant1 => "variant1",
            Variant::Variant2 => "variant2",
        }
    }

    fn plan(self) -> Plan {
        let gan = |mix| Plan {
            generator: Some(mix),
            adversarial: Adversarial::Global,
            ..Plan::default()
        };
        match self {
            Variant::Vanilla => Plan::default(),
            Variant::Sbf => Plan {
                bilateral_fusion: true,
                ..Plan::default()
            },
            Variant::TfGan => gan(MixMode::TargetOnly),
            Variant::BfGan => gan(MixMode::Plain),
            Variant::AdainGan => gan(MixMode::AdaIn),
            Variant::NoFt => Plan {
                ne: true,
                ..gan(MixMode::AdaIn)
            },
            Variant::NoNe => Plan {
                feedback: Feedback::Triplet,
                ..gan(MixMode::AdaIn)
            },
            Variant::NonFeedback => Plan {
                ne: true,
                feedback: Feedback::Triplet,
                omega: OmegaSource::Distance,
                ..gan(MixMode::AdaIn)
            },
            Variant::NoBilateral => Plan {
                generator: Some(MixMode::TargetOnly),
                ne: true,
                feedback: Feedback::Triplet,
                ..Plan::default()
            },
            Variant::Full => Plan {
                ne: true,
                feedback: Feedback::Triplet,
                ..gan(MixMode::AdaIn)
            },
            Variant::Variant1 => Plan {
                ne: true,
                adversarial: Adversarial::Region,
                ..gan(MixMode::AdaIn)
            },
            Variant::Variant2 => Plan {
                ne: true,
                feedback: Feedback::Distance,
                ..gan(MixMode::AdaIn)
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = CgnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CgnError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum Adversarial {
    #[default]
    None,
    Global,
    /// Both discriminator inputs multiplied by Ω first.
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum Feedback {
    #[default]
    None,
    /// `max(0, d_tc + β − d_rc)`
    Triplet,
    /// `d_tc` alone
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum OmegaSource {
    /// Live CAM of the classifier.
    #[default]
    Cam,
    /// Where target and counterfactual features differ most.
    Distance,
}

/// Which parts of the network and which loss terms a variant uses.
#[derive(Debug, Clone, Copy, Default)]
struct Plan {
    generator: Option<MixMode>,
    /// Classifier reads `concat(H_T, H_R)` with no generation.
    bilateral_fusion: bool,
    adversarial: Adversarial,
    ne: bool,
    feedback: Feedback,
    omega: OmegaSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Interpolation weight of the generator input.
    pub alpha: f64,
    /// Triplet margin.
    pub beta: f64,
    pub seed: u64,
    pub variant: Variant,
    pub omega_variant: OmegaVariant,
    pub d_steps_per_g: usize,
    pub tc_denominator: TcDenominator,
    /// Measure the feedback distances on per-position unit-length features,
    /// the scale the margin β refers to.
    pub unit_features: bool,
    /// Keep the adversarial, negative-embedding and feedback terms out of
    /// the extractor; it then learns from the classification loss only.
    pub isolate_extractor: bool,
    pub weight_decay: f64,
    /// Save malignant CAMs of a few test samples every this many epochs
    /// (0 disables).
    pub cam_every: usize,
    pub cam_samples: usize,
    /// Save `H_T`, `H_R`, `H_C` of every test sample after training.
    pub save_features: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 50,
            batch_size: 16,
            alpha: 0.5,
            beta: 1.0,
            seed: 0,
            variant: Variant::Full,
            omega_variant: OmegaVariant::Minmax,
            d_steps_per_g: 1,
            tc_denominator: TcDenominator::HwMinusOne,
            unit_features: true,
            isolate_extractor: true,
            weight_decay: 0.0,
            cam_every: 10,
            cam_samples: 4,
            save_features: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CgnError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.d_steps_per_g == 0 {
            return Err(CgnError::Config(
                "epochs, batch_size and d_steps_per_g must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CgnError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(CgnError::Config("beta must be >= 0".into()));
        }
        self.model_config().validate()
    }

    /// Model configuration with this run's α.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            alpha: self.alpha,
            ..self.model.clone()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CgnError::parse("<config>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CgnError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CgnError::Parse { message, .. } => CgnError::parse(path, message),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CgnError::parse("<config>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
    }
}

// ---------------------------------------------------------------------------
// Data

/// One split held in memory: targets and mirrored references as
/// `(N, 1, S, S)` in [0, 1], plus labels, boxes and lesion masks.
#[derive(Debug, Clone)]
pub struct PairSet<T> {
    pub entries: Vec<ManifestEntry>,
    pub labels: Vec<u8>,
    pub bboxes: Vec<BBox>,
    pub targets: Tensor<T>,
    pub references: Tensor<T>,
    /// `S × S` row-major 0/1 lesion masks.
    pub masks: Vec<Vec<u8>>,
    pub size: usize,
}

impl<T: Scalar> PairSet<T> {
    pub fn load(manifest: &Manifest, entries: &[&ManifestEntry], size: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(CgnError::EmptyDataset);
        }
        let mut targets = Vec::with_capacity(entries.len());
        let mut refs = Vec::with_capacity(entries.len());
        let mut masks = Vec::with_capacity(entries.len());
        for e in entries {
            let s = manifest.load_sample(e)?;
            if s.x_t.dimensions() != (size as u32, size as u32) || s.x_r.dimensions() != s.x_t.dimensions() {
                return Err(CgnError::Shape(format!(
                    "sample {} is {:?}, the model expects {size}x{size}; preprocess the images first",
                    e.id,
                    s.x_t.dimensions()
                )));
            }
            refs.push(mirror_reference(&s.x_r));
            masks.push(s.mask.into_raw());
            targets.push(s.x_t);
        }
        Ok(Self {
            entries: entries.iter().map(|e| (*e).clone()).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            bboxes: entries.iter().map(|e| e.bbox()).collect(),
            targets: images_to_tensor(&targets.iter().collect::<Vec<_>>())?,
            references: images_to_tensor(&refs.iter().collect::<Vec<_>>())?,
            masks,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(x_t, x_r, labels)` for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>, Vec<u8>) {
        (
            gather(&self.targets, idx),
            gather(&self.references, idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// `(N, h, w)` map with 1 on feature cells whose image region holds no
    /// lesion pixel.
    pub fn lesion_free_cells(&self, h: usize, w: usize) -> Tensor<T> {
        let s = self.size;
        let mut out = Vec::with_capacity(self.len() * h * w);
        for mask in &self.masks {
            for a in 0..h {
                for b in 0..w {
                    let rows = a * s / h..((a + 1) * s).div_ceil(h);
                    let cols = b * s / w..((b + 1) * s).div_ceil(w);
                    let hit = rows.clone().any(|r| cols.clone().any(|c| mask[r * s + c] > 0));
                    out.push(if hit { T::zero() } else { T::one() });
                }
            }
        }
        Tensor::from_vec(&[self.len(), h, w], out).expect("cell map shape")
    }
}

fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(t.len() / t.dim(0) * idx.len());
    for &i in idx {
        data.extend_from_slice(t.outer(i));
    }
    Tensor::from_vec(&shape, data).expect("gather shape")
}

#[derive(Debug, Clone)]
pub struct DataSplits<T> {
    pub train: PairSet<T>,
    pub val: PairSet<T>,
    pub test: PairSet<T>,
}

impl<T: Scalar> DataSplits<T> {
    pub fn from_manifest(manifest: &Manifest, size: usize) -> Result<Self> {
        let load = |s| PairSet::load(manifest, &manifest.split(s), size);
        Ok(Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Training

/// How often each optional component was evaluated during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub generator: u64,
    pub discriminator: u64,
    pub triplet: u64,
    pub negative_embedding: u64,
}

/// Graph handles of one forward pass.
struct Forward<T> {
    ht: Var,
    hr: Var,
    hc: Option<Var>,
    logits: Var,
    fused: Var,
    omega: Option<Tensor<T>>,
}

/// Detached inputs for the discriminator update.
#[derive(Debug, Clone)]
pub struct DiscriminatorBatch<T> {
    pub h_r: Tensor<T>,
    pub h_c: Tensor<T>,
    pub omega: Option<Tensor<T>>,
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Cgn<T>,
    plan: Plan,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    pub counters: Counters,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.variant.plan();
        let model_cfg = config.model_config();
        let c = model_cfg.feature_channels;
        let inputs = if plan.generator.is_some() || plan.bilateral_fusion {
            2 * c
        } else {
            c
        };
        let model = Cgn::new(model_cfg, inputs, config.seed)?;
        let adam = AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        };
        let mut g_ids = model.module_params("extractor");
        g_ids.extend(model.module_params("generator"));
        g_ids.extend(model.module_params("classifier"));
        let opt_g = Adam::new(adam, &model.store, g_ids);
        let opt_d = Adam::new(adam, &model.store, model.module_params("discriminator"));
        Ok(Self {
            config,
            model,
            plan,
            opt_g,
            opt_d,
            counters: Counters::default(),
        })
    }

    /// Restores a trained run directory.
    pub fn from_run_dir(run_dir: &Path) -> Result<Self> {
        let ckpt = run_dir.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            return Err(CgnError::MissingCheckpoint(ckpt));
        }
        let mut trainer = Self::new(TrainConfig::load(&run_dir.join(CONFIG_FILE))?)?;
        trainer.model.store.load_into(&ckpt)?;
        Ok(trainer)
    }

    pub fn uses_discriminator(&self) -> bool {
        self.plan.adversarial != Adversarial::None
    }

    /// Parameters updated by the generator-side step.
    pub fn generator_side_params(&self) -> &[ParamId] {
        self.opt_g.ids()
    }

    pub fn discriminator_params(&self) -> &[ParamId] {
        self.opt_d.ids()
    }

    fn forward(&self, g: &mut Graph<T>, xt: Tensor<T>, xr: Tensor<T>, counters: &mut Counters) -> Forward<T> {
        let m = &self.model;
        let xt = g.constant(xt);
        let xr = g.constant(xr);
        let ht = m.extract(g, xt);
        let hr = m.extract(g, xr);
        let (hc, input) = match self.plan.generator {
            Some(mode) => {
                counters.generator += 1;
                let hc = m.counterfactual(g, ht, hr, mode);
                let residual = g.sub(ht, hc);
                (Some(hc), g.concat(residual, ht))
            }
            None if self.plan.bilateral_fusion => (None, g.concat(ht, hr)),
            None => (None, ht),
        };
        let out = m.classify(g, input);
        let omega = match (self.plan.omega, hc) {
            (OmegaSource::Distance, Some(hc)) => Some(distance_omega(g.value(ht), g.value(hc))),
            _ => {
                let cam = m.classifier.cam(&m.store, g.value(out.fused), 1);
                Some(cam_to_omega(&cam, self.config.omega_variant))
            }
        };
        Forward {
            ht,
            hr,
            hc,
            logits: out.logits,
            fused: out.fused,
            omega,
        }
    }

    /// Generator-side update: extractor, generator and classifier on the
    /// summed generator objective. Returns batch-mean loss terms and the
    /// detached maps the discriminator step needs.
    pub fn g_step(
        &mut self,
        xt: Tensor<T>,
        xr: Tensor<T>,
        labels: &[u8],
    ) -> Result<(LossBundle, Option<DiscriminatorBatch<T>>)> {
        let n = labels.len();
        let mut counters = self.counters;
        let mut g = Graph::new();
        let fw = self.forward(&mut g, xt, xr, &mut counters);
        let m = &self.model;
        let plan = self.plan;
        let mut terms: Vec<(&'static str, Var)> = vec![("l_cls", graph_cls(&mut g, fw.logits, labels))];
        let mut d_tc = None;
        let mut d_rc = None;
        if let (Some(hc_live), Some(mode)) = (fw.hc, plan.generator) {
            let omega = fw.omega.clone().expect("omega is always computed");
            // H_R only ever enters as a fixed anchor
            let hr_fixed = g.detach(fw.hr);
            // same generator, second pass on detached features: the terms
            // below then train the generator but not the extractor
            let (ht_aux, hc) = if self.config.isolate_extractor {
                let ht_fixed = g.detach(fw.ht);
                counters.generator += 1;
                (ht_fixed, m.counterfactual(&mut g, ht_fixed, hr_fixed, mode))
            } else {
                (fw.ht, hc_live)
            };
            match plan.adversarial {
                Adversarial::None => {}
                Adversarial::Global | Adversarial::Region => {
                    counters.discriminator += 1;
                    let input = if plan.adversarial == Adversarial::Region {
                        g.spatial_mask(hc, omega.clone())
                    } else {
                        hc
                    };
                    let logit = m.discriminator_logit(&mut g, input);
                    terms.push(("l_ad_g", graph_neg_log_sigmoid(&mut g, logit)));
                }
            }
            if plan.ne {
                counters.negative_embedding += 1;
                let zeros = g.constant(Tensor::zeros(g.shape(hc)));
                let input = g.concat(zeros, hc);
                let out = m.classify(&mut g, input);
                let margin = logit_margin(&mut g, out.logits);
                terms.push(("l_ne", graph_neg_log_one_minus_sigmoid(&mut g, margin)));
            }
            if plan.feedback != Feedback::None {
                let (ht, hc) = if self.config.unit_features {
                    let eps = T::from_f64_lossy(UNIT_EPS);
                    (g.unit_positions(ht_aux, eps), g.unit_positions(hc, eps))
                } else {
                    (ht_aux, hc)
                };
                let parts = graph_d_tc(&mut g, ht, hc, &omega, self.config.tc_denominator)?;
                let dtc = parts
                    .into_iter()
                    .reduce(|a, b| g.add(a, b))
                    .expect("at least one sample");
                d_tc = Some(dtc);
                if plan.feedback == Feedback::Triplet {
                    counters.triplet += 1;
                    let hr = if self.config.unit_features {
                        g.unit_positions(hr_fixed, T::from_f64_lossy(UNIT_EPS))
                    } else {
                        hr_fixed
                    };
                    let drc = g.chamfer(hr, hc);
                    d_rc = Some(drc);
                    terms.push(("l_ft", graph_feedback_triplet(&mut g, dtc, drc, self.config.beta)));
                } else {
                    terms.push(("l_ft", dtc));
                }
            }
        }
        let mean = |g: &Graph<T>, v: Var| g.value(v).sum().to_f64_lossy() / n as f64;
        let mut bundle = LossBundle::default();
        for &(name, v) in &terms {
            let value = mean(&g, v);
            if !value.is_finite() {
                return Err(CgnError::NonFinite { term: name.into() });
            }
            match name {
                "l_cls" => bundle.l_cls = value,
                "l_ad_g" => bundle.l_ad_g = value,
                "l_ne" => bundle.l_ne = value,
                _ => bundle.l_ft = value,
            }
        }
        bundle.d_tc = d_tc.map_or(0.0, |v| mean(&g, v));
        bundle.d_rc = d_rc.map_or(0.0, |v| mean(&g, v));
        let total = terms.iter().map(|t| t.1).reduce(|a, b| g.add(a, b)).expect("cls term");
        let root = g.sum(total);
        let grads = g.backward(root);
        let d_batch = match (fw.hc, plan.adversarial) {
            (Some(hc), Adversarial::Global | Adversarial::Region) => Some(DiscriminatorBatch {
                h_r: g.value(fw.hr).clone(),
                h_c: g.value(hc).clone(),
                omega: (plan.adversarial == Adversarial::Region)
                    .then(|| fw.omega.clone())
                    .flatten(),
            }),
            _ => None,
        };
        self.opt_g.step(&mut self.model.store, &grads);
        self.counters = counters;
        Ok((bundle.with_totals(), d_batch))
    }

    /// One discriminator update on detached maps; returns the batch-mean
    /// discriminator loss before the update.
    pub fn d_step(&mut self, batch: &DiscriminatorBatch<T>) -> Result<f64> {
        let n = batch.h_r.dim(0);
        let mut g = Graph::new();
        let mut hr = g.constant(batch.h_r.clone());
        let mut hc = g.constant(batch.h_c.clone());
        if let Some(omega) = &batch.omega {
            hr = g.spatial_mask(hr, omega.clone());
            hc = g.spatial_mask(hc, omega.clone());
        }
        let real = self.model.discriminator_logit(&mut g, hr);
        let fake = self.model.discriminator_logit(&mut g, hc);
        self.counters.discriminator += 2;
        let a = graph_neg_log_sigmoid(&mut g, real);
        let b = graph_neg_log_one_minus_sigmoid(&mut g, fake);
        let per_sample = g.add(a, b);
        let root = g.sum(per_sample);
        let value = g.value(root).sum().to_f64_lossy() / n as f64;
        if !value.is_finite() {
            return Err(CgnError::NonFinite { term: "l_ad_d".into() });
        }
        let grads = g.backward(root);
        self.opt_d.step(&mut self.model.store, &grads);
        Ok(value)
    }

    /// Generator-side step followed by `d_steps_per_g` discriminator steps.
    pub fn train_step(&mut self, xt: Tensor<T>, xr: Tensor<T>, labels: &[u8]) -> Result<LossBundle> {
        let (mut bundle, d_batch) = self.g_step(xt, xr, labels)?;
        if let Some(batch) = d_batch {
            for k in 0..self.config.d_steps_per_g {
                let l = self.d_step(&batch)?;
                if k == 0 {
                    bundle.l_ad_d = l;
                }
            }
        }
        Ok(bundle.with_totals())
    }

    /// Read-only inference over a whole split.
    pub fn predict(&self, set: &PairSet<T>) -> Result<Predictions<T>> {
        let mut scratch = Counters::default();
        let (mut p_malignant, mut cam_malignant, mut cam_predicted) = (Vec::new(), Vec::new(), Vec::new());
        let (mut hts, mut hrs, mut hcs) = (Vec::new(), Vec::new(), Vec::new());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (xt, xr, _) = set.batch(chunk);
            let mut g = Graph::new();
            let fw = self.forward(&mut g, xt, xr, &mut scratch);
            let probs = malignant_probability(g.value(fw.logits));
            let fused = g.value(fw.fused);
            let w = self.model.store.value(self.model.classifier.head.w);
            let cam_m = class_activation(fused, w, 1);
            let cam_b = class_activation(fused, w, 0);
            for (i, p) in probs.iter().enumerate() {
                let p = p.to_f64_lossy();
                p_malignant.push(p);
                cam_malignant.push(cam_m.select(i));
                cam_predicted.push(if p >= 0.5 { cam_m.select(i) } else { cam_b.select(i) });
            }
            hts.push(g.value(fw.ht).clone());
            hrs.push(g.value(fw.hr).clone());
            if let Some(hc) = fw.hc {
                hcs.push(g.value(hc).clone());
            }
        }
        Ok(Predictions {
            p_malignant,
            cam_malignant,
            cam_predicted,
            h_t: concat_batches(&hts),
            h_r: concat_batches(&hrs),
            h_c: (!hcs.is_empty()).then(|| concat_batches(&hcs)),
        })
    }

    pub fn val_auc(&self, set: &PairSet<T>) -> Result<f64> {
        auc(&self.predict(set)?.p_malignant, &set.labels)
    }

    /// AUC, localization error, Ω placement and (for generative variants)
    /// the FID quartet on one split.
    pub fn evaluate(&self, set: &PairSet<T>, split: &str) -> Result<MetricsReport> {
        let pred = self.predict(set)?;
        let score = auc(&pred.p_malignant, &set.labels)?;
        let size = set.size;
        let mut boxes = Vec::with_capacity(set.len());
        let (mut inside, mut outside) = (0.0, 0.0);
        for i in 0..set.len() {
            let label = (pred.p_malignant[i] >= 0.5) as u8;
            boxes.push((label, cam_to_bbox(&pred.cam_predicted[i], size).unwrap_or_default()));
            let omega = cam_to_omega(&pred.cam_malignant[i], OmegaVariant::Minmax);
            let (a, b) = omega_mass_inside_outside(&omega, &set.masks[i], size);
            inside += a;
            outside += b;
        }
        let truths: Vec<(u8, BBox)> = set.labels.iter().copied().zip(set.bboxes.iter().copied()).collect();
        let fid = match &pred.h_c {
            Some(hc) => {
                let (_, h, w) = self.model.config.feature_shape();
                let keep = set.lesion_free_cells(h, w);
                Some(fid_quartet(&pred.h_t, &pred.h_r, hc, Some(&keep))?)
            }
            None => None,
        };
        Ok(MetricsReport {
            split: split.to_string(),
            n: set.len(),
            auc: score,
            localization_error: top1_localization_error(&boxes, &truths)?,
            omega_inside: inside / set.len() as f64,
            omega_outside: outside / set.len() as f64,
            fid,
        })
    }

    /// Per-sample predicted label and CAM box against the truth.
    pub fn localize(&self, set: &PairSet<T>) -> Result<Vec<LocalizationRow>> {
        let pred = self.predict(set)?;
        Ok((0..set.len())
            .map(|i| {
                let predicted = (pred.p_malignant[i] >= 0.5) as u8;
                let bbox = cam_to_bbox(&pred.cam_predicted[i], set.size).unwrap_or_default();
                let truth = set.bboxes[i];
                let iou = bbox.iou(&truth);
                LocalizationRow {
                    id: set.entries[i].id.clone(),
                    label: set.labels[i],
                    predicted,
                    p_malignant: pred.p_malignant[i],
                    pred_row: bbox.row,
                    pred_col: bbox.col,
                    pred_height: bbox.height,
                    pred_width: bbox.width,
                    true_row: truth.row,
                    true_col: truth.col,
                    true_height: truth.height,
                    true_width: truth.width,
                    iou,
                    correct: predicted == set.labels[i] && iou > IOU_THRESHOLD,
                }
            })
            .collect())
    }

    /// Full training run with best-on-validation selection. When `run_dir`
    /// is given, the config, checkpoint, log, CAM snapshots, test features
    /// and run record are written there.
    pub fn fit(&mut self, data: &DataSplits<T>, dataset: &Path, run_dir: Option<&Path>) -> Result<RunRecord> {
        if data.train.is_empty() {
            return Err(CgnError::EmptyDataset);
        }
        let mut log = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| CgnError::io(format!("creating {}", dir.display()), e))?;
                self.config.save(&dir.join(CONFIG_FILE))?;
                let path = dir.join(LOG_FILE);
                Some(csv::Writer::from_path(&path).map_err(|e| CgnError::parse(&path, e))?)
            }
            None => None,
        };
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(usize, f64, crate::params::ParamStore<T>)> = None;
        let mut snapshots = Vec::new();
        let cam_ids: Vec<usize> = (0..data.test.len().min(cfg.cam_samples)).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut rows = Vec::new();
            let mut sum = LossBundle::default();
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let (xt, xr, labels) = data.train.batch(chunk);
                let b = self.train_step(xt, xr, &labels).map_err(|e| match e {
                    CgnError::NonFinite { term } => CgnError::Diverged { epoch, step, term },
                    other => other,
                })?;
                add_bundle(&mut sum, &b);
                rows.push((step, b));
            }
            let val_auc = self.val_auc(&data.val)?;
            if let Some(w) = log.as_mut() {
                for (step, b) in &rows {
                    w.serialize(LogRow::new(epoch, *step, b, val_auc))
                        .map_err(|e| CgnError::parse(LOG_FILE, e))?;
                }
                w.flush().map_err(|e| CgnError::io("writing training log", e))?;
            }
            scale_bundle(&mut sum, 1.0 / rows.len() as f64);
            epochs.push(EpochRecord {
                epoch,
                losses: sum.with_totals(),
                val_auc,
            });
            if best.as_ref().is_none_or(|(_, v, _)| val_auc > *v) {
                if let Some(dir) = run_dir {
                    self.model.store.save(&dir.join(CHECKPOINT_FILE))?;
                }
                best = Some((epoch, val_auc, self.model.store.clone()));
            }
            let snapshot_due = cfg.cam_every > 0
                && (epoch % cfg.cam_every == 0 || (cfg.cam_every > cfg.epochs && epoch == cfg.epochs));
            if snapshot_due && !cam_ids.is_empty() {
                let sub = subset(&data.test, &cam_ids);
                let pred = self.predict(&sub)?;
                for (i, cam) in pred.cam_malignant.iter().enumerate() {
                    let norm = minmax_per_sample(&cam.clone().reshape(&[1, cam.dim(0), cam.dim(1)])?);
                    snapshots.push(CamSnapshot {
                        epoch,
                        id: sub.entries[i].id.clone(),
                        height: cam.dim(0),
                        width: cam.dim(1),
                        values: norm.data().iter().map(|v| v.to_f64_lossy()).collect(),
                    });
                }
            }
        }
        let (best_epoch, best_val_auc, store) = best.expect("at least one epoch");
        self.model.store = store;
        let test = self.evaluate(&data.test, "test")?;
        let record = RunRecord {
            variant: cfg.variant,
            seed: cfg.seed,
            dataset: dataset.to_path_buf(),
            epochs,
            best_epoch,
            best_val_auc,
            best_checkpoint: run_dir.map(|d| d.join(CHECKPOINT_FILE)),
            test,
            counters: self.counters,
        };
        if let Some(dir) = run_dir {
            write_json(&dir.join(CAMS_FILE), &snapshots)?;
            if cfg.save_features {
                self.save_features(&data.test, &dir.join(FEATURES_DIR))?;
            }
            write_json(&dir.join(RECORD_FILE), &record)?;
        }
        Ok(record)
    }

    /// Writes one feature record per sample of `set` into `dir`.
    pub fn save_features(&self, set: &PairSet<T>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CgnError::io(format!("creating {}", dir.display()), e))?;
        let pred = self.predict(set)?;
        let flat = |t: &Tensor<T>, i: usize| t.outer(i).iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>();
        for (i, entry) in set.entries.iter().enumerate() {
            let rec = FeatureRecord {
                id: entry.id.clone(),
                label: entry.label,
                bbox: entry.bbox(),
                shape: pred.h_t.shape()[1..].to_vec(),
                h_t: flat(&pred.h_t, i),
                h_r: flat(&pred.h_r, i),
                h_c: pred.h_c.as_ref().map(|t| flat(t, i)),
            };
            write_json(&dir.join(format!("{}.json", entry.id)), &rec)?;
        }
        Ok(())
    }
}

fn subset<T: Scalar>(set: &PairSet<T>, idx: &[usize]) -> PairSet<T> {
    PairSet {
        entries: idx.iter().map(|&i| set.entries[i].clone()).collect(),
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
        bboxes: idx.iter().map(|&i| set.bboxes[i]).collect(),
        targets: gather(&set.targets, idx),
        references: gather(&set.references, idx),
        masks: idx.iter().map(|&i| set.masks[i].clone()).collect(),
        size: set.size,
    }
}

fn concat_batches<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data).expect("batch concat")
}

/// Min-max normalized `‖H_T − H_C‖²` per position, `(N, h, w)`.
fn distance_omega<T: Scalar>(ht: &Tensor<T>, hc: &Tensor<T>) -> Tensor<T> {
    let s = ht.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let mut d = vec![T::zero(); n * p];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * p;
            for q in 0..p {
                let diff = ht.data()[base + q] - hc.data()[base + q];
                d[i * p + q] += diff * diff;
            }
        }
    }
    let maps = Tensor::from_vec(&[n, s[2], s[3]], d).expect("distance map");
    cam_to_omega(&maps, OmegaVariant::Minmax)
}

fn add_bundle(acc: &mut LossBundle, b: &LossBundle) {
    acc.l_cls += b.l_cls;
    acc.l_ad_g += b.l_ad_g;
    acc.l_ad_d += b.l_ad_d;
    acc.l_ft += b.l_ft;
    acc.l_ne += b.l_ne;
    acc.d_tc += b.d_tc;
    acc.d_rc += b.d_rc;
}

fn scale_bundle(acc: &mut LossBundle, s: f64) {
    acc.l_cls *= s;
    acc.l_ad_g *= s;
    acc.l_ad_d *= s;
    acc.l_ft *= s;
    acc.l_ne *= s;
    acc.d_tc *= s;
    acc.d_rc *= s;
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CgnError::parse(path, e))?;
    fs::write(path, text).map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| CgnError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CgnError::parse(path, e))
}

/// Per-sample outputs of [`Trainer::predict`].
#[derive(Debug, Clone)]
pub struct Predictions<T> {
    pub p_malignant: Vec<f64>,
    /// Raw malignant-class CAMs `(h, w)`.
    pub cam_malignant: Vec<Tensor<T>>,
    /// Raw CAMs of the predicted class.
    pub cam_predicted: Vec<Tensor<T>>,
    pub h_t: Tensor<T>,
    pub h_r: Tensor<T>,
    pub h_c: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub auc: f64,
    pub localization_error: f64,
    /// Mean min-max Ω over lesion pixels.
    pub omega_inside: f64,
    pub omega_outside: f64,
    pub fid: Option<FidQuartet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub losses: LossBundle,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub dataset: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub test: MetricsReport,
    pub counters: Counters,
}

/// One row of `train_log.csv`; loss columns are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_cls: f64,
    pub l_ad_g: f64,
    pub l_ad_d: f64,
    pub l_ft: f64,
    pub l_ne: f64,
    pub d_tc: f64,
    pub d_rc: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub val_auc: f64,
}

impl LogRow {
    fn new(epoch: usize, step: usize, b: &LossBundle, val_auc: f64) -> Self {
        Self {
            epoch,
            step,
            l_cls: b.l_cls,
            l_ad_g: b.l_ad_g,
            l_ad_d: b.l_ad_d,
            l_ft: b.l_ft,
            l_ne: b.l_ne,
            d_tc: b.d_tc,
            d_rc: b.d_rc,
            total_g: b.total_g,
            total_d: b.total_d,
            val_auc,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CgnError::parse(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| CgnError::parse(path, e))
}

/// Min-max normalized malignant CAM of one sample at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamSnapshot {
    pub epoch: usize,
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Saved feature maps of one sample, each flattened `(C, h, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub label: u8,
    pub bbox: BBox,
    pub shape: Vec<usize>,
    pub h_t: Vec<f64>,
    pub h_r: Vec<f64>,
    pub h_c: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Entry points

/// Trains one run on the manifest's train/val/test splits.
pub fn train<T: Scalar>(config: &TrainConfig, manifest: &Manifest, run_dir: Option<&Path>) -> Result<RunRecord> {
    let data = DataSplits::<T>::from_manifest(manifest, config.model.image_size)?;
    Trainer::<T>::new(config.clone())?.fit(&data, &manifest.root, run_dir)
}

/// Loads the best checkpoint of a run and evaluates it on `split`.
pub fn evaluate<T: Scalar>(run_dir: &Path, split: Split, dataset: Option<&Path>) -> Result<MetricsReport> {
    let trainer = Trainer::<T>::from_run_dir(run_dir)?;
    let manifest = run_dataset(run_dir, dataset)?;
    let set = PairSet::load(&manifest, &manifest.split(split), trainer.model.config.image_size)?;
    trainer.evaluate(&set, split.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test AUC per seed, in seed order.
    pub test_aucs: Vec<f64>,
    pub median_auc: f64,
    pub mean_auc: f64,
    pub status: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationCsvRow {
    variant: String,
    median_auc: f64,
    mean_auc: f64,
    seeds: String,
    test_aucs: String,
    status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub id: String,
    pub label: u8,
    pub predicted: u8,
    pub p_malignant: f64,
    pub pred_row: usize,
    pub pred_col: usize,
    pub pred_height: usize,
    pub pred_width: usize,
    pub true_row: usize,
    pub true_col: usize,
    pub true_height: usize,
    pub true_width: usize,
    pub iou: f64,
    pub correct: bool,
}

pub fn write_localization_csv(path: &Path, rows: &[LocalizationRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_localization_csv(path: &Path) -> Result<Vec<LocalizationRow>> {
    read_csv(path)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CgnError::parse(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CgnError::parse(path, e))?;
    }
    w.flush()
        .map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CgnError::parse(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| CgnError::parse(path, e))
}

/// Loads the best checkpoint of a run and localizes every sample of `split`.
pub fn localization_table<T: Scalar>(
    run_dir: &Path,
    split: Split,
    dataset: Option<&Path>,
) -> Result<Vec<LocalizationRow>> {
    let trainer = Trainer::<T>::from_run_dir(run_dir)?;
    let manifest = run_dataset(run_dir, dataset)?;
    let set = PairSet::load(&manifest, &manifest.split(split), trainer.model.config.image_size)?;
    trainer.localize(&set)
}

fn run_dataset(run_dir: &Path, dataset: Option<&Path>) -> Result<Manifest> {
    let root = match dataset {
        Some(p) => p.to_path_buf(),
        None => read_json::<RunRecord>(&run_dir.join(RECORD_FILE))?.dataset,
    };
    Manifest::load(&root)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Trains every variant with every seed on the same data and writes
/// `ablation.csv` (one row per variant) into `out_dir`. A failing variant
/// becomes a failed row; the grid continues.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    manifest: &Manifest,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<(Vec<AblationRow>, Vec<RunRecord>)> {
    let data = DataSplits::<T>::from_manifest(manifest, base.model.image_size)?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut records = Vec::new();
    for &variant in variants {
        let mut aucs = Vec::with_capacity(seeds.len());
        let mut failure = None;
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let dir = out_dir.map(|d| d.join(format!("{variant}_seed{seed}")));
            match Trainer::<T>::new(cfg).and_then(|mut t| t.fit(&data, &manifest.root, dir.as_deref())) {
                Ok(rec) => {
                    aucs.push(rec.test.auc);
                    records.push(rec);
                }
                Err(e) => {
                    failure = Some(format!("failed: {e}"));
                    break;
                }
            }
        }
        let (median_auc, mean_auc) = match failure {
            Some(_) => (f64::NAN, f64::NAN),
            None => (median(&aucs), aucs.iter().sum::<f64>() / aucs.len() as f64),
        };
        rows.push(AblationRow {
            variant,
            test_aucs: aucs,
            median_auc,
            mean_auc,
            status: failure.unwrap_or_else(|| "ok".into()),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| CgnError::io(format!("creating {}", dir.display()), e))?;
        write_ablation_csv(&dir.join(ABLATION_FILE), &rows, seeds)?;
    }
    Ok((rows, records))
}

fn join<D: std::fmt::Display>(xs: &[D]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], seeds: &[u64]) -> Result<()> {
    let rows: Vec<AblationCsvRow> = rows
        .iter()
        .map(|r| AblationCsvRow {
            variant: r.variant.to_string(),
            median_auc: r.median_auc,
            mean_auc: r.mean_auc,
            seeds: join(seeds),
            test_aucs: join(&r.test_aucs),
            status: r.status.clone(),
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for row in read_csv::<AblationCsvRow>(path)? {
        let test_aucs = row
            .test_aucs
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| CgnError::parse(path, e)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            variant: row.variant.parse()?,
            test_aucs,
            median_auc: row.median_auc,
            mean_auc: row.mean_auc,
            status: row.status,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

/// Patient-wise k-fold driver over every manifest entry: fold `f` is the
/// test set, fold `f + 1` the validation set, the rest trains.
pub fn cross_validate<T: Scalar>(config: &TrainConfig, manifest: &Manifest, k: usize) -> Result<CrossValidation> {
    if k < 3 {
        return Err(CgnError::Config("cross-validation needs k >= 3".into()));
    }
    let mut patients: Vec<usize> = manifest.entries.iter().map(|e| e.patient).collect();
    patients.sort_unstable();
    patients.dedup();
    if patients.len() < k {
        return Err(CgnError::Config(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let fold_of = |p: usize| patients.iter().position(|&q| q == p).expect("known patient") % k;
    let size = config.model.image_size;
    let mut fold_aucs = Vec::with_capacity(k);
    for f in 0..k {
        let pick = |want: &dyn Fn(usize) -> bool| -> Vec<&ManifestEntry> {
            manifest.entries.iter().filter(|e| want(fold_of(e.patient))).collect()
        };
        let data = DataSplits {
            train: PairSet::<T>::load(manifest, &pick(&|g| g != f && g != (f + 1) % k), size)?,
            val: PairSet::load(manifest, &pick(&|g| g == (f + 1) % k), size)?,
            test: PairSet::load(manifest, &pick(&|g| g == f), size)?,
        };
        let rec = Trainer::<T>::new(config.clone())?.fit(&data, &manifest.root, None)?;
        fold_aucs.push(rec.test.auc);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / k as f64;
    Ok(CrossValidation { fold_aucs, mean_auc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let toml = TrainConfig {
                variant: v,
                ..TrainConfig::default()
            }
            .to_toml_string()
            .unwrap();
            assert_eq!(TrainConfig::from_toml_str(&toml).unwrap().variant, v);
        }
        assert!("fancy".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.alpha = 1.5));
        assert!(bad(|c| c.model.generator_blocks = 0));
        assert!(TrainConfig::default().validate().is_ok());
        let partial =
            TrainConfig::from_toml_str("epochs = 3\nvariant = \"vanilla\"\n[model]\nimage_size = 32\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.lr, 5e-5);
        assert_eq!(partial.model.image_size, 32);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn distance_omega_peaks_where_maps_differ() {
        let ht = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let mut hc = ht.clone();
        hc.data_mut()[3] = 2.0;
        let om = distance_omega(&ht, &hc);
        assert_eq!(om.data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
