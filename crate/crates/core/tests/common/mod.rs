//! Independent oracles and toy fixtures shared by the integration suites.
#![allow(dead_code)]

use cgn_core::autodiff::{Graph, Var};
use cgn_core::losses::{
    graph_cls, graph_d_tc, graph_feedback_triplet, graph_neg_log_one_minus_sigmoid, graph_neg_log_sigmoid,
    logit_margin, TcDenominator,
};
use cgn_core::model::{Cgn, MixMode, ModelConfig};
use cgn_core::params::ParamId;
use cgn_core::synth::{generate_dataset, Manifest, SynthConfig};
use cgn_core::trainer::TrainConfig;
use cgn_core::Tensor;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance between analytic and central-difference gradients.
pub const GRAD_TOL: f64 = 1e-3;
/// Below this magnitude gradients are compared on an absolute scale.
const GRAD_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// Largest `|a − n| / max(|a|, |n|, floor)` over entries.
    pub max_rel_error: f64,
    /// Largest numeric gradient entry; zero would make the check vacuous.
    pub magnitude: f64,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= GRAD_TOL && self.magnitude > 1e-8
    }
}

fn compare(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> (f64, f64) {
    let err = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max);
    (err, numeric.data().iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// Gradient of `sum(build(x))` w.r.t. `x`, analytic vs central differences.
pub fn input_grad_error(x: &Tensor<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> (f64, f64) {
    let eval = |xv: &Tensor<f64>| {
        let mut g = Graph::new();
        let xi = g.input(xv.clone());
        let y = build(&mut g, xi);
        let s = g.sum(y);
        (g, xi, s)
    };
    let (g, xi, s) = eval(x);
    let analytic = g
        .backward(s)
        .of(xi)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= FD_STEP;
        let (gp, _, sp) = eval(&p);
        let (gm, _, sm) = eval(&m);
        numeric.data_mut()[i] = (gp.value(sp).data()[0] - gm.value(sm).data()[0]) / (2.0 * FD_STEP);
    }
    compare(&analytic, &numeric)
}

/// Same check w.r.t. one stored parameter of `model`.
pub fn param_grad_error(
    model: &Cgn<f64>,
    id: ParamId,
    build: &dyn Fn(&Cgn<f64>, &mut Graph<f64>) -> Var,
) -> (f64, f64) {
    let eval = |m: &Cgn<f64>| {
        let mut g = Graph::new();
        let y = build(m, &mut g);
        let s = g.sum(y);
        (g, s)
    };
    let (g, s) = eval(model);
    let shape = model.store.value(id).shape().to_vec();
    let analytic = g.backward(s).param(id).unwrap_or_else(|| Tensor::zeros(&shape));
    let mut numeric = Tensor::zeros(&shape);
    let mut m = model.clone();
    for i in 0..numeric.len() {
        let base = model.store.value(id).data()[i];
        m.store.value_mut(id).data_mut()[i] = base + FD_STEP;
        let (gp, sp) = eval(&m);
        m.store.value_mut(id).data_mut()[i] = base - FD_STEP;
        let (gm, sm) = eval(&m);
        m.store.value_mut(id).data_mut()[i] = base;
        numeric.data_mut()[i] = (gp.value(sp).data()[0] - gm.value(sm).data()[0]) / (2.0 * FD_STEP);
    }
    compare(&analytic, &numeric)
}

/// Network whose feature maps are 4 channels on a 4×4 grid.
pub fn toy_model(seed: u64) -> Cgn<f64> {
    let cfg = ModelConfig {
        image_size: 16,
        feature_channels: 4,
        extractor_blocks: 2,
        generator_blocks: 1,
        ..ModelConfig::default()
    };
    let mut model = Cgn::new(cfg, 8, seed).unwrap();
    // zero-initialized layers would hide upstream gradients
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let v = model.store.value_mut(id);
        if v.data().iter().all(|&x| x == 0.0) {
            v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    }
    model
}

/// Named gradient checks across every differentiable term of the training
/// objective, on 4-channel 4×4 maps.
pub fn gradient_suite() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = toy_model(7);
    let feat = [2, 4, 4, 4];
    let ht = random(&feat, &mut rng);
    let hr = random(&feat, &mut rng);
    let hc = random(&feat, &mut rng);
    let images = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let omega = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(0.0..1.0));
    let labels = [1u8, 0];
    let mut out = Vec::new();
    let mut push = |name: &str, (max_rel_error, magnitude): (f64, f64)| {
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_error,
            magnitude,
        })
    };

    push(
        "extractor wrt image",
        input_grad_error(&images, &|g, x| {
            let y = model.extract(g, x);
            let w = g.constant(Tensor::from_fn(g.shape(y), |k| ((k % 7) as f64 - 3.0) / 5.0));
            g.mul(y, w)
        }),
    );
    for (name, mode) in [
        ("adain", MixMode::AdaIn),
        ("plain mix", MixMode::Plain),
        ("target only", MixMode::TargetOnly),
    ] {
        let r = hr.clone();
        push(
            &format!("generator ({name}) wrt target"),
            input_grad_error(&ht, &|g, x| {
                let hr = g.constant(r.clone());
                let y = model.counterfactual(g, x, hr, mode);
                let w = g.constant(Tensor::from_fn(g.shape(y), |k| ((k % 5) as f64 - 2.0) / 3.0));
                g.mul(y, w)
            }),
        );
    }
    let t = ht.clone();
    push(
        "generator (adain) wrt reference",
        input_grad_error(&hr, &|g, x| {
            let ht = g.constant(t.clone());
            let y = model.counterfactual(g, ht, x, MixMode::AdaIn);
            let w = g.constant(Tensor::from_fn(g.shape(y), |k| ((k % 5) as f64 - 2.0) / 3.0));
            g.mul(y, w)
        }),
    );
    push(
        "log D(real) wrt input",
        input_grad_error(&hr, &|g, x| {
            let l = model.discriminator_logit(g, x);
            graph_neg_log_sigmoid(g, l)
        }),
    );
    push(
        "log(1 - D(fake)) wrt input",
        input_grad_error(&hc, &|g, x| {
            let l = model.discriminator_logit(g, x);
            graph_neg_log_one_minus_sigmoid(g, l)
        }),
    );
    let c = hc.clone();
    push(
        "classification wrt target",
        input_grad_error(&ht, &|g, x| {
            let hc = g.constant(c.clone());
            let res = g.sub(x, hc);
            let input = g.concat(res, x);
            let o = model.classify(g, input);
            graph_cls(g, o.logits, &labels)
        }),
    );
    push(
        "negative embedding wrt counterfactual",
        input_grad_error(&hc, &|g, x| {
            let zeros = g.constant(Tensor::zeros(g.shape(x)));
            let input = g.concat(zeros, x);
            let o = model.classify(g, input);
            let m = logit_margin(g, o.logits);
            graph_neg_log_one_minus_sigmoid(g, m)
        }),
    );
    for mode in [TcDenominator::HwMinusOne, TcDenominator::LesionFreeMass] {
        let (t, om) = (ht.clone(), omega.clone());
        push(
            &format!("lesion-free distance ({mode:?}) wrt counterfactual"),
            input_grad_error(&hc, &|g, x| {
                let ht = g.constant(t.clone());
                let parts = graph_d_tc(g, ht, x, &om, mode).unwrap();
                parts.into_iter().reduce(|a, b| g.add(a, b)).unwrap()
            }),
        );
    }
    let r = hr.clone();
    push(
        "chamfer wrt counterfactual",
        input_grad_error(&hc, &|g, x| {
            let hr = g.constant(r.clone());
            g.chamfer(hr, x)
        }),
    );
    let (t, r, om) = (ht.clone(), hr.clone(), omega.clone());
    push(
        "feedback triplet on unit features wrt counterfactual",
        input_grad_error(&hc, &|g, x| {
            let ht = g.constant(t.clone());
            let hr = g.constant(r.clone());
            let (ut, uc, ur) = (
                g.unit_positions(ht, 1e-8),
                g.unit_positions(x, 1e-8),
                g.unit_positions(hr, 1e-8),
            );
            let parts = graph_d_tc(g, ut, uc, &om, TcDenominator::HwMinusOne).unwrap();
            let drc = g.chamfer(ur, uc);
            graph_feedback_triplet(g, parts[0], drc, 1.0)
        }),
    );
    // one parameter tensor per module, through the whole generator objective
    let (t, r) = (ht.clone(), hr.clone());
    let objective = move |m: &Cgn<f64>, g: &mut Graph<f64>| {
        let ht = g.constant(t.clone());
        let hr = g.constant(r.clone());
        let hc = m.counterfactual(g, ht, hr, MixMode::AdaIn);
        let res = g.sub(ht, hc);
        let input = g.concat(res, ht);
        let o = m.classify(g, input);
        let cls = graph_cls(g, o.logits, &labels);
        let l = m.discriminator_logit(g, hc);
        let adv = graph_neg_log_sigmoid(g, l);
        g.add(cls, adv)
    };
    for module in ["generator", "classifier", "discriminator"] {
        for id in model.module_params(module) {
            let name = format!("objective wrt {}", model.store.name(id));
            push(&name, param_grad_error(&model, id, &objective));
        }
    }
    out
}

/// `P(score⁺ > score⁻) + ½ P(tie)` by counting all pairs, as the exact
/// integer pair `(2·wins + ties, 2·pairs)`.
pub fn brute_auc_counts(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let (mut num, mut den) = (0u64, 0u64);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 2;
                num += if a > b {
                    2
                } else if a == b {
                    1
                } else {
                    0
                };
            }
        }
    }
    (num, den)
}

/// Threshold maximizing the exact between-class variance over a histogram;
/// the lowest such threshold wins ties.
pub fn brute_otsu(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    let mut best: Option<(u8, BigRational)> = None;
    for t in 0..=255usize {
        let n0: u64 = hist[..=t].iter().sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u64 = hist[..=t].iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
        let s1: u64 = hist[t + 1..]
            .iter()
            .enumerate()
            .map(|(v, &c)| (v + t + 1) as u64 * c)
            .sum();
        let r = |a: u64, b: u64| BigRational::new(a.into(), b.into());
        let d = r(s0, n0) - r(s1, n1);
        let var = r(n0, total) * r(n1, total) * &d * &d;
        if best.as_ref().is_none_or(|(_, v)| var > *v) {
            best = Some((t as u8, var));
        }
    }
    best.expect("two occupied bins").0
}

/// Exhaustive symmetric chamfer over all position pairs of `(C, h, w)` maps.
pub fn brute_chamfer(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, p) = (a.dim(0), a.dim(1) * a.dim(2));
    let at = |t: &Tensor<f64>, ch: usize, q: usize| t.data()[ch * p + q];
    let mut total = 0.0;
    for (x, y) in [(a, b), (b, a)] {
        for i in 0..p {
            let d: Vec<f64> = (0..p)
                .map(|j| (0..c).map(|ch| (at(x, ch, i) - at(y, ch, j)).powi(2)).sum())
                .collect();
            total += d.into_iter().fold(f64::INFINITY, f64::min);
        }
    }
    total / (2 * p) as f64
}

/// Settings of the desk-scale experiments: 48-pixel images with lesion size
/// and jitter scaled down from the 224-pixel defaults.
pub fn desk_synth(n: usize) -> SynthConfig {
    let size = 48;
    let k = size as f64 / 224.0;
    SynthConfig {
        image_size: size,
        n_samples: n,
        lesion_radius_range: (size as f64 / 12.0, size as f64 / 6.5),
        jitter: (2.0 * k, 4.0 * k),
        ..SynthConfig::default()
    }
}

pub fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        seed,
        model: ModelConfig {
            image_size: 48,
            feature_channels: 16,
            extractor_blocks: 3,
            generator_blocks: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Small dataset for fast trainer checks.
pub fn tiny_dataset(dir: &std::path::Path, n: usize, seed: u64) -> Manifest {
    let cfg = SynthConfig {
        image_size: 32,
        n_samples: n,
        lesion_radius_range: (3.0, 6.0),
        jitter: (0.3, 0.6),
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap()
}

pub fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: 8,
        seed,
        cam_every: 0,
        save_features: false,
        model: ModelConfig {
            image_size: 32,
            feature_channels: 8,
            extractor_blocks: 2,
            generator_blocks: 1,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}
