//! Loss terms of the joint objective.
//!
//! Each term exists twice: as a plain function on probabilities or single
//! feature maps (the readable reference), and as a graph builder used in
//! training. The graph builders work on logits through `softplus`, which
//! equals the probability form (`−ln σ(l) = softplus(−l)`) without
//! overflow, and cap every log-loss at `−ln(1e-7)` to mirror the
//! probability clamp.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CgnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

/// `−ln(PROB_FLOOR)`: largest value any log-loss can take.
pub fn log_loss_ceiling() -> f64 {
    -PROB_FLOOR.ln()
}

/// Clamps `p` into the open unit interval; reports whether it moved.
pub fn clamp_probability<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::from_f64_lossy(PROB_FLOOR);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Binary cross-entropy of the malignant probability.
pub fn cls_loss<T: Scalar>(p_malignant: T, y: u8) -> T {
    let (p, _) = clamp_probability(p_malignant);
    if y == 1 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// `(l_d, l_g)` with `l_d = −ln D(H_R) − ln(1 − D(H_C))` and the
/// non-saturating generator loss `l_g = −ln D(H_C)`.
pub fn adversarial_losses<T: Scalar>(d_on_hr: T, d_on_hc: T) -> (T, T) {
    let (r, _) = clamp_probability(d_on_hr);
    let (c, _) = clamp_probability(d_on_hc);
    (-r.ln() - (T::one() - c).ln(), -c.ln())
}

/// `−ln(1 − p_m(H_C))`.
pub fn negative_embedding<T: Scalar>(p_m_of_hc: T) -> T {
    let (p, _) = clamp_probability(p_m_of_hc);
    -(T::one() - p).ln()
}

/// `max(0, d_tc + β − d_rc)`.
pub fn feedback_triplet<T: Scalar>(d_tc: T, d_rc: T, beta: T) -> T {
    (d_tc + beta - d_rc).max(T::zero())
}

/// Lesion weighting map over feature positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaVariant {
    /// `(cam − min) / (max − min)`
    #[default]
    Minmax,
    /// `exp(cam) / Σ exp(cam)`
    Softmax,
}

/// Normalizer of the lesion-free distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcDenominator {
    /// `h·w − 1`
    #[default]
    HwMinusOne,
    /// `Σ (1 − Ω)`, the actual lesion-free mass.
    LesionFreeMass,
}

fn check_map_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(CgnError::Shape(format!(
            "feature maps must share a (C, h, w) shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.dim(0), a.dim(1) * a.dim(2)))
}

/// Denominator for a given weight map, or the degenerate-denominator error.
pub fn tc_denominator<T: Scalar>(omega: &[T], mode: TcDenominator) -> Result<T> {
    match mode {
        TcDenominator::HwMinusOne => {
            if omega.len() <= 1 {
                return Err(CgnError::DegenerateDenominator);
            }
            Ok(T::from_usize(omega.len() - 1).unwrap())
        }
        TcDenominator::LesionFreeMass => {
            let mass: T = omega.iter().map(|&w| T::one() - w).sum();
            // all-lesion map: numerator is zero too, define the ratio as 0
            Ok(if mass > T::zero() { mass } else { T::one() })
        }
    }
}

/// `Σ_ij (1 − Ω_ij) ‖H_T^ij − H_C^ij‖² / (h·w − 1)` for one `(C, h, w)` pair.
pub fn d_tc<T: Scalar>(h_t: &Tensor<T>, h_c: &Tensor<T>, omega: &Tensor<T>) -> Result<T> {
    d_tc_with(h_t, h_c, omega, TcDenominator::HwMinusOne)
}

pub fn d_tc_with<T: Scalar>(h_t: &Tensor<T>, h_c: &Tensor<T>, omega: &Tensor<T>, mode: TcDenominator) -> Result<T> {
    let (c, p) = check_map_shapes(h_t, h_c)?;
    if omega.shape() != &h_t.shape()[1..] {
        return Err(CgnError::Shape(format!(
            "omega shape {:?} vs features {:?}",
            omega.shape(),
            h_t.shape()
        )));
    }
    let denom = tc_denominator(omega.data(), mode)?;
    let mut acc = T::zero();
    for q in 0..p {
        let mut d2 = T::zero();
        for ch in 0..c {
            let d = h_t.data()[ch * p + q] - h_c.data()[ch * p + q];
            d2 += d * d;
        }
        acc += (T::one() - omega.data()[q]) * d2;
    }
    Ok(acc / denom)
}

/// Symmetric chamfer distance between spatial positions of two `(C, h, w)`
/// maps, divided by `2·h·w`.
pub fn d_rc<T: Scalar>(h_r: &Tensor<T>, h_c: &Tensor<T>) -> Result<T> {
    let (c, p) = check_map_shapes(h_r, h_c)?;
    let dist = |a: &Tensor<T>, i: usize, b: &Tensor<T>, j: usize| {
        (0..c)
            .map(|ch| {
                let d = a.data()[ch * p + i] - b.data()[ch * p + j];
                d * d
            })
            .sum::<T>()
    };
    let mut total = T::zero();
    for (a, b) in [(h_r, h_c), (h_c, h_r)] {
        for i in 0..p {
            let mut best = T::infinity();
            for j in 0..p {
                best = best.min(dist(a, i, b, j));
            }
            total += best;
        }
    }
    Ok(total / T::from_usize(2 * p).unwrap())
}

/// Alias kept for the second ablation variant: the lesion-free distance on
/// its own.
pub fn variant2_fc_loss<T: Scalar>(h_t: &Tensor<T>, h_c: &Tensor<T>, omega: &Tensor<T>) -> Result<T> {
    d_tc(h_t, h_c, omega)
}

/// Region-restricted adversarial pair `(l_g, l_d)`: both maps are multiplied
/// by Ω before the discriminator probability `d` is applied.
pub fn variant1_region_losses<T: Scalar>(
    h_c: &Tensor<T>,
    h_r: &Tensor<T>,
    omega: &Tensor<T>,
    d: impl Fn(&Tensor<T>) -> T,
) -> Result<(T, T)> {
    let (c, p) = check_map_shapes(h_c, h_r)?;
    if omega.len() != p {
        return Err(CgnError::Shape("omega must cover every feature position".into()));
    }
    let mask = |h: &Tensor<T>| {
        let mut out = h.clone();
        for ch in 0..c {
            for q in 0..p {
                out.data_mut()[ch * p + q] *= omega.data()[q];
            }
        }
        out
    };
    let (l_d, l_g) = adversarial_losses(d(&mask(h_r)), d(&mask(h_c)));
    Ok((l_g, l_d))
}

/// Per-sample values of every term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_ad_g: f64,
    pub l_ad_d: f64,
    pub l_ft: f64,
    pub l_ne: f64,
    pub d_tc: f64,
    pub d_rc: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBundle {
    /// Fills the totals from the individual terms.
    pub fn with_totals(mut self) -> Self {
        self.total_g = self.l_ad_g + self.l_ne + self.l_ft + self.l_cls;
        self.total_d = self.l_ad_d;
        self
    }

    fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("l_cls", self.l_cls),
            ("l_ad_g", self.l_ad_g),
            ("l_ad_d", self.l_ad_d),
            ("l_ft", self.l_ft),
            ("l_ne", self.l_ne),
            ("d_tc", self.d_tc),
            ("d_rc", self.d_rc),
        ]
    }
}

/// Sums over samples: `(Σ_k total_g^k, Σ_k total_d^k)`.
pub fn joint_losses(bundles: &[LossBundle]) -> Result<(f64, f64)> {
    let mut g = 0.0;
    let mut d = 0.0;
    for b in bundles {
        if let Some((term, _)) = b.terms().iter().find(|(_, v)| !v.is_finite()) {
            return Err(CgnError::NonFinite { term: term.to_string() });
        }
        g += b.l_ad_g + b.l_ne + b.l_ft + b.l_cls;
        d += b.l_ad_d;
    }
    Ok((g, d))
}

// ---------------------------------------------------------------------------
// Graph builders. All return per-sample `(N,)` vectors.

fn capped<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let sp = g.softplus(x);
    g.clamp_max(sp, T::from_f64_lossy(log_loss_ceiling()))
}

/// `l1 − l0` from `(N, 2)` logits: the log-odds of malignancy.
pub fn logit_margin<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Var {
    let l1 = g.column(logits, 1);
    let l0 = g.column(logits, 0);
    g.sub(l1, l0)
}

/// Cross-entropy from logits: `softplus(m · (1 − 2y))`.
pub fn graph_cls<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Var {
    let m = logit_margin(g, logits);
    let sign = Tensor::from_vec(
        &[labels.len()],
        labels
            .iter()
            .map(|&y| T::from_f64_lossy(1.0 - 2.0 * y as f64))
            .collect(),
    )
    .expect("one label per sample");
    let s = g.constant(sign);
    let z = g.mul(m, s);
    capped(g, z)
}

/// `−ln σ(logit)`.
pub fn graph_neg_log_sigmoid<T: Scalar>(g: &mut Graph<T>, logit: Var) -> Var {
    let neg = g.scale(logit, -T::one());
    capped(g, neg)
}

/// `−ln(1 − σ(logit))`.
pub fn graph_neg_log_one_minus_sigmoid<T: Scalar>(g: &mut Graph<T>, logit: Var) -> Var {
    capped(g, logit)
}

/// Batched lesion-free distance with a constant `(N, h, w)` Ω.
pub fn graph_d_tc<T: Scalar>(
    g: &mut Graph<T>,
    ht: Var,
    hc: Var,
    omega: &Tensor<T>,
    mode: TcDenominator,
) -> Result<Vec<Var>> {
    let n = omega.dim(0);
    let p = omega.len() / n;
    // one node per sample when the denominator differs per sample
    match mode {
        TcDenominator::HwMinusOne => {
            let denom = tc_denominator(&omega.data()[..p], mode)?;
            let weights = omega.map(|w| T::one() - w);
            Ok(vec![g.weighted_sq_dist(ht, hc, weights, denom)])
        }
        TcDenominator::LesionFreeMass => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let denom = tc_denominator(omega.outer(i), mode)?;
                let weights = Tensor::from_fn(omega.shape(), |k| {
                    if k / p == i {
                        T::one() - omega.data()[k]
                    } else {
                        T::zero()
                    }
                });
                out.push(g.weighted_sq_dist(ht, hc, weights, denom));
            }
            Ok(out)
        }
    }
}

/// `relu(d_tc + β − d_rc)`.
pub fn graph_feedback_triplet<T: Scalar>(g: &mut Graph<T>, dtc: Var, drc: Var, beta: f64) -> Var {
    let a = g.add_scalar(dtc, T::from_f64_lossy(beta));
    let diff = g.sub(a, drc);
    g.relu(diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn cls_examples() {
        assert!((cls_loss(0.5, 0) - 2f64.ln()).abs() < 1e-12);
        assert!((cls_loss(0.5, 1) - 2f64.ln()).abs() < 1e-12);
        assert!((cls_loss(0.9f64, 1) - 0.10536051565782628).abs() < 1e-12);
        assert!(cls_loss(1.0, 1) < 1e-6);
        assert!((cls_loss(0.0f64, 1) - log_loss_ceiling()).abs() < 1e-9);
    }

    #[test]
    fn adversarial_examples() {
        let (ld, lg) = adversarial_losses(0.5, 0.5);
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((lg - 2f64.ln()).abs() < 1e-12);
        let (ld, _) = adversarial_losses(1.0, 0.0);
        assert!(ld < 1e-6);
        let (_, lg) = adversarial_losses(0.3, 1.0);
        assert!(lg < 1e-6);
    }

    #[test]
    fn negative_embedding_examples() {
        assert!(negative_embedding(0.0) < 1e-6);
        assert!((negative_embedding(0.5) - 2f64.ln()).abs() < 1e-12);
        assert!((negative_embedding(1.0) - log_loss_ceiling()).abs() < 1e-9);
    }

    #[test]
    fn d_tc_hand_fixture() {
        let ht = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let hc = t(&[1, 2, 2], &[1.0, 0.0, 3.0, 0.0]);
        let om = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert!((d_tc(&ht, &hc, &om).unwrap() - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(variant2_fc_loss(&ht, &hc, &om).unwrap(), d_tc(&ht, &hc, &om).unwrap());
        // lesion-free-mass normalizer: two unmasked positions
        assert!((d_tc_with(&ht, &hc, &om, TcDenominator::LesionFreeMass).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(d_tc(&ht, &hc, &Tensor::full(&[2, 2], 1.0)).unwrap(), 0.0);
        assert_eq!(d_tc(&ht, &ht, &om).unwrap(), 0.0);
    }

    #[test]
    fn d_tc_single_position_is_degenerate() {
        let a = t(&[2, 1, 1], &[1.0, 2.0]);
        let om = t(&[1, 1], &[0.0]);
        assert!(matches!(d_tc(&a, &a, &om), Err(CgnError::DegenerateDenominator)));
    }

    #[test]
    fn d_rc_examples() {
        assert_eq!(d_rc(&t(&[1, 1, 1], &[2.0]), &t(&[1, 1, 1], &[5.0])).unwrap(), 9.0);
        let a = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(d_rc(&a, &a).unwrap(), 0.0);
        // spatial permutation (swap positions 0 and 3)
        let b = t(&[2, 2, 2], &[4.0, 2.0, 3.0, 1.0, 8.0, 6.0, 7.0, 5.0]);
        assert_eq!(d_rc(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(feedback_triplet(1.0, 3.0, 1.0), 0.0);
        assert_eq!(feedback_triplet(2.0, 1.0, 1.0), 2.0);
    }

    #[test]
    fn joint_totals_and_nan_detection() {
        let zero = LossBundle::default().with_totals();
        assert_eq!(joint_losses(&[zero]).unwrap(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bundle = || {
            LossBundle {
                l_cls: rng.random(),
                l_ad_g: rng.random(),
                l_ad_d: rng.random(),
                l_ft: rng.random(),
                l_ne: rng.random(),
                d_tc: rng.random(),
                d_rc: rng.random(),
                ..LossBundle::default()
            }
            .with_totals()
        };
        let (a, b) = (bundle(), bundle());
        let (g, d) = joint_losses(&[a, b]).unwrap();
        let (ga, da) = joint_losses(&[a]).unwrap();
        let (gb, db) = joint_losses(&[b]).unwrap();
        assert!((g - (ga + gb)).abs() < 1e-12 && (d - (da + db)).abs() < 1e-12);
        let resum = a.l_ad_g + a.l_ne + a.l_ft + a.l_cls + b.l_ad_g + b.l_ne + b.l_ft + b.l_cls;
        assert!((g - resum).abs() < 1e-12);
        let bad = LossBundle { l_ne: f64::NAN, ..a };
        match joint_losses(&[a, bad]) {
            Err(CgnError::NonFinite { term }) => assert_eq!(term, "l_ne"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variant1_masks_before_discriminator() {
        let hc = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let hr = t(&[1, 2, 2], &[-1.0, 0.5, 2.0, 0.0]);
        let d = |h: &Tensor<f64>| crate::autodiff::sigmoid(h.data().iter().sum::<f64>() * 0.1 + 0.2);
        let zeros = Tensor::zeros(&[2, 2]);
        let (lg, ld) = variant1_region_losses(&hc, &hr, &zeros, d).unwrap();
        let d0 = d(&Tensor::zeros(&[1, 2, 2]));
        let (ld0, lg0) = adversarial_losses(d0, d0);
        assert_eq!((lg, ld), (lg0, ld0));
        let ones = Tensor::full(&[2, 2], 1.0);
        let (lg, ld) = variant1_region_losses(&hc, &hr, &ones, d).unwrap();
        let (ld1, lg1) = adversarial_losses(d(&hr), d(&hc));
        assert_eq!((lg, ld), (lg1, ld1));
    }

    #[test]
    fn identity_mapping_is_penalized_below_margin() {
        let ht = t(&[1, 2, 2], &[0.0, 0.1, 0.2, 0.3]);
        let hr = t(&[1, 2, 2], &[0.05, 0.15, 0.25, 0.35]);
        let om = Tensor::zeros(&[2, 2]);
        let beta = 1.0;
        let drc = d_rc(&hr, &ht).unwrap();
        assert!(drc < beta);
        let ft = feedback_triplet(d_tc(&ht, &ht, &om).unwrap(), drc, beta);
        assert_eq!(ft, beta - drc);
        assert!(ft > 0.0);
    }
}
