//! AUC, Fréchet distance between feature populations, and the one-sided
//! test comparing healthy and unhealthy bilateral distances.

use image::GrayImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CgnError, Result};
use crate::preprocess::mirror_reference;
use crate::scalar::Scalar;
use crate::synth::{generate_healthy_pairs, generate_sample, BilateralSample, SynthConfig};
use crate::tensor::Tensor;

/// Area under the ROC curve as the normalized Mann–Whitney statistic:
/// `P(score_pos > score_neg) + ½ P(tie)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CgnError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CgnError::NonFinite { term: "score".into() });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CgnError::Precondition("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Target,
    Reference,
    Counterfactual,
    MaskedTarget,
    MaskedCounterfactual,
    Image,
}

/// `N × d` sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: DMatrix<f64>,
    pub origin: Origin,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], origin: Origin) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(CgnError::EmptyDataset)?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(CgnError::Shape("feature vectors differ in length".into()));
        }
        Ok(Self {
            vectors: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            origin,
        })
    }

    /// Spatially averaged features `(N, C, h, w)` → `N × C`. With `keep`
    /// (`(N, h, w)`, 1 = keep), only kept positions enter each average;
    /// samples without any kept position are dropped.
    pub fn pooled<T: Scalar>(features: &Tensor<T>, keep: Option<&Tensor<T>>, origin: Origin) -> Result<Self> {
        let s = features.shape();
        if s.len() != 4 {
            return Err(CgnError::Shape(format!("expected (N, C, h, w), got {s:?}")));
        }
        let (n, c, p) = (s[0], s[1], s[2] * s[3]);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let weights: Vec<f64> = match keep {
                Some(k) => k.outer(i).iter().map(|v| v.to_f64_lossy()).collect(),
                None => vec![1.0; p],
            };
            let mass: f64 = weights.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            let row = (0..c)
                .map(|ch| {
                    let base = (i * c + ch) * p;
                    (0..p)
                        .map(|q| weights[q] * features.data()[base + q].to_f64_lossy())
                        .sum::<f64>()
                        / mass
                })
                .collect();
            rows.push(row);
        }
        Self::new(&rows, origin)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = self.vectors.shape();
        let mean = DVector::from_fn(d, |j, _| self.vectors.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| self.vectors[(i, j)] - mean[j]);
        let mut cov = if n > 1 {
            centered.transpose() * &centered / (n - 1) as f64
        } else {
            DMatrix::zeros(d, d)
        };
        if n <= d {
            cov += DMatrix::identity(d, d) * 1e-6;
        }
        (mean, cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of the product root is taken as `Tr((√Σ_a Σ_b √Σ_a)^{1/2})`,
/// which has the same eigenvalues but is symmetric, so one symmetric
/// eigendecomposition suffices; negative eigenvalues are clipped at 0.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CgnError::Shape(format!("feature dimension {} vs {}", a.dim(), b.dim())));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CgnError::EmptyDataset);
    }
    let (ma, ca) = a.moments();
    let (mb, cb) = b.moments();
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidQuartet {
    pub target_reference: f64,
    pub counterfactual_reference: f64,
    pub target_counterfactual: f64,
    /// Target vs counterfactual over lesion-free positions only.
    pub target_counterfactual_lesion_free: Option<f64>,
}

/// Four feature-distribution distances. `lesion_free` is `(N, h, w)` with 1
/// on positions that contain no lesion; without it the last entry is
/// skipped.
pub fn fid_quartet<T: Scalar>(
    target: &Tensor<T>,
    reference: &Tensor<T>,
    counterfactual: &Tensor<T>,
    lesion_free: Option<&Tensor<T>>,
) -> Result<FidQuartet> {
    let t = FeatureSet::pooled(target, None, Origin::Target)?;
    let r = FeatureSet::pooled(reference, None, Origin::Reference)?;
    let c = FeatureSet::pooled(counterfactual, None, Origin::Counterfactual)?;
    let masked = match lesion_free {
        Some(keep) => {
            let mt = FeatureSet::pooled(target, Some(keep), Origin::MaskedTarget)?;
            let mc = FeatureSet::pooled(counterfactual, Some(keep), Origin::MaskedCounterfactual)?;
            Some(fid(&mt, &mc)?)
        }
        None => None,
    };
    Ok(FidQuartet {
        target_reference: fid(&t, &r)?,
        counterfactual_reference: fid(&c, &r)?,
        target_counterfactual: fid(&t, &c)?,
        target_counterfactual_lesion_free: masked,
    })
}

/// Mean intensity of each cell of a `grid × grid` partition, in [0, 1].
pub fn patch_embedding(img: &GrayImage, grid: usize) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut sums = vec![0.0; grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for (x, y, p) in img.enumerate_pixels() {
        let cell = (y as usize * grid / h) * grid + x as usize * grid / w;
        sums[cell] += p.0[0] as f64 / 255.0;
        counts[cell] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect()
}

/// One FID per group of `group` couples, between the embeddings of the
/// targets and of the mirrored references. Incomplete trailing groups are
/// dropped.
pub fn couple_group_fids(pairs: &[(GrayImage, GrayImage)], group: usize, grid: usize) -> Result<Vec<f64>> {
    if group < 2 {
        return Err(CgnError::Config("groups need at least two couples".into()));
    }
    pairs
        .chunks_exact(group)
        .map(|chunk| {
            let t: Vec<Vec<f64>> = chunk.iter().map(|(a, _)| patch_embedding(a, grid)).collect();
            let r: Vec<Vec<f64>> = chunk.iter().map(|(_, b)| patch_embedding(b, grid)).collect();
            fid(
                &FeatureSet::new(&t, Origin::Image)?,
                &FeatureSet::new(&r, Origin::Image)?,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sided Welch test of `H0: μ_H ≥ μ_U` against `H1: μ_H < μ_U`.
pub fn symmetric_prior_test(healthy: &[f64], unhealthy: &[f64]) -> Result<WelchResult> {
    if healthy.len() < 2 || unhealthy.len() < 2 {
        return Err(CgnError::Precondition("each group needs at least two values".into()));
    }
    let (mh, vh) = mean_var(healthy);
    let (mu, vu) = mean_var(unhealthy);
    let (nh, nu) = (healthy.len() as f64, unhealthy.len() as f64);
    let se2 = vh / nh + vu / nu;
    if !(se2 > 0.0) {
        return Err(CgnError::Precondition("zero variance in both groups".into()));
    }
    let t = (mh - mu) / se2.sqrt();
    let df = se2 * se2 / ((vh / nh).powi(2) / (nh - 1.0) + (vu / nu).powi(2) / (nu - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| CgnError::Precondition(e.to_string()))?;
    Ok(WelchResult {
        t,
        df,
        p_value: dist.cdf(t),
    })
}

/// Couples per FID group in the symmetric-prior protocol.
pub const PRIOR_GROUP: usize = 20;
/// Patch grid of the image-level embedding.
pub const PRIOR_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorExperiment {
    pub healthy_fids: Vec<f64>,
    pub unhealthy_fids: Vec<f64>,
    pub welch: WelchResult,
}

/// Target against mirrored reference, grouped FIDs for lesion-free and
/// lesion-bearing synthetic couples, then the one-sided test.
pub fn symmetric_prior_experiment(
    config: &SynthConfig,
    n_healthy: usize,
    n_unhealthy: usize,
) -> Result<PriorExperiment> {
    let couple = |s: BilateralSample| (s.x_t, mirror_reference(&s.x_r));
    let healthy: Vec<_> = generate_healthy_pairs(config, n_healthy)?
        .into_iter()
        .map(couple)
        .collect();
    let unhealthy = (0..n_unhealthy)
        .map(|i| generate_sample(config, i).map(couple))
        .collect::<Result<Vec<_>>>()?;
    let healthy_fids = couple_group_fids(&healthy, PRIOR_GROUP, PRIOR_GRID)?;
    let unhealthy_fids = couple_group_fids(&unhealthy, PRIOR_GROUP, PRIOR_GRID)?;
    let welch = symmetric_prior_test(&healthy_fids, &unhealthy_fids)?;
    Ok(PriorExperiment {
        healthy_fids,
        unhealthy_fids,
        welch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn auc_equals_all_pairs(
            data in proptest::collection::vec((0u8..6, 0u8..2), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    fn gaussian_set(n: usize, mean: &[f64], seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| mean.iter().map(|m| m + normal.sample(&mut rng)).collect())
            .collect();
        FeatureSet::new(&rows, Origin::Target).unwrap()
    }

    #[test]
    fn fid_identity_symmetry_and_shift() {
        let a = gaussian_set(500, &[0.0, 0.0, 0.0], 1);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let b = gaussian_set(400, &[0.5, -0.2, 1.0], 2);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        let x = gaussian_set(10_000, &[0.0, 0.0], 3);
        let y = gaussian_set(10_000, &[1.0, 2.0], 4);
        let f = fid(&x, &y).unwrap();
        assert!((f - 5.0).abs() < 0.25, "{f}");
    }

    #[test]
    fn fid_permutation_invariant_and_shrinks_small_sets() {
        let a = gaussian_set(5, &[0.0; 8], 5);
        let b = gaussian_set(5, &[1.0; 8], 6);
        let f = fid(&a, &b).unwrap();
        assert!(f.is_finite() && f >= 0.0);
        let mut perm = a.clone();
        perm.vectors.swap_rows(0, 4);
        assert!((fid(&perm, &b).unwrap() - f).abs() < 1e-9);
        let short = gaussian_set(5, &[0.0; 3], 7);
        assert!(fid(&a, &short).is_err());
    }

    #[test]
    fn welch_examples() {
        let xs = [1.0, 2.0, 4.0, 3.5];
        assert!((symmetric_prior_test(&xs, &xs).unwrap().p_value - 0.5).abs() < 1e-12);
        let h = [0.0, 1e-3, -1e-3, 2e-3];
        let u = [10.0, 10.001, 9.999, 10.002];
        assert!(symmetric_prior_test(&h, &u).unwrap().p_value < 1e-6);
        assert!(symmetric_prior_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn welch_agrees_with_permutation_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for shift in [0.0, 0.4, 0.8] {
            let h: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
            let u: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng) + shift).collect();
            let p = symmetric_prior_test(&h, &u).unwrap().p_value;
            let observed = h.iter().sum::<f64>() / 12.0 - u.iter().sum::<f64>() / 12.0;
            let pooled: Vec<f64> = h.iter().chain(&u).copied().collect();
            let rounds = 20_000;
            let mut hits = 0;
            let mut idx: Vec<usize> = (0..24).collect();
            for _ in 0..rounds {
                for i in (1..24).rev() {
                    let j = rng.random_range(0..=i);
                    idx.swap(i, j);
                }
                let a: f64 = idx[..12].iter().map(|&k| pooled[k]).sum::<f64>() / 12.0;
                let b: f64 = idx[12..].iter().map(|&k| pooled[k]).sum::<f64>() / 12.0;
                if a - b <= observed {
                    hits += 1;
                }
            }
            let perm = hits as f64 / rounds as f64;
            assert!((p - perm).abs() < 0.03, "welch {p} vs permutation {perm}");
        }
    }

    #[test]
    fn quartet_for_identity_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::from_fn(&[30, 2, 2, 2], |_| rng.random());
        let r = Tensor::<f64>::from_fn(&[30, 2, 2, 2], |_| rng.random::<f64>() + 0.3);
        let q = fid_quartet(&t, &r, &t, None).unwrap();
        assert!(q.target_counterfactual.abs() < 1e-9);
        assert!((q.target_reference - q.counterfactual_reference).abs() < 1e-12);
        assert!(q.target_counterfactual_lesion_free.is_none());
    }

    #[test]
    fn lesions_raise_bilateral_distance() {
        let cfg = SynthConfig {
            image_size: 96,
            lesion_radius_range: (8.0, 14.0),
            ..SynthConfig::default()
        };
        let e = symmetric_prior_experiment(&cfg, 100, 100).unwrap();
        assert_eq!((e.healthy_fids.len(), e.unhealthy_fids.len()), (5, 5));
        assert!(e.welch.p_value < 0.05, "{e:?}");
    }
}
