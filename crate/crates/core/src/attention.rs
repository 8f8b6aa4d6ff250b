//! Prediction feedback: CAM → Ω weighting, CAM → bounding box, and the
//! top-1 localization error.

use crate::error::{CgnError, Result};
use crate::geometry::{largest_component, tight_bbox, BBox};
use crate::losses::OmegaVariant;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of the CAM maximum kept when binarizing for boxes.
pub const CAM_THRESHOLD: f64 = 0.2;
/// Minimum IOU for a box to count as localized.
pub const IOU_THRESHOLD: f64 = 0.1;

/// Ω for one `(h, w)` CAM (or a batch `(N, h, w)`, normalized per sample).
pub fn cam_to_omega<T: Scalar>(cam: &Tensor<T>, variant: OmegaVariant) -> Tensor<T> {
    let p = cam.dim(cam.shape().len() - 2) * cam.dim(cam.shape().len() - 1);
    let mut out = cam.data().to_vec();
    for chunk in out.chunks_mut(p) {
        match variant {
            OmegaVariant::Minmax => {
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
            OmegaVariant::Softmax => {
                let hi = chunk.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in chunk.iter_mut() {
                    *v = (*v - hi).exp();
                    total += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= total;
                }
            }
        }
    }
    Tensor::from_vec(cam.shape(), out).expect("same shape")
}

/// Box of the largest component of `cam ≥ 0.2·max` (after shifting a
/// negative minimum to zero), scaled from the `h × w` grid to `image_size`.
pub fn cam_to_bbox<T: Scalar>(cam: &Tensor<T>, image_size: usize) -> Result<BBox> {
    if cam.shape().len() != 2 {
        return Err(CgnError::Shape(format!("cam must be (h, w), got {:?}", cam.shape())));
    }
    let (h, w) = (cam.dim(0), cam.dim(1));
    if h != w {
        return Err(CgnError::Shape("square cams only".into()));
    }
    let lo = cam.data().iter().copied().fold(T::infinity(), T::min);
    let shift = if lo < T::zero() { lo } else { T::zero() };
    let shifted: Vec<T> = cam.data().iter().map(|&v| v - shift).collect();
    let hi = shifted.iter().copied().fold(T::neg_infinity(), T::max);
    if !(hi > T::zero()) {
        return Err(CgnError::Precondition("cam has no positive maximum".into()));
    }
    let cut = hi * T::from_f64_lossy(CAM_THRESHOLD);
    let mask: Vec<bool> = shifted.iter().map(|&v| v >= cut).collect();
    let kept = largest_component(&mask, h, w).expect("argmax survives the threshold");
    let bbox = tight_bbox(&kept, h, w).expect("nonempty component");
    Ok(bbox.rescale(h, image_size))
}

/// `1 − accuracy`, where a prediction is correct iff its label matches and
/// its box has IOU > 0.1 with the truth.
pub fn top1_localization_error(predictions: &[(u8, BBox)], truths: &[(u8, BBox)]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(CgnError::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(CgnError::EmptyDataset);
    }
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|((pl, pb), (tl, tb))| pl == tl && pb.iou(tb) > IOU_THRESHOLD)
        .count();
    Ok(1.0 - correct as f64 / truths.len() as f64)
}

/// Mean Ω over image pixels inside and outside a lesion mask, with each
/// pixel reading the Ω cell that covers it. `mask` is `S × S` row-major.
pub fn omega_mass_inside_outside<T: Scalar>(omega: &Tensor<T>, mask: &[u8], image_size: usize) -> (f64, f64) {
    let (h, w) = (omega.dim(0), omega.dim(1));
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for r in 0..image_size {
        for c in 0..image_size {
            let v = omega.data()[(r * h / image_size) * w + c * w / image_size].to_f64_lossy();
            if mask[r * image_size + c] > 0 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}
