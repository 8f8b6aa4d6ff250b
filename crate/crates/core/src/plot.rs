//! Static figures: per-sample feature heatmaps, CAM overlays and training
//! progression strips.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::attention::cam_to_bbox;
use crate::error::{CgnError, Result};
use crate::geometry::BBox;
use crate::model::minmax_per_sample;
use crate::preprocess::mirror_reference;
use crate::scalar::Scalar;
use crate::synth::{Manifest, Split};
use crate::tensor::Tensor;
use crate::trainer::{
    read_json, CamSnapshot, FeatureRecord, PairSet, RunRecord, Trainer, CAMS_FILE, FEATURES_DIR, RECORD_FILE,
};

const GAP: u32 = 4;
const MIN_PANEL: u32 = 128;
const TRUTH: Rgb<u8> = Rgb([255, 40, 40]);
const PREDICTED: Rgb<u8> = Rgb([40, 255, 40]);

/// Per-position maximum over channels of a flattened `(C, h, w)` map.
pub fn channel_max(values: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let [c, h, w] = shape else {
        return Err(CgnError::Shape(format!("expected (C, h, w), got {shape:?}")));
    };
    let p = h * w;
    if values.len() != c * p || *c == 0 {
        return Err(CgnError::Shape(format!("{} values for shape {shape:?}", values.len())));
    }
    Ok((0..p)
        .map(|q| (0..*c).map(|ch| values[ch * p + q]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Blue → cyan → yellow → red ramp for `t ∈ [0, 1]`.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    Rgb([
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ])
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

/// `h × w` map rendered through [`colormap`] after min-max scaling,
/// nearest-neighbour upsampled to `size × size`.
pub fn heatmap(values: &[f64], h: usize, w: usize, size: u32) -> RgbImage {
    let norm = normalize(values);
    RgbImage::from_fn(size, size, |x, y| {
        let r = (y as usize * h) / size as usize;
        let c = (x as usize * w) / size as usize;
        colormap(norm[r * w + c])
    })
}

fn upscale_gray(img: &GrayImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(size, size, |x, y| {
        let v = img.get_pixel(x * w / size, y * h / size).0[0];
        Rgb([v, v, v])
    })
}

/// Heatmap blended over a grayscale image, both at `size`.
fn overlay(img: &GrayImage, cam: &[f64], h: usize, w: usize, size: u32) -> RgbImage {
    let base = upscale_gray(img, size);
    let heat = heatmap(cam, h, w, size);
    RgbImage::from_fn(size, size, |x, y| {
        let a = base.get_pixel(x, y).0;
        let b = heat.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|k| ((a[k] as u16 + b[k] as u16) / 2) as u8))
    })
}

fn draw_box(img: &mut RgbImage, bbox: BBox, from: usize, color: Rgb<u8>) {
    let size = img.width() as usize;
    let b = bbox.rescale(from, size);
    if b.area() == 0 {
        return;
    }
    let (r0, c0) = (b.row, b.col);
    let (r1, c1) = (
        (b.row + b.height - 1).min(size - 1),
        (b.col + b.width - 1).min(size - 1),
    );
    for c in c0..=c1 {
        img.put_pixel(c as u32, r0 as u32, color);
        img.put_pixel(c as u32, r1 as u32, color);
    }
    for r in r0..=r1 {
        img.put_pixel(c0 as u32, r as u32, color);
        img.put_pixel(c1 as u32, r as u32, color);
    }
}

/// Panels side by side with a black gap.
fn row(panels: &[RgbImage]) -> RgbImage {
    let size = panels[0].height();
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + GAP * (panels.len() as u32 - 1);
    let mut out = RgbImage::new(width, size);
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + GAP;
    }
    out
}

fn panel_size(image_size: usize) -> u32 {
    let s = image_size as u32;
    s * MIN_PANEL.div_ceil(s).max(1)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| CgnError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CgnError::io(format!("creating {}", dir.display()), e))
}

/// Six panels: target, target with its lesion box, mirrored reference and
/// the channel-max maps of `H_T`, `H_R`, `H_C`.
pub fn feature_figure(target: &GrayImage, mirrored_reference: &GrayImage, rec: &FeatureRecord) -> Result<RgbImage> {
    let h_c = rec
        .h_c
        .as_ref()
        .ok_or_else(|| CgnError::Precondition(format!("sample {} has no counterfactual features", rec.id)))?;
    let image_size = target.width() as usize;
    let size = panel_size(image_size);
    let (h, w) = (rec.shape[1], rec.shape[2]);
    let mut boxed = upscale_gray(target, size);
    draw_box(&mut boxed, rec.bbox, image_size, TRUTH);
    let panels = [
        upscale_gray(target, size),
        boxed,
        upscale_gray(mirrored_reference, size),
        heatmap(&channel_max(&rec.h_t, &rec.shape)?, h, w, size),
        heatmap(&channel_max(&rec.h_r, &rec.shape)?, h, w, size),
        heatmap(&channel_max(h_c, &rec.shape)?, h, w, size),
    ];
    Ok(row(&panels))
}

fn run_manifest(run_dir: &Path) -> Result<Manifest> {
    let record: RunRecord = read_json(&run_dir.join(RECORD_FILE))?;
    Manifest::load(&record.dataset)
}

/// One six-panel figure per saved test sample, written as
/// `<out_dir>/<id>_features.png`.
pub fn plot_feature_heatmaps(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = run_manifest(run_dir)?;
    let dir = run_dir.join(FEATURES_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CgnError::io(format!("reading {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CgnError::Precondition(format!(
            "no saved features in {}",
            dir.display()
        )));
    }
    create_dir(out_dir)?;
    let mut written = Vec::with_capacity(files.len());
    for f in files {
        let rec: FeatureRecord = read_json(&f)?;
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.id == rec.id)
            .ok_or_else(|| CgnError::Precondition(format!("sample {} is not in the dataset", rec.id)))?;
        let s = manifest.load_sample(entry)?;
        let fig = feature_figure(&s.x_t, &mirror_reference(&s.x_r), &rec)?;
        let path = out_dir.join(format!("{}_features.png", rec.id));
        save_png(&fig, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Epochs shown for a cadence: saved epochs divisible by `every`, or the
/// final saved epoch alone when none is.
pub fn progression_epochs(saved: &[usize], every: usize) -> Vec<usize> {
    let mut epochs: Vec<usize> = saved.to_vec();
    epochs.sort_unstable();
    epochs.dedup();
    let picked: Vec<usize> = epochs.iter().copied().filter(|e| every > 0 && e % every == 0).collect();
    match (picked.is_empty(), epochs.last()) {
        (true, Some(&last)) => vec![last],
        _ => picked,
    }
}

/// One strip per sample: target with lesion box, mirrored reference, then
/// CAM overlays at the chosen epochs in ascending order. Written as
/// `<out_dir>/<id>_progression.png`.
pub fn plot_training_progression(run_dir: &Path, every: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = run_manifest(run_dir)?;
    let snaps: Vec<CamSnapshot> = read_json(&run_dir.join(CAMS_FILE))?;
    let mut by_id: BTreeMap<&str, Vec<&CamSnapshot>> = BTreeMap::new();
    for s in &snaps {
        by_id.entry(&s.id).or_default().push(s);
    }
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for (id, list) in by_id {
        let epochs = progression_epochs(&list.iter().map(|s| s.epoch).collect::<Vec<_>>(), every);
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CgnError::Precondition(format!("sample {id} is not in the dataset")))?;
        let s = manifest.load_sample(entry)?;
        let image_size = s.x_t.width() as usize;
        let size = panel_size(image_size);
        let mut target = upscale_gray(&s.x_t, size);
        draw_box(&mut target, entry.bbox(), image_size, TRUTH);
        let mut panels = vec![target, upscale_gray(&mirror_reference(&s.x_r), size)];
        for e in epochs {
            let snap = list
                .iter()
                .find(|s| s.epoch == e)
                .expect("epoch chosen from saved ones");
            panels.push(overlay(&s.x_t, &snap.values, snap.height, snap.width, size));
        }
        let path = out_dir.join(format!("{id}_progression.png"));
        save_png(&row(&panels), &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Predicted-class CAM over every test target, with the predicted box in
/// green and the true box in red. Written as `<out_dir>/<id>_cam.png`.
pub fn plot_cam_overlays<T: Scalar>(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let trainer = Trainer::<T>::from_run_dir(run_dir)?;
    let manifest = run_manifest(run_dir)?;
    let size = trainer.model.config.image_size;
    let set = PairSet::<T>::load(&manifest, &manifest.split(Split::Test), size)?;
    let pred = trainer.predict(&set)?;
    create_dir(out_dir)?;
    let panel = panel_size(size);
    let mut written = Vec::with_capacity(set.len());
    for (i, entry) in set.entries.iter().enumerate() {
        let s = manifest.load_sample(entry)?;
        let cam = &pred.cam_predicted[i];
        let (h, w) = (cam.dim(0), cam.dim(1));
        let norm = minmax_per_sample(&Tensor::from_vec(&[1, h, w], cam.data().to_vec())?);
        let values: Vec<f64> = norm.data().iter().map(|v| v.to_f64_lossy()).collect();
        let mut img = overlay(&s.x_t, &values, h, w, panel);
        if let Ok(b) = cam_to_bbox(cam, size) {
            draw_box(&mut img, b, size, PREDICTED);
        }
        draw_box(&mut img, entry.bbox(), size, TRUTH);
        let path = out_dir.join(format!("{}_cam.png", entry.id));
        save_png(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h_t: Vec<f64>, h_c: Option<Vec<f64>>) -> FeatureRecord {
        FeatureRecord {
            id: "s00000".into(),
            label: 1,
            bbox: BBox {
                row: 2,
                col: 2,
                height: 3,
                width: 3,
            },
            shape: vec![2, 2, 2],
            h_r: h_t.iter().map(|v| -v).collect(),
            h_t,
            h_c,
        }
    }

    #[test]
    fn channel_max_examples() {
        let v = [1.0, 5.0, -2.0, 0.0, 3.0, 4.0, 7.0, -1.0];
        assert_eq!(channel_max(&v, &[2, 2, 2]).unwrap(), vec![3.0, 5.0, 7.0, 0.0]);
        assert!(channel_max(&v, &[3, 2, 2]).is_err());
    }

    #[test]
    fn heatmap_pixel_matches_channel_max() {
        let h_t = vec![1.0, 5.0, -2.0, 0.0, 3.0, 4.0, 7.0, -1.0];
        let img = GrayImage::from_pixel(16, 16, image::Luma([90]));
        let fig = feature_figure(&img, &img, &record(h_t.clone(), Some(h_t.clone()))).unwrap();
        let size = panel_size(16);
        let maxes = channel_max(&h_t, &[2, 2, 2]).unwrap();
        let norm = normalize(&maxes);
        // H_T panel is the fourth; its top-right quadrant reads position (0, 1)
        let x0 = 3 * (size + GAP);
        assert_eq!(*fig.get_pixel(x0 + size - 1, 0), colormap(norm[1]));
        assert_eq!(*fig.get_pixel(x0, size - 1), colormap(norm[2]));
    }

    #[test]
    fn identical_target_and_counterfactual_panels() {
        let h_t = vec![0.3, 0.1, 0.9, 0.2, 0.5, 0.4, 0.0, 0.8];
        let img = GrayImage::from_pixel(16, 16, image::Luma([10]));
        let fig = feature_figure(&img, &img, &record(h_t.clone(), Some(h_t))).unwrap();
        let size = panel_size(16);
        for y in 0..size {
            for x in 0..size {
                assert_eq!(
                    fig.get_pixel(3 * (size + GAP) + x, y),
                    fig.get_pixel(5 * (size + GAP) + x, y)
                );
            }
        }
        assert_eq!(fig.width(), 6 * size + 5 * GAP);
        assert!(feature_figure(&img, &img, &record(vec![0.0; 8], None)).is_err());
    }

    #[test]
    fn progression_cadence() {
        let saved: Vec<usize> = (1..=50).collect();
        assert_eq!(progression_epochs(&saved, 10), vec![10, 20, 30, 40, 50]);
        assert_eq!(progression_epochs(&[5, 3, 4], 60), vec![5]);
        let e = progression_epochs(&[30, 10, 20], 10);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([0, 0, 128]));
        assert_eq!(colormap(1.0), Rgb([128, 0, 0]));
    }
}
