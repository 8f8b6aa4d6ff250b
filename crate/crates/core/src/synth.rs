//! Synthetic bilateral image pairs.
//!
//! Each sample is one synthetic patient. A patient-level latent (breast
//! outline, tissue density, fibrous strands and a few dense-tissue blobs)
//! is rendered on both sides, each through its own small elastic
//! displacement field. The lesion is stamped on the target side only, so the
//! reference never carries a lesion and the symmetric prior holds by
//! construction. Malignant lesions have spiculated outlines, benign ones are
//! smooth discs. Dense-tissue blobs appear on both sides and share the two
//! morphologies, so a single view cannot tell a lesion from normal anatomy.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgnError, Result};
use crate::geometry::{largest_component, tight_bbox, BBox};
use crate::preprocess::mirror_reference;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_samples: usize,
    /// Lesion radius range in pixels.
    pub lesion_radius_range: (f64, f64),
    /// Smoothness of the shared anatomy; larger means coarser structures.
    pub texture_scale: f64,
    pub malign_fraction: f64,
    /// Peak lesion intensity added on top of tissue, in 8-bit units.
    pub lesion_contrast: f64,
    /// Elastic displacement amplitude range in pixels, drawn per side.
    pub jitter: (f64, f64),
    /// Maximum number of dense-tissue blobs mirrored onto both sides.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            n_samples: 100,
            lesion_radius_range: (8.0, 20.0),
            texture_scale: 1.0,
            malign_fraction: 0.5,
            lesion_contrast: 70.0,
            jitter: (2.0, 4.0),
            distractors: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CgnError::parse("<synth config>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CgnError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CgnError::Parse { message, .. } => CgnError::parse(path, message),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgnError::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} too small (need >= 8)", self.image_size));
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("lesion_radius_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if hi >= self.image_size as f64 / 4.0 {
            return bad(format!("lesion radius {hi} must stay below image_size/4"));
        }
        if !(0.0..=1.0).contains(&self.malign_fraction) {
            return bad(format!("malign_fraction {} outside [0, 1]", self.malign_fraction));
        }
        if !(0.0..=255.0).contains(&self.lesion_contrast) {
            return bad(format!("lesion_contrast {} outside [0, 255]", self.lesion_contrast));
        }
        let (jl, jh) = self.jitter;
        if !(jl >= 0.0 && jl <= jh) {
            return bad(format!("jitter ({jl}, {jh}) must satisfy 0 <= lo <= hi"));
        }
        if self.texture_scale <= 0.0 {
            return bad("texture_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilateralSample {
    pub sample_id: String,
    pub patient_id: usize,
    pub x_t: GrayImage,
    /// Reference side as acquired (not mirrored).
    pub x_r: GrayImage,
    /// 1 = malignant; 0 = benign; `None` for healthy pairs.
    pub y_t: Option<u8>,
    /// Lesion pixels on the target geometry, values 0/1.
    pub lesion_mask: GrayImage,
    pub bbox: Option<BBox>,
    /// Breast foreground of the target side, values 0/1.
    pub foreground_t: GrayImage,
}

// ---------------------------------------------------------------------------
// Rendering primitives (all coordinates in pixels).

#[derive(Debug, Clone)]
struct Blob {
    row: f64,
    col: f64,
    radius: f64,
    /// number of spicules; 0 for a smooth disc
    spikes: u32,
    phase: f64,
    amplitude: f64,
}

impl Blob {
    /// Coverage in [0, 1] with a one-pixel soft edge.
    fn profile(&self, r: f64, c: f64) -> f64 {
        let dr = r - self.row;
        let dc = c - self.col;
        let d = (dr * dr + dc * dc).sqrt();
        let edge = if self.spikes == 0 {
            self.radius
        } else {
            let theta = dc.atan2(dr);
            let wave = ((self.spikes as f64) * (theta - self.phase)).cos().max(0.0).powi(6);
            self.radius * (0.75 + 0.9 * wave)
        };
        smoothstep(edge + 0.5 - d)
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Debug, Clone)]
struct Wave {
    freq_r: f64,
    freq_c: f64,
    phase: f64,
    amp: f64,
}

/// Patient-level anatomy shared by both sides.
#[derive(Debug, Clone)]
struct Anatomy {
    semi_c: f64,
    semi_r: f64,
    center_r: f64,
    base: f64,
    bumps: Vec<(f64, f64, f64, f64)>,
    strands: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl Anatomy {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let s = cfg.image_size as f64;
        let semi_c = s * rng.random_range(0.72..0.9);
        let semi_r = s * rng.random_range(0.36..0.46);
        let center_r = s * (0.5 + rng.random_range(-0.03..0.03));
        let base = rng.random_range(0.3..0.5);
        let ts = cfg.texture_scale;
        let bumps = (0..6)
            .map(|_| {
                let (r, c) = point_in_breast(rng, s, semi_c, semi_r, center_r, 0.9, 0.0);
                let sigma = s * ts * rng.random_range(0.08..0.2);
                let amp = rng.random_range(-0.15..0.15);
                (r, c, sigma, amp)
            })
            .collect();
        let strands = (0..4)
            .map(|_| {
                let wavelength = s * ts * rng.random_range(0.08..0.2);
                let angle = rng.random_range(0.0..PI);
                Wave {
                    freq_r: angle.cos() / wavelength,
                    freq_c: angle.sin() / wavelength,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.03..0.08),
                }
            })
            .collect();
        let n_blobs = if cfg.distractors == 0 {
            0
        } else {
            rng.random_range(1..=cfg.distractors)
        };
        let blobs = (0..n_blobs)
            .map(|_| {
                let radius = rng.random_range(cfg.lesion_radius_range.0..=cfg.lesion_radius_range.1);
                let spiculated = rng.random_bool(0.5);
                random_blob(rng, cfg, s, semi_c, semi_r, center_r, radius, spiculated, 0.7)
            })
            .collect();
        Self {
            semi_c,
            semi_r,
            center_r,
            base,
            bumps,
            strands,
            blobs,
        }
    }

    fn inside(&self, r: f64, c: f64) -> bool {
        let u = c / self.semi_c;
        let v = (r - self.center_r) / self.semi_r;
        c >= -0.5 && u * u + v * v <= 1.0
    }

    /// Tissue intensity in [0, 1] at a (possibly displaced) position.
    fn tissue(&self, r: f64, c: f64) -> f64 {
        let mut v = self.base;
        for &(br, bc, sigma, amp) in &self.bumps {
            let d2 = (r - br).powi(2) + (c - bc).powi(2);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        for w in &self.strands {
            v += w.amp * (2.0 * PI * (w.freq_r * r + w.freq_c * c) + w.phase).sin();
        }
        for b in &self.blobs {
            v += b.amplitude * b.profile(r, c);
        }
        // darken towards the skin line
        let u = c / self.semi_c;
        let q = (r - self.center_r) / self.semi_r;
        let rim = (1.0 - (u * u + q * q)).clamp(0.0, 1.0).sqrt();
        (v * (0.6 + 0.4 * rim)).clamp(0.22, 1.0)
    }
}

fn point_in_breast(
    rng: &mut ChaCha8Rng,
    s: f64,
    semi_c: f64,
    semi_r: f64,
    center_r: f64,
    max_ellipse: f64,
    margin: f64,
) -> (f64, f64) {
    for _ in 0..1000 {
        let r = rng.random_range(0.0..s);
        let c = rng.random_range(0.0..s);
        let u = c / semi_c;
        let v = (r - center_r) / semi_r;
        if u * u + v * v <= max_ellipse && c >= margin && r >= margin && r <= s - margin && c <= s - margin {
            return (r, c);
        }
    }
    (center_r, semi_c * 0.5)
}

#[allow(clippy::too_many_arguments)]
fn random_blob(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    s: f64,
    semi_c: f64,
    semi_r: f64,
    center_r: f64,
    radius: f64,
    spiculated: bool,
    strength: f64,
) -> Blob {
    let margin = radius * 1.7 + 1.0;
    let (row, col) = point_in_breast(rng, s, semi_c, semi_r, center_r, 0.5, margin);
    let spikes = if spiculated { rng.random_range(5..=8) } else { 0 };
    Blob {
        row,
        col,
        radius,
        spikes,
        phase: rng.random_range(0.0..2.0 * PI),
        amplitude: strength * rng.random_range(0.8..1.0) * cfg.lesion_contrast / 255.0,
    }
}

/// Smooth displacement field with peak amplitude close to `amp` pixels.
#[derive(Debug, Clone)]
struct Warp {
    waves: Vec<(Wave, Wave)>,
}

impl Warp {
    fn draw(rng: &mut ChaCha8Rng, s: f64, amp: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let mut wave = || {
                    let wavelength = s * rng.random_range(0.5..1.2);
                    let angle = rng.random_range(0.0..2.0 * PI);
                    Wave {
                        freq_r: angle.cos() / wavelength,
                        freq_c: angle.sin() / wavelength,
                        phase: rng.random_range(0.0..2.0 * PI),
                        amp: amp / 3.0_f64.sqrt(),
                    }
                };
                (wave(), wave())
            })
            .collect();
        Self { waves }
    }

    fn displace(&self, r: f64, c: f64) -> (f64, f64) {
        let eval = |w: &Wave| w.amp * (2.0 * PI * (w.freq_r * r + w.freq_c * c) + w.phase).sin();
        let dr: f64 = self.waves.iter().map(|(a, _)| eval(a)).sum();
        let dc: f64 = self.waves.iter().map(|(_, b)| eval(b)).sum();
        (r + dr, c + dc)
    }
}

fn render_side(anatomy: &Anatomy, warp: &Warp, size: usize) -> (Vec<f64>, Vec<bool>) {
    let mut img = vec![0.0; size * size];
    let mut fg = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let (wr, wc) = warp.displace(r as f64, c as f64);
            if anatomy.inside(wr, wc) {
                img[r * size + c] = anatomy.tissue(wr, wc);
                fg[r * size + c] = true;
            }
        }
    }
    (img, fg)
}

fn to_gray(values: &[f64], size: usize) -> GrayImage {
    let data = values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(size as u32, size as u32, data).expect("square buffer")
}

fn mask_image(mask: &[bool], size: usize) -> GrayImage {
    GrayImage::from_raw(size as u32, size as u32, mask.iter().map(|&b| b as u8).collect()).expect("square buffer")
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const HEALTHY_STREAM: u64 = 1 << 40;

fn render_pair(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Anatomy, Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = cfg.image_size;
    let anatomy = Anatomy::draw(rng, cfg);
    let amp_t = rng.random_range(cfg.jitter.0..=cfg.jitter.1);
    let amp_r = rng.random_range(cfg.jitter.0..=cfg.jitter.1);
    let warp_t = Warp::draw(rng, n as f64, amp_t);
    let warp_r = Warp::draw(rng, n as f64, amp_r);
    let (t, fg_t) = render_side(&anatomy, &warp_t, n);
    let (r, _) = render_side(&anatomy, &warp_r, n);
    (anatomy, t, r, fg_t)
}

/// Deterministic in `(config.seed, index)`.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<BilateralSample> {
    config.validate()?;
    let n = config.image_size;
    let mut rng = sample_rng(config.seed, index as u64);
    let (anatomy, mut t, r, fg_t) = render_pair(config, &mut rng);
    let malignant = rng.random_bool(config.malign_fraction);
    let radius = rng.random_range(config.lesion_radius_range.0..=config.lesion_radius_range.1);
    let lesion = random_blob(
        &mut rng,
        config,
        n as f64,
        anatomy.semi_c,
        anatomy.semi_r,
        anatomy.center_r,
        radius,
        malignant,
        1.0,
    );
    let mut mask = vec![false; n * n];
    for row in 0..n {
        for col in 0..n {
            let p = lesion.profile(row as f64, col as f64);
            let k = row * n + col;
            if fg_t[k] {
                t[k] += lesion.amplitude * p;
            }
            // mask follows the geometric outline so it is never empty
            mask[k] = p >= 0.5 && fg_t[k];
        }
    }
    if !mask.iter().any(|&b| b) {
        let k = (lesion.row.round() as usize).min(n - 1) * n + (lesion.col.round() as usize).min(n - 1);
        mask[k] = true;
    }
    let largest = largest_component(&mask, n, n).expect("nonempty lesion mask");
    let bbox = tight_bbox(&largest, n, n);
    let x_r = mirror_reference(&to_gray(&r, n));
    Ok(BilateralSample {
        sample_id: sample_id(index),
        patient_id: index,
        x_t: to_gray(&t, n),
        x_r,
        y_t: Some(malignant as u8),
        lesion_mask: mask_image(&mask, n),
        bbox,
        foreground_t: mask_image(&fg_t, n),
    })
}

/// Lesion-free pairs from the same anatomy process.
pub fn generate_healthy_pairs(config: &SynthConfig, n: usize) -> Result<Vec<BilateralSample>> {
    config.validate()?;
    let size = config.image_size;
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(config.seed, HEALTHY_STREAM + i as u64);
            let (_, t, r, fg_t) = render_pair(config, &mut rng);
            Ok(BilateralSample {
                sample_id: format!("h{i:05}"),
                patient_id: i,
                x_t: to_gray(&t, size),
                x_r: mirror_reference(&to_gray(&r, size)),
                y_t: None,
                lesion_mask: GrayImage::new(size as u32, size as u32),
                bbox: None,
                foreground_t: mask_image(&fg_t, size),
            })
        })
        .collect()
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

// ---------------------------------------------------------------------------
// On-disk dataset.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CgnError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub patient: usize,
    pub split: Split,
    pub label: u8,
    pub bbox_row: usize,
    pub bbox_col: usize,
    pub bbox_height: usize,
    pub bbox_width: usize,
}

impl ManifestEntry {
    pub fn bbox(&self) -> BBox {
        BBox {
            row: self.bbox_row,
            col: self.bbox_col,
            height: self.bbox_height,
            width: self.bbox_width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    patient: usize,
    label: u8,
    bbox: BBox,
    target: String,
    reference: String,
    mask: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Patient-wise 8:1:1 assignment. Patients are shuffled with `seed`; val and
/// test each get at least one patient once there are three or more.
pub fn split_patients(n_patients: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n_patients).collect();
    order.shuffle(&mut sample_rng(seed, u64::MAX));
    let mut n_val = (n_patients as f64 * 0.1).round() as usize;
    let mut n_test = (n_patients as f64 * 0.1).round() as usize;
    if n_patients >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let n_train = n_patients.saturating_sub(n_val + n_test);
    let mut splits = vec![Split::Train; n_patients];
    for (rank, &p) in order.iter().enumerate() {
        splits[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| CgnError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| CgnError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_luma8())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CgnError::io(format!("creating {}", path.display()), e))
}

/// Writes images, masks, sidecars and `manifest.csv` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    if config.n_samples == 0 {
        return Err(CgnError::EmptyDataset);
    }
    for sub in ["images", "masks", "meta"] {
        create_dir(&out_dir.join(sub))?;
    }
    let splits = split_patients(config.n_samples, config.seed);
    let mut entries = Vec::with_capacity(config.n_samples);
    for index in 0..config.n_samples {
        let s = generate_sample(config, index)?;
        let id = s.sample_id.clone();
        let target = format!("images/{id}_T.png");
        let reference = format!("images/{id}_R.png");
        let mask = format!("masks/{id}.png");
        save_png(&s.x_t, &out_dir.join(&target))?;
        save_png(&s.x_r, &out_dir.join(&reference))?;
        let mut mask_img = s.lesion_mask.clone();
        mask_img.pixels_mut().for_each(|p| p.0[0] = p.0[0].saturating_mul(255));
        save_png(&mask_img, &out_dir.join(&mask))?;
        let bbox = s.bbox.expect("lesion samples carry a bbox");
        let label = s.y_t.expect("lesion samples carry a label");
        let sidecar = Sidecar {
            id: id.clone(),
            patient: s.patient_id,
            label,
            bbox,
            target,
            reference,
            mask,
        };
        let meta_path = out_dir.join(format!("meta/{id}.json"));
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&meta_path, text).map_err(|e| CgnError::io(format!("writing {}", meta_path.display()), e))?;
        entries.push(ManifestEntry {
            id,
            patient: s.patient_id,
            split: splits[s.patient_id],
            label,
            bbox_row: bbox.row,
            bbox_col: bbox.col,
            bbox_height: bbox.height,
            bbox_width: bbox.width,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Images and mask of one manifest entry as stored on disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub x_t: GrayImage,
    /// Reference side, still unmirrored.
    pub x_r: GrayImage,
    /// Lesion mask with values 0/1.
    pub mask: GrayImage,
}

impl Manifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| CgnError::parse(&path, e))?;
        for e in &self.entries {
            writer.serialize(e).map_err(|e| CgnError::parse(&path, e))?;
        }
        writer
            .flush()
            .map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
    }

    /// Reads `manifest.csv` from a dataset directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let mut reader = csv::Reader::from_path(&file).map_err(|e| CgnError::parse(&file, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| CgnError::parse(&file, e))?;
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<LoadedSample> {
        let x_t = load_png(&self.root.join(format!("images/{}_T.png", entry.id)))?;
        let x_r = load_png(&self.root.join(format!("images/{}_R.png", entry.id)))?;
        let mut mask = load_png(&self.root.join(format!("masks/{}.png", entry.id)))?;
        mask.pixels_mut().for_each(|p| p.0[0] = (p.0[0] > 127) as u8);
        Ok(LoadedSample {
            entry: entry.clone(),
            x_t,
            x_r,
            mask,
        })
    }
}
