//! Image normalization: bit-depth mapping, Otsu segmentation, cropping,
//! bilinear resize and horizontal mirroring.

use std::path::Path;

use image::{DynamicImage, GrayImage};
use num_bigint::BigUint;

use crate::error::{CgnError, Result};
use crate::geometry::{largest_component, tight_bbox, BBox};

pub const TARGET_SIZE: usize = 224;

/// Integer image with an explicit bit depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub pixels: Vec<u16>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(CgnError::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(CgnError::Config(format!("unsupported bit depth {bit_depth}")));
        }
        let limit = 1u32 << bit_depth;
        if let Some(v) = pixels.iter().find(|&&v| v as u32 >= limit) {
            return Err(CgnError::Config(format!(
                "pixel value {v} exceeds {bit_depth}-bit range"
            )));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
        })
    }
}

/// `floor(v · 255 / 16383)` per pixel.
pub fn map_14bit_to_8bit(img: &RawImage) -> Result<GrayImage> {
    if img.bit_depth != 14 {
        return Err(CgnError::Config(format!(
            "expected a 14-bit image, got {}-bit",
            img.bit_depth
        )));
    }
    let data = img.pixels.iter().map(|&v| (v as u32 * 255 / 16383) as u8).collect();
    Ok(GrayImage::from_raw(img.width as u32, img.height as u32, data).expect("buffer matches dimensions"))
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for p in img.pixels() {
        h[p.0[0] as usize] += 1;
    }
    h
}

/// Otsu threshold over the 256-bin histogram. Class 0 is `value <= t`.
///
/// Between-class variance is proportional to
/// `(N·S0 − n0·S)² / (n0·n1)`, compared exactly in integers, so ties go to
/// the smallest threshold without floating-point noise.
pub fn otsu_threshold(img: &GrayImage) -> Result<u8> {
    otsu_from_histogram(&histogram(img))
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(CgnError::DegenerateHistogram);
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let mut best: Option<(u8, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..=255u8 {
        n0 += hist[t as usize] as u128;
        s0 += t as u128 * hist[t as usize] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (n * s0).abs_diff(n0 * s);
        let num = BigUint::from(diff) * BigUint::from(diff);
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    Ok(best.expect("two distinct values give a valid split").0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Tight crop of the kept component with the background zeroed.
    pub cropped: GrayImage,
    /// Full-size foreground mask (values 0/1) of the kept component.
    pub mask: GrayImage,
    pub bbox: BBox,
    pub threshold: u8,
}

/// Otsu foreground, largest 4-connected component, background zeroed,
/// cropped to the component's tight box.
pub fn segment_breast(img: &GrayImage) -> Result<Segmentation> {
    let threshold = otsu_threshold(img)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let fg: Vec<bool> = img.pixels().map(|p| p.0[0] > threshold).collect();
    let kept = largest_component(&fg, h, w).ok_or(CgnError::EmptyForeground)?;
    let bbox = tight_bbox(&kept, h, w).ok_or(CgnError::EmptyForeground)?;
    let cropped = GrayImage::from_fn(bbox.width as u32, bbox.height as u32, |x, y| {
        let (r, c) = (bbox.row + y as usize, bbox.col + x as usize);
        let keep = kept[r * w + c];
        image::Luma([if keep {
            img.get_pixel(c as u32, r as u32).0[0]
        } else {
            0
        }])
    });
    let mask = GrayImage::from_raw(w as u32, h as u32, kept.iter().map(|&b| b as u8).collect()).expect("mask buffer");
    Ok(Segmentation {
        cropped,
        mask,
        bbox,
        threshold,
    })
}

/// Bilinear resize with pixel-center alignment; output rounded to nearest.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    assert!(w > 0 && h > 0, "resize of an empty image");
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let src = |x: usize, y: usize| img.get_pixel(x as u32, y as u32).0[0] as f64;
    let coord = |i: usize, scale: f64, n: usize| {
        let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    GrayImage::from_fn(out_w as u32, out_h as u32, |x, y| {
        let (x0, x1, fx) = coord(x as usize, sx, w);
        let (y0, y1, fy) = coord(y as usize, sy, h);
        let top = src(x0, y0) * (1.0 - fx) + src(x1, y0) * fx;
        let bottom = src(x0, y1) * (1.0 - fx) + src(x1, y1) * fx;
        let v = top * (1.0 - fy) + bottom * fy;
        image::Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

pub fn resize_to_224(img: &GrayImage) -> GrayImage {
    resize_bilinear(img, TARGET_SIZE, TARGET_SIZE)
}

/// Column order reversed.
pub fn mirror_reference(img: &GrayImage) -> GrayImage {
    image::imageops::flip_horizontal(img)
}

/// Segment, crop, resize to `size`, then zero anything the resize blended
/// below the segmentation threshold.
pub fn preprocess_image(img: &GrayImage, size: usize) -> Result<GrayImage> {
    let seg = segment_breast(img)?;
    let mut out = resize_bilinear(&seg.cropped, size, size);
    out.pixels_mut().for_each(|p| {
        if p.0[0] <= seg.threshold {
            p.0[0] = 0;
        }
    });
    Ok(out)
}

/// Reads an input image: 16-bit grayscale PNGs are treated as 14-bit
/// acquisitions and mapped linearly, 8-bit images pass through.
pub fn load_any(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| CgnError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let raw = RawImage::new(
                buf.width() as usize,
                buf.height() as usize,
                14,
                buf.pixels().map(|p| p.0[0]).collect(),
            )
            .map_err(|e| CgnError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            map_14bit_to_8bit(&raw)
        }
        other => Ok(other.to_luma8()),
    }
}

/// Extension of raw acquisitions: little-endian `u32` width and height,
/// then `width · height` little-endian `u16` samples of 14-bit depth.
pub const RAW_EXTENSION: &str = "raw";

pub fn load_raw14(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| CgnError::io(format!("reading {}", path.display()), e))?;
    let bad = |message: String| CgnError::Image {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != width * height * 2 {
        return Err(bad(format!("{} payload bytes for {width}x{height}", body.len())));
    }
    let pixels = body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    let raw = RawImage::new(width, height, 14, pixels).map_err(|e| bad(e.to_string()))?;
    map_14bit_to_8bit(&raw)
}

pub fn save_raw14(path: &Path, img: &RawImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + img.pixels.len() * 2);
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    for p in &img.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
}

/// Runs [`preprocess_image`] on every PNG and raw file of `input` (sorted by
/// name) and writes `<stem>.png` into `output`.
pub fn preprocess_dir(input: &Path, output: &Path, size: usize) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(input)
        .map_err(|e| CgnError::io(format!("reading {}", input.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png") || x == RAW_EXTENSION)
        })
        .collect();
    files.sort();
    std::fs::create_dir_all(output).map_err(|e| CgnError::io(format!("creating {}", output.display()), e))?;
    let mut written = Vec::with_capacity(files.len());
    for f in files {
        let img = if f.extension().is_some_and(|x| x == RAW_EXTENSION) {
            load_raw14(&f)?
        } else {
            load_any(&f)?
        };
        let out = preprocess_image(&img, size)?;
        let stem = f.file_stem().expect("file has a name").to_string_lossy();
        let path = output.join(format!("{stem}.png"));
        out.save(&path).map_err(|e| CgnError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
    }

    /// Direct definition from pixel lists with exact rationals.
    fn brute_otsu(pixels: &[u8]) -> u8 {
        let mut best: Option<(u8, BigRational)> = None;
        for t in 0..=255u8 {
            let (a, b): (Vec<u8>, Vec<u8>) = pixels.iter().partition(|&&v| v <= t);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let n = BigRational::from_integer(pixels.len().into());
            let mean = |xs: &[u8]| BigRational::new(xs.iter().map(|&v| v as u64).sum::<u64>().into(), xs.len().into());
            let w0 = BigRational::from_integer(a.len().into()) / &n;
            let w1 = BigRational::from_integer(b.len().into()) / &n;
            let d = mean(&a) - mean(&b);
            let var = w0 * w1 * &d * &d;
            if best.as_ref().is_none_or(|(_, v)| var > *v) {
                best = Some((t, var));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn fourteen_bit_endpoints() {
        let raw = RawImage::new(3, 1, 14, vec![0, 8191, 16383]).unwrap();
        let out = map_14bit_to_8bit(&raw).unwrap();
        assert_eq!(out.as_raw(), &vec![0, 127, 255]);
        let raw8 = RawImage::new(1, 1, 8, vec![3]).unwrap();
        assert!(map_14bit_to_8bit(&raw8).is_err());
        assert!(RawImage::new(1, 1, 14, vec![16384]).is_err());
    }

    #[test]
    fn otsu_two_level_picks_zero() {
        let img = gray(4, 4, |x, _| if x < 2 { 0 } else { 255 });
        assert_eq!(otsu_threshold(&img).unwrap(), 0);
    }

    #[test]
    fn otsu_two_modes() {
        let img = gray(10, 10, |x, y| {
            if (x + y) % 2 == 0 {
                30 + (x % 3) as u8
            } else {
                200 - (y % 3) as u8
            }
        });
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 30 && t < 200, "{t}");
        assert!((32..198).contains(&t));
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        let img = gray(5, 5, |_, _| 9);
        assert!(matches!(otsu_threshold(&img), Err(CgnError::DegenerateHistogram)));
    }

    #[test]
    fn segmentation_keeps_large_component() {
        let img = gray(60, 60, |x, y| {
            if (5..45).contains(&x) && (5..30).contains(&y) {
                200
            } else if (50..55).contains(&x) && (50..52).contains(&y) {
                220
            } else {
                0
            }
        });
        let seg = segment_breast(&img).unwrap();
        assert_eq!(
            seg.bbox,
            BBox {
                row: 5,
                col: 5,
                height: 25,
                width: 40
            }
        );
        assert_eq!(seg.mask.pixels().filter(|p| p.0[0] == 1).count(), 1000);
        assert_eq!(seg.cropped.dimensions(), (40, 25));
    }

    #[test]
    fn frame_filling_breast_crop_is_identity() {
        // foreground touches every edge; the few background pixels are already zero
        let img = gray(12, 9, |x, y| {
            if (x, y) == (4, 4) || (x, y) == (7, 2) {
                0
            } else {
                150 + (x as u8)
            }
        });
        let seg = segment_breast(&img).unwrap();
        assert_eq!(seg.cropped, img);
    }

    #[test]
    fn empty_foreground_impossible_after_otsu() {
        // Otsu always leaves at least one pixel above the threshold
        let img = gray(3, 1, |x, _| x as u8);
        assert!(segment_breast(&img).is_ok());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = gray(224, 224, |x, y| ((x * 3 + y * 5) % 256) as u8);
        assert_eq!(resize_to_224(&img), img);
        let c = gray(37, 91, |_, _| 77);
        assert!(resize_to_224(&c).pixels().all(|p| p.0[0] == 77));
    }

    #[test]
    fn resize_halving_gives_block_means() {
        let img = gray(448, 448, |x, y| ((x * 13 + y * 7) % 251) as u8);
        let out = resize_to_224(&img);
        for (x, y) in [(0u32, 0u32), (10, 3), (223, 223), (100, 57)] {
            let m = (img.get_pixel(2 * x, 2 * y).0[0] as f64
                + img.get_pixel(2 * x + 1, 2 * y).0[0] as f64
                + img.get_pixel(2 * x, 2 * y + 1).0[0] as f64
                + img.get_pixel(2 * x + 1, 2 * y + 1).0[0] as f64)
                / 4.0;
            assert_eq!(out.get_pixel(x, y).0[0], m.round() as u8);
        }
    }

    #[test]
    fn mirror_moves_column() {
        let img = gray(7, 2, |x, y| if x == 2 && y == 1 { 255 } else { 0 });
        let m = mirror_reference(&img);
        assert_eq!(m.get_pixel(4, 1).0[0], 255);
        assert_eq!(mirror_reference(&m), img);
        let sym = gray(6, 3, |x, _| [1, 2, 3, 3, 2, 1][x as usize]);
        assert_eq!(mirror_reference(&sym), sym);
    }

    proptest! {
        #[test]
        fn otsu_matches_brute_force(pixels in proptest::collection::vec(any::<u8>(), 2..200)) {
            prop_assume!(pixels.iter().any(|&v| v != pixels[0]));
            let img = GrayImage::from_raw(pixels.len() as u32, 1, pixels.clone()).unwrap();
            prop_assert_eq!(otsu_threshold(&img).unwrap(), brute_otsu(&pixels));
        }
    }

    #[test]
    fn raw_and_png_inputs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (40usize, 30usize);
        let pixels: Vec<u16> = (0..w * h)
            .map(|k| {
                if (5..25).contains(&(k % w)) && (4..26).contains(&(k / w)) {
                    12000
                } else {
                    300
                }
            })
            .collect();
        let raw = RawImage::new(w, h, 14, pixels).unwrap();
        let input = dir.path().join("in");
        std::fs::create_dir(&input).unwrap();
        save_raw14(&input.join("a.raw"), &raw).unwrap();
        map_14bit_to_8bit(&raw).unwrap().save(input.join("b.png")).unwrap();
        std::fs::write(input.join("notes.txt"), "skip me").unwrap();
        let out = preprocess_dir(&input, &dir.path().join("out"), 16).unwrap();
        assert_eq!(out.len(), 2);
        let a = image::open(&out[0]).unwrap().to_luma8();
        let b = image::open(&out[1]).unwrap().to_luma8();
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (16, 16));
        std::fs::write(input.join("c.raw"), [1u8, 0, 0]).unwrap();
        assert!(preprocess_dir(&input, &dir.path().join("out2"), 16).is_err());
    }
}
