//! Binary masks, 4-connected components and axis-aligned boxes.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates; `row`/`col` are the top-left cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let r0 = self.row.max(other.row);
        let c0 = self.col.max(other.col);
        let r1 = (self.row + self.height).min(other.row + other.height);
        let c1 = (self.col + self.width).min(other.col + other.width);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }

    /// Rescales a box from a `from`-sized square grid to a `to`-sized one,
    /// keeping it inside the target grid and at least one pixel wide.
    pub fn rescale(&self, from: usize, to: usize) -> BBox {
        let s = to as f64 / from as f64;
        let r0 = ((self.row as f64) * s).floor() as usize;
        let c0 = ((self.col as f64) * s).floor() as usize;
        let r1 = (((self.row + self.height) as f64) * s).ceil() as usize;
        let c1 = (((self.col + self.width) as f64) * s).ceil() as usize;
        let r0 = r0.min(to - 1);
        let c0 = c0.min(to - 1);
        BBox {
            row: r0,
            col: c0,
            height: (r1.min(to) - r0).max(1),
            width: (c1.min(to) - c0).max(1),
        }
    }
}

/// Labels the 4-connected components of `mask` (row-major `h × w`).
///
/// Returns per-pixel labels (0 = background, components numbered from 1 in
/// raster order of their first pixel) and the size of each component.
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), h * w);
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = label;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Mask of the largest 4-connected component; ties go to the component
/// found first in raster order. `None` for an empty mask.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<Vec<bool>> {
    let (labels, sizes) = label_components(mask, h, w);
    let best = sizes
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |acc, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })?
        .0 as u32
        + 1;
    Some(labels.iter().map(|&l| l == best).collect())
}

/// Tight box around all set pixels.
pub fn tight_bbox(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| BBox {
        row: r0,
        col: c0,
        height: r1 - r0 + 1,
        width: c1 - c0 + 1,
    })
}
