//! Findings-positive patches at annotation centers of mass and negative
//! patches on a fixed lattice away from every annotation.

use ndarray::{s, Array2};

use crate::data::{Label, Patch, ScaledScan};

/// Stride of the negative sampling lattice, in scaled pixels.
pub const NEGATIVE_STRIDE: usize = 32;

/// One 8-connected region of a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    /// Inclusive `(min_row, min_col, max_row, max_col)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sr, sc) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        (sr / n, sc / n)
    }

    pub fn bbox_size(&self) -> (usize, usize) {
        (self.bbox.2 - self.bbox.0 + 1, self.bbox.3 - self.bbox.1 + 1)
    }
}

/// 8-connected components in row-major discovery order.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for ((r0, c0), &m) in mask.indexed_iter() {
        if !m || seen[[r0, c0]] {
            continue;
        }
        seen[[r0, c0]] = true;
        stack.push((r0, c0));
        let mut pixels = Vec::new();
        let mut bbox = (r0, c0, r0, c0);
        while let Some((r, c)) = stack.pop() {
            pixels.push((r, c));
            bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels, bbox });
    }
    out
}

fn base_offset(scan: &ScaledScan, top: usize, left: usize) -> (usize, usize) {
    let f = scan.scale.factor();
    ((top as f64 / f).round() as usize, (left as f64 / f).round() as usize)
}

fn cut(scan: &ScaledScan, top: usize, left: usize, size: usize, label: Label) -> Patch {
    Patch {
        pixels: scan
            .image
            .slice(s![top..top + size, left..left + size])
            .mapv(|v| v.clamp(0.0, 1.0)),
        label,
        offset: base_offset(scan, top, left),
        scale: scan.scale,
        case_id: scan.case_id.clone(),
    }
}

/// Whether a component's bounding box fits inside one patch.
pub fn fits_patch(component: &Component, patch_size: usize) -> bool {
    let (bh, bw) = component.bbox_size();
    bh <= patch_size && bw <= patch_size
}

/// One patch per qualifying annotation component, centered on its center of
/// mass and clamped to the image. Components larger than the patch on either
/// axis are skipped. Scans without a findings-positive annotation give none.
pub fn sample_positive_patches(scan: &ScaledScan, patch_size: usize) -> Vec<Patch> {
    let (h, w) = scan.image.dim();
    let Some(mask) = scan.mask.as_ref().filter(|_| scan.grade >= 2) else {
        return Vec::new();
    };
    if h < patch_size || w < patch_size {
        return Vec::new();
    }
    let half = (patch_size as f64 - 1.0) / 2.0;
    connected_components(mask)
        .into_iter()
        .filter(|c| fits_patch(c, patch_size))
        .map(|c| {
            let (cr, cc) = c.centroid();
            let top = ((cr - half).round().max(0.0) as usize).min(h - patch_size);
            let left = ((cc - half).round().max(0.0) as usize).min(w - patch_size);
            cut(scan, top, left, patch_size, Label::Positive)
        })
        .collect()
}

/// Summed-area table with a zero first row and column.
fn integral(mask: &Array2<bool>) -> Array2<u32> {
    let (h, w) = mask.dim();
    let mut sat = Array2::<u32>::zeros((h + 1, w + 1));
    for r in 0..h {
        for c in 0..w {
            sat[[r + 1, c + 1]] = mask[[r, c]] as u32 + sat[[r, c + 1]] + sat[[r + 1, c]] - sat[[r, c]];
        }
    }
    sat
}

/// Lattice offsets `0, stride, ...` with the patch fully inside `len`.
pub fn lattice(len: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    if len < patch_size || stride == 0 {
        return Vec::new();
    }
    (0..=(len - patch_size) / stride).map(|k| k * stride).collect()
}

/// Every lattice patch whose footprint has no annotated pixel. Tissue
/// content is not filtered: empty background patches are kept.
pub fn sample_negative_patches(scan: &ScaledScan, patch_size: usize, stride: usize) -> Vec<Patch> {
    let (h, w) = scan.image.dim();
    let sat = scan.mask.as_ref().map(integral);
    let mut out = Vec::new();
    for &top in &lattice(h, patch_size, stride) {
        for &left in &lattice(w, patch_size, stride) {
            let overlap = sat.as_ref().map_or(0, |t| {
                let (b, r) = (top + patch_size, left + patch_size);
                t[[b, r]] + t[[top, left]] - t[[top, r]] - t[[b, left]]
            });
            if overlap == 0 {
                out.push(cut(scan, top, left, patch_size, Label::Negative));
            }
        }
    }
    out
}
