//! Containment checks between tissue classes in 2D cross sections.
//!
//! The wall must enclose lumen and calcium in every frame. A violation is
//! witnessed by a *critical pixel*: a pixel of the enclosed class (A) whose
//! expanded neighborhood touches the complement class set (C = everything
//! that is neither A nor wall), or symmetrically a C pixel near A. The
//! neighborhood is grown by `radius` applications of the 2D 4-connectivity
//! kernel, i.e. a city-block ball.
//!
//! Pixels outside the grid count as background (a member of C), so enclosed
//! tissue that reaches the image border is flagged: a lumen cut by the edge
//! of the field of view cannot be meshed any more than an uncontained one.

use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, SoftLabelMap, TissueClass};

/// Default neighborhood expansion radius.
pub const DEFAULT_RADIUS: usize = 3;

/// Sentinel stored in [`CriticalPixelMask::violating_class`] where no
/// violation is present.
pub const NO_VIOLATION: u8 = u8::MAX;

/// Critical pixels of one 2D cross section.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPixelMask {
    /// True at pixels participating in a containment violation.
    pub mask: Array2<bool>,
    /// Class id of the flagged pixel ([`NO_VIOLATION`] elsewhere).
    pub violating_class: Array2<u8>,
}

impl CriticalPixelMask {
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&v| v)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

/// Grows a binary mask by `radius` applications of the 4-connectivity cross
/// kernel. The returned grid is positive exactly on the city-block ball of
/// the input support.
pub fn expand_neighborhood(mask: &Array2<bool>, radius: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut cur = mask.mapv(|v| if v { 1.0 } else { 0.0 });
    for _ in 0..radius {
        let mut next = Array2::<f64>::zeros((h, w));
        for x in 0..h {
            for y in 0..w {
                let mut acc = cur[(x, y)];
                if x > 0 {
                    acc += cur[(x - 1, y)];
                }
                if x + 1 < h {
                    acc += cur[(x + 1, y)];
                }
                if y > 0 {
                    acc += cur[(x, y - 1)];
                }
                if y + 1 < w {
                    acc += cur[(x, y + 1)];
                }
                next[(x, y)] = acc;
            }
        }
        cur = next;
    }
    cur
}

fn class_a_id(class_a: TissueClass) -> Result<u8> {
    match class_a {
        TissueClass::Lumen | TissueClass::Calcium => Ok(class_a.id()),
        other => Err(Error::InvalidParameter(format!(
            "containment is only checked for lumen or calcium, got {:?}",
            other.name()
        ))),
    }
}

/// Finds the critical pixels of one cross section for the containment of
/// `class_a` (lumen or calcium) by the wall.
///
/// The slice is padded by `radius` pixels of background before expansion, so
/// tissue touching the border is flagged.
pub fn detect_critical_pixels(
    slice: ArrayView2<'_, u8>,
    class_a: TissueClass,
    radius: usize,
) -> Result<CriticalPixelMask> {
    let a = class_a_id(class_a)?;
    let b = TissueClass::Wall.id();
    let (h, w) = slice.dim();
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    // Padding is background, which belongs to C for either choice of A.
    let mut p_a = Array2::from_elem((ph, pw), false);
    let mut p_c = Array2::from_elem((ph, pw), true);
    for x in 0..ph {
        for y in 0..pw {
            if x >= radius && x < radius + h && y >= radius && y < radius + w {
                let v = slice[(x - radius, y - radius)];
                p_a[(x, y)] = v == a;
                p_c[(x, y)] = v != a && v != b;
            }
        }
    }
    let n_a = expand_neighborhood(&p_a, radius);
    let n_c = expand_neighborhood(&p_c, radius);
    let mut mask = Array2::from_elem((h, w), false);
    let mut violating_class = Array2::from_elem((h, w), NO_VIOLATION);
    for x in 0..h {
        for y in 0..w {
            let p = (x + radius, y + radius);
            let critical = (p_a[p] && n_c[p] > 0.0) || (p_c[p] && n_a[p] > 0.0);
            if critical {
                mask[(x, y)] = true;
                violating_class[(x, y)] = slice[(x, y)];
            }
        }
    }
    Ok(CriticalPixelMask {
        mask,
        violating_class,
    })
}

/// Stacks per-frame critical pixel masks into a 3D critical voxel mask.
pub fn stack_critical_voxels(
    map: &SegmentationMap,
    class_a: TissueClass,
    radius: usize,
) -> Result<Array3<bool>> {
    let (h, w, d) = map.dims();
    let frames: Result<Vec<CriticalPixelMask>> = (0..d)
        .into_par_iter()
        .map(|z| detect_critical_pixels(map.frame(z), class_a, radius))
        .collect();
    let frames = frames?;
    let mut out = Array3::from_elem((h, w, d), false);
    for (z, frame) in frames.iter().enumerate() {
        for x in 0..h {
            for y in 0..w {
                out[(x, y, z)] = frame.mask[(x, y)];
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy against the wall class over the critical voxels of the
/// prediction's argmax map. Zero when no voxel is critical.
pub fn topological_loss(
    pred: &SoftLabelMap,
    class_a: TissueClass,
    radius: usize,
) -> Result<f64> {
    let hard = pred.argmax_labels();
    let critical = stack_critical_voxels(&hard, class_a, radius)?;
    let wall = TissueClass::Wall.id() as usize;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((x, y, z), &flag) in critical.indexed_iter() {
        if flag {
            total += -pred.probs()[(wall, x, y, z)].ln();
            count += 1;
        }
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(total / count as f64)
    }
}

/// Fraction of frames along the depth axis containing at least one critical
/// pixel.
pub fn violation_rate(
    map: &SegmentationMap,
    class_a: TissueClass,
    radius: usize,
) -> Result<f64> {
    let d = map.depth();
    let flags = per_frame_violations(map, class_a, radius)?;
    Ok(flags.iter().filter(|&&v| v).count() as f64 / d as f64)
}

/// Per-frame violation flags (true where the frame contains a critical pixel).
pub fn per_frame_violations(
    map: &SegmentationMap,
    class_a: TissueClass,
    radius: usize,
) -> Result<Vec<bool>> {
    (0..map.depth())
        .into_par_iter()
        .map(|z| Ok(!detect_critical_pixels(map.frame(z), class_a, radius)?.is_empty()))
        .collect()
}
