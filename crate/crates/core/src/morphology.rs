//! Cross-sectional and volumetric morphological features, feature-curve
//! smoothing and normalization, and assembly of the morphological
//! conditioning map.
//!
//! All quantities are measured in voxel units. Areas are voxel counts,
//! thickness doubles the maximum in-mask Euclidean distance to the mask
//! boundary, circularity is `4*pi*A / P^2` with the perimeter taken from a
//! marching-squares contour of the mask (so a large disc scores close to 1),
//! and arclength is the largest contiguous angular run covered by calcium
//! about the lumen centroid, in 1-degree bins.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::edt::squared_edt_2d_bounded;
use crate::error::{Error, Result};
use crate::volume::{
    ConditioningMaps, FeatureBounds, MorphFeatureMatrix, SegmentationMap, SoftLabelMap,
    TissueClass,
};

/// The eight per-frame morphological features, in canonical order.
pub const FRAME_FEATURE_NAMES: [&str; 8] = [
    "lumen_area",
    "vessel_area",
    "plaque_area",
    "plaque_centroid_dist",
    "plaque_circularity",
    "calcium_area",
    "calcium_thickness",
    "calcium_arclength",
];

/// Default conditioning features.
pub const DEFAULT_FEATURES: [&str; 2] = ["lumen_area", "calcium_area"];

/// Default Savitzky-Golay smoothing window for conditioning curves.
pub const DEFAULT_SMOOTH_WINDOW: usize = 21;

/// Per-frame morphological features. Empty-tissue fields are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameFeatures {
    pub lumen_area: f64,
    /// Arterial tissue area: wall plus calcium.
    pub vessel_area: f64,
    /// Entire cross section: lumen, wall, and calcium.
    pub plaque_area: f64,
    pub plaque_centroid_dist: f64,
    pub plaque_circularity: f64,
    pub calcium_area: f64,
    pub calcium_thickness: f64,
    pub calcium_arclength: f64,
}

impl FrameFeatures {
    pub fn by_name(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "lumen_area" => self.lumen_area,
            "vessel_area" => self.vessel_area,
            "plaque_area" => self.plaque_area,
            "plaque_centroid_dist" => self.plaque_centroid_dist,
            "plaque_circularity" => self.plaque_circularity,
            "calcium_area" => self.calcium_area,
            "calcium_thickness" => self.calcium_thickness,
            "calcium_arclength" => self.calcium_arclength,
            other => return Err(Error::UnknownFeature(other.to_string())),
        })
    }
}

/// The twelve per-volume summary features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VolumeFeatures {
    pub lumen_volume: f64,
    pub stenosis_ratio: f64,
    pub vessel_volume: f64,
    pub vessel_burden: f64,
    pub min_plaque_circularity: f64,
    pub mean_plaque_circularity: f64,
    pub calcium_volume: f64,
    pub calcium_length: f64,
    pub max_calcium_thickness: f64,
    pub mean_calcium_thickness: f64,
    pub max_calcium_arclength: f64,
    pub mean_calcium_arclength: f64,
}

pub const VOLUME_FEATURE_NAMES: [&str; 12] = [
    "lumen_volume",
    "stenosis_ratio",
    "vessel_volume",
    "vessel_burden",
    "min_plaque_circularity",
    "mean_plaque_circularity",
    "calcium_volume",
    "calcium_length",
    "max_calcium_thickness",
    "mean_calcium_thickness",
    "max_calcium_arclength",
    "mean_calcium_arclength",
];

impl VolumeFeatures {
    pub fn as_row(&self) -> [f64; 12] {
        [
            self.lumen_volume,
            self.stenosis_ratio,
            self.vessel_volume,
            self.vessel_burden,
            self.min_plaque_circularity,
            self.mean_plaque_circularity,
            self.calcium_volume,
            self.calcium_length,
            self.max_calcium_thickness,
            self.mean_calcium_thickness,
            self.max_calcium_arclength,
            self.mean_calcium_arclength,
        ]
    }
}

fn image_center(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

fn mask_of(slice: ArrayView2<'_, u8>, pred: impl Fn(u8) -> bool) -> Array2<bool> {
    slice.mapv(pred)
}

fn centroid(mask: &Array2<bool>) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((x, y), &m) in mask.indexed_iter() {
        if m {
            n += 1;
            sx += x as f64;
            sy += y as f64;
        }
    }
    if n == 0 {
        None
    } else {
        Some((sx / n as f64, sy / n as f64))
    }
}

/// Marching-squares contour length of a binary mask. The mask is padded by
/// one background pixel so shapes touching the border are closed.
pub fn contour_perimeter(mask: &Array2<bool>) -> f64 {
    let (h, w) = mask.dim();
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < h && (y as usize) < w && mask[(x as usize, y as usize)]
    };
    const HALF_DIAG: f64 = std::f64::consts::SQRT_2 / 2.0;
    let mut total = 0.0;
    for x in -1..h as isize {
        for y in -1..w as isize {
            let tl = at(x, y);
            let tr = at(x, y + 1);
            let br = at(x + 1, y + 1);
            let bl = at(x + 1, y);
            let count = tl as u8 + tr as u8 + br as u8 + bl as u8;
            total += match count {
                0 | 4 => 0.0,
                1 | 3 => HALF_DIAG,
                // With two corners set, `tl == br` holds exactly for the two
                // saddle configurations (opposite corners, two cuts).
                2 => {
                    if tl == br {
                        2.0 * HALF_DIAG
                    } else {
                        1.0
                    }
                }
                _ => unreachable!(),
            };
        }
    }
    total
}

/// `4*pi*A / P^2`; zero for an empty mask.
pub fn circularity(mask: &Array2<bool>) -> f64 {
    let area = mask.iter().filter(|&&v| v).count() as f64;
    if area == 0.0 {
        return 0.0;
    }
    let p = contour_perimeter(mask);
    if p == 0.0 {
        return 0.0;
    }
    4.0 * std::f64::consts::PI * area / (p * p)
}

/// Twice the maximum Euclidean distance from an in-mask pixel to the mask
/// boundary (the image border counts as boundary).
pub fn mask_thickness(mask: &Array2<bool>) -> f64 {
    if !mask.iter().any(|&v| v) {
        return 0.0;
    }
    let dist = squared_edt_2d_bounded(mask);
    let mut max_sq: f64 = 0.0;
    for (&m, &d) in mask.iter().zip(dist.iter()) {
        if m {
            max_sq = max_sq.max(d);
        }
    }
    2.0 * max_sq.sqrt()
}

/// Largest contiguous angular extent (degrees, 1-degree bins, with
/// wraparound) covered by mask pixels seen from `center`.
///
/// Each pixel covers the angular interval spanned by its half-diagonal at
/// its radius, which keeps runs contiguous for thin arcs; the run length is
/// measured between the extreme pixel-center bins so discretization does not
/// inflate the span.
pub fn angular_span(mask: &Array2<bool>, center: (f64, f64)) -> f64 {
    const BINS: usize = 360;
    let mut covered = [false; BINS];
    let mut centers = [false; BINS];
    let mut any = false;
    let mut surrounds_center = false;
    for ((x, y), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        any = true;
        let dx = x as f64 - center.0;
        let dy = y as f64 - center.1;
        let r = (dx * dx + dy * dy).sqrt();
        if r < 0.75 {
            surrounds_center = true;
            continue;
        }
        let theta = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let half_width = (std::f64::consts::SQRT_2 / 2.0 / r).atan().to_degrees();
        let center_bin = (theta.floor() as usize).min(BINS - 1);
        centers[center_bin] = true;
        let lo = (theta - half_width).floor() as i64;
        let hi = (theta + half_width).floor() as i64;
        for b in lo..=hi {
            covered[b.rem_euclid(BINS as i64) as usize] = true;
        }
    }
    if !any {
        return 0.0;
    }
    if surrounds_center || covered.iter().all(|&c| c) {
        return 360.0;
    }
    // Rotate so the scan starts on an uncovered bin, making runs linear.
    let start = covered.iter().position(|&c| !c).unwrap();
    let mut best = 0usize;
    let mut run_first_center: Option<usize> = None;
    let mut run_last_center: Option<usize> = None;
    for offset in 0..=BINS {
        let in_run = offset < BINS && covered[(start + offset) % BINS];
        if in_run {
            if centers[(start + offset) % BINS] {
                if run_first_center.is_none() {
                    run_first_center = Some(offset);
                }
                run_last_center = Some(offset);
            }
        } else {
            if let (Some(f), Some(l)) = (run_first_center, run_last_center) {
                best = best.max(l - f + 1);
            }
            run_first_center = None;
            run_last_center = None;
        }
    }
    best as f64
}

/// Maximum contiguous angular extent of calcium about `center` (degrees).
pub fn calcium_arclength(slice: ArrayView2<'_, u8>, center: (f64, f64)) -> f64 {
    let mask = mask_of(slice, |v| v == TissueClass::Calcium.id());
    angular_span(&mask, center)
}

/// All eight per-frame features of one cross section.
pub fn frame_features(slice: ArrayView2<'_, u8>) -> FrameFeatures {
    let (h, w) = slice.dim();
    let lumen = mask_of(slice, |v| v == TissueClass::Lumen.id());
    let calcium = mask_of(slice, |v| v == TissueClass::Calcium.id());
    let plaque = mask_of(slice, |v| v != TissueClass::Background.id());

    let count = |m: &Array2<bool>| m.iter().filter(|&&v| v).count() as f64;
    let lumen_area = count(&lumen);
    let calcium_area = count(&calcium);
    let plaque_area = count(&plaque);
    let vessel_area = plaque_area - lumen_area;

    let center = image_center(h, w);
    let plaque_centroid_dist = centroid(&plaque)
        .map(|(cx, cy)| ((cx - center.0).powi(2) + (cy - center.1).powi(2)).sqrt())
        .unwrap_or(0.0);
    let plaque_circularity = circularity(&plaque);

    let arc_center = centroid(&lumen).unwrap_or(center);
    FrameFeatures {
        lumen_area,
        vessel_area,
        plaque_area,
        plaque_centroid_dist,
        plaque_circularity,
        calcium_area,
        calcium_thickness: mask_thickness(&calcium),
        calcium_arclength: angular_span(&calcium, arc_center),
    }
}

/// Largest odd window not exceeding `limit` that still fits the polynomial
/// order; `None` when no valid window exists.
fn clamp_window(window: usize, polyorder: usize, limit: usize) -> Option<usize> {
    let mut w = window.min(limit);
    if w % 2 == 0 {
        w = w.saturating_sub(1);
    }
    if w > polyorder && w >= 1 {
        Some(w)
    } else {
        None
    }
}

/// The twelve per-volume summary features.
pub fn volume_features(map: &SegmentationMap) -> VolumeFeatures {
    let d = map.depth();
    let frames: Vec<FrameFeatures> = (0..d).map(|z| frame_features(map.frame(z))).collect();

    let lumen_curve: Vec<f64> = frames.iter().map(|f| f.lumen_area).collect();
    let lumen_volume: f64 = lumen_curve.iter().sum();
    let vessel_volume: f64 = frames.iter().map(|f| f.vessel_area).sum();
    let calcium_volume: f64 = frames.iter().map(|f| f.calcium_area).sum();
    let calcium_length = frames.iter().filter(|f| f.calcium_area > 0.0).count() as f64;

    let mean_lumen = lumen_volume / d as f64;
    let min_lumen = lumen_curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let stenosis_ratio = if mean_lumen > 0.0 {
        min_lumen / mean_lumen
    } else {
        0.0
    };

    // The minimum-stenosis site is located on the smoothed curve so a single
    // noisy frame does not move it; the ratio itself uses raw areas.
    let site_curve = match clamp_window(DEFAULT_SMOOTH_WINDOW, 2, d) {
        Some(w) => smooth_curve(&lumen_curve, w, 2).unwrap_or_else(|_| lumen_curve.clone()),
        None => lumen_curve.clone(),
    };
    let mut site = 0usize;
    for (i, &v) in site_curve.iter().enumerate() {
        if v < site_curve[site] {
            site = i;
        }
    }
    let vessel_burden = if frames[site].lumen_area > 0.0 {
        frames[site].vessel_area / frames[site].lumen_area
    } else {
        0.0
    };

    let stat = |values: Vec<f64>| -> (f64, f64, f64) {
        // (min, max, mean) over the given values; zeros when empty.
        if values.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (min, max, mean)
        }
    };
    let (min_circ, _, mean_circ) = stat(
        frames
            .iter()
            .filter(|f| f.plaque_area > 0.0)
            .map(|f| f.plaque_circularity)
            .collect(),
    );
    let calc_frames: Vec<&FrameFeatures> =
        frames.iter().filter(|f| f.calcium_area > 0.0).collect();
    let (_, max_th, mean_th) = stat(calc_frames.iter().map(|f| f.calcium_thickness).collect());
    let (_, max_arc, mean_arc) = stat(calc_frames.iter().map(|f| f.calcium_arclength).collect());

    VolumeFeatures {
        lumen_volume,
        stenosis_ratio,
        vessel_volume,
        vessel_burden,
        min_plaque_circularity: min_circ,
        mean_plaque_circularity: mean_circ,
        calcium_volume,
        calcium_length,
        max_calcium_thickness: max_th,
        mean_calcium_thickness: mean_th,
        max_calcium_arclength: max_arc,
        mean_calcium_arclength: mean_arc,
    }
}

/// Extracts the named per-frame feature curves as an `m x D` matrix.
pub fn extract_feature_matrix(
    map: &SegmentationMap,
    feature_names: &[String],
) -> Result<MorphFeatureMatrix> {
    for name in feature_names {
        if !FRAME_FEATURE_NAMES.contains(&name.as_str()) {
            return Err(Error::UnknownFeature(name.clone()));
        }
    }
    let d = map.depth();
    let mut features = Array2::zeros((feature_names.len(), d));
    for z in 0..d {
        let frame = frame_features(map.frame(z));
        for (row, name) in feature_names.iter().enumerate() {
            features[(row, z)] = frame.by_name(name)?;
        }
    }
    MorphFeatureMatrix::new(features, feature_names.to_vec())
}

pub fn default_feature_names() -> Vec<String> {
    DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Savitzky-Golay smoothing
// ---------------------------------------------------------------------------

/// Solves the small SPD system `m x = b` by Gaussian elimination with
/// partial pivoting.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &c| m[a][col].abs().partial_cmp(&m[c][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Numerical("singular Savitzky-Golay system".into()));
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Ok(x)
}

/// Least-squares polynomial weights over a window of offsets
/// `-half..=half`, evaluated at offset `eval`: the smoothed value is
/// `sum_j w_j * y[j]` over the window samples.
fn sg_weights(window: usize, polyorder: usize, eval: f64) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= polyorder {
        return Err(Error::InvalidParameter(format!(
            "Savitzky-Golay window must be odd and > polyorder, got window {window}, order {polyorder}"
        )));
    }
    let half = (window / 2) as isize;
    let n = polyorder + 1;
    // Normal equations of the least-squares polynomial fit over the window.
    let mut gram = vec![vec![0.0; n]; n];
    for i in -half..=half {
        let mut powers = vec![1.0; 2 * polyorder + 1];
        for p in 1..=2 * polyorder {
            powers[p] = powers[p - 1] * i as f64;
        }
        for r in 0..n {
            for c in 0..n {
                gram[r][c] += powers[r + c];
            }
        }
    }
    let mut rhs = vec![0.0; n];
    let mut power = 1.0;
    for v in rhs.iter_mut() {
        *v = power;
        power *= eval;
    }
    let g = solve_dense(gram, rhs)?;
    let mut coeffs = Vec::with_capacity(window);
    for i in -half..=half {
        let mut acc = 0.0;
        let mut power = 1.0;
        for gj in g.iter() {
            acc += gj * power;
            power *= i as f64;
        }
        coeffs.push(acc);
    }
    Ok(coeffs)
}

/// Central Savitzky-Golay smoothing coefficients for an odd `window` and a
/// polynomial of degree `polyorder`.
pub fn sg_coefficients(window: usize, polyorder: usize) -> Result<Vec<f64>> {
    sg_weights(window, polyorder, 0.0)
}

/// The full smoothing operator: central convolution in the interior and
/// polynomial-fit extrapolation over the first/last window at the ends, so
/// polynomials of degree <= `polyorder` pass through unchanged everywhere.
#[derive(Debug, Clone)]
pub struct SgFilter {
    pub window: usize,
    pub polyorder: usize,
    center: Vec<f64>,
    /// `boundary[t]` weights the first `window` samples to produce output
    /// `t` (`t < window/2`); the tail is its mirror image.
    boundary: Vec<Vec<f64>>,
}

impl SgFilter {
    pub fn new(window: usize, polyorder: usize) -> Result<SgFilter> {
        let center = sg_weights(window, polyorder, 0.0)?;
        let half = window / 2;
        let mut boundary = Vec::with_capacity(half);
        for t in 0..half {
            boundary.push(sg_weights(window, polyorder, t as f64 - half as f64)?);
        }
        Ok(SgFilter {
            window,
            polyorder,
            center,
            boundary,
        })
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        let n = values.len();
        if self.window > n {
            return Err(Error::InvalidParameter(format!(
                "smoothing window {} exceeds curve length {n}",
                self.window
            )));
        }
        let half = self.window / 2;
        let mut out = vec![0.0; n];
        for (t, o) in out.iter_mut().enumerate() {
            *o = if t < half {
                self.boundary[t]
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| c * values[j])
                    .sum()
            } else if t >= n - half {
                self.boundary[n - 1 - t]
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| c * values[n - 1 - j])
                    .sum()
            } else {
                self.center
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| c * values[t + j - half])
                    .sum()
            };
        }
        Ok(out)
    }

    /// Transpose of [`SgFilter::apply`] (the filter is a fixed linear map).
    pub fn apply_adjoint(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let n = upstream.len();
        if self.window > n {
            return Err(Error::InvalidParameter(format!(
                "smoothing window {} exceeds curve length {n}",
                self.window
            )));
        }
        let half = self.window / 2;
        let mut out = vec![0.0; n];
        for (t, &g) in upstream.iter().enumerate() {
            if t < half {
                for (j, &c) in self.boundary[t].iter().enumerate() {
                    out[j] += c * g;
                }
            } else if t >= n - half {
                for (j, &c) in self.boundary[n - 1 - t].iter().enumerate() {
                    out[n - 1 - j] += c * g;
                }
            } else {
                for (j, &c) in self.center.iter().enumerate() {
                    out[t + j - half] += c * g;
                }
            }
        }
        Ok(out)
    }
}

/// Savitzky-Golay smoothing of one curve.
pub fn smooth_curve(values: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    SgFilter::new(window, polyorder)?.apply(values)
}

/// Per-row Savitzky-Golay smoothing of a feature matrix.
pub fn smooth_features(
    matrix: &MorphFeatureMatrix,
    window: usize,
    polyorder: usize,
) -> Result<MorphFeatureMatrix> {
    let mut out = matrix.clone();
    for mut row in out.features.axis_iter_mut(Axis(0)) {
        let values: Vec<f64> = row.to_vec();
        let smoothed = smooth_curve(&values, window, polyorder)?;
        for (v, s) in row.iter_mut().zip(smoothed) {
            *v = s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Percentile by linear interpolation between order statistics (inclusive).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// (p2, p98) bounds per feature row, pooled over a corpus of feature matrices.
pub fn compute_bounds(matrices: &[MorphFeatureMatrix]) -> Result<Vec<FeatureBounds>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty corpus".into()))?;
    let m = first.num_features();
    let mut bounds = Vec::with_capacity(m);
    for row in 0..m {
        let mut values = Vec::new();
        for matrix in matrices {
            if matrix.num_features() != m {
                return Err(Error::ShapeMismatch(
                    "corpus matrices disagree on feature count".into(),
                ));
            }
            values.extend(matrix.features.row(row).iter().cloned());
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bounds.push(FeatureBounds {
            p2: percentile(&values, 2.0),
            p98: percentile(&values, 98.0),
        });
    }
    Ok(bounds)
}

/// Maps each value to `(v - p2) / (p98 - p2)` per feature row; no clamping.
pub fn normalize_features(
    matrix: &MorphFeatureMatrix,
    bounds: &[FeatureBounds],
) -> Result<MorphFeatureMatrix> {
    if bounds.len() != matrix.num_features() {
        return Err(Error::ShapeMismatch(format!(
            "{} bounds for {} features",
            bounds.len(),
            matrix.num_features()
        )));
    }
    let mut out = matrix.clone();
    for (row, b) in bounds.iter().enumerate() {
        let span = b.p98 - b.p2;
        if span == 0.0 {
            return Err(Error::DegenerateBounds(matrix.names[row].clone()));
        }
        for v in out.features.row_mut(row).iter_mut() {
            *v = (*v - b.p2) / span;
        }
    }
    out.bounds = Some(bounds.to_vec());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conditioning map assembly
// ---------------------------------------------------------------------------

/// Average-pools each feature row along depth by `D / d` and broadcasts the
/// pooled value over the `h x w` plane.
pub fn build_morph_condition_map(
    matrix: &MorphFeatureMatrix,
    latent_dims: (usize, usize, usize),
) -> Result<Array4<f64>> {
    let (h, w, d) = latent_dims;
    let frames = matrix.num_frames();
    if d == 0 || frames % d != 0 {
        return Err(Error::ShapeMismatch(format!(
            "depth {frames} is not divisible by latent depth {d}"
        )));
    }
    let k = frames / d;
    let m = matrix.num_features();
    let mut out = Array4::zeros((m, h, w, d));
    for row in 0..m {
        for dd in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                acc += matrix.features[(row, dd * k + j)];
            }
            let pooled = acc / k as f64;
            for x in 0..h {
                for y in 0..w {
                    out[(row, x, y, dd)] = pooled;
                }
            }
        }
    }
    Ok(out)
}

/// Per-frame sum of one class's probability channel (the differentiable area
/// regressor). On hard maps this equals the voxel count; the derivative with
/// respect to every voxel probability is exactly 1.
pub fn soft_area_regressor(soft: &SoftLabelMap, class: TissueClass) -> Vec<f64> {
    let (_, _, _, d) = soft.probs().dim();
    let channel = soft.probs().index_axis(Axis(0), class.id() as usize);
    (0..d)
        .map(|z| channel.index_axis(Axis(2), z).sum())
        .collect()
}

/// Tissue-class channel sets behind each area feature, used by the
/// differentiable regressor; `None` for features that have no linear form.
pub fn area_feature_classes(name: &str) -> Option<Vec<usize>> {
    match name {
        "lumen_area" => Some(vec![TissueClass::Lumen.id() as usize]),
        "calcium_area" => Some(vec![TissueClass::Calcium.id() as usize]),
        "vessel_area" => Some(vec![
            TissueClass::Wall.id() as usize,
            TissueClass::Calcium.id() as usize,
        ]),
        "plaque_area" => Some(vec![
            TissueClass::Wall.id() as usize,
            TissueClass::Lumen.id() as usize,
            TissueClass::Calcium.id() as usize,
        ]),
        _ => None,
    }
}

/// Per-frame channel-set sums over a raw 4D grid, one row per class set.
pub fn soft_area_curves(values: &Array4<f64>, class_sets: &[Vec<usize>]) -> Array2<f64> {
    let (_, h, w, d) = values.dim();
    let mut out = Array2::zeros((class_sets.len(), d));
    for (row, classes) in class_sets.iter().enumerate() {
        for z in 0..d {
            let mut acc = 0.0;
            for &c in classes {
                for x in 0..h {
                    for y in 0..w {
                        acc += values[(c, x, y, z)];
                    }
                }
            }
            out[(row, z)] = acc;
        }
    }
    out
}

/// The full morphological conditioning pipeline: extract (or accept) raw
/// feature curves, normalize with fixed bounds, optionally smooth, pool to
/// the latent depth, and broadcast. One instance is shared between
/// conditioning-signal construction and guidance so both measure features
/// the same way.
#[derive(Debug, Clone)]
pub struct MorphConditioner {
    pub features: Vec<String>,
    pub bounds: Vec<FeatureBounds>,
    pub smooth_window: Option<usize>,
    pub polyorder: usize,
    pub latent_dims: (usize, usize, usize),
}

impl MorphConditioner {
    pub fn new(
        features: Vec<String>,
        bounds: Vec<FeatureBounds>,
        smooth_window: Option<usize>,
        latent_dims: (usize, usize, usize),
    ) -> Result<MorphConditioner> {
        if features.len() != bounds.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} features but {} bounds",
                features.len(),
                bounds.len()
            )));
        }
        for name in &features {
            if !FRAME_FEATURE_NAMES.contains(&name.as_str()) {
                return Err(Error::UnknownFeature(name.clone()));
            }
        }
        Ok(MorphConditioner {
            features,
            bounds,
            smooth_window,
            polyorder: 2,
            latent_dims,
        })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    /// Normalize, smooth, pool, broadcast.
    pub fn condition_from_matrix(&self, raw: &MorphFeatureMatrix) -> Result<Array4<f64>> {
        if raw.names != self.features {
            return Err(Error::ShapeMismatch(format!(
                "conditioner features {:?} do not match matrix features {:?}",
                self.features, raw.names
            )));
        }
        let mut matrix = normalize_features(raw, &self.bounds)?;
        if let Some(window) = self.smooth_window {
            matrix = smooth_features(&matrix, window, self.polyorder)?;
        }
        build_morph_condition_map(&matrix, self.latent_dims)
    }

    /// Measures hard features from a label map and runs the pipeline.
    pub fn condition_from_map(&self, map: &SegmentationMap) -> Result<Array4<f64>> {
        let raw = extract_feature_matrix(map, &self.features)?;
        self.condition_from_matrix(&raw)
    }

    /// Wraps a morphological map and an (optionally null) skeletal map.
    pub fn with_skel(&self, morph: Array4<f64>, skel: Option<Array4<f64>>) -> Result<ConditioningMaps> {
        let (h, w, d) = self.latent_dims;
        let skel = skel.unwrap_or_else(|| Array4::zeros((1, h, w, d)));
        ConditioningMaps::new(morph, skel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn disc_slice(n: usize, center: (f64, f64), r: f64, class: TissueClass) -> Array2<u8> {
        Array2::from_shape_fn((n, n), |(x, y)| {
            let d = ((x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2)).sqrt();
            if d <= r {
                class.id()
            } else {
                0
            }
        })
    }

    #[test]
    fn centered_disc_areas_and_centroid() {
        let n = 64;
        let c = ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
        let slice = disc_slice(n, c, 20.0, TissueClass::Lumen);
        let f = frame_features(slice.view());
        // Pixel-count oracle.
        let expected: f64 = slice.iter().filter(|&&v| v == 2).count() as f64;
        assert_eq!(f.lumen_area, expected);
        assert!((f.lumen_area - std::f64::consts::PI * 400.0).abs()
            < 0.05 * std::f64::consts::PI * 400.0);
        assert_abs_diff_eq!(f.plaque_centroid_dist, 0.0, epsilon = 1e-9);
        assert_eq!(f.vessel_area, 0.0);
    }

    #[test]
    fn disc_circularity_is_near_one() {
        let n = 64;
        let c = ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
        let slice = disc_slice(n, c, 20.0, TissueClass::Wall);
        let f = frame_features(slice.view());
        assert!(
            (f.plaque_circularity - 1.0).abs() < 0.15,
            "circularity {} too far from 1",
            f.plaque_circularity
        );
    }

    #[test]
    fn empty_slice_is_all_zero() {
        let slice = Array2::<u8>::zeros((16, 16));
        assert_eq!(frame_features(slice.view()), FrameFeatures::default());
    }

    #[test]
    fn solid_calcium_disc_thickness() {
        let n = 33;
        let slice = disc_slice(n, (16.0, 16.0), 10.0, TissueClass::Calcium);
        let f = frame_features(slice.view());
        assert!(
            (f.calcium_thickness - 20.0).abs() <= 1.0,
            "thickness {}",
            f.calcium_thickness
        );
    }

    fn annular_arc(
        n: usize,
        center: (f64, f64),
        r0: f64,
        r1: f64,
        a0: f64,
        a1: f64,
    ) -> Array2<u8> {
        Array2::from_shape_fn((n, n), |(x, y)| {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx).to_degrees().rem_euclid(360.0);
            if r >= r0 && r <= r1 && theta >= a0 && theta <= a1 {
                TissueClass::Calcium.id()
            } else {
                0
            }
        })
    }

    #[test]
    fn ninety_degree_arc_measures_ninety() {
        let c = (31.5, 31.5);
        let slice = annular_arc(64, c, 12.0, 18.0, 10.0, 100.0);
        let span = calcium_arclength(slice.view(), c);
        assert!((span - 90.0).abs() <= 2.0, "span {span}");
    }

    #[test]
    fn full_ring_measures_full_circle() {
        let c = (31.5, 31.5);
        let slice = annular_arc(64, c, 14.0, 16.0, 0.0, 360.0);
        assert_eq!(calcium_arclength(slice.view(), c), 360.0);
    }

    #[test]
    fn no_calcium_measures_zero() {
        let slice = Array2::<u8>::zeros((16, 16));
        assert_eq!(calcium_arclength(slice.view(), (7.5, 7.5)), 0.0);
    }

    #[test]
    fn thin_ring_remains_contiguous() {
        // One to two pixels thick at radius 15: pixel centers are several
        // degrees apart, but interval coverage keeps the run connected.
        let c = (31.5, 31.5);
        let slice = annular_arc(64, c, 15.0, 16.0, 0.0, 360.0);
        assert_eq!(calcium_arclength(slice.view(), c), 360.0);
    }

    fn tube_map(d: usize, r: f64) -> SegmentationMap {
        let n = 48;
        let c = ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
        let mut labels = Array3::zeros((n, n, d));
        for z in 0..d {
            let slice = disc_slice(n, c, r, TissueClass::Lumen);
            for ((x, y), &v) in slice.indexed_iter() {
                labels[(x, y, z)] = v;
            }
        }
        SegmentationMap::new(labels, [1.0; 3]).unwrap()
    }

    #[test]
    fn uniform_tube_stenosis_ratio_is_one() {
        let map = tube_map(32, 10.0);
        let vf = volume_features(&map);
        assert_abs_diff_eq!(vf.stenosis_ratio, 1.0, epsilon = 1e-12);
        assert_eq!(vf.calcium_volume, 0.0);
        assert_eq!(vf.calcium_length, 0.0);
        assert_eq!(vf.max_calcium_thickness, 0.0);
    }

    #[test]
    fn matrix_extraction_matches_per_frame_loop() {
        let map = tube_map(8, 9.0);
        let names = default_feature_names();
        let matrix = extract_feature_matrix(&map, &names).unwrap();
        for z in 0..8 {
            let f = frame_features(map.frame(z));
            assert_eq!(matrix.features[(0, z)], f.lumen_area);
            assert_eq!(matrix.features[(1, z)], f.calcium_area);
        }
    }

    #[test]
    fn unknown_feature_is_rejected() {
        let map = tube_map(4, 8.0);
        let err = extract_feature_matrix(&map, &["foo".to_string()]).unwrap_err();
        assert!(matches!(err, Error::UnknownFeature(_)));
    }

    #[test]
    fn smoothing_reproduces_low_degree_polynomials() {
        let n = 64;
        for (a, b, c) in [(1.0, 0.0, 0.0), (0.5, -2.0, 3.0), (0.01, 1.5, -7.0)] {
            let curve: Vec<f64> = (0..n)
                .map(|i| a * (i * i) as f64 + b * i as f64 + c)
                .collect();
            let smoothed = smooth_curve(&curve, 21, 2).unwrap();
            for (v, s) in curve.iter().zip(&smoothed) {
                assert!((v - s).abs() < 1e-9, "{v} vs {s}");
            }
        }
    }

    #[test]
    fn smoothing_matches_least_squares_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 80usize;
        let curve: Vec<f64> = (0..n)
            .map(|i| (i as f64 * 0.3).sin() + 0.1 * rng.gen::<f64>())
            .collect();
        let window = 21usize;
        let half = window / 2;
        let smoothed = smooth_curve(&curve, window, 2).unwrap();
        // Independent oracle: fit a quadratic over the window anchored at
        // each position (clamped to the curve at the ends) by direct least
        // squares and evaluate it at the output position.
        for t in 0..n {
            let start = t.saturating_sub(half).min(n - window);
            let mut g = [[0.0; 3]; 3];
            let mut r = [0.0; 3];
            for j in 0..window {
                let x = (start + j) as f64;
                let y = curve[start + j];
                let p = [1.0, x, x * x];
                for a in 0..3 {
                    for b in 0..3 {
                        g[a][b] += p[a] * p[b];
                    }
                    r[a] += p[a] * y;
                }
            }
            let m: Vec<Vec<f64>> = g.iter().map(|row| row.to_vec()).collect();
            let sol = solve_dense(m, r.to_vec()).unwrap();
            let x = t as f64;
            let expected = sol[0] + sol[1] * x + sol[2] * x * x;
            assert!(
                (smoothed[t] - expected).abs() < 1e-7,
                "frame {t}: {} vs {}",
                smoothed[t],
                expected
            );
        }
    }

    #[test]
    fn sg_adjoint_is_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let n = 30;
        let filter = SgFilter::new(9, 2).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        // <Ax, y> == <x, A^T y>
        let ax = filter.apply(&x).unwrap();
        let aty = filter.apply_adjoint(&y).unwrap();
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn normalization_definition_and_no_clamping() {
        let m = MorphFeatureMatrix::new(array![[2.0, 10.0, -6.0]], vec!["lumen_area".into()])
            .unwrap();
        let bounds = [FeatureBounds { p2: 2.0, p98: 10.0 }];
        let out = normalize_features(&m, &bounds).unwrap();
        assert_eq!(out.features[(0, 0)], 0.0);
        assert_eq!(out.features[(0, 1)], 1.0);
        assert_eq!(out.features[(0, 2)], -1.0);
        let degenerate = [FeatureBounds { p2: 3.0, p98: 3.0 }];
        assert!(matches!(
            normalize_features(&m, &degenerate),
            Err(Error::DegenerateBounds(_))
        ));
    }

    #[test]
    fn percentile_bounds_match_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..500).map(|_| rng.gen::<f64>() * 40.0).collect();
        let m = MorphFeatureMatrix::new(
            Array2::from_shape_vec((1, 500), values.clone()).unwrap(),
            vec!["lumen_area".into()],
        )
        .unwrap();
        let bounds = compute_bounds(&[m]).unwrap();
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank: f64 = 0.02 * 499.0;
        let expect_p2 = sorted[rank.floor() as usize]
            + (rank - rank.floor()) * (sorted[rank.ceil() as usize] - sorted[rank.floor() as usize]);
        assert_abs_diff_eq!(bounds[0].p2, expect_p2, epsilon = 1e-12);
    }

    #[test]
    fn condition_map_pools_block_means() {
        let m = MorphFeatureMatrix::new(
            array![[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]],
            vec!["lumen_area".into()],
        )
        .unwrap();
        let map = build_morph_condition_map(&m, (2, 2, 2)).unwrap();
        assert!(map.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let constant = MorphFeatureMatrix::new(
            Array2::from_elem((1, 8), 0.5),
            vec!["lumen_area".into()],
        )
        .unwrap();
        let map = build_morph_condition_map(&constant, (3, 3, 4)).unwrap();
        assert!(map.iter().all(|&v| v == 0.5));
        assert!(build_morph_condition_map(&m, (2, 2, 3)).is_err());
    }

    #[test]
    fn soft_area_matches_hard_count_and_uniform_case() {
        let map = tube_map(6, 10.0);
        let soft = map.one_hot();
        let areas = soft_area_regressor(&soft, TissueClass::Lumen);
        for (z, &a) in areas.iter().enumerate() {
            assert_eq!(a, frame_features(map.frame(z)).lumen_area);
        }
        let uniform = SoftLabelMap::new(Array4::from_elem((4, 128, 128, 1), 0.25)).unwrap();
        let areas = soft_area_regressor(&uniform, TissueClass::Lumen);
        assert_abs_diff_eq!(areas[0], 4096.0, epsilon = 1e-9);
    }

    #[test]
    fn features_are_translation_invariant() {
        let n = 48;
        let base = disc_slice(n, (20.0, 22.0), 9.0, TissueClass::Calcium);
        let shifted = disc_slice(n, (26.0, 27.0), 9.0, TissueClass::Calcium);
        let f0 = frame_features(base.view());
        let f1 = frame_features(shifted.view());
        assert_eq!(f0.calcium_area, f1.calcium_area);
        assert_abs_diff_eq!(f0.calcium_thickness, f1.calcium_thickness, epsilon = 1e-9);
    }

    #[test]
    fn features_are_rotation_invariant_within_tolerance() {
        let n = 49;
        let c = (24.0, 24.0);
        let slice = annular_arc(n, c, 10.0, 16.0, 20.0, 200.0);
        let rot = Array2::from_shape_fn((n, n), |(x, y)| slice[(y, n - 1 - x)]);
        let f0 = frame_features(slice.view());
        let f1 = frame_features(rot.view());
        assert_eq!(f0.calcium_area, f1.calcium_area);
        assert!((f0.plaque_circularity - f1.plaque_circularity).abs()
            <= 0.02 * f0.plaque_circularity.max(1e-9));
        assert_abs_diff_eq!(f0.calcium_thickness, f1.calcium_thickness, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(seed in 0u64..50, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let combined: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
            let lhs = smooth_curve(&combined, 11, 2).unwrap();
            let sx = smooth_curve(&x, 11, 2).unwrap();
            let sy = smooth_curve(&y, 11, 2).unwrap();
            for i in 0..n {
                prop_assert!((lhs[i] - (a * sx[i] + b * sy[i])).abs() < 1e-9);
            }
        }
    }
}
