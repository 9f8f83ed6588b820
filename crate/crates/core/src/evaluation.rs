//! Distribution and fidelity metrics between sets of segmentation maps.
//!
//! The Frechet distance is computed on morphological feature vectors (one
//! row per volume for the 3D battery, one row per frame for the 2D battery)
//! and reported as the squared distance
//! `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with the matrix
//! square root taken by eigendecomposition. Precision and recall use the
//! k-nearest-neighbor manifold estimate on features standardized by the real
//! set's statistics.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::morphology::{
    extract_feature_matrix, frame_features, volume_features, FRAME_FEATURE_NAMES,
    VOLUME_FEATURE_NAMES,
};
use crate::skeleton::{count_branches, hard_skeletonize, SkeletonGraph, TeasarParams};
use crate::volume::{MorphFeatureMatrix, SegmentationMap, TissueClass};

/// Rows of feature vectors (one per artery or per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Array2<f64>,
    pub names: Vec<String>,
}

impl FeatureSet {
    pub fn new(rows: Array2<f64>, names: Vec<String>) -> Result<FeatureSet> {
        if rows.ncols() != names.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} columns but {} names",
                rows.ncols(),
                names.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature set contains non-finite values".into()));
        }
        Ok(FeatureSet { rows, names })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// One row of the twelve volume features per map.
    pub fn volumes_3d(maps: &[SegmentationMap]) -> Result<FeatureSet> {
        let mut rows = Array2::zeros((maps.len(), 12));
        for (i, map) in maps.iter().enumerate() {
            let vf = volume_features(map);
            for (j, v) in vf.as_row().iter().enumerate() {
                rows[(i, j)] = *v;
            }
        }
        FeatureSet::new(rows, VOLUME_FEATURE_NAMES.iter().map(|s| s.to_string()).collect())
    }

    /// One row of the eight frame features per frame, pooled over all maps.
    pub fn frames_2d(maps: &[SegmentationMap]) -> Result<FeatureSet> {
        let total: usize = maps.iter().map(|m| m.depth()).sum();
        let mut rows = Array2::zeros((total, 8));
        let mut row = 0;
        for map in maps {
            for z in 0..map.depth() {
                let f = frame_features(map.frame(z));
                for (j, name) in FRAME_FEATURE_NAMES.iter().enumerate() {
                    rows[(row, j)] = f.by_name(name)?;
                }
                row += 1;
            }
        }
        FeatureSet::new(rows, FRAME_FEATURE_NAMES.iter().map(|s| s.to_string()).collect())
    }
}

/// Mean absolute error between per-volume target feature curves and the
/// curves measured from the paired generated maps, in raw feature units.
pub fn conditional_fidelity_morph(
    targets: &[MorphFeatureMatrix],
    generated: &[SegmentationMap],
) -> Result<f64> {
    if targets.len() != generated.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} generated maps",
            targets.len(),
            generated.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (target, map) in targets.iter().zip(generated) {
        let measured = extract_feature_matrix(map, &target.names)?;
        if measured.features.dim() != target.features.dim() {
            return Err(Error::ShapeMismatch(
                "target and measured feature curves differ in shape".into(),
            ));
        }
        for (t, m) in target.features.iter().zip(measured.features.iter()) {
            total += (t - m).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean absolute error between target branch counts and the branch counts of
/// skeletons extracted from the generated maps.
pub fn conditional_fidelity_skel(
    target_branches: &[usize],
    generated: &[SegmentationMap],
    params: &TeasarParams,
) -> Result<f64> {
    if target_branches.len() != generated.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} generated maps",
            target_branches.len(),
            generated.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation batch".into()));
    }
    let mut total = 0.0;
    for (&target, map) in target_branches.iter().zip(generated) {
        let lumen = map.class_mask(TissueClass::Lumen);
        let graph = hard_skeletonize(&lumen, params);
        let measured = count_branches(&graph)?;
        total += (target as f64 - measured as f64).abs();
    }
    Ok(total / generated.len() as f64)
}

/// Branch-count MAE against explicit target graphs.
pub fn conditional_fidelity_skel_graphs(
    targets: &[SkeletonGraph],
    generated: &[SegmentationMap],
    params: &TeasarParams,
) -> Result<f64> {
    let branches: Result<Vec<usize>> = targets.iter().map(count_branches).collect();
    conditional_fidelity_skel(&branches?, generated, params)
}

fn mean_and_cov(set: &FeatureSet, ridge: f64) -> (Array1<f64>, Array2<f64>) {
    let n = set.len();
    let k = set.rows.ncols();
    let mut mean = Array1::zeros(k);
    for row in set.rows.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    mean.mapv_inplace(|v| v / n as f64);
    let mut cov = Array2::zeros((k, k));
    for row in set.rows.rows() {
        for i in 0..k {
            for j in 0..k {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.mapv_inplace(|v| v / denom);
    for i in 0..k {
        cov[(i, i)] += ridge;
    }
    (mean, cov)
}

fn to_nalgebra(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Symmetric PSD matrix square root via eigendecomposition; eigenvalues are
/// clamped at zero.
fn sqrt_spd(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Covariance ridge applied before the Frechet computation.
pub const COV_RIDGE: f64 = 1e-6;

/// Squared Frechet distance between the Gaussian fits of two feature sets.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.rows.ncols() != b.rows.ncols() {
        return Err(Error::ShapeMismatch(
            "feature sets have different dimensionality".into(),
        ));
    }
    let k = a.rows.ncols();
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter(
            "covariance-based metrics need at least 2 rows per set".into(),
        ));
    }
    let (mu_a, cov_a) = mean_and_cov(a, COV_RIDGE);
    let (mu_b, cov_b) = mean_and_cov(b, COV_RIDGE);
    if cov_a.iter().chain(cov_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite covariance".into()));
    }
    let mean_sq: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = to_nalgebra(&cov_a);
    let sb = to_nalgebra(&cov_b);
    // tr((Sa Sb)^(1/2)) through the symmetric product sqrt(Sa) Sb sqrt(Sa).
    let root_a = sqrt_spd(&sa);
    let inner = &root_a * &sb * &root_a;
    let eig = nalgebra::SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mut tr = mean_sq;
    for i in 0..k {
        tr += sa[(i, i)] + sb[(i, i)];
    }
    tr -= 2.0 * tr_sqrt;
    if !tr.is_finite() {
        return Err(Error::Numerical("Frechet distance is not finite".into()));
    }
    Ok(tr.max(0.0))
}

fn standardize(
    real: &FeatureSet,
    gen: &FeatureSet,
) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let k = real.rows.ncols();
    let n = real.len();
    let mut kept = Vec::new();
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for j in 0..k {
        let col: Vec<f64> = real.rows.column(j).to_vec();
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = var.sqrt();
        if std[j] > 0.0 {
            kept.push(j);
        } else {
            log::warn!(
                "feature {:?} has zero variance in the real set; dropped from precision/recall",
                real.names.get(j).map(String::as_str).unwrap_or("?")
            );
        }
    }
    if kept.is_empty() {
        return Err(Error::Numerical(
            "all features are degenerate in the real set".into(),
        ));
    }
    let project = |set: &FeatureSet| {
        Array2::from_shape_fn((set.len(), kept.len()), |(i, jj)| {
            let j = kept[jj];
            (set.rows[(i, j)] - mean[j]) / std[j]
        })
    };
    Ok((project(real), project(gen), kept))
}

fn pairwise_sq(rows: &Array2<f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for k in 0..rows.ncols() {
                let d = rows[(i, k)] - rows[(j, k)];
                acc += d * d;
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    out
}

/// k-th nearest-neighbor squared radius per row (excluding the row itself).
fn knn_radii_sq(rows: &Array2<f64>, k: usize) -> Vec<f64> {
    let d = pairwise_sq(rows);
    let n = rows.nrows();
    (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[(i, j)]).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[k - 1]
        })
        .collect()
}

fn covered_fraction(points: &Array2<f64>, manifold: &Array2<f64>, radii_sq: &[f64]) -> f64 {
    let n = points.nrows();
    let mut covered = 0usize;
    for i in 0..n {
        let inside = (0..manifold.nrows()).any(|j| {
            let mut acc = 0.0;
            for k in 0..points.ncols() {
                let d = points[(i, k)] - manifold[(j, k)];
                acc += d * d;
            }
            acc <= radii_sq[j]
        });
        if inside {
            covered += 1;
        }
    }
    covered as f64 / n as f64
}

/// k-NN manifold precision and recall. A generated point is precise when it
/// falls inside the k-NN ball of some real point; recall is symmetric.
/// Features are standardized by the real set's mean and standard deviation;
/// zero-variance features are dropped with a warning.
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if real.len() < k + 1 || gen.len() < k + 1 {
        return Err(Error::InvalidParameter(format!(
            "precision/recall with k = {k} needs at least {} rows per set",
            k + 1
        )));
    }
    if real.rows.ncols() != gen.rows.ncols() {
        return Err(Error::ShapeMismatch(
            "feature sets have different dimensionality".into(),
        ));
    }
    let (real_std, gen_std, _) = standardize(real, gen)?;
    let real_radii = knn_radii_sq(&real_std, k);
    let gen_radii = knn_radii_sq(&gen_std, k);
    let precision = covered_fraction(&gen_std, &real_std, &real_radii);
    let recall = covered_fraction(&real_std, &gen_std, &gen_radii);
    Ok((precision, recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_set(n: usize, k: usize, mean: f64, seed: u64) -> FeatureSet {
        let mut rng = rng_from_seed(seed);
        let rows = Array2::from_shape_fn((n, k), |_| {
            let z: f64 = rng.sample(StandardNormal);
            mean + z
        });
        FeatureSet::new(rows, (0..k).map(|i| format!("f{i}")).collect()).unwrap()
    }

    #[test]
    fn frechet_zero_on_identical_sets() {
        let a = gaussian_set(500, 3, 0.0, 1);
        let fd = frechet_distance(&a, &a.clone()).unwrap();
        assert!(fd < 1e-8, "fd {fd}");
    }

    #[test]
    fn frechet_unit_mean_shift() {
        let a = gaussian_set(100_000, 1, 0.0, 2);
        let b = gaussian_set(100_000, 1, 1.0, 3);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 1.0).abs() < 0.05, "fd {fd}");
    }

    #[test]
    fn frechet_equal_covariance_population_identity() {
        // With equal covariances the trace term cancels: construct two sets
        // that are exact translates so the sample covariances match exactly.
        let a = gaussian_set(2000, 2, 0.0, 4);
        let delta = [0.7, -0.4];
        let rows = Array2::from_shape_fn(a.rows.dim(), |(i, j)| a.rows[(i, j)] + delta[j]);
        let b = FeatureSet::new(rows, a.names.clone()).unwrap();
        let fd = frechet_distance(&a, &b).unwrap();
        let expected = delta.iter().map(|d| d * d).sum::<f64>();
        assert!((fd - expected).abs() < 1e-8, "fd {fd} vs {expected}");
    }

    #[test]
    fn frechet_is_symmetric_and_rotation_invariant() {
        let a = gaussian_set(3000, 2, 0.0, 5);
        let b = gaussian_set(3000, 2, 0.5, 6);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        // Rotate both sets by the same orthonormal matrix.
        let theta = 0.83f64;
        let rot = |s: &FeatureSet| {
            let rows = Array2::from_shape_fn(s.rows.dim(), |(i, j)| {
                let (x, y) = (s.rows[(i, 0)], s.rows[(i, 1)]);
                if j == 0 {
                    theta.cos() * x - theta.sin() * y
                } else {
                    theta.sin() * x + theta.cos() * y
                }
            });
            FeatureSet::new(rows, s.names.clone()).unwrap()
        };
        let rotated = frechet_distance(&rot(&a), &rot(&b)).unwrap();
        assert!((ab - rotated).abs() < 1e-6, "{ab} vs {rotated}");
    }

    #[test]
    fn precision_recall_identical_and_separated() {
        let a = gaussian_set(200, 2, 0.0, 7);
        let (p, r) = precision_recall(&a, &a.clone(), 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
        let far = gaussian_set(200, 2, 1e6, 8);
        let (p, r) = precision_recall(&a, &far, 3).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn precision_recall_planted_half_coverage() {
        // Real set is two well-separated clusters; generated covers only one:
        // precision stays 1, recall collapses to the covered half.
        let mut rng = rng_from_seed(9);
        let n = 400;
        let rows = Array2::from_shape_fn((n, 2), |(i, _)| {
            let z: f64 = rng.sample(StandardNormal);
            if i % 2 == 0 {
                z * 0.1
            } else {
                40.0 + z * 0.1
            }
        });
        let real = FeatureSet::new(rows, vec!["a".into(), "b".into()]).unwrap();
        // Generated points are drawn from the real rows of the first
        // cluster, so they sit exactly on the real manifold.
        let gen_rows = Array2::from_shape_fn((n, 2), |(i, j)| real.rows[((i * 2) % n, j)]);
        let gen = FeatureSet::new(gen_rows, vec!["a".into(), "b".into()]).unwrap();
        let (p, r) = precision_recall(&real, &gen, 3).unwrap();
        assert_eq!(p, 1.0);
        assert!((r - 0.5).abs() < 0.05, "recall {r}");
    }

    #[test]
    fn precision_recall_is_permutation_invariant() {
        let a = gaussian_set(60, 3, 0.0, 10);
        let b = gaussian_set(60, 3, 0.3, 11);
        let (p0, r0) = precision_recall(&a, &b, 3).unwrap();
        let perm_rows = Array2::from_shape_fn(b.rows.dim(), |(i, j)| {
            b.rows[((i * 17 + 5) % b.len(), j)]
        });
        let b_perm = FeatureSet::new(perm_rows, b.names.clone()).unwrap();
        let (p1, r1) = precision_recall(&a, &b_perm, 3).unwrap();
        assert_eq!((p0, r0), (p1, r1));
    }

    #[test]
    fn fidelity_definitions() {
        use ndarray::Array3;
        let mut labels = Array3::zeros((12, 12, 4));
        for z in 0..4 {
            for x in 4..8 {
                for y in 4..8 {
                    labels[(x, y, z)] = TissueClass::Lumen.id();
                }
            }
        }
        let map = SegmentationMap::new(labels, [1.0; 3]).unwrap();
        let names = vec!["lumen_area".to_string()];
        let target = extract_feature_matrix(&map, &names).unwrap();
        let zero = conditional_fidelity_morph(&[target.clone()], &[map.clone()]).unwrap();
        assert_eq!(zero, 0.0);
        let mut shifted = target.clone();
        shifted.features.mapv_inplace(|v| v + 3.0);
        let mae = conditional_fidelity_morph(&[shifted], &[map.clone()]).unwrap();
        assert!((mae - 3.0).abs() < 1e-12);
        assert!(conditional_fidelity_morph(&[target], &[]).is_err());
    }

    #[test]
    fn skel_fidelity_counts() {
        // target 1 branch vs generated straight tubes (0 branches each) -> 1.0
        use ndarray::Array3;
        let n = 24;
        let c = (n as f64 - 1.0) / 2.0;
        let mut labels = Array3::zeros((n, n, 48));
        for z in 0..48 {
            for x in 0..n {
                for y in 0..n {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    if d <= 5.0 {
                        labels[(x, y, z)] = TissueClass::Lumen.id();
                    }
                }
            }
        }
        let tube = SegmentationMap::new(labels, [1.0; 3]).unwrap();
        let mae = conditional_fidelity_skel(&[1, 1], &[tube.clone(), tube], &TeasarParams::default())
            .unwrap();
        assert_eq!(mae, 1.0);
    }
}
