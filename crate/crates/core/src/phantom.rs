//! Parametric synthetic artery phantoms with known ground truth.
//!
//! A phantom is a straight (optionally bifurcating) tube: per frame, a lumen
//! disc of radius `r(d)` wrapped in a wall annulus of thickness `t(d)`, with
//! calcium arcs carved strictly inside the wall band. Carving keeps a 4-voxel
//! Euclidean margin to both the lumen and the outer wall boundary, so
//! containment of lumen and calcium holds by construction and generated
//! corpora serve as positive controls for the topology checks.

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{derive_seed, rng_from_seed};
use crate::error::{Error, Result};
use crate::morphology::{default_feature_names, extract_feature_matrix};
use crate::skeleton::SkeletonGraph;
use crate::volume::{MorphFeatureMatrix, SegmentationMap, TissueClass};

/// Margin (voxels) kept between calcium and any non-wall tissue.
pub const CONTAINMENT_MARGIN: f64 = 4.0;

/// A per-frame scalar profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    /// Same value in every frame.
    Constant(f64),
    /// Explicit value per frame (must match the depth).
    PerFrame(Vec<f64>),
    /// Gaussian narrowing calibrated so the min/mean ratio of the resulting
    /// area curve equals `ratio` exactly on the analytic profile.
    Stenosis {
        base: f64,
        ratio: f64,
        center: f64,
        width: f64,
    },
}

impl Profile {
    fn resolve(&self, depth: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Profile::Constant(v) => Ok(vec![*v; depth]),
            Profile::PerFrame(values) => {
                if values.len() != depth {
                    return Err(Error::ShapeMismatch(format!(
                        "{what} profile has {} entries for depth {depth}",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
            Profile::Stenosis {
                base,
                ratio,
                center,
                width,
            } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "stenosis ratio must lie in (0, 1], got {ratio}"
                    )));
                }
                if *width <= 0.0 {
                    return Err(Error::InvalidParameter("stenosis width must be > 0".into()));
                }
                let bump: Vec<f64> = (0..depth)
                    .map(|d| (-((d as f64 - center).powi(2)) / (2.0 * width * width)).exp())
                    .collect();
                let mean = bump.iter().sum::<f64>() / depth as f64;
                // Area curve a(d) = a0 * (1 - k * g(d)) hits min/mean = ratio
                // when k = (1 - ratio) / (1 - ratio * mean(g)).
                let k = (1.0 - ratio) / (1.0 - ratio * mean);
                Ok(bump
                    .iter()
                    .map(|g| base * (1.0 - k * g).max(0.0).sqrt())
                    .collect())
            }
        }
    }
}

/// One calcium arc: frames `[start, end)`, an angular sector about the main
/// axis, and a radial band measured as offsets from the local lumen radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalciumArcSpec {
    pub frames: [usize; 2],
    pub angle_start_deg: f64,
    pub angle_extent_deg: f64,
    /// `[inner, outer]` offsets from the lumen radius; clamped to the safe
    /// band `[margin, t - margin]` during carving.
    pub band: [f64; 2],
}

/// One side branch: a second centerline diverging from the main axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub start_frame: usize,
    pub end_frame: usize,
    /// In-plane drift of the branch center per frame (voxels/frame).
    pub direction: [f64; 2],
    pub radius: f64,
}

/// Full phantom description; mirrors the CLI JSON spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub lumen_radius: Profile,
    pub wall_thickness: Profile,
    #[serde(default)]
    pub calcium: Vec<CalciumArcSpec>,
    #[serde(default)]
    pub branches: Vec<BranchSpec>,
    /// Reserved for randomized corpora; plain generation is deterministic.
    #[serde(default)]
    pub seed: u64,
}

fn angle_in_sector(theta: f64, start: f64, extent: f64) -> bool {
    (theta - start).rem_euclid(360.0) <= extent
}

/// Rasterizes a phantom into a segmentation map. Fails when the spec
/// violates its invariants (non-positive radius, tube or branch leaving the
/// grid, bad angular ranges).
pub fn generate(spec: &PhantomSpec) -> Result<SegmentationMap> {
    let [h, w, d] = spec.dims;
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidParameter("phantom dims must be >= 1".into()));
    }
    let radius = spec.lumen_radius.resolve(d, "lumen radius")?;
    let thickness = spec.wall_thickness.resolve(d, "wall thickness")?;
    let half = (h.min(w) as f64) / 2.0;
    for frame in 0..d {
        if radius[frame] <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lumen radius must be positive (frame {frame})"
            )));
        }
        if radius[frame] + thickness[frame] >= half {
            return Err(Error::InvalidParameter(format!(
                "tube radius {} + wall {} exceeds the grid at frame {frame}",
                radius[frame], thickness[frame]
            )));
        }
    }
    for arc in &spec.calcium {
        if arc.frames[0] >= arc.frames[1] || arc.frames[1] > d {
            return Err(Error::InvalidParameter(format!(
                "calcium frame range {:?} invalid for depth {d}",
                arc.frames
            )));
        }
        if !(0.0..360.0).contains(&arc.angle_start_deg)
            || !(0.0..=360.0).contains(&arc.angle_extent_deg)
            || arc.angle_extent_deg <= 0.0
        {
            return Err(Error::InvalidParameter(format!(
                "calcium angles out of range: start {}, extent {}",
                arc.angle_start_deg, arc.angle_extent_deg
            )));
        }
        if arc.band[0] >= arc.band[1] {
            return Err(Error::InvalidParameter(format!(
                "calcium band {:?} is empty",
                arc.band
            )));
        }
    }
    let (cx, cy) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for branch in &spec.branches {
        if branch.start_frame >= branch.end_frame || branch.end_frame > d {
            return Err(Error::InvalidParameter(format!(
                "branch frames {}..{} invalid for depth {d}",
                branch.start_frame, branch.end_frame
            )));
        }
        if branch.radius <= 0.0 {
            return Err(Error::InvalidParameter("branch radius must be positive".into()));
        }
        for frame in branch.start_frame..branch.end_frame {
            let off = (frame - branch.start_frame) as f64;
            let bx = cx + branch.direction[0] * off;
            let by = cy + branch.direction[1] * off;
            let reach = branch.radius + thickness[frame] + 1.0;
            if bx - reach < 0.0
                || by - reach < 0.0
                || bx + reach > (h - 1) as f64
                || by + reach > (w - 1) as f64
            {
                return Err(Error::InvalidParameter(format!(
                    "branch leaves the grid at frame {frame}"
                )));
            }
        }
    }

    let mut labels = Array3::zeros((h, w, d));
    for frame in 0..d {
        let r = radius[frame];
        let t = thickness[frame];
        // Active discs: (center x, center y, lumen radius).
        let mut discs = vec![(cx, cy, r)];
        for branch in &spec.branches {
            if frame >= branch.start_frame && frame < branch.end_frame {
                let off = (frame - branch.start_frame) as f64;
                discs.push((
                    cx + branch.direction[0] * off,
                    cy + branch.direction[1] * off,
                    branch.radius,
                ));
            }
        }
        let arcs: Vec<&CalciumArcSpec> = spec
            .calcium
            .iter()
            .filter(|a| frame >= a.frames[0] && frame < a.frames[1])
            .collect();
        for x in 0..h {
            for y in 0..w {
                let dists: Vec<f64> = discs
                    .iter()
                    .map(|&(dx, dy, _)| {
                        ((x as f64 - dx).powi(2) + (y as f64 - dy).powi(2)).sqrt()
                    })
                    .collect();
                let in_lumen = dists
                    .iter()
                    .zip(&discs)
                    .any(|(&dist, &(_, _, rr))| dist <= rr);
                let in_wall = dists
                    .iter()
                    .zip(&discs)
                    .any(|(&dist, &(_, _, rr))| dist <= rr + t);
                let mut label = if in_lumen {
                    TissueClass::Lumen.id()
                } else if in_wall {
                    TissueClass::Wall.id()
                } else {
                    TissueClass::Background.id()
                };
                if label == TissueClass::Wall.id() && !arcs.is_empty() {
                    let dist_main = dists[0];
                    let theta = (y as f64 - cy)
                        .atan2(x as f64 - cx)
                        .to_degrees()
                        .rem_euclid(360.0);
                    let safe_inner = r + arc_band_lo(arcs.as_slice(), dist_main, r, t, theta);
                    // Carve when inside an arc's clamped band, with the
                    // containment margin against every lumen disc.
                    let in_arc = safe_inner.is_finite();
                    let clear_of_lumen = dists
                        .iter()
                        .zip(&discs)
                        .all(|(&dist, &(_, _, rr))| dist >= rr + CONTAINMENT_MARGIN);
                    if in_arc && clear_of_lumen {
                        label = TissueClass::Calcium.id();
                    }
                }
                labels[(x, y, frame)] = label;
            }
        }
    }
    SegmentationMap::new(labels, [1.0, 1.0, 1.0])
}

/// Returns a finite value when `dist_main` falls inside some arc's clamped
/// radial band at polar angle `theta`, infinity otherwise.
fn arc_band_lo(arcs: &[&CalciumArcSpec], dist_main: f64, r: f64, t: f64, theta: f64) -> f64 {
    for arc in arcs {
        let lo = arc.band[0].max(CONTAINMENT_MARGIN);
        let hi = arc.band[1].min(t - CONTAINMENT_MARGIN);
        if lo >= hi {
            continue;
        }
        if dist_main >= r + lo
            && dist_main <= r + hi
            && angle_in_sector(theta, arc.angle_start_deg, arc.angle_extent_deg)
        {
            return lo;
        }
    }
    f64::INFINITY
}

/// The analytic centerline of a phantom as a skeleton graph.
pub fn ground_truth_skeleton(spec: &PhantomSpec) -> SkeletonGraph {
    let [h, w, d] = spec.dims;
    let (cx, cy) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut nodes: Vec<[usize; 3]> = Vec::new();
    let mut edges: Vec<[usize; 2]> = Vec::new();
    let main_node = |frame: usize| [cx.round() as usize, cy.round() as usize, frame];
    for frame in 0..d {
        nodes.push(main_node(frame));
        if frame > 0 {
            edges.push([frame - 1, frame]);
        }
    }
    for branch in &spec.branches {
        let mut prev: Option<usize> = None;
        for frame in branch.start_frame..branch.end_frame {
            let off = (frame - branch.start_frame) as f64;
            let bx = (cx + branch.direction[0] * off).round() as usize;
            let by = (cy + branch.direction[1] * off).round() as usize;
            let node = [bx, by, frame];
            if node == main_node(frame) {
                continue; // still overlapping the main axis
            }
            let id = nodes.len();
            nodes.push(node);
            match prev {
                Some(p) => edges.push([p, id]),
                // Junction: attach to the main axis one frame upstream.
                None => edges.push([frame.saturating_sub(1), id]),
            }
            prev = Some(id);
        }
    }
    SkeletonGraph { nodes, edges }
}

/// Randomized corpus configuration. All ranges are inclusive of the lower
/// bound and exclusive of the upper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n: usize,
    pub dims: [usize; 3],
    pub lumen_radius: [f64; 2],
    pub wall_thickness: [f64; 2],
    /// Min/mean area ratio range; `None` keeps tubes uniform.
    pub stenosis_ratio: Option<[f64; 2]>,
    pub max_calcium_arcs: usize,
    pub calcium_extent_deg: [f64; 2],
    pub max_branches: usize,
    pub feature_names: Vec<String>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 16,
            dims: [64, 64, 64],
            lumen_radius: [8.0, 14.0],
            wall_thickness: [9.0, 12.0],
            stenosis_ratio: Some([0.3, 0.9]),
            max_calcium_arcs: 2,
            calcium_extent_deg: [40.0, 130.0],
            max_branches: 0,
            feature_names: default_feature_names(),
            seed: 0,
        }
    }
}

/// One corpus item with its paired ground truth.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub spec: PhantomSpec,
    pub map: SegmentationMap,
    /// Raw feature curves measured by the morphological regressor.
    pub features: MorphFeatureMatrix,
    /// Analytic centerline graph.
    pub skeleton: SkeletonGraph,
    pub branch_count: usize,
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn random_spec(config: &CorpusConfig, rng: &mut impl Rng) -> PhantomSpec {
    let [_, _, d] = config.dims;
    let r0 = uniform(rng, config.lumen_radius);
    let t = uniform(rng, config.wall_thickness);
    let lumen_radius = match config.stenosis_ratio {
        Some(range) => Profile::Stenosis {
            base: r0,
            ratio: uniform(rng, range),
            center: uniform(rng, [0.3 * d as f64, 0.7 * d as f64]),
            width: uniform(rng, [d as f64 / 12.0, d as f64 / 6.0]),
        },
        None => Profile::Constant(r0),
    };

    let mut branches = Vec::new();
    if config.max_branches > 0 {
        let count = rng.gen_range(0..=config.max_branches);
        for _ in 0..count {
            let start = rng.gen_range(d / 4..d / 2);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed = rng.gen_range(0.4..0.65);
            let radius = (0.5 * r0).max(3.0);
            // Cut the branch where it would leave the safe in-plane region.
            let half = (config.dims[0].min(config.dims[1]) as f64 - 1.0) / 2.0;
            let reach = half - radius - t - 2.0;
            let max_len = (reach / speed).floor() as usize;
            let end = (start + max_len).min(d);
            if end > start + 8 {
                branches.push(BranchSpec {
                    start_frame: start,
                    end_frame: end,
                    direction: [speed * angle.cos(), speed * angle.sin()],
                    radius,
                });
            }
        }
    }

    let mut calcium = Vec::new();
    let arc_limit = branches
        .iter()
        .map(|b| b.start_frame.saturating_sub(2))
        .min()
        .unwrap_or(d);
    if config.max_calcium_arcs > 0 && arc_limit >= d / 8 {
        let count = rng.gen_range(0..=config.max_calcium_arcs);
        for _ in 0..count {
            let len = rng.gen_range((d / 8).max(2)..(d / 3).max(3));
            let upper = arc_limit.saturating_sub(len);
            let start = if upper == 0 { 0 } else { rng.gen_range(0..upper) };
            let end = (start + len).min(arc_limit);
            if end <= start {
                continue;
            }
            calcium.push(CalciumArcSpec {
                frames: [start, end],
                angle_start_deg: rng.gen_range(0.0..360.0),
                angle_extent_deg: uniform(rng, config.calcium_extent_deg),
                band: [CONTAINMENT_MARGIN, t - CONTAINMENT_MARGIN],
            });
        }
    }

    PhantomSpec {
        dims: config.dims,
        lumen_radius,
        wall_thickness: Profile::Constant(t),
        calcium,
        branches,
        seed: 0,
    }
}

/// Generates `config.n` phantoms with per-item derived seeds; the same
/// configuration always yields the same corpus.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<PhantomSample>> {
    (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(config.seed, i as u64));
            let spec = random_spec(config, &mut rng);
            let map = generate(&spec)?;
            let features = extract_feature_matrix(&map, &config.feature_names)?;
            let skeleton = ground_truth_skeleton(&spec);
            let branch_count = spec.branches.len();
            Ok(PhantomSample {
                spec,
                map,
                features,
                skeleton,
                branch_count,
            })
        })
        .collect()
}

/// Frame-wise lumen mask of a generated map (test and CLI convenience).
pub fn lumen_mask_2d(map: &SegmentationMap, frame: usize) -> Array2<bool> {
    map.frame(frame).mapv(|v| v == TissueClass::Lumen.id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::volume_features;
    use crate::skeleton::count_branches;
    use crate::topology::violation_rate;

    fn simple_tube_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [64, 64, 64],
            lumen_radius: Profile::Constant(10.0),
            wall_thickness: Profile::Constant(5.0),
            calcium: vec![],
            branches: vec![],
            seed: 0,
        }
    }

    #[test]
    fn straight_tube_has_no_violations() {
        let map = generate(&simple_tube_spec()).unwrap();
        for class in [TissueClass::Lumen, TissueClass::Calcium] {
            assert_eq!(violation_rate(&map, class, 3).unwrap(), 0.0);
        }
    }

    #[test]
    fn lumen_area_tracks_analytic_circle() {
        let spec = PhantomSpec {
            lumen_radius: Profile::Constant(9.0),
            ..simple_tube_spec()
        };
        let map = generate(&spec).unwrap();
        let names = vec!["lumen_area".to_string()];
        let matrix = extract_feature_matrix(&map, &names).unwrap();
        let analytic = std::f64::consts::PI * 81.0;
        for &a in matrix.features.iter() {
            assert!((a - analytic).abs() < 0.05 * analytic, "area {a}");
        }
    }

    #[test]
    fn calcium_arc_measures_within_tolerance() {
        let spec = PhantomSpec {
            dims: [64, 64, 32],
            lumen_radius: Profile::Constant(10.0),
            wall_thickness: Profile::Constant(12.0),
            calcium: vec![CalciumArcSpec {
                frames: [8, 24],
                angle_start_deg: 30.0,
                angle_extent_deg: 90.0,
                band: [4.0, 8.0],
            }],
            branches: vec![],
            seed: 0,
        };
        let map = generate(&spec).unwrap();
        let f = crate::morphology::frame_features(map.frame(16));
        assert!(f.calcium_area > 0.0);
        assert!(
            (f.calcium_arclength - 90.0).abs() <= 2.0,
            "arclength {}",
            f.calcium_arclength
        );
        for class in [TissueClass::Lumen, TissueClass::Calcium] {
            assert_eq!(violation_rate(&map, class, 3).unwrap(), 0.0);
        }
    }

    #[test]
    fn stenosis_profile_hits_target_ratio() {
        for &target in &[0.35, 0.5, 0.75] {
            let spec = PhantomSpec {
                dims: [64, 64, 96],
                lumen_radius: Profile::Stenosis {
                    base: 12.0,
                    ratio: target,
                    center: 48.0,
                    width: 10.0,
                },
                wall_thickness: Profile::Constant(5.0),
                calcium: vec![],
                branches: vec![],
                seed: 0,
            };
            let map = generate(&spec).unwrap();
            let vf = volume_features(&map);
            assert!(
                (vf.stenosis_ratio - target).abs() <= 0.02 + 0.02,
                "target {target}, measured {}",
                vf.stenosis_ratio
            );
        }
    }

    #[test]
    fn branch_spec_rejis_rejected_when_leaving_grid() {
        let spec = PhantomSpec {
            dims: [48, 48, 64],
            lumen_radius: Profile::Constant(8.0),
            wall_thickness: Profile::Constant(4.0),
            calcium: vec![],
            branches: vec![BranchSpec {
                start_frame: 8,
                end_frame: 64,
                direction: [1.5, 0.0],
                radius: 5.0,
            }],
            seed: 0,
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn corpus_is_reproducible_and_counts_branches() {
        let config = CorpusConfig {
            n: 6,
            dims: [48, 48, 48],
            lumen_radius: [6.0, 9.0],
            wall_thickness: [4.0, 6.0],
            stenosis_ratio: None,
            max_calcium_arcs: 0,
            max_branches: 2,
            seed: 11,
            ..CorpusConfig::default()
        };
        let a = generate_corpus(&config).unwrap();
        let b = generate_corpus(&config).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.map, y.map);
            assert_eq!(x.spec, y.spec);
        }
        for sample in &a {
            assert_eq!(
                count_branches(&sample.skeleton).unwrap(),
                sample.branch_count,
                "ground-truth skeleton disagrees with the spec"
            );
        }
    }

    #[test]
    fn corpus_stenosis_ratios_stay_in_range() {
        let config = CorpusConfig {
            n: 12,
            dims: [64, 64, 64],
            stenosis_ratio: Some([0.3, 0.9]),
            max_calcium_arcs: 0,
            max_branches: 0,
            seed: 21,
            ..CorpusConfig::default()
        };
        for sample in generate_corpus(&config).unwrap() {
            let vf = volume_features(&sample.map);
            assert!(
                vf.stenosis_ratio >= 0.25 && vf.stenosis_ratio <= 0.95,
                "ratio {}",
                vf.stenosis_ratio
            );
        }
    }
}
