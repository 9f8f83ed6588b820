//! Shared helpers: dataset loading, conditioning assembly, and guidance
//! construction for the sampling subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array4;

use arteria_core::diffusion::{encode_labels, EmpiricalBayesDenoiser, DEFAULT_TAU};
use arteria_core::morphology::{
    compute_bounds, default_feature_names, extract_feature_matrix, MorphConditioner,
    DEFAULT_SMOOTH_WINDOW,
};
use arteria_core::skeleton::{SkelConditioner, SkelProcessParams, TeasarParams};
use arteria_core::volume::{read_volume, ConditioningMaps, LatentGrid, SegmentationMap};

/// All `.msv` volumes in a directory, sorted by file name for determinism.
pub fn load_volume_dir(dir: &Path) -> Result<Vec<(PathBuf, SegmentationMap)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading dataset directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "msv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .msv volumes found in {}", dir.display());
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let map = read_volume(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push((path, map));
    }
    Ok(out)
}

/// A dataset prepared for empirical-Bayes sampling: latents, per-item
/// conditioning maps, and the shared conditioning pipeline.
pub struct PreparedDataset {
    pub denoiser: EmpiricalBayesDenoiser,
    pub conditioner: MorphConditioner,
    pub skel_conditioner: Option<SkelConditioner>,
    pub shape: (usize, usize, usize, usize),
    pub spatial: (usize, usize, usize),
}

pub fn prepare_dataset(
    maps: &[SegmentationMap],
    features: &[String],
    with_skeleton: bool,
    tau: f64,
) -> Result<PreparedDataset> {
    let dims = maps[0].dims();
    for m in maps {
        if m.dims() != dims {
            bail!("dataset volumes disagree on dimensions");
        }
    }
    let matrices: Vec<_> = maps
        .iter()
        .map(|m| extract_feature_matrix(m, features))
        .collect::<arteria_core::Result<_>>()?;
    let bounds = compute_bounds(&matrices)?;
    let window = if dims.2 >= DEFAULT_SMOOTH_WINDOW {
        Some(DEFAULT_SMOOTH_WINDOW)
    } else {
        None
    };
    let conditioner = MorphConditioner::new(features.to_vec(), bounds, window, dims)?;
    let skel_conditioner = with_skeleton.then(|| SkelConditioner {
        params: SkelProcessParams::default(),
        teasar: TeasarParams::default(),
        latent_dims: dims,
    });

    let items: Vec<LatentGrid> = maps.iter().map(encode_labels).collect();
    let conds: Vec<ConditioningMaps> = maps
        .iter()
        .zip(&matrices)
        .map(|(map, matrix)| {
            let morph = conditioner.condition_from_matrix(matrix)?;
            let skel = match &skel_conditioner {
                Some(sc) => Some(sc.condition_from_mask(
                    &map.class_mask(arteria_core::volume::TissueClass::Lumen),
                )?),
                None => None,
            };
            conditioner.with_skel(morph, skel)
        })
        .collect::<arteria_core::Result<_>>()?;
    let shape = items[0].shape();
    let denoiser = EmpiricalBayesDenoiser::new(items, Some(conds), tau)?;
    Ok(PreparedDataset {
        denoiser,
        conditioner,
        skel_conditioner,
        shape,
        spatial: dims,
    })
}

/// Conditioning maps for one target volume under the prepared pipeline.
pub fn target_condition(
    prepared: &PreparedDataset,
    target: &SegmentationMap,
) -> Result<ConditioningMaps> {
    if target.dims() != prepared.spatial {
        bail!("target volume dimensions do not match the dataset");
    }
    let morph = prepared.conditioner.condition_from_map(target)?;
    let skel: Option<Array4<f64>> = match &prepared.skel_conditioner {
        Some(sc) => Some(sc.condition_from_mask(
            &target.class_mask(arteria_core::volume::TissueClass::Lumen),
        )?),
        None => None,
    };
    Ok(prepared.conditioner.with_skel(morph, skel)?)
}

pub fn features_or_default(csv: Option<&str>) -> Vec<String> {
    match csv {
        Some(list) => list.split(',').map(str::to_string).collect(),
        None => default_feature_names(),
    }
}

pub fn default_tau() -> f64 {
    DEFAULT_TAU
}
