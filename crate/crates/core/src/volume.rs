//! Data model and serialization for segmentation maps, soft label maps,
//! latent grids, morphological feature matrices, and conditioning maps.
//!
//! Volumes are stored in the "MSV1" container: a single UTF-8 JSON header
//! line terminated by `\n`, followed by the raw voxel payload in row-major
//! order (first axis outermost, last axis innermost), little-endian. Label
//! volumes use one `u8` per voxel; real-valued grids use `f32` and a 4D
//! shape. See the crate README for the exact header keys.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tissue classes in a segmentation map.
pub const NUM_CLASSES: usize = 4;

/// Tissue classes, in the fixed channel order used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    Wall = 1,
    Lumen = 2,
    Calcium = 3,
}

impl TissueClass {
    pub const ALL: [TissueClass; NUM_CLASSES] = [
        TissueClass::Background,
        TissueClass::Wall,
        TissueClass::Lumen,
        TissueClass::Calcium,
    ];

    pub fn from_id(id: u8) -> Result<TissueClass> {
        match id {
            0 => Ok(TissueClass::Background),
            1 => Ok(TissueClass::Wall),
            2 => Ok(TissueClass::Lumen),
            3 => Ok(TissueClass::Calcium),
            _ => Err(Error::InvalidLabel {
                value: id,
                limit: NUM_CLASSES as u8,
            }),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::Wall => "wall",
            TissueClass::Lumen => "lumen",
            TissueClass::Calcium => "calcium",
        }
    }

    pub fn from_name(name: &str) -> Result<TissueClass> {
        match name {
            "background" => Ok(TissueClass::Background),
            "wall" => Ok(TissueClass::Wall),
            "lumen" => Ok(TissueClass::Lumen),
            "calcium" => Ok(TissueClass::Calcium),
            other => Err(Error::InvalidParameter(format!(
                "unknown tissue class {other:?}"
            ))),
        }
    }
}

/// Dense 3D multi-class label grid. One class id per voxel, shape `H x W x D`.
///
/// Frames (2D cross sections) are indexed along the last axis `D`. Spacing is
/// carried as metadata only; all feature computations work in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Array3<u8>,
    spacing: [f64; 3],
}

impl SegmentationMap {
    /// Validates that every dimension is >= 1 and every label is a class id.
    pub fn new(labels: Array3<u8>, spacing: [f64; 3]) -> Result<SegmentationMap> {
        let dim = labels.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "segmentation map dimensions must be >= 1, got {dim:?}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&v| v >= NUM_CLASSES as u8) {
            return Err(Error::InvalidLabel {
                value: bad,
                limit: NUM_CLASSES as u8,
            });
        }
        Ok(SegmentationMap { labels, spacing })
    }

    /// All-background map.
    pub fn background(dims: (usize, usize, usize), spacing: [f64; 3]) -> SegmentationMap {
        SegmentationMap {
            labels: Array3::zeros(dims),
            spacing,
        }
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// `(H, W, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn depth(&self) -> usize {
        self.labels.dim().2
    }

    /// 2D cross section at frame `d` (view over the `H x W` plane).
    pub fn frame(&self, d: usize) -> ndarray::ArrayView2<'_, u8> {
        self.labels.index_axis(Axis(2), d)
    }

    /// Binary mask of one class over the whole volume.
    pub fn class_mask(&self, class: TissueClass) -> Array3<bool> {
        self.labels.mapv(|v| v == class.id())
    }

    /// Channel (one-hot) representation of the label grid.
    pub fn one_hot(&self) -> SoftLabelMap {
        let (h, w, d) = self.dims();
        let mut probs = Array4::<f64>::zeros((NUM_CLASSES, h, w, d));
        for ((x, y, z), &v) in self.labels.indexed_iter() {
            probs[(v as usize, x, y, z)] = 1.0;
        }
        SoftLabelMap { probs }
    }
}

/// Per-class score grid, shape `C x H x W x D`, scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    probs: Array4<f64>,
}

impl SoftLabelMap {
    /// Scores must already lie in `[0, 1]` (within 1e-6 of the interval) and
    /// the channel count must be [`NUM_CLASSES`]. Use [`SoftLabelMap::normalized`]
    /// to renormalize per-voxel sums to 1.
    pub fn new(probs: Array4<f64>) -> Result<SoftLabelMap> {
        if probs.dim().0 != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "soft label map must have {NUM_CLASSES} channels, got {}",
                probs.dim().0
            )));
        }
        if probs.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(Error::InvalidParameter(
                "soft label scores must lie in [0, 1]".into(),
            ));
        }
        Ok(SoftLabelMap { probs })
    }

    pub fn probs(&self) -> &Array4<f64> {
        &self.probs
    }

    /// `(H, W, D)` of the underlying voxel grid.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, h, w, d) = self.probs.dim();
        (h, w, d)
    }

    /// Divides each voxel's scores by their sum so they sum to 1.
    pub fn normalized(mut self) -> Result<SoftLabelMap> {
        let (c, h, w, d) = self.probs.dim();
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += self.probs[(ch, x, y, z)];
                    }
                    if s <= 0.0 {
                        return Err(Error::Numerical(format!(
                            "zero score sum at voxel ({x}, {y}, {z})"
                        )));
                    }
                    for ch in 0..c {
                        self.probs[(ch, x, y, z)] /= s;
                    }
                }
            }
        }
        Ok(self)
    }

    /// Hard label map via per-voxel argmax. Ties break toward the lowest
    /// class id, so the result is deterministic.
    pub fn argmax_labels(&self) -> SegmentationMap {
        let (c, h, w, d) = self.probs.dim();
        let mut labels = Array3::<u8>::zeros((h, w, d));
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let mut best = 0usize;
                    let mut best_v = self.probs[(0, x, y, z)];
                    for ch in 1..c {
                        let v = self.probs[(ch, x, y, z)];
                        if v > best_v {
                            best_v = v;
                            best = ch;
                        }
                    }
                    labels[(x, y, z)] = best as u8;
                }
            }
        }
        SegmentationMap {
            labels,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

/// Real-valued 4D grid `c x h x w x d` living in the (possibly downscaled)
/// latent space of a segmentation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array4<f64>,
    /// Spatial downscale factor relative to the source volume (`>= 1`).
    pub downscale: usize,
}

impl LatentGrid {
    pub fn new(values: Array4<f64>, downscale: usize) -> Result<LatentGrid> {
        if downscale < 1 {
            return Err(Error::InvalidParameter(
                "latent downscale factor must be >= 1".into(),
            ));
        }
        Ok(LatentGrid { values, downscale })
    }

    pub fn zeros(shape: (usize, usize, usize, usize), downscale: usize) -> LatentGrid {
        LatentGrid {
            values: Array4::zeros(shape),
            downscale,
        }
    }

    /// `(c, h, w, d)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    /// Spatial dims `(h, w, d)` without the channel axis.
    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let (_, h, w, d) = self.values.dim();
        (h, w, d)
    }
}

/// Per-feature normalization bounds (2nd and 98th percentile of a reference corpus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub p2: f64,
    pub p98: f64,
}

/// Morphological feature curves: one row per feature, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphFeatureMatrix {
    /// `m x D` feature values.
    pub features: Array2<f64>,
    /// Feature identifier per row.
    pub names: Vec<String>,
    /// Bounds the rows were normalized with, if any.
    pub bounds: Option<Vec<FeatureBounds>>,
}

impl MorphFeatureMatrix {
    pub fn new(features: Array2<f64>, names: Vec<String>) -> Result<MorphFeatureMatrix> {
        if features.nrows() != names.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} names",
                features.nrows(),
                names.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "feature matrix contains non-finite values".into(),
            ));
        }
        Ok(MorphFeatureMatrix {
            features,
            names,
            bounds: None,
        })
    }

    pub fn num_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.features.ncols()
    }
}

/// Paired morphological (`m x h x w x d`) and skeletal (`1 x h x w x d`)
/// conditioning maps over one latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMaps {
    pub morph: Array4<f64>,
    pub skel: Array4<f64>,
}

impl ConditioningMaps {
    pub fn new(morph: Array4<f64>, skel: Array4<f64>) -> Result<ConditioningMaps> {
        let (_, mh, mw, md) = morph.dim();
        let (sc, sh, sw, sd) = skel.dim();
        if sc != 1 {
            return Err(Error::ShapeMismatch(
                "skeletal conditioning map must have one channel".into(),
            ));
        }
        if (mh, mw, md) != (sh, sw, sd) {
            return Err(Error::ShapeMismatch(format!(
                "conditioning map spatial dims differ: morph {:?} vs skel {:?}",
                (mh, mw, md),
                (sh, sw, sd)
            )));
        }
        if skel.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter(
                "skeletal conditioning values must lie in [0, 1]".into(),
            ));
        }
        Ok(ConditioningMaps { morph, skel })
    }

    /// The null condition: all-zero morphological and skeletal maps.
    pub fn null(m: usize, spatial: (usize, usize, usize)) -> ConditioningMaps {
        let (h, w, d) = spatial;
        ConditioningMaps {
            morph: Array4::zeros((m, h, w, d)),
            skel: Array4::zeros((1, h, w, d)),
        }
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let (_, h, w, d) = self.morph.dim();
        (h, w, d)
    }

    pub fn is_null_morph(&self) -> bool {
        self.morph.iter().all(|&v| v == 0.0)
    }

    pub fn is_null_skel(&self) -> bool {
        self.skel.iter().all(|&v| v == 0.0)
    }
}

// ---------------------------------------------------------------------------
// MSV1 serialization
// ---------------------------------------------------------------------------

const MAGIC: &str = "MSV1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MsvHeader {
    magic: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacing: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

fn label_legend() -> BTreeMap<String, String> {
    TissueClass::ALL
        .iter()
        .map(|c| (c.id().to_string(), c.name().to_string()))
        .collect()
}

fn read_header(reader: &mut impl Read) -> Result<MsvHeader> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte)? {
            0 => {
                return Err(Error::MalformedHeader(
                    "file ended before header newline".into(),
                ))
            }
            _ => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 64 * 1024 {
                    return Err(Error::MalformedHeader("header line exceeds 64 KiB".into()));
                }
            }
        }
    }
    let text = std::str::from_utf8(&line)
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: MsvHeader =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            header.magic
        )));
    }
    Ok(header)
}

fn read_exact_payload(reader: &mut impl Read, expected: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; expected];
    let mut filled = 0usize;
    while filled < expected {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::TruncatedPayload {
                expected,
                actual: filled,
            });
        }
        filled += n;
    }
    Ok(buf)
}

/// Reads a label volume from an MSV1 file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<SegmentationMap> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;
    let dtype = header.dtype.as_deref().unwrap_or("u8");
    if dtype != "u8" {
        return Err(Error::MalformedHeader(format!(
            "expected a u8 label volume, found dtype {dtype:?}"
        )));
    }
    if header.shape.len() != 3 {
        return Err(Error::MalformedHeader(format!(
            "label volumes are 3D, header declares {} dims",
            header.shape.len()
        )));
    }
    let (h, w, d) = (header.shape[0], header.shape[1], header.shape[2]);
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader("shape overflows".into()))?;
    let payload = read_exact_payload(&mut reader, expected)?;
    let labels = Array3::from_shape_vec((h, w, d), payload)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    SegmentationMap::new(labels, header.spacing.unwrap_or([1.0, 1.0, 1.0]))
}

/// Writes a label volume to an MSV1 file (lossless round-trip).
pub fn write_volume(map: &SegmentationMap, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, d) = map.dims();
    let header = MsvHeader {
        magic: MAGIC.to_string(),
        shape: vec![h, w, d],
        spacing: Some(map.spacing()),
        labels: Some(label_legend()),
        dtype: None,
    };
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut writer, &header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    writer.write_all(b"\n")?;
    // Row-major (H outer, D inner) is ndarray's standard layout.
    let contiguous;
    let slice = match map.labels().as_slice() {
        Some(s) => s,
        None => {
            contiguous = map.labels().to_owned();
            contiguous.as_slice().unwrap()
        }
    };
    writer.write_all(slice)?;
    writer.flush()?;
    Ok(())
}

/// Reads a real-valued 4D grid from an MSV1 file with dtype `f32`.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Array4<f64>> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;
    match header.dtype.as_deref() {
        Some("f32") => {}
        other => {
            return Err(Error::MalformedHeader(format!(
                "expected dtype \"f32\", found {other:?}"
            )))
        }
    }
    if header.shape.len() != 4 {
        return Err(Error::MalformedHeader(format!(
            "real grids are 4D, header declares {} dims",
            header.shape.len()
        )));
    }
    let dims = (
        header.shape[0],
        header.shape[1],
        header.shape[2],
        header.shape[3],
    );
    let count = header.shape.iter().product::<usize>();
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::MalformedHeader("shape overflows".into()))?;
    let payload = read_exact_payload(&mut reader, expected)?;
    let mut values = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array4::from_shape_vec(dims, values).map_err(|e| Error::MalformedHeader(e.to_string()))
}

/// Writes a real-valued 4D grid as MSV1 with dtype `f32` (values are cast).
pub fn write_grid(grid: &Array4<f64>, path: impl AsRef<Path>) -> Result<()> {
    let dim = grid.dim();
    let header = MsvHeader {
        magic: MAGIC.to_string(),
        shape: vec![dim.0, dim.1, dim.2, dim.3],
        spacing: None,
        labels: None,
        dtype: Some("f32".to_string()),
    };
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut writer, &header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    writer.write_all(b"\n")?;
    let contiguous;
    let values = match grid.as_slice() {
        Some(s) => s,
        None => {
            contiguous = grid.to_owned();
            contiguous.as_slice().unwrap()
        }
    };
    for &v in values {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature matrix CSV
// ---------------------------------------------------------------------------

/// Writes a feature matrix as CSV with header `frame,<feature names...>`,
/// one row per frame.
pub fn write_feature_csv(matrix: &MorphFeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut header = vec!["frame".to_string()];
    header.extend(matrix.names.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    for frame in 0..matrix.num_frames() {
        let mut record = vec![frame.to_string()];
        for row in 0..matrix.num_features() {
            record.push(format!("{}", matrix.features[(row, frame)]));
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(())
}

/// Reads a feature matrix written by [`write_feature_csv`].
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<MorphFeatureMatrix> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "frame" {
        return Err(Error::MalformedHeader(
            "feature CSV must start with a `frame` column".into(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if record.len() != names.len() + 1 {
            return Err(Error::MalformedHeader(format!(
                "row has {} fields, expected {}",
                record.len(),
                names.len() + 1
            )));
        }
        let mut row = Vec::with_capacity(names.len());
        for field in record.iter().skip(1) {
            row.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::MalformedHeader(e.to_string()))?,
            );
        }
        rows.push(row);
    }
    let frames = rows.len();
    let mut features = Array2::zeros((names.len(), frames));
    for (frame, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            features[(i, frame)] = v;
        }
    }
    MorphFeatureMatrix::new(features, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_all_background() {
        let dir = tmp();
        let path = dir.path().join("bg.msv");
        let map = SegmentationMap::background((4, 4, 4), [0.06, 0.06, 0.2]);
        write_volume(&map, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tmp();
        let path = dir.path().join("trunc.msv");
        let map = SegmentationMap::background((8, 8, 8), [1.0; 3]);
        write_volume(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_volume(&path) {
            Err(Error::TruncatedPayload { expected, actual }) => {
                assert_eq!(expected, 512);
                assert_eq!(actual, 511);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.msv");
        let map = SegmentationMap::background((2, 2, 2), [1.0; 3]);
        write_volume(&map, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let len = bytes.len();
        bytes[len - 1] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::InvalidLabel { value: 7, .. })
        ));
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("junk.msv");
        std::fs::write(&path, b"{\"magic\":\"NOPE\",\"shape\":[1,1,1]}\n\0").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn one_hot_of_uniform_lumen() {
        let labels = Array3::from_elem((2, 2, 2), TissueClass::Lumen.id());
        let map = SegmentationMap::new(labels, [1.0; 3]).unwrap();
        let soft = map.one_hot();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    assert_eq!(soft.probs()[(2, x, y, z)], 1.0);
                    assert_eq!(soft.probs()[(0, x, y, z)], 0.0);
                    assert_eq!(soft.probs()[(1, x, y, z)], 0.0);
                    assert_eq!(soft.probs()[(3, x, y, z)], 0.0);
                }
            }
        }
    }

    #[test]
    fn argmax_ties_break_to_lowest_class() {
        let probs = Array4::from_elem((NUM_CLASSES, 1, 1, 1), 0.25);
        let soft = SoftLabelMap::new(probs).unwrap();
        assert_eq!(soft.argmax_labels().labels()[(0, 0, 0)], 0);
    }

    #[test]
    fn feature_csv_round_trip() {
        let dir = tmp();
        let path = dir.path().join("f.csv");
        let m = MorphFeatureMatrix::new(
            array![[1.0, 2.5, 3.0], [0.0, -1.25, 8.0]],
            vec!["lumen_area".into(), "calcium_area".into()],
        )
        .unwrap();
        write_feature_csv(&m, &path).unwrap();
        let back = read_feature_csv(&path).unwrap();
        assert_eq!(m.names, back.names);
        assert_eq!(m.features, back.features);
    }

    #[test]
    fn grid_round_trip_f32() {
        let dir = tmp();
        let path = dir.path().join("g.msv");
        let grid = Array4::from_shape_fn((2, 3, 3, 4), |(c, x, y, z)| {
            (c * 100 + x * 10 + y + z) as f64 * 0.25
        });
        write_grid(&grid, &path).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn conditioning_maps_reject_dim_mismatch() {
        let morph = Array4::zeros((2, 4, 4, 4));
        let skel = Array4::zeros((1, 4, 4, 2));
        assert!(ConditioningMaps::new(morph, skel).is_err());
    }

    proptest! {
        #[test]
        fn one_hot_argmax_is_identity(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(0u8..4));
            let map = SegmentationMap::new(labels, [1.0; 3]).unwrap();
            let back = map.one_hot().argmax_labels();
            prop_assert_eq!(map.labels(), back.labels());
        }

        #[test]
        fn volume_round_trip_is_bit_exact(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = Array3::from_shape_fn((6, 5, 4), |_| rng.gen_range(0u8..4));
            let map = SegmentationMap::new(labels, [0.06, 0.06, 0.2]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.msv");
            write_volume(&map, &path).unwrap();
            let first = std::fs::read(&path).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert_eq!(&map, &back);
            write_volume(&back, &path).unwrap();
            let second = std::fs::read(&path).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
