//! Dataset ingestion (IDX images, CSV tabular), synthetic blob generation,
//! vertical column partitioning, and auxiliary-data selection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::AuxiliaryData;
use crate::error::{Result, VflError};
use crate::nn::Matrix;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// An in-memory dataset: features scaled to a unit-ish range, class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N x D` feature matrix.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }
}

fn read_u32_be(reader: &mut impl Read, offset: &mut usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|_| {
        VflError::Parse(format!("idx: truncated file at byte offset {}", *offset))
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair (the MNIST distribution format).
/// Pixels are flattened row-major and scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let mut offset = 0usize;
    let magic = read_u32_be(&mut images, &mut offset)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(VflError::Parse(format!(
            "idx: bad image magic {magic:#010x} at byte offset 0 (expected {IDX_IMAGE_MAGIC:#010x})"
        )));
    }
    let count = read_u32_be(&mut images, &mut offset)? as usize;
    let rows = read_u32_be(&mut images, &mut offset)? as usize;
    let cols = read_u32_be(&mut images, &mut offset)? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    images.read_exact(&mut pixels).map_err(|_| {
        VflError::Parse(format!(
            "idx: truncated image data after byte offset {offset} (expected {} bytes)",
            count * dim
        ))
    })?;

    let mut labels_file = BufReader::new(File::open(labels_path)?);
    let mut loffset = 0usize;
    let lmagic = read_u32_be(&mut labels_file, &mut loffset)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(VflError::Parse(format!(
            "idx: bad label magic {lmagic:#010x} at byte offset 0 (expected {IDX_LABEL_MAGIC:#010x})"
        )));
    }
    let lcount = read_u32_be(&mut labels_file, &mut loffset)? as usize;
    if lcount != count {
        return Err(VflError::Parse(format!(
            "idx: image file has {count} items but label file has {lcount}"
        )));
    }
    let mut raw_labels = vec![0u8; lcount];
    labels_file.read_exact(&mut raw_labels).map_err(|_| {
        VflError::Parse(format!("idx: truncated label data after byte offset {loffset}"))
    })?;

    let features = Matrix::from_shape_vec(
        (count, dim),
        pixels.into_iter().map(|p| p as f64 / 255.0).collect(),
    )
    .expect("shape consistent by construction");
    let labels: Vec<usize> = raw_labels.into_iter().map(|l| l as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        labels,
        num_classes,
    })
}

/// Writes a dataset back to the IDX pair format. Feature values must lie on
/// the `k/255` grid for the round trip to be exact.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = dataset.len();
    let dim = dataset.num_features();
    let side = (dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };

    let mut images = BufWriter::new(File::create(images_path)?);
    images.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    images.write_all(&(n as u32).to_be_bytes())?;
    images.write_all(&(rows as u32).to_be_bytes())?;
    images.write_all(&(cols as u32).to_be_bytes())?;
    for &v in dataset.features.iter() {
        images.write_all(&[(v * 255.0).round() as u8])?;
    }
    images.flush()?;

    let mut labels = BufWriter::new(File::create(labels_path)?);
    labels.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&(n as u32).to_be_bytes())?;
    for &l in &dataset.labels {
        labels.write_all(&[l as u8])?;
    }
    labels.flush()?;
    Ok(())
}

/// Column kind for tabular ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical { buckets: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// Schema for CSV feature columns (the label column is named separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<ColumnSpec>,
}

/// Per-column min/max statistics fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxStats {
    pub fn fit(features: &Matrix) -> Self {
        let min = features
            .axis_iter(Axis(1))
            .map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let max = features
            .axis_iter(Axis(1))
            .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        MinMaxStats { min, max }
    }

    /// Scales each column to `[0,1]` by the fitted range; values outside the
    /// training range scale below 0 or above 1.
    pub fn apply(&self, features: &mut Matrix) {
        for (j, mut col) in features.axis_iter_mut(Axis(1)).enumerate() {
            let range = self.max[j] - self.min[j];
            if range > 0.0 {
                let min = self.min[j];
                col.mapv_inplace(|v| (v - min) / range);
            }
        }
    }
}

// FNV-1a, fixed so categorical encodings are stable across runs and platforms.
fn hash_bucket(value: &str, buckets: usize) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in value.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % buckets as u64) as f64
}

/// Loads a headered CSV per the schema without scaling. Numeric columns parse
/// as floats; categorical columns hash into integer buckets.
pub fn load_csv_raw(path: &Path, label_column: &str, schema: &CsvSchema) -> Result<Dataset> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| VflError::Parse("csv: empty file".into()))?;
    let header: Vec<&str> = header.split(',').map(|h| h.trim()).collect();

    let label_idx = header
        .iter()
        .position(|&h| h == label_column)
        .ok_or_else(|| VflError::Parse(format!("csv: label column '{label_column}' not in header")))?;
    let mut col_indices = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        let idx = header
            .iter()
            .position(|&h| h == spec.name)
            .ok_or_else(|| VflError::Parse(format!("csv: column '{}' not in header", spec.name)))?;
        col_indices.push(idx);
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|f| f.trim().trim_matches('"')).collect();
        if fields.len() != header.len() {
            return Err(VflError::Parse(format!(
                "csv: line {}: {} fields, header has {}",
                line_no + 1,
                fields.len(),
                header.len()
            )));
        }
        labels.push(fields[label_idx].parse::<usize>().map_err(|_| {
            VflError::Parse(format!(
                "csv: line {}: label '{}' is not a class index",
                line_no + 1,
                fields[label_idx]
            ))
        })?);
        for (spec, &idx) in schema.columns.iter().zip(&col_indices) {
            let raw = fields[idx];
            let v = match &spec.kind {
                ColumnKind::Numeric => raw.parse::<f64>().map_err(|_| {
                    VflError::Parse(format!(
                        "csv: line {}: non-numeric value '{}' in numeric column '{}'",
                        line_no + 1,
                        raw,
                        spec.name
                    ))
                })?,
                ColumnKind::Categorical { buckets } => hash_bucket(raw, *buckets),
            };
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(VflError::Parse("csv: no data rows".into()));
    }

    let features = Matrix::from_shape_vec((labels.len(), schema.columns.len()), values)
        .expect("shape consistent by construction");
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        labels,
        num_classes,
    })
}

/// Loads a training-split CSV, fitting and applying min-max scaling.
pub fn load_csv(path: &Path, label_column: &str, schema: &CsvSchema) -> Result<(Dataset, MinMaxStats)> {
    let mut ds = load_csv_raw(path, label_column, schema)?;
    let stats = MinMaxStats::fit(&ds.features);
    stats.apply(&mut ds.features);
    Ok((ds, stats))
}

/// Loads a test-split CSV, scaling by the training split's statistics.
pub fn load_csv_scaled(
    path: &Path,
    label_column: &str,
    schema: &CsvSchema,
    stats: &MinMaxStats,
) -> Result<Dataset> {
    let mut ds = load_csv_raw(path, label_column, schema)?;
    stats.apply(&mut ds.features);
    Ok(ds)
}

/// Synthetic Gaussian blob dataset. Class `i` is centered on coordinate axis
/// `i % dim` at distance `spacing * (1 + i / dim)` from the origin, so the
/// centers stay pairwise separated even when classes outnumber dimensions.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spacing: f64,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(spacing > 0.0 && spread > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let n = num_classes * samples_per_class;
    let mut features = Matrix::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let axis = class % dim;
        let scale = spacing * (1 + class / dim) as f64;
        for s in 0..samples_per_class {
            let row = class * samples_per_class + s;
            for j in 0..dim {
                let center = if j == axis { scale } else { 0.0 };
                features[(row, j)] = center + noise.sample(&mut rng);
            }
            labels.push(class);
        }
    }
    Dataset {
        features,
        labels,
        num_classes,
    }
}

/// Exact center of each blob class, for nearest-center oracles in tests.
pub fn blob_centers(num_classes: usize, dim: usize, spacing: f64) -> Matrix {
    let mut centers = Matrix::zeros((num_classes, dim));
    for class in 0..num_classes {
        centers[(class, class % dim)] = spacing * (1 + class / dim) as f64;
    }
    centers
}

/// Vertical split of feature columns: a seeded permutation of `[0, D)` cut
/// into contiguous per-party slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnPartition {
    pub permutation: Vec<usize>,
    /// Per-party `(start, end)` bounds into the permutation.
    pub bounds: Vec<(usize, usize)>,
}

impl ColumnPartition {
    pub fn num_parties(&self) -> usize {
        self.bounds.len()
    }

    /// The global column indices owned by party `k`.
    pub fn party_columns(&self, k: usize) -> &[usize] {
        let (start, end) = self.bounds[k];
        &self.permutation[start..end]
    }
}

/// Randomly samples columns into contiguous near-equal slices; remainder
/// columns go to the lowest party ids.
pub fn partition_columns(total_columns: usize, num_parties: usize, seed: u64) -> ColumnPartition {
    assert!(num_parties >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut permutation: Vec<usize> = (0..total_columns).collect();
    permutation.shuffle(&mut rng);

    let base = total_columns / num_parties;
    let remainder = total_columns % num_parties;
    let mut bounds = Vec::with_capacity(num_parties);
    let mut start = 0;
    for k in 0..num_parties {
        let size = base + usize::from(k < remainder);
        bounds.push((start, start + size));
        start += size;
    }
    ColumnPartition { permutation, bounds }
}

/// Selects the column slice for one party from a full feature matrix.
pub fn select_columns(features: &Matrix, columns: &[usize]) -> Matrix {
    features.select(Axis(1), columns)
}

/// Draws `sets` training samples per class without replacement, restricted to
/// the attacker's columns. The chosen indices are recorded for the manifest.
pub fn select_auxiliary(
    train: &Dataset,
    sets: usize,
    attacker_columns: &[usize],
    seed: u64,
) -> Result<AuxiliaryData> {
    if sets == 0 {
        return Err(VflError::Validation("auxiliary: sets must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(sets * train.num_classes);
    for class in 0..train.num_classes {
        let mut class_indices: Vec<usize> = train
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if class_indices.len() < sets {
            return Err(VflError::Validation(format!(
                "auxiliary: class {class} has only {} training instances, need {sets}",
                class_indices.len()
            )));
        }
        class_indices.shuffle(&mut rng);
        indices.extend_from_slice(&class_indices[..sets]);
    }

    let rows = train.features.select(Axis(0), &indices);
    let features = rows.select(Axis(1), attacker_columns);
    let labels: Vec<usize> = indices.iter().map(|&i| train.labels[i]).collect();
    Ok(AuxiliaryData {
        features,
        labels,
        sets,
        source_indices: indices,
    })
}

/// Training-accuracy oracle helper: fraction of rows whose nearest center
/// (Euclidean) carries the row's label.
pub fn nearest_center_labels(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (c, center) in centers.rows().into_iter().enumerate() {
                let d: f64 = p
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_dist {
                    best_dist = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[allow(dead_code)]
fn _assert_types(_: &Array1<f64>) {}
