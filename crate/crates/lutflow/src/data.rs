//! Dataset ingestion: MNIST-style IDX image/label pairs and CSV feature
//! tables with a named label column.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::quantizer::QuantizerParams;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// What was done to each feature column at load time, kept so new samples
/// can be mapped into the same space.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// Columns were divided by a fixed range (IDX pixels: 0..255 → 0..1).
    MinMax { min: Vec<f64>, max: Vec<f64> },
    /// Columns were standardized to mean 0, std 1.
    MeanStd { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample, flattened row-major for image data.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub normalization: Normalization,
    /// `[H, W, 1]` when the samples are images, for conv-shaped inputs.
    pub image_shape: Option<[usize; 3]>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                self.features.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let width = self.features.first().map_or(0, Vec::len);
        if self.features.iter().any(|r| r.len() != width) {
            return Err(Error::Data("ragged feature rows".into()));
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|_| Error::Data(format!("truncated IDX file: missing {what}")))
}

/// Load an IDX image/label pair (the MNIST container format). Pixels come
/// back in [0, 1]; images are flattened row-major.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images)?);
    let magic = read_u32(&mut img, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(&mut img, "image count")? as usize;
    let rows = read_u32(&mut img, "row count")? as usize;
    let cols = read_u32(&mut img, "column count")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| Error::Data("truncated IDX image payload".into()))?;

    let mut lbl = std::io::BufReader::new(std::fs::File::open(labels)?);
    let magic = read_u32(&mut lbl, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32(&mut lbl, "label count")? as usize;
    if label_count != count {
        return Err(Error::Data(format!("{count} images but {label_count} labels")));
    }
    let mut raw_labels = vec![0u8; label_count];
    lbl.read_exact(&mut raw_labels)
        .map_err(|_| Error::Data("truncated IDX label payload".into()))?;

    let dim = rows * cols;
    let features: Vec<Vec<f64>> =
        pixels.chunks(dim).map(|c| c.iter().map(|&p| p as f64 / 255.0).collect()).collect();
    let labels: Vec<u32> = raw_labels.into_iter().map(u32::from).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let ds = Dataset {
        features,
        labels,
        num_classes,
        normalization: Normalization::MinMax { min: vec![0.0; dim], max: vec![255.0; dim] },
        image_shape: Some([rows, cols, 1]),
    };
    ds.validate()?;
    Ok(ds)
}

/// Load a CSV feature table: every column but `label_column` is a numeric
/// feature, standardized per column (constant columns keep std 1 so they map
/// to exactly zero).
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("label column {label_column:?} not found")))?;

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        let mut feat = Vec::with_capacity(headers.len() - 1);
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let label: u32 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!("row {row}: label {cell:?} is not a small integer"))
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "row {row}, column {:?}: {cell:?} is not numeric",
                        &headers[col]
                    ))
                })?;
                feat.push(v);
            }
        }
        features.push(feat);
    }
    if features.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }

    let width = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; width];
    let mut std = vec![0.0; width];
    for j in 0..width {
        mean[j] = features.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
    }
    for r in &mut features {
        for j in 0..width {
            r[j] = (r[j] - mean[j]) / std[j];
        }
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let ds = Dataset {
        features,
        labels,
        num_classes,
        normalization: Normalization::MeanStd { mean, std },
        image_shape: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Split into train/test by a seeded shuffle; the same seed always produces
/// the same split.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArg(format!(
            "test fraction must be in [0, 1], got {test_fraction}"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let test_len = (ds.len() as f64 * test_fraction).round() as usize;
    let take = |idx: &[usize]| Dataset {
        features: idx.iter().map(|&i| ds.features[i].clone()).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
        normalization: ds.normalization.clone(),
        image_shape: ds.image_shape,
    };
    let (test_idx, train_idx) = order.split_at(test_len);
    Ok((take(train_idx), take(test_idx)))
}

/// Affinely map the dataset's global value range onto a quantizer's active
/// range, so the first layer's input quantizer sees well-spread codes.
/// Returns the applied map as `(scale, offset)` — apply the same map to a
/// held-out split with [`apply_affine`] rather than fitting it again.
pub fn scale_to_quantizer(ds: &mut Dataset, params: &QuantizerParams) -> (f64, f64) {
    let (lo, hi) = params.active_range();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for row in &ds.features {
        for &v in row {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !(min.is_finite() && max.is_finite()) {
        return (1.0, 0.0);
    }
    let span = max - min;
    let (scale, offset) =
        if span == 0.0 { (0.0, lo) } else { ((hi - lo) / span, lo - min * (hi - lo) / span) };
    apply_affine(ds, scale, offset);
    (scale, offset)
}

/// Apply `x → scale·x + offset` to every feature value.
pub fn apply_affine(ds: &mut Dataset, scale: f64, offset: f64) {
    for row in &mut ds.features {
        for v in row {
            *v = scale * *v + offset;
        }
    }
}
