//! Dataset container and loaders: IDX image/label pairs and a plain CSV
//! format (feature columns followed by an integer label column).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

/// An in-memory labeled dataset. Features are rows of `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Domain(format!(
                "feature rows ({}) and labels ({}) disagree",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside class count {n_classes}"
            )));
        }
        Ok(Self { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Domain("truncated IDX header".into()))
}

/// Parse an IDX tensor of unsigned bytes; returns (dims, data).
pub fn parse_idx_u8(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Domain("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Domain(format!(
            "unsupported IDX element type 0x{:02x} (only unsigned byte)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let data_start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let data = &bytes[data_start..];
    if data.len() != expected {
        return Err(Error::Domain(format!(
            "IDX payload holds {} bytes, header promises {expected}",
            data.len()
        )));
    }
    Ok((dims, data))
}

/// Load an IDX image file plus its IDX label file. Pixels are scaled to
/// [0, 1]; the class count is the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (img_dims, img_data) = parse_idx_u8(&img_bytes).map_err(|e| Error::Data {
        path: images.to_path_buf(),
        message: e.to_string(),
    })?;
    let (lbl_dims, lbl_data) = parse_idx_u8(&lbl_bytes).map_err(|e| Error::Data {
        path: labels.to_path_buf(),
        message: e.to_string(),
    })?;
    if lbl_dims.len() != 1 {
        return Err(Error::Data {
            path: labels.to_path_buf(),
            message: format!("label file must be rank 1, got rank {}", lbl_dims.len()),
        });
    }
    let n = lbl_dims[0];
    let per_image: usize = match img_dims.len() {
        2 | 3 => img_dims[1..].iter().product(),
        r => {
            return Err(Error::Data {
                path: images.to_path_buf(),
                message: format!("image file must be rank 2 or 3, got rank {r}"),
            })
        }
    };
    if img_dims[0] != n {
        return Err(Error::Data {
            path: images.to_path_buf(),
            message: format!("{} images but {n} labels", img_dims[0]),
        });
    }
    let features = Array2::from_shape_fn((n, per_image), |(i, j)| {
        img_data[i * per_image + j] as f64 / 255.0
    });
    let labels: Vec<usize> = lbl_data.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, n_classes)
}

/// Load a CSV dataset: one record per line, comma-separated features with
/// the integer label in the last column. No header row.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("line {}: need at least one feature and a label", lineno + 1),
            });
        }
        let mut feats = Vec::with_capacity(fields.len() - 1);
        for f in &fields[..fields.len() - 1] {
            feats.push(f.parse::<f64>().map_err(|_| Error::Data {
                path: path.to_path_buf(),
                message: format!("line {}: bad feature value '{f}'", lineno + 1),
            })?);
        }
        let label = fields[fields.len() - 1].parse::<usize>().map_err(|_| Error::Data {
            path: path.to_path_buf(),
            message: format!(
                "line {}: bad label '{}'",
                lineno + 1,
                fields[fields.len() - 1]
            ),
        })?;
        if let Some(prev) = rows.first() {
            if prev.len() != feats.len() {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    message: format!("line {}: inconsistent column count", lineno + 1),
                });
            }
        }
        rows.push(feats);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data { path: path.to_path_buf(), message: "empty dataset".into() });
    }
    let d = rows[0].len();
    let features = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let n_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, n_classes)
}

/// Persist a dataset in the CSV format [`load_csv`] reads.
pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for i in 0..ds.len() {
        let mut line = String::new();
        for j in 0..ds.dim() {
            line.push_str(&format!("{},", ds.features[[i, j]]));
        }
        line.push_str(&format!("{}\n", ds.labels[i]));
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
