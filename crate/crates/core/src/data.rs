//! Datasets: IDX and CSV ingestion, normalization, synthetic GP draws and
//! deterministic batching.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::{gram, KernelParams};
use crate::linalg::{cholesky_with_policy, JitterPolicy};
use crate::matrix::Mat;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Affine map from raw values to the stored ones: `x = (raw - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    Identity,
    Global { offset: f64, scale: f64 },
    PerFeature { offset: Vec<f64>, scale: Vec<f64> },
}

impl Normalization {
    fn params(&self, col: usize) -> (f64, f64) {
        match self {
            Normalization::Identity => (0.0, 1.0),
            Normalization::Global { offset, scale } => (*offset, *scale),
            Normalization::PerFeature { offset, scale } => (offset[col], scale[col]),
        }
    }

    pub fn apply(&self, raw: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(raw.rows(), raw.cols(), |i, j| {
            let (o, s) = self.params(j);
            (raw[(i, j)] - o) / s
        })
    }

    pub fn invert(&self, x: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(x.rows(), x.cols(), |i, j| {
            let (o, s) = self.params(j);
            x[(i, j)] * s + o
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x D`, normalized.
    pub x: Mat<f64>,
    pub labels: Option<Vec<u32>>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(x: Mat<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(GpError::ShapeMismatch(format!("{} labels for {} rows", l.len(), x.rows())));
            }
        }
        if !x.is_finite() {
            return Err(GpError::NonFinite("dataset entry".into()));
        }
        Ok(Self { x, labels, normalization: Normalization::Identity })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            normalization: self.normalization.clone(),
        }
    }

    /// Values on the original scale.
    pub fn raw(&self) -> Mat<f64> {
        self.normalization.invert(&self.x)
    }

    /// Re-normalizes to zero mean and unit variance per feature; constant
    /// features keep scale 1.
    pub fn standardize(&self) -> Self {
        let raw = self.raw();
        let (n, d) = raw.shape();
        let mut offset = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let mean = (0..n).map(|i| raw[(i, j)]).sum::<f64>() / n.max(1) as f64;
            let var = (0..n).map(|i| (raw[(i, j)] - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
            offset[j] = mean;
            if var > 0.0 {
                scale[j] = var.sqrt();
            }
        }
        let normalization = Normalization::PerFeature { offset, scale };
        Self { x: normalization.apply(&raw), labels: self.labels.clone(), normalization }
    }

    /// First `n` rows after a seeded shuffle, plus the next `n_test` rows as
    /// a disjoint test set.
    pub fn shuffled_split(&self, n: usize, n_test: usize, seed: u64) -> Result<(Self, Self)> {
        if n + n_test > self.n() {
            return Err(GpError::InvalidConfig(format!(
                "requested {n} + {n_test} rows from a dataset of {}",
                self.n()
            )));
        }
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..n]), self.subset(&idx[n..n + n_test])))
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(BigEndian::read_u32)
        .ok_or(GpError::TruncatedFile { expected: at + 4, found: bytes.len() })
}

/// Decodes an IDX image file (magic 2051): `N x (rows·cols)` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Mat<f64>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GpError::BadMagic { found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let expected = 16 + n * d;
    if bytes.len() < expected {
        return Err(GpError::TruncatedFile { expected, found: bytes.len() });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Mat::from_vec(n, d, data))
}

/// Decodes an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GpError::BadMagic { found: magic, expected: IDX_LABELS_MAGIC });
    }
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(GpError::TruncatedFile { expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as u32).collect())
}

/// Reads uncompressed IDX files; pixels are divided by 255.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let labels = labels.map(|p| fs::read(p).map_err(GpError::from).and_then(|b| parse_idx_labels(&b))).transpose()?;
    if let Some(l) = &labels {
        if l.len() != x.rows() {
            return Err(GpError::ShapeMismatch(format!("{} labels for {} images", l.len(), x.rows())));
        }
    }
    Ok(Dataset { x, labels, normalization: Normalization::Global { offset: 0.0, scale: 255.0 } })
}

/// Encodes IDX bytes; used to produce fixtures.
pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Numeric CSV, one row per datum. A non-numeric first line is treated as a
/// header. With `has_labels` the last column holds integer labels.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?, has_labels)
}

pub fn parse_csv(text: &str, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (k, rec) in reader.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| GpError::ParseError { line, msg: e.to_string() })?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if line == 1 => continue,
            Err(e) => return Err(GpError::ParseError { line, msg: e.to_string() }),
        };
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(GpError::ParseError { line, msg: format!("expected {w} fields, found {}", vals.len()) })
            }
            _ => {}
        }
        if has_labels {
            let (feat, lab) = vals.split_at(vals.len() - 1);
            let l = lab[0];
            if l < 0.0 || l.fract() != 0.0 {
                return Err(GpError::ParseError { line, msg: format!("label {l} is not a non-negative integer") });
            }
            labels.push(l as u32);
            rows.push(feat.to_vec());
        } else {
            rows.push(vals);
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    let x = Mat::from_vec(rows.len(), d, rows.concat());
    Dataset::new(x, has_labels.then_some(labels))
}

/// Writes normalized values with 17 significant digits, labels last.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.n() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Draws `z ~ N(0, I_q)` and `x[:, d] ~ N(0, K(z) + σ_n² I)` independently
/// per output dimension. Returns the dataset and the generating latents.
pub fn synth_gp_dataset(n: usize, q: usize, d: usize, p: &KernelParams<f64>, seed: u64) -> Result<(Dataset, Mat<f64>)> {
    if n > crate::estimators::ORACLE_CAP {
        return Err(GpError::CapExceeded { needed: n as u128, cap: crate::estimators::ORACLE_CAP as u128 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Mat::from_fn(n, q, |_, _| StandardNormal.sample(&mut rng));
    let f = cholesky_with_policy(&gram(&z, p, true), &JitterPolicy::EXACT_FIRST)?;
    let eps: Mat<f64> = Mat::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let x = f.lower().matmul(&eps);
    Ok((Dataset::new(x, None)?, z))
}

/// Mini-batching schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

/// Index batches for one epoch: a permutation seeded by `(seed, epoch)`
/// cut into chunks of `batch_size`.
pub fn batches(n: usize, plan: &BatchPlan, epoch: u64) -> impl Iterator<Item = Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mixed = plan.seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    let b = plan.batch_size.max(1);
    let drop_last = plan.drop_last;
    let chunks: Vec<Vec<usize>> =
        idx.chunks(b).filter(|c| !drop_last || c.len() == b).map(<[usize]>::to_vec).collect();
    chunks.into_iter()
}
