//! Run configuration: a flat `key = value` text format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{GpError, Result};
use crate::objective::{Ablation, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "64",
            Precision::F32 => "32",
        })
    }
}

impl FromStr for Precision {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "64" | "f64" => Ok(Precision::F64),
            "32" | "f32" => Ok(Precision::F32),
            _ => Err(GpError::InvalidConfig(format!("unknown precision `{s}` (64 | 32)"))),
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Draw from the GP prior with default hyperparameters; dimension `d`.
    Synth { d: usize },
    /// IDX image file with optional label file.
    Idx { images: PathBuf, labels: Option<PathBuf> },
    /// Numeric CSV; with `labels` the last column holds integer labels.
    Csv { path: PathBuf, labels: bool },
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synth { d } => write!(f, "synth:{d}"),
            DataSource::Idx { images, labels: None } => write!(f, "idx:{}", images.display()),
            DataSource::Idx { images, labels: Some(l) } => write!(f, "idx:{},{}", images.display(), l.display()),
            DataSource::Csv { path, labels: false } => write!(f, "csv:{}", path.display()),
            DataSource::Csv { path, labels: true } => write!(f, "csv-labeled:{}", path.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = GpError;
    /// `synth[:D]`, `idx:IMAGES[,LABELS]`, `idx-dir:DIR` (reads
    /// `DIR/images-idx3-ubyte` and `DIR/labels-idx1-ubyte`), `csv:PATH` or
    /// `csv-labeled:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GpError::InvalidConfig(format!("cannot parse data source `{s}`"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synth" => Ok(DataSource::Synth { d: if rest.is_empty() { 5 } else { rest.parse().map_err(|_| bad())? } }),
            "idx" if !rest.is_empty() => {
                let (img, lab) = match rest.split_once(',') {
                    Some((i, l)) => (i, Some(PathBuf::from(l))),
                    None => (rest, None),
                };
                Ok(DataSource::Idx { images: img.into(), labels: lab })
            }
            "idx-dir" if !rest.is_empty() => {
                let dir = Path::new(rest);
                Ok(DataSource::Idx {
                    images: dir.join("images-idx3-ubyte"),
                    labels: Some(dir.join("labels-idx1-ubyte")),
                })
            }
            "csv" if !rest.is_empty() => Ok(DataSource::Csv { path: rest.into(), labels: false }),
            "csv-labeled" if !rest.is_empty() => Ok(DataSource::Csv { path: rest.into(), labels: true }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Encoder network (true) or free per-datum latents (false).
    pub amortized: bool,
    pub data: DataSource,
    /// Training rows taken after a seeded shuffle.
    pub n_train: usize,
    /// Held-out rows following the training rows in the same shuffle.
    pub n_test: usize,
    /// Latent dimension.
    pub q: usize,
    pub active_set: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Training seed: initialization, batching, splits and noise.
    pub seed: u64,
    /// Seed of the dataset draw and train/test shuffle.
    pub data_seed: u64,
    /// Relative diagonal jitter applied before every Cholesky.
    pub jitter: f64,
    pub num_mc: usize,
    pub ablation: Ablation,
    pub precision: Precision,
    /// Initial `(σ_a², ℓ, σ_n²)`.
    pub kernel_init: [f64; 3],
    /// Random training active sets averaged over at evaluation.
    pub eval_active_sets: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sas,
            amortized: true,
            data: DataSource::Synth { d: 5 },
            n_train: 256,
            n_test: 0,
            q: 2,
            active_set: 32,
            batch: 64,
            epochs: 300,
            lr: 1e-3,
            seed: 0,
            data_seed: 0,
            jitter: 1e-6,
            num_mc: 1,
            ablation: Ablation::None,
            precision: Precision::F64,
            kernel_init: [0.5, 0.1, 0.5],
            eval_active_sets: 1,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| GpError::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GpError::InvalidConfig(m));
        if self.active_set == 0 {
            return fail("active set must hold at least one point".into());
        }
        if self.batch <= self.active_set {
            return fail(format!("batch size {} must exceed the active set size {}", self.batch, self.active_set));
        }
        if self.batch > self.n_train {
            return fail(format!("batch size {} exceeds the {} training rows", self.batch, self.n_train));
        }
        if !(1e-6..=1.0).contains(&self.lr) {
            return fail(format!("learning rate {} outside [1e-6, 1]", self.lr));
        }
        if self.epochs == 0 {
            return fail("at least one epoch is required".into());
        }
        if self.q == 0 {
            return fail("latent dimension must be positive".into());
        }
        if self.num_mc == 0 {
            return fail("num_mc must be at least 1".into());
        }
        if self.eval_active_sets == 0 {
            return fail("eval_active_sets must be at least 1".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("jitter {} must be finite and non-negative", self.jitter));
        }
        if self.kernel_init.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return fail("initial kernel hyperparameters must be positive".into());
        }
        if self.mode == Mode::BayesianSas && self.ablation != Ablation::None {
            return fail("ablations apply to the sas mode only".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "amortized" => self.amortized = parse(key, v)?,
            "data" => self.data = v.parse()?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "q" => self.q = parse(key, v)?,
            "active_set" => self.active_set = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "num_mc" => self.num_mc = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "precision" => self.precision = v.parse()?,
            "kernel_init" => {
                let parts: Vec<f64> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.kernel_init = parts
                    .try_into()
                    .map_err(|_| GpError::InvalidConfig("kernel_init takes three comma-separated values".into()))?;
            }
            "eval_active_sets" => self.eval_active_sets = parse(key, v)?,
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(GpError::InvalidConfig(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the flat text format over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GpError::ParseError { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            cfg.set(k, v).map_err(|e| GpError::ParseError { line: i + 1, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every setting as `(key, value)`, in key order.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let k = self.kernel_init;
        BTreeMap::from([
            ("mode", self.mode.to_string()),
            ("amortized", self.amortized.to_string()),
            ("data", self.data.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("q", self.q.to_string()),
            ("active_set", self.active_set.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("jitter", format!("{:?}", self.jitter)),
            ("num_mc", self.num_mc.to_string()),
            ("ablation", self.ablation.to_string()),
            ("precision", self.precision.to_string()),
            ("kernel_init", format!("{:?},{:?},{:?}", k[0], k[1], k[2])),
            ("eval_active_sets", self.eval_active_sets.to_string()),
            ("out", self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        ])
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// [`Self::to_text`] without the output directory, as stored in run logs
    /// and checkpoints.
    pub fn run_text(&self) -> String {
        RunConfig { out: None, ..self.clone() }.to_text()
    }

    /// SHA-256 over every setting except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs().into_iter().filter(|(k, _)| *k != "out") {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}
