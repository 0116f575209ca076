//! CSV exports consumed by the plotting scripts.
//!
//! * `curves.csv`: `epoch,objective,seconds`
//! * `latents.csv`: `index[,label],z_1..z_Q[,var_1..var_Q]`

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::data::write_atomic;
use crate::error::{GpError, Result};
use crate::matrix::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub objective: f64,
    pub seconds: f64,
}

fn csv_err(e: csv::Error) -> GpError {
    GpError::ParseError { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| GpError::Io(e.into_error()))
}

pub fn write_curves(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in epochs {
        w.serialize(CurveRow { epoch: e.epoch, objective: e.objective, seconds: e.seconds }).map_err(csv_err)?;
    }
    if epochs.is_empty() {
        w.write_record(["epoch", "objective", "seconds"]).map_err(csv_err)?;
    }
    write_atomic(path, &finish(w)?)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_latents(path: &Path, z: &Mat<f64>, var: Option<&Mat<f64>>, labels: Option<&[u32]>) -> Result<()> {
    if var.is_some_and(|v| v.shape() != z.shape()) || labels.is_some_and(|l| l.len() != z.rows()) {
        return Err(GpError::DimensionMismatch("latent export columns differ in length".into()));
    }
    let q = z.cols();
    let mut header = vec!["index".to_string()];
    if labels.is_some() {
        header.push("label".into());
    }
    header.extend((1..=q).map(|j| format!("z_{j}")));
    if var.is_some() {
        header.extend((1..=q).map(|j| format!("var_{j}")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..z.rows() {
        let mut rec = vec![i.to_string()];
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        rec.extend(z.row(i).iter().map(f64::to_string));
        if let Some(v) = var {
            rec.extend(v.row(i).iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_atomic(path, &finish(w)?)
}
