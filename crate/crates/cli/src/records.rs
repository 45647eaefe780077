//! CSV schemas for records, loss history, ROC points and referral curves.

use serde::{Deserialize, Serialize};
use std::path::Path;

use lipgate::metrics::{EvalRecord, Label, ReferralCurve, RocCurve};
use lipgate::models::EpochStats;

use crate::error::{CliError, Result};
use crate::format::write_file;

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    sample_id: u64,
    label: String,
    mae: f64,
    lipschitz: f64,
    variance: f64,
}

#[derive(Debug, Serialize)]
struct LossRow {
    epoch: usize,
    mean_total_loss: f64,
    mean_data_loss: f64,
}

#[derive(Debug, Serialize)]
struct RocRow {
    fpr: f64,
    tpr: f64,
}

#[derive(Debug, Serialize)]
struct ReferralRow {
    fraction: f64,
    mean_lip: f64,
    mean_mae: f64,
}

/// `header` is written explicitly when there are no rows to derive it from.
fn to_bytes<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut empty = true;
    for r in rows {
        w.serialize(r)?;
        empty = false;
    }
    if empty {
        w.write_record(header)?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

pub fn records_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    to_bytes(&["sample_id", "label", "mae", "lipschitz", "variance"], records.iter().map(|r| RecordRow {
        sample_id: r.sample_id,
        label: r.label.name().into(),
        mae: r.mae,
        lipschitz: r.lipschitz,
        variance: r.variance,
    }))
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    write_file(path, &records_csv(records)?)
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr.headers()?.clone();
    if headers != vec!["sample_id", "label", "mae", "lipschitz", "variance"] {
        return Err(CliError::Format(format!("unexpected record header {headers:?}")));
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in rdr.deserialize() {
        let row: RecordRow = row?;
        let label = Label::parse(&row.label).ok_or_else(|| CliError::Format(format!("unknown label `{}`", row.label)))?;
        let rec = EvalRecord {
            sample_id: row.sample_id,
            label,
            mae: row.mae,
            lipschitz: row.lipschitz,
            variance: row.variance,
        };
        rec.validate()?;
        if !seen.insert(rec.sample_id) {
            return Err(CliError::Format(format!("duplicate sample_id {}", rec.sample_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    parse_records(&crate::format::read_file(path)?)
}

pub fn write_loss(path: &Path, history: &[EpochStats]) -> Result<()> {
    let rows = history.iter().map(|h| LossRow {
        epoch: h.epoch,
        mean_total_loss: h.mean_total_loss,
        mean_data_loss: h.mean_data_loss,
    });
    write_file(path, &to_bytes(&["epoch", "mean_total_loss", "mean_data_loss"], rows)?)
}

pub fn write_roc(path: &Path, roc: &RocCurve) -> Result<()> {
    write_file(path, &to_bytes(&["fpr", "tpr"], roc.points.iter().map(|&(fpr, tpr)| RocRow { fpr, tpr }))?)
}

pub fn write_referral(path: &Path, curve: &ReferralCurve) -> Result<()> {
    let rows = (0..curve.fractions.len()).map(|i| ReferralRow {
        fraction: curve.fractions[i],
        mean_lip: curve.mean_lip[i],
        mean_mae: curve.mean_mae[i],
    });
    write_file(path, &to_bytes(&["fraction", "mean_lip", "mean_mae"], rows)?)
}
