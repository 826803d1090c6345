//! One JSON object per line, sorted by sample id. Floats carry 17
//! significant digits so a dump round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::adaptation::PredictionRecord;
use crate::error::{Error, Result};

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_record(r: &PredictionRecord) -> String {
    let mut line = String::with_capacity(256);
    write!(
        line,
        "{{\"sample_id\":{},\"method\":\"{}\",\"true_label\":{},\"predicted_label\":{},\"confidence\":{},\"logit_min\":{},\"logit_max\":{},\"logit_mean\":{},\"correct\":{}}}",
        r.sample_id,
        r.method,
        r.true_label,
        r.predicted_label,
        num(r.confidence),
        num(r.logit_min),
        num(r.logit_max),
        num(r.logit_mean),
        r.correct
    )
    .unwrap();
    line
}

pub fn encode_predictions(records: &[PredictionRecord]) -> String {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sample_id);
    let mut out = String::new();
    for r in sorted {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    out
}

pub fn decode_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.correct != (rec.predicted_label == rec.true_label) {
            return Err(Error::Parse {
                line: i + 1,
                message: "correct flag disagrees with labels".into(),
            });
        }
        if !(rec.confidence > 0.0 && rec.confidence <= 1.0) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("confidence {} outside (0, 1]", rec.confidence),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_predictions(records)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_predictions(&text)
}
