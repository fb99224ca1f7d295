//! Long-format measurement CSV:
//! `specimen_id,density_kg_m3,fc_ksc,E_ksc,time_day,creep_microstrain`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SpecimenRecord;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    specimen_id: String,
    density_kg_m3: f64,
    fc_ksc: f64,
    #[serde(rename = "E_ksc")]
    e_ksc: f64,
    time_day: f64,
    creep_microstrain: f64,
}

pub const HEADER: [&str; 6] = [
    "specimen_id",
    "density_kg_m3",
    "fc_ksc",
    "E_ksc",
    "time_day",
    "creep_microstrain",
];

/// Parses records from any reader; `origin` labels diagnostics. Rows of one
/// specimen may be interleaved with others but must have increasing times
/// and identical features. Row numbers count the header as row 1.
pub fn read_records<R: Read>(reader: R, origin: &str) -> Result<Vec<SpecimenRecord>> {
    let fail = |row: usize, msg: String| Error::Csv {
        path: origin.to_string(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        tracing::warn!(origin, "empty creep CSV");
        return Ok(Vec::new());
    }
    if let Some(missing) = HEADER.iter().find(|h| !headers.iter().any(|x| x == **h)) {
        return Err(fail(1, format!("missing column `{missing}`")));
    }

    let mut records: Vec<SpecimenRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, result) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = result.map_err(|e| fail(line, e.to_string()))?;
        let features = [row.density_kg_m3, row.fc_ksc, row.e_ksc];
        if features.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(fail(line, "density, fc and E must be positive".into()));
        }
        if !(row.time_day.is_finite() && row.time_day >= 0.0) {
            return Err(fail(line, format!("invalid time {}", row.time_day)));
        }
        if !row.creep_microstrain.is_finite() {
            return Err(fail(line, "non-finite creep value".into()));
        }
        let k = *index.entry(row.specimen_id.clone()).or_insert_with(|| {
            records.push(SpecimenRecord {
                id: row.specimen_id.clone(),
                density: row.density_kg_m3,
                fc: row.fc_ksc,
                e: row.e_ksc,
                times: Vec::new(),
                creeps: Vec::new(),
            });
            records.len() - 1
        });
        let rec = &mut records[k];
        if rec.features() != features {
            return Err(fail(line, format!("features differ from earlier rows of specimen {}", rec.id)));
        }
        if let Some(&last) = rec.times.last() {
            if row.time_day <= last {
                return Err(fail(
                    line,
                    format!("time {} does not increase past {last} for specimen {}", row.time_day, rec.id),
                ));
            }
        }
        rec.times.push(row.time_day);
        rec.creeps.push(row.creep_microstrain);
    }
    if records.is_empty() {
        tracing::warn!(origin, "creep CSV has a header but no rows");
    }
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<SpecimenRecord>> {
    let file = std::fs::File::open(path)?;
    read_records(file, &path.display().to_string())
}

pub fn write_records<W: Write>(writer: W, records: &[SpecimenRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        for (&t, &c) in r.times.iter().zip(&r.creeps) {
            w.serialize(Row {
                specimen_id: r.id.clone(),
                density_kg_m3: r.density,
                fc_ksc: r.fc,
                e_ksc: r.e,
                time_day: t,
                creep_microstrain: c,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_records(path: &Path, records: &[SpecimenRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}
