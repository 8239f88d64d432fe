//! CSV ingestion and emission.
//!
//! Dialect: comma-separated, first row is a header of parameter names in any
//! order, decimal numerals, empty or non-numeric cell = missing, LF or CRLF.

use super::{ParameterSpec, TelemetrySeries};
use crate::error::{Error, Result};
use std::path::Path;

/// Read a telemetry CSV, reorder columns to schema order, and mark
/// empty/non-numeric cells missing.
pub fn load_csv(path: &Path, schema: &[ParameterSpec]) -> Result<TelemetrySeries> {
    if !path.exists() {
        return Err(Error::Data(format!("data file not found: {}", path.display())));
    }
    let csv_err = |e: csv::Error| Error::Csv { path: path.display().to_string(), detail: e.to_string() };
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path).map_err(csv_err)?;

    let headers = reader.headers().map_err(csv_err)?.clone();
    let n = schema.len();
    // Map schema column -> file column.
    let mut order = Vec::with_capacity(n);
    for spec in schema {
        let pos = headers.iter().position(|h| h.trim() == spec.name).ok_or_else(|| Error::Csv {
            path: path.display().to_string(),
            detail: format!("missing column `{}` in header", spec.name),
        })?;
        order.push(pos);
    }
    for h in headers.iter() {
        if !schema.iter().any(|s| s.name == h.trim()) {
            return Err(Error::Csv {
                path: path.display().to_string(),
                detail: format!("unknown column `{}` in header", h.trim()),
            });
        }
    }

    let mut values = Vec::new();
    let mut missing = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        for &pos in &order {
            let cell = record.get(pos).unwrap_or("").trim();
            match cell.parse::<f64>() {
                Ok(v) => {
                    values.push(v);
                    missing.push(false);
                }
                Err(_) => {
                    values.push(0.0);
                    missing.push(true);
                }
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Csv { path: path.display().to_string(), detail: "no data rows".into() });
    }
    TelemetrySeries::new(schema.to_vec(), values, missing)
}

/// Write a series in the same dialect `load_csv` reads; missing cells emit as
/// empty fields, so the file round-trips.
pub fn write_csv(series: &TelemetrySeries, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.display().to_string(), detail: e.to_string() };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let names: Vec<&str> = series.schema.iter().map(|s| s.name.as_str()).collect();
    writer.write_record(&names).map_err(csv_err)?;
    let n = series.cols();
    let mut record = Vec::with_capacity(n);
    for t in 0..series.rows() {
        record.clear();
        for j in 0..n {
            if series.is_missing(t, j) {
                record.push(String::new());
            } else {
                record.push(format!("{}", series.value(t, j)));
            }
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{canonical_schema, generate_synthetic, SyntheticConfig};
    use std::io::Write;

    #[test]
    fn round_trip_through_file() {
        let cfg = SyntheticConfig { length: 64, seed: 2, missing_prob: 0.1, ..Default::default() };
        let series = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&series, &path).unwrap();
        let loaded = load_csv(&path, &canonical_schema()).unwrap();
        assert_eq!(loaded.rows(), series.rows());
        for t in 0..series.rows() {
            for j in 0..series.cols() {
                assert_eq!(loaded.is_missing(t, j), series.is_missing(t, j));
                if !series.is_missing(t, j) {
                    assert_eq!(loaded.value(t, j), series.value(t, j), "cell ({t},{j})");
                }
            }
        }
    }

    #[test]
    fn header_order_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        // Two columns swapped relative to schema order.
        writeln!(
            f,
            "ULSINR,DLBw,DLOccupyPRBNum,CellDLMACRate,DLMACRate,MCS,PDCPOccupyBuffer,PDCPUnusedBuffer,DLPDCPSDUNum"
        )
        .unwrap();
        writeln!(f, "12.5,2e7,40,5e5,4e5,14,1000,999000,400").unwrap();
        drop(f);
        let s = load_csv(&path, &canonical_schema()).unwrap();
        assert_eq!(s.value(0, 0), 2e7); // DLBw is schema column 0
        assert_eq!(s.value(0, 1), 12.5); // ULSINR is schema column 1
    }

    #[test]
    fn empty_cell_sets_mask_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "DLBw,ULSINR,DLOccupyPRBNum,CellDLMACRate,DLMACRate,MCS,PDCPOccupyBuffer,PDCPUnusedBuffer,DLPDCPSDUNum"
        )
        .unwrap();
        writeln!(f, "2e7,,40,5e5,4e5,14,1000,999000,400").unwrap();
        writeln!(f, "2e7,13.5,40,5e5,4e5,bad,1000,999000,400").unwrap();
        drop(f);
        let s = load_csv(&path, &canonical_schema()).unwrap();
        assert!(s.is_missing(0, 1));
        assert!(s.is_missing(1, 5));
        assert_eq!(s.missing_count(), 2);
        assert_eq!(s.value(1, 1), 13.5);
    }

    #[test]
    fn errors_on_missing_file_unknown_column_and_empty() {
        let schema = canonical_schema();
        assert!(load_csv(Path::new("/nonexistent/x.csv"), &schema).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "DLBw,Bogus\n1,2\n").unwrap();
        let err = load_csv(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("ULSINR") || err.contains("Bogus"), "{err}");

        let path2 = dir.path().join("empty.csv");
        std::fs::write(
            &path2,
            "DLBw,ULSINR,DLOccupyPRBNum,CellDLMACRate,DLMACRate,MCS,PDCPOccupyBuffer,PDCPUnusedBuffer,DLPDCPSDUNum\n",
        )
        .unwrap();
        assert!(load_csv(&path2, &schema).unwrap_err().to_string().contains("no data rows"));
    }

    #[test]
    fn mcs_out_of_range_errors_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "DLBw,ULSINR,DLOccupyPRBNum,CellDLMACRate,DLMACRate,MCS,PDCPOccupyBuffer,PDCPUnusedBuffer,DLPDCPSDUNum"
        )
        .unwrap();
        writeln!(f, "2e7,13.5,40,5e5,4e5,29,1000,999000,400").unwrap();
        drop(f);
        let err = load_csv(&path, &canonical_schema()).unwrap_err().to_string();
        assert!(err.contains("MCS") && err.contains("29") && err.contains("row 0"), "{err}");
    }
}
