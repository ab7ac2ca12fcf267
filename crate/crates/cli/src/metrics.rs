//! Metrics CSV: header `layer_index,fid,hdd`, one row per layer.

use std::io::{Read, Write};

use relactrl_core::backbone::SweepRow;
use serde::Serialize;

use crate::CliError;

pub const HEADER: [&str; 3] = ["layer_index", "fid", "hdd"];

/// Synthetic 27-layer table peaking at layers 5–7. Illustrative only.
pub const BUNDLED_TABLE: &str = include_str!("../data/synthetic_relevance_27.csv");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    /// 0 or 1, as found in the input.
    pub index_base: usize,
    /// `(layer_index, fid, hdd)` with 0-based indices, sorted by layer.
    pub rows: Vec<(usize, f64, f64)>,
}

impl MetricsTable {
    pub fn parse<R: Read>(input: R) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers = rdr
            .headers()
            .map_err(|e| CliError::invalid(format!("metrics CSV: {e}")))?
            .clone();
        for col in HEADER {
            if !headers.iter().any(|h| h == col) {
                return Err(CliError::invalid(format!(
                    "metrics CSV is missing the `{col}` column (expected header `{}`)",
                    HEADER.join(",")
                )));
            }
        }
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(CliError::invalid(format!(
                "metrics CSV header must be exactly `{}`, got `{}`",
                HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CliError::invalid(format!("metrics CSV: {e}")))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let row = line + 2;
            let idx: usize = field(0).parse().map_err(|_| {
                CliError::invalid(format!(
                    "row {row}: layer_index `{}` is not an integer",
                    field(0)
                ))
            })?;
            let num = |i: usize| -> Result<f64, CliError> {
                let v: f64 = field(i).parse().map_err(|_| {
                    CliError::invalid(format!(
                        "row {row}: {} `{}` is not a number",
                        HEADER[i],
                        field(i)
                    ))
                })?;
                if !v.is_finite() || v < 0.0 {
                    return Err(CliError::invalid(format!(
                        "row {row}: {} must be finite and non-negative, got {v}",
                        HEADER[i]
                    )));
                }
                Ok(v)
            };
            rows.push((idx, num(1)?, num(2)?));
        }
        if rows.is_empty() {
            return Err(CliError::invalid("metrics CSV has no rows"));
        }
        rows.sort_by_key(|r| r.0);
        let base = rows[0].0;
        if base > 1 {
            return Err(CliError::invalid(format!(
                "layer indices must start at 0 or 1, found {base}"
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.0 != base + i {
                return Err(CliError::invalid(format!(
                    "layer indices must be unique and contiguous from {base}; problem at {}",
                    r.0
                )));
            }
        }
        for r in &mut rows {
            r.0 -= base;
        }
        Ok(Self {
            index_base: base,
            rows,
        })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TABLE.as_bytes()).expect("bundled table is valid")
    }
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::invalid(format!("writing metrics CSV: {e}"));
    w.write_record(HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.layer_index.to_string(),
            format!("{:.17e}", r.proxy_fid),
            format!("{:.17e}", r.proxy_hdd),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| CliError::invalid(format!("writing metrics CSV: {e}")))
}
