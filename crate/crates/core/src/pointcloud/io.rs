//! CSV reading and writing for plots and occupancy labels.
//!
//! Plot files carry the header
//! `plot_id,x,y,z,r,g,b,nir,intensity,return_number`; a file may hold one or
//! several plots, rows grouped by `plot_id`. Label files carry
//! `plot_id,o_low,o_medium,o_high`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Occupancy, Plot, RawPoint, DEFAULT_RADIUS};
use crate::error::{Error, Result};

pub const PLOT_COLUMNS: [&str; 10] = [
    "plot_id",
    "x",
    "y",
    "z",
    "r",
    "g",
    "b",
    "nir",
    "intensity",
    "return_number",
];
pub const LABEL_COLUMNS: [&str; 4] = ["plot_id", "o_low", "o_medium", "o_high"];

fn column_positions(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
        })
        .collect()
}

fn parse_cell(record: &csv::StringRecord, pos: usize, column: &str, row: usize) -> Result<f64> {
    let raw = record.get(pos).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(value)
}

/// Reads every plot from a plot CSV, keeping plots in order of first
/// appearance and rows in file order. All plots get `radius`.
pub fn read_plots(path: impl AsRef<Path>, radius: f64) -> Result<Vec<Plot>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let pos = column_positions(&headers, &PLOT_COLUMNS)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RawPoint>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let id = record.get(pos[0]).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: "plot_id".into(),
                message: "empty plot id".into(),
            });
        }
        let mut v = [0.0; 9];
        for (k, value) in v.iter_mut().enumerate() {
            *value = parse_cell(&record, pos[k + 1], PLOT_COLUMNS[k + 1], row)?;
        }
        let rn = v[8];
        if rn.fract() != 0.0 || rn < 1.0 || rn > u32::MAX as f64 {
            return Err(Error::Parse {
                row,
                column: "return_number".into(),
                message: format!("`{rn}` is not an integer >= 1"),
            });
        }
        let point = RawPoint {
            x: v[0],
            y: v[1],
            z: v[2],
            r: v[3],
            g: v[4],
            b: v[5],
            nir: v[6],
            intensity: v[7],
            return_number: rn as u32,
        };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(point);
    }
    if order.is_empty() {
        return Err(Error::Format(format!("{} holds no points", path.display())));
    }
    order
        .into_iter()
        .map(|id| {
            let points = groups.remove(&id).unwrap_or_default();
            Plot::new(id, points, radius, None)
        })
        .collect()
}

/// Reads a file that must hold exactly one plot.
pub fn load_plot(path: impl AsRef<Path>) -> Result<Plot> {
    let path = path.as_ref();
    let mut plots = read_plots(path, DEFAULT_RADIUS)?;
    if plots.len() != 1 {
        return Err(Error::Format(format!(
            "{} holds {} plots, expected one",
            path.display(),
            plots.len()
        )));
    }
    Ok(plots.remove(0))
}

pub fn write_plots<'a>(path: impl AsRef<Path>, plots: impl IntoIterator<Item = &'a Plot>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", PLOT_COLUMNS.join(","))?;
    for plot in plots {
        for p in &plot.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                plot.id, p.x, p.y, p.z, p.r, p.g, p.b, p.nir, p.intensity, p.return_number
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a labels CSV into a map keyed by plot id.
pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, Occupancy>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let pos = column_positions(&headers, &LABEL_COLUMNS)?;
    let mut labels = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let id = record.get(pos[0]).unwrap_or("").trim().to_string();
        let mut v = [0.0; 3];
        for (k, value) in v.iter_mut().enumerate() {
            *value = parse_cell(&record, pos[k + 1], LABEL_COLUMNS[k + 1], row)?;
        }
        let occ = Occupancy::from_array(v);
        occ.validate()
            .map_err(|e| Error::Validation(format!("labels row {row}: {e}")))?;
        if labels.insert(id.clone(), occ).is_some() {
            return Err(Error::Validation(format!("duplicate label for plot `{id}`")));
        }
    }
    Ok(labels)
}

pub fn write_labels<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, Occupancy)>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", LABEL_COLUMNS.join(","))?;
    for (id, o) in rows {
        writeln!(out, "{},{},{},{}", id, o.low, o.medium, o.high)?;
    }
    out.flush()?;
    Ok(())
}
