//! CSV ingestion.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prepare, IVDataset};

/// Which CSV columns play which role. Empty `instruments` means every column
/// other than the outcome, treatment and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            treatment: "d".into(),
            instruments: Vec::new(),
            covariates: Vec::new(),
        }
    }
}

const MISSING: [&str; 4] = ["", "NA", "na", "."];

/// Reads a header-row CSV and returns the prepared dataset. Rows are
/// numbered from 1, not counting the header.
pub fn ingest_reader<R: Read>(reader: R, map: &ColumnMap) -> Result<IVDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let iy = find(&map.outcome)?;
    let id = find(&map.treatment)?;
    let ix: Vec<usize> = map.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let iz: Vec<usize> = if map.instruments.is_empty() {
        (0..header.len()).filter(|j| *j != iy && *j != id && !ix.contains(j)).collect()
    } else {
        map.instruments.iter().map(|c| find(c)).collect::<Result<_>>()?
    };
    if iz.is_empty() {
        return Err(Error::Dimension("no instrument columns".into()));
    }

    let wanted: Vec<usize> = [iy, id].into_iter().chain(iz.iter().copied()).chain(ix.iter().copied()).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let mut vals = Vec::with_capacity(wanted.len());
        for &j in &wanted {
            let cell = rec.get(j).unwrap_or("");
            if MISSING.contains(&cell) {
                return Err(Error::MissingValue { row, column: header[j].clone() });
            }
            let v: f64 = cell.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                row,
                column: header[j].clone(),
                message: format!("\"{cell}\": {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: header[j].clone(), message: format!("\"{cell}\" is not finite") });
            }
            vals.push(v);
        }
        rows.push(vals);
    }

    let n = rows.len();
    let (p, k) = (iz.len(), ix.len());
    if n <= p + k + 1 {
        return Err(Error::Dimension(format!("need n > p + k + 1, got n = {n}, p = {p}, k = {k}")));
    }
    let y = DVector::from_fn(n, |i, _| rows[i][0]);
    let d = DVector::from_fn(n, |i, _| rows[i][1]);
    let z = DMatrix::from_fn(n, p, |i, j| rows[i][2 + j]);
    let x = (k > 0).then(|| DMatrix::from_fn(n, k, |i, j| rows[i][2 + p + j]));
    let names = |idx: &[usize]| idx.iter().map(|&j| header[j].clone()).collect::<Vec<_>>();
    let raw = IVDataset::new(y, d, z, x)?.with_names(names(&iz), names(&ix))?;
    prepare(&raw)
}

pub fn ingest(path: impl AsRef<Path>, map: &ColumnMap) -> Result<IVDataset> {
    ingest_reader(File::open(path)?, map)
}
