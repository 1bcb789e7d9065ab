//! The JSON analysis report and serialization helpers.

use nalgebra::Matrix2;
use serde::{Serialize, Serializer};

use crate::analysis::AnalysisConfig;
use crate::error::Result;
use crate::inference::{GridPoint, InferenceReport, Method};
use crate::lasso::LassoSelection;
use crate::pretest::PretestOutcome;

pub const SCHEMA_VERSION: u32 = 1;

/// Writes a 2x2 matrix as nested row arrays.
pub fn ser_matrix2<S: Serializer>(m: &Matrix2<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows = [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]];
    serde::Serialize::serialize(&rows, s)
}

/// Vectors as plain JSON arrays.
pub mod dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimates {
    pub beta_tsls: f64,
    pub se_tsls: f64,
    pub f_stat: f64,
}

/// Everything needed to audit an analysis: the pre-test state including the
/// realized `omega`, naive and conditional results, and the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub n: usize,
    pub p: usize,
    /// Exogenous columns projected out, intercept included.
    pub absorbed: usize,
    pub instruments: Vec<String>,
    pub branch: Method,
    pub estimates: Estimates,
    pub pretest: PretestOutcome,
    pub lasso: Option<LassoSelection>,
    pub inference: InferenceReport,
    pub config: AnalysisConfig,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Columns `beta, naive_p, conditional_p`; the two curves share a grid only
/// when no refinement points were added, so missing entries are left empty.
pub fn write_curves_csv<W: std::io::Write>(naive: &[GridPoint], conditional: &[GridPoint], out: W) -> Result<()> {
    let mut rows: Vec<(f64, Option<f64>, Option<f64>)> = Vec::new();
    for g in naive {
        rows.push((g.beta, Some(g.pvalue), None));
    }
    for g in conditional {
        match rows.iter_mut().find(|r| r.0 == g.beta) {
            Some(r) => r.2 = Some(g.pvalue),
            None => rows.push((g.beta, None, Some(g.pvalue))),
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "naive_p", "conditional_p"])?;
    for (b, n, c) in rows {
        w.write_record(&[b.to_string(), cell(n), cell(c)])?;
    }
    w.flush()?;
    Ok(())
}
