//! CSV ingestion: unit-level rows to a block-design `Dataset`.
//!
//! Rows are grouped by the area-id column in order of first appearance, and
//! each unit's regressor is assembled block-diagonally: response t's row
//! holds an intercept followed by its covariate columns, zeros elsewhere, so
//! s = sum_t (1 + p_t). Row numbers in errors are 1-based file lines
//! (the header is line 1).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use mner::{Dataset, UnitBlock};

use crate::config::DataSpec;
use crate::error::CliError;

/// Ingestion failures; all map to input errors (exit 2).
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumericCell {
        row: usize,
        col: String,
        value: String,
    },
    #[error("row {row}: empty area id")]
    EmptyArea { row: usize },
    #[error("duplicate header: {0}")]
    DuplicateHeader(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Shape(String),
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Reads `path` and builds the dataset described by `spec`.
pub fn ingest_csv(path: &Path, spec: &DataSpec) -> Result<Dataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let mut index = std::collections::HashMap::new();
    for (i, name) in headers.iter().enumerate() {
        if index.insert(name.to_string(), i).is_some() {
            return Err(IngestError::DuplicateHeader(name.to_string()));
        }
    }
    let col = |name: &str| -> Result<usize, IngestError> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };

    let area_col = col(&spec.area_column)?;
    let k = spec.responses.len();
    let response_cols: Vec<usize> = spec
        .responses
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let covariate_cols: Vec<Vec<usize>> = spec
        .covariates
        .iter()
        .map(|cols| cols.iter().map(|n| col(n)).collect())
        .collect::<Result<_, _>>()?;

    // Column offset of each response's block: intercept + covariates.
    let mut offsets = Vec::with_capacity(k);
    let mut s = 0usize;
    for cols in &covariate_cols {
        offsets.push(s);
        s += 1 + cols.len();
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_area: std::collections::HashMap<String, (Vec<DVector<f64>>, Vec<DMatrix<f64>>)> =
        std::collections::HashMap::new();

    for (ridx, record) in reader.records().enumerate() {
        let row = ridx + 2;
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let numeric = |c: usize, name: &str| -> Result<f64, IngestError> {
            let value = cell(c);
            value.parse().map_err(|_| IngestError::NonNumericCell {
                row,
                col: name.to_string(),
                value: value.to_string(),
            })
        };

        let id = cell(area_col).to_string();
        if id.is_empty() {
            return Err(IngestError::EmptyArea { row });
        }

        let mut y = DVector::zeros(k);
        let mut r = DMatrix::zeros(k, s);
        for t in 0..k {
            y[t] = numeric(response_cols[t], &spec.responses[t])?;
            r[(t, offsets[t])] = 1.0;
            for (c, (&ci, name)) in covariate_cols[t]
                .iter()
                .zip(&spec.covariates[t])
                .enumerate()
            {
                r[(t, offsets[t] + 1 + c)] = numeric(ci, name)?;
            }
        }

        if !by_area.contains_key(&id) {
            order.push(id.clone());
        }
        let entry = by_area.entry(id).or_default();
        entry.0.push(y);
        entry.1.push(r);
    }

    let mut areas = Vec::with_capacity(order.len());
    for id in &order {
        let (responses, regressors) = by_area.remove(id).expect("grouped above");
        areas.push(
            UnitBlock::new(responses, regressors).map_err(|e| IngestError::Shape(e.to_string()))?,
        );
    }
    Dataset::new(areas, order).map_err(|e| IngestError::Shape(e.to_string()))
}

/// Reads per-area target matrices c_a from a CSV with columns
/// `area, c_11 .. c_ks` (k x s, flattened row-major), one row per area.
pub fn load_targets(path: &Path, data: &Dataset) -> Result<Vec<DMatrix<f64>>, IngestError> {
    let k = data.k();
    let s = data.s();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut index = std::collections::HashMap::new();
    for (i, name) in headers.iter().enumerate() {
        if index.insert(name.to_string(), i).is_some() {
            return Err(IngestError::DuplicateHeader(name.to_string()));
        }
    }
    let col = |name: &str| -> Result<usize, IngestError> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let area_col = col("area")?;
    let mut cells = Vec::with_capacity(k * s);
    for t in 1..=k {
        for j in 1..=s {
            cells.push(col(&format!("c_{t}{j}"))?);
        }
    }

    let mut found: std::collections::HashMap<String, DMatrix<f64>> =
        std::collections::HashMap::new();
    for (ridx, record) in reader.records().enumerate() {
        let row = ridx + 2;
        let record = record?;
        let id = record.get(area_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(IngestError::EmptyArea { row });
        }
        let mut c = DMatrix::zeros(k, s);
        for t in 0..k {
            for j in 0..s {
                let ci = cells[t * s + j];
                let value = record.get(ci).unwrap_or("");
                c[(t, j)] = value.parse().map_err(|_| IngestError::NonNumericCell {
                    row,
                    col: format!("c_{}{}", t + 1, j + 1),
                    value: value.to_string(),
                })?;
            }
        }
        found.insert(id, c);
    }

    (0..data.m())
        .map(|i| {
            found.get(data.area_id(i)).cloned().ok_or_else(|| {
                IngestError::Shape(format!("no target row for area {}", data.area_id(i)))
            })
        })
        .collect()
}
