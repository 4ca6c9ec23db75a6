//! Result serialization: CSV tables and JSON reports.
//!
//! Numbers are written as the shortest decimal that round-trips binary64;
//! matrices flatten row-major into suffixed columns (msem_11, msem_12, ...).
//! With `--out DIR` both the CSV and the JSON file are written; without it,
//! the format selected by `--format` goes to stdout.

use std::path::Path;

use serde::Serialize;

use mner::uncertainty::IntervalPair;
use mner::{AreaPrediction, Dataset, FitResult, SymMat};

use crate::error::CliError;

/// Output format selector for stdout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Shortest round-trip decimal of a binary64.
pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn push_mat_header(header: &mut Vec<String>, name: &str, rows: usize, cols: usize) {
    for i in 1..=rows {
        for j in 1..=cols {
            header.push(format!("{name}_{i}{j}"));
        }
    }
}

fn push_mat_values(values: &mut Vec<String>, m: &nalgebra::DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            values.push(fmt_f(m[(i, j)]));
        }
    }
}

fn csv_table(header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Fit summary serialized to JSON; the CSV variant carries the same scalars
/// and matrices in one wide row (beta_cov is JSON-only).
#[derive(Debug, Serialize)]
pub struct FitReport {
    pub m: usize,
    pub n_total: usize,
    pub k: usize,
    pub s: usize,
    pub s0: usize,
    pub truncated: bool,
    pub responses: Vec<String>,
    pub beta: Vec<f64>,
    pub beta_cov: SymMat,
    pub sigma_hat: SymMat,
    pub psi0: SymMat,
    pub psi1: SymMat,
    pub psi_hat: SymMat,
    /// Eigenvalues of psi1, the input of the PSD truncation.
    pub eigenvalues: Vec<f64>,
    pub areas: Vec<AreaInfo>,
}

#[derive(Debug, Serialize)]
pub struct AreaInfo {
    pub id: String,
    pub n: usize,
}

impl FitReport {
    pub fn new(data: &Dataset, fit: &FitResult, responses: &[String]) -> Self {
        let c = &fit.components;
        FitReport {
            m: data.m(),
            n_total: data.n_total(),
            k: data.k(),
            s: data.s(),
            s0: c.s0,
            truncated: c.truncated,
            responses: responses.to_vec(),
            beta: fit.beta.iter().copied().collect(),
            beta_cov: fit.beta_cov.clone(),
            sigma_hat: c.sigma_hat.clone(),
            psi0: c.psi0.clone(),
            psi1: c.psi1.clone(),
            psi_hat: c.psi_hat.clone(),
            eigenvalues: c.eigenvalues.clone(),
            areas: (0..data.m())
                .map(|i| AreaInfo {
                    id: data.area_id(i).to_string(),
                    n: data.sizes()[i],
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let k = self.k;
        let mut header = vec![
            "m".to_string(),
            "n_total".to_string(),
            "k".to_string(),
            "s".to_string(),
            "s0".to_string(),
            "truncated".to_string(),
        ];
        for j in 1..=self.s {
            header.push(format!("beta_{j}"));
        }
        push_mat_header(&mut header, "sigma", k, k);
        push_mat_header(&mut header, "psi", k, k);

        let mut row = vec![
            self.m.to_string(),
            self.n_total.to_string(),
            k.to_string(),
            self.s.to_string(),
            self.s0.to_string(),
            self.truncated.to_string(),
        ];
        row.extend(self.beta.iter().map(|&b| fmt_f(b)));
        push_mat_values(&mut row, self.sigma_hat.as_matrix());
        push_mat_values(&mut row, self.psi_hat.as_matrix());
        csv_table(header, vec![row])
    }
}

/// Per-area predictions with their MSEM decomposition.
#[derive(Debug, Serialize)]
pub struct PredictionReport {
    pub truncated: bool,
    pub areas: Vec<PredictionRow>,
}

#[derive(Debug, Serialize)]
pub struct PredictionRow {
    pub id: String,
    pub n: usize,
    pub theta: Vec<f64>,
    /// sqrt of the msem diagonal.
    pub smse: Vec<f64>,
    pub msem: SymMat,
    pub g1: SymMat,
    pub g2: SymMat,
    pub g3: SymMat,
    pub msem_indefinite: bool,
}

impl PredictionReport {
    pub fn new(data: &Dataset, fit: &FitResult, preds: &[AreaPrediction]) -> Self {
        let sizes = data.sizes();
        PredictionReport {
            truncated: fit.components.truncated,
            areas: preds
                .iter()
                .map(|p| {
                    let parts = p.uncertainty.as_ref().expect("predictions carry msem");
                    let smse = (0..p.theta_hat.len())
                        .map(|t| parts.msem.as_matrix()[(t, t)].max(0.0).sqrt())
                        .collect();
                    PredictionRow {
                        id: p.area_id.clone(),
                        n: sizes[p.area_index],
                        theta: p.theta_hat.iter().copied().collect(),
                        smse,
                        msem: parts.msem.clone(),
                        g1: parts.g1.clone(),
                        g2: parts.g2.clone(),
                        g3: parts.g3.clone(),
                        msem_indefinite: parts.msem_indefinite,
                    }
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let k = self.areas.first().map_or(0, |a| a.theta.len());
        let mut header = vec!["area".to_string(), "n".to_string()];
        for t in 1..=k {
            header.push(format!("theta_{t}"));
        }
        for t in 1..=k {
            header.push(format!("smse_{t}"));
        }
        push_mat_header(&mut header, "msem", k, k);
        header.push("truncated".to_string());

        let rows = self
            .areas
            .iter()
            .map(|a| {
                let mut row = vec![a.id.clone(), a.n.to_string()];
                row.extend(a.theta.iter().map(|&v| fmt_f(v)));
                row.extend(a.smse.iter().map(|&v| fmt_f(v)));
                push_mat_values(&mut row, a.msem.as_matrix());
                row.push(self.truncated.to_string());
                row
            })
            .collect();
        csv_table(header, rows)
    }
}

/// Per-area intervals for one contrast.
#[derive(Debug, Serialize)]
pub struct IntervalReport {
    pub ell: Vec<f64>,
    pub alpha: f64,
    pub areas: Vec<IntervalRow>,
}

#[derive(Debug, Serialize)]
pub struct IntervalRow {
    pub id: String,
    pub n: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub z_star: f64,
    pub v_hat: f64,
    pub msem: f64,
    pub naive_lower: f64,
    pub naive_upper: f64,
    pub z: f64,
}

impl IntervalRow {
    pub fn new(id: &str, n: usize, estimate: f64, pair: &IntervalPair) -> Self {
        IntervalRow {
            id: id.to_string(),
            n,
            estimate,
            lower: pair.corrected.lower,
            upper: pair.corrected.upper,
            z_star: pair.corrected.z_star,
            v_hat: pair.corrected.v_hat,
            msem: pair.corrected.msem_scalar,
            naive_lower: pair.naive.lower,
            naive_upper: pair.naive.upper,
            z: pair.naive.z_star,
        }
    }
}

impl IntervalReport {
    pub fn to_csv(&self) -> String {
        let header = [
            "area",
            "n",
            "estimate",
            "lower",
            "upper",
            "z_star",
            "v_hat",
            "msem",
            "naive_lower",
            "naive_upper",
            "z",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rows = self
            .areas
            .iter()
            .map(|a| {
                vec![
                    a.id.clone(),
                    a.n.to_string(),
                    fmt_f(a.estimate),
                    fmt_f(a.lower),
                    fmt_f(a.upper),
                    fmt_f(a.z_star),
                    fmt_f(a.v_hat),
                    fmt_f(a.msem),
                    fmt_f(a.naive_lower),
                    fmt_f(a.naive_upper),
                    fmt_f(a.z),
                ]
            })
            .collect();
        csv_table(header, rows)
    }
}

/// One CSV row per size group of a simulation study.
pub fn sim_csv(metrics: &mner::sim::SimMetrics) -> String {
    let k = metrics.config.k;
    let mut header = vec!["group".to_string(), "n".to_string(), "areas".to_string()];
    push_mat_header(&mut header, "rb", k, k);
    push_mat_header(&mut header, "rb_naive", k, k);
    for name in [
        "cp_e1",
        "al_e1",
        "cp_e1_naive",
        "al_e1_naive",
        "cp_ones",
        "al_ones",
        "cp_ones_naive",
        "al_ones_naive",
    ] {
        header.push(name.to_string());
    }
    header.push("prial_direct".to_string());
    header.push("prial_univariate".to_string());

    let rows = metrics
        .groups
        .iter()
        .enumerate()
        .map(|(g, gm)| {
            let mut row = vec![
                format!("G{}", g + 1),
                gm.n_a.to_string(),
                gm.areas.to_string(),
            ];
            push_mat_values(&mut row, gm.rb_corrected.as_matrix());
            push_mat_values(&mut row, gm.rb_naive.as_matrix());
            for cell in [
                gm.e1_corrected,
                gm.e1_naive,
                gm.ones_corrected,
                gm.ones_naive,
            ] {
                row.push(fmt_f(cell.cp));
                row.push(fmt_f(cell.al));
            }
            row.push(fmt_f(gm.prial_vs_direct));
            row.push(fmt_f(gm.prial_vs_univariate));
            row
        })
        .collect();
    csv_table(header, rows)
}

/// Writes `{stem}.csv` and `{stem}.json` under `out`, or prints the selected
/// format to stdout when no output directory was resolved.
pub fn emit(
    out: Option<&Path>,
    stem: &str,
    csv: &str,
    json: &str,
    format: Format,
) -> Result<(), CliError> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let csv_path = dir.join(format!("{stem}.csv"));
            let json_path = dir.join(format!("{stem}.json"));
            std::fs::write(&csv_path, csv)?;
            std::fs::write(&json_path, json)?;
            eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
        }
        None => match format {
            Format::Csv => print!("{csv}"),
            Format::Json => println!("{json}"),
        },
    }
    Ok(())
}
