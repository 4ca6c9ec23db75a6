//! Domain types and the block-structured covariance algebra.
//!
//! The model is y_ij = R_ij b + v_i + e_ij with k-variate responses, area
//! effects v_i ~ (0, Psi) and unit errors e_ij ~ (0, Sigma). Regressor blocks
//! are stored as R_ij (k x s), so the mean is R_ij b with no transposes.
//!
//! The marginal covariance of a stacked area block is
//! D_i = J_{n_i} (x) Psi + I_{n_i} (x) Sigma, and its inverse factors as
//! D_i^{-1} = I (x) Sigma^{-1} - J (x) C_i with C_i = Sigma^{-1} Psi (Sigma + n_i Psi)^{-1}.
//! All GLS products are computed from that factored form; the full n_i k x n_i k
//! matrix is only ever materialized by the dense test oracle.

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeSeq;

use crate::error::{Error, Result};

/// Reciprocal-condition threshold below which a matrix inversion is refused.
pub const RCOND_MIN: f64 = 1e-12;

/// Relative asymmetry above which `SymMat::new` rejects its input.
pub const SYM_TOL: f64 = 1e-8;

/// A k x k symmetric matrix; symmetry is enforced on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    m: DMatrix<f64>,
}

impl SymMat {
    /// Symmetrizes `m` as (A + A')/2; rejects relative asymmetry above `SYM_TOL`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Shape(format!(
                "SymMat requires a square nonempty matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
        let mut asym = 0.0_f64;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if scale > 0.0 && asym > SYM_TOL * scale {
            return Err(Error::Shape(format!(
                "matrix is asymmetric: max |a_ij - a_ji| = {:.3e} at scale {:.3e}",
                asym, scale
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes without an asymmetry check; for internally computed quantities
    /// whose asymmetry is known round-off.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let s = (&m + m.transpose()) * 0.5;
        SymMat { m: s }
    }

    pub fn zeros(k: usize) -> Self {
        SymMat {
            m: DMatrix::zeros(k, k),
        }
    }

    pub fn identity(k: usize) -> Self {
        SymMat {
            m: DMatrix::identity(k, k),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        SymMat {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn scaled(&self, c: f64) -> SymMat {
        SymMat { m: &self.m * c }
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// l' A l.
    pub fn quad_form(&self, l: &DVector<f64>) -> f64 {
        (&self.m * l).dot(l)
    }

    /// Eigenvalues and eigenvectors (columns), unordered.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let e = self.m.clone().symmetric_eigen();
        (e.eigenvalues, e.eigenvectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let (vals, _) = self.eigen();
        vals.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// PSD within round-off: min eigenvalue >= -1e-12 * spectral norm.
    pub fn is_psd(&self) -> bool {
        let (vals, _) = self.eigen();
        let spectral = vals.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        let min = vals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        min >= -1e-12 * spectral.max(1e-300)
    }

    /// Inverse via symmetric eigendecomposition; reciprocal condition below
    /// `RCOND_MIN` is refused so near-singular plug-ins fail loudly.
    pub fn inverse(&self, name: &str) -> Result<SymMat> {
        let (vals, vecs) = self.eigen();
        let max = vals.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        let min = vals.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
        let rcond = if max > 0.0 { min / max } else { 0.0 };
        if rcond < RCOND_MIN {
            return Err(Error::SingularCovariance {
                name: name.to_string(),
                rcond,
            });
        }
        let inv_diag = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v));
        Ok(SymMat::symmetrize(&vecs * inv_diag * vecs.transpose()))
    }
}

impl std::ops::Add<&SymMat> for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat {
            m: &self.m + &rhs.m,
        }
    }
}

impl std::ops::Sub<&SymMat> for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat {
            m: &self.m - &rhs.m,
        }
    }
}

impl serde::Serialize for SymMat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let k = self.dim();
        let mut seq = s.serialize_seq(Some(k))?;
        for i in 0..k {
            let row: Vec<f64> = (0..k).map(|j| self.m[(i, j)]).collect();
            seq.serialize_element(&row)?;
        }
        seq.end()
    }
}

/// One area's observations: n_i response k-vectors and regressor blocks R_ij (k x s).
#[derive(Debug, Clone)]
pub struct UnitBlock {
    responses: Vec<DVector<f64>>,
    regressors: Vec<DMatrix<f64>>,
}

impl UnitBlock {
    pub fn new(responses: Vec<DVector<f64>>, regressors: Vec<DMatrix<f64>>) -> Result<Self> {
        if responses.is_empty() || responses.len() != regressors.len() {
            return Err(Error::Shape(format!(
                "unit block needs n >= 1 paired rows, got {} responses / {} regressors",
                responses.len(),
                regressors.len()
            )));
        }
        let k = responses[0].len();
        let s = regressors[0].ncols();
        if k == 0 {
            return Err(Error::Shape("response dimension k must be >= 1".into()));
        }
        for (j, (y, r)) in responses.iter().zip(&regressors).enumerate() {
            if y.len() != k || r.nrows() != k || r.ncols() != s {
                return Err(Error::Shape(format!(
                    "unit {j}: expected response len {k} and regressor {k}x{s}, got {} and {}x{}",
                    y.len(),
                    r.nrows(),
                    r.ncols()
                )));
            }
        }
        Ok(UnitBlock {
            responses,
            regressors,
        })
    }

    pub fn n_units(&self) -> usize {
        self.responses.len()
    }

    pub fn k(&self) -> usize {
        self.responses[0].len()
    }

    pub fn s(&self) -> usize {
        self.regressors[0].ncols()
    }

    pub fn response(&self, j: usize) -> &DVector<f64> {
        &self.responses[j]
    }

    pub fn regressor(&self, j: usize) -> &DMatrix<f64> {
        &self.regressors[j]
    }
}

/// Sample means of one block: (ybar_i, Rbar_i) with Rbar_i = n_i^{-1} sum_j R_ij.
pub fn area_means(block: &UnitBlock) -> (DVector<f64>, DMatrix<f64>) {
    let n = block.n_units() as f64;
    let mut ybar = block.response(0).clone();
    let mut rbar = block.regressor(0).clone();
    for j in 1..block.n_units() {
        ybar += block.response(j);
        rbar += block.regressor(j);
    }
    (ybar / n, rbar / n)
}

/// The full sample: m >= 2 area blocks with shared dimensions k and s.
#[derive(Debug, Clone)]
pub struct Dataset {
    areas: Vec<UnitBlock>,
    area_ids: Vec<String>,
    k: usize,
    s: usize,
}

impl Dataset {
    /// Validates m >= 2, consistent (k, s) across areas, and unique ids.
    /// Full column rank of the stacked regressor matrix is checked at fit time.
    pub fn new(areas: Vec<UnitBlock>, area_ids: Vec<String>) -> Result<Self> {
        if areas.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 areas, got {}",
                areas.len()
            )));
        }
        if area_ids.len() != areas.len() {
            return Err(Error::Shape(format!(
                "{} areas but {} ids",
                areas.len(),
                area_ids.len()
            )));
        }
        let k = areas[0].k();
        let s = areas[0].s();
        for (i, a) in areas.iter().enumerate() {
            if a.k() != k || a.s() != s {
                return Err(Error::Shape(format!(
                    "area {i}: dimensions ({}, {}) differ from ({k}, {s})",
                    a.k(),
                    a.s()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &area_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Shape(format!("duplicate area id {id:?}")));
            }
        }
        Ok(Dataset {
            areas,
            area_ids,
            k,
            s,
        })
    }

    pub fn m(&self) -> usize {
        self.areas.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn n_total(&self) -> usize {
        self.areas.iter().map(|a| a.n_units()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.areas.iter().map(|a| a.n_units()).collect()
    }

    pub fn area(&self, i: usize) -> &UnitBlock {
        &self.areas[i]
    }

    pub fn areas(&self) -> &[UnitBlock] {
        &self.areas
    }

    pub fn area_id(&self, i: usize) -> &str {
        &self.area_ids[i]
    }

    /// X'X = sum_ij R_ij' R_ij (s x s).
    pub fn gram(&self) -> SymMat {
        let mut g = DMatrix::zeros(self.s, self.s);
        for a in &self.areas {
            for j in 0..a.n_units() {
                let r = a.regressor(j);
                g += r.tr_mul(r);
            }
        }
        SymMat::symmetrize(g)
    }
}

/// Factored inverse of D_i = J (x) Psi + I (x) Sigma:
/// D_i^{-1} = I (x) sigma_inv - J (x) c.
#[derive(Debug, Clone)]
pub struct MarginalInverse {
    pub sigma_inv: SymMat,
    pub c: SymMat,
}

impl MarginalInverse {
    /// Materializes the n_i k x n_i k inverse; test support only.
    pub fn dense(&self, n_i: usize) -> DMatrix<f64> {
        let eye = DMatrix::<f64>::identity(n_i, n_i);
        let ones = DMatrix::<f64>::from_element(n_i, n_i, 1.0);
        eye.kronecker(self.sigma_inv.as_matrix()) - ones.kronecker(self.c.as_matrix())
    }
}

/// Structured inverse of the area covariance D_i. C_i = Sigma^{-1} Psi (Sigma + n_i Psi)^{-1}
/// is symmetric in exact arithmetic; round-off is symmetrized away.
pub fn marginal_block_inverse(psi: &SymMat, sigma: &SymMat, n_i: usize) -> Result<MarginalInverse> {
    let sigma_inv = sigma.inverse("Sigma")?;
    let shifted = SymMat::symmetrize(sigma.as_matrix() + psi.as_matrix() * n_i as f64);
    let shifted_inv = shifted.inverse("Sigma + n_i Psi")?;
    let c = SymMat::symmetrize(sigma_inv.as_matrix() * psi.as_matrix() * shifted_inv.as_matrix());
    Ok(MarginalInverse { sigma_inv, c })
}

/// Covariance-component estimates with truncation diagnostics.
#[derive(Debug, Clone)]
pub struct CovComponents {
    pub sigma_hat: SymMat,
    /// Moment estimator before bias correction; may be indefinite.
    pub psi0: SymMat,
    /// psi0 minus the plug-in bias; may be indefinite.
    pub psi1: SymMat,
    /// Eigenvalue-truncated psi1; PSD.
    pub psi_hat: SymMat,
    /// Rank of the within-area-centered regressor stack.
    pub s0: usize,
    /// True when psi1 had an eigenvalue below -1e-12 * spectral norm.
    pub truncated: bool,
    /// Eigenvalues of psi1, descending.
    pub eigenvalues: Vec<f64>,
}

impl CovComponents {
    /// Wraps externally known (psi, sigma), e.g. for GLS at true parameters.
    pub fn from_known(psi: SymMat, sigma: SymMat) -> Self {
        let (vals, _) = psi.eigen();
        let mut eigenvalues: Vec<f64> = vals.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
        CovComponents {
            sigma_hat: sigma,
            psi0: psi.clone(),
            psi1: psi.clone(),
            psi_hat: psi,
            s0: 0,
            truncated: false,
            eigenvalues,
        }
    }
}

/// Per-area quantities cached by the GLS fit.
#[derive(Debug, Clone)]
pub struct AreaCache {
    pub n_a: usize,
    /// Lambda_a = Psi + n_a^{-1} Sigma.
    pub lambda: SymMat,
    pub lambda_inv: SymMat,
    /// B_a = Psi Lambda_a^{-1}; not symmetric in general.
    pub shrinkage: DMatrix<f64>,
    pub ybar: DVector<f64>,
    /// Rbar_a = Xbar_a' (k x s).
    pub rbar: DMatrix<f64>,
}

/// GLS coefficients with their covariance and the components they were fit at.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// (X' D^{-1} X)^{-1}.
    pub beta_cov: SymMat,
    pub components: CovComponents,
    pub per_area: Vec<AreaCache>,
}

/// The c_a matrix defining the prediction target theta_a = c_a b + v_a.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    /// c_a = Rbar_a, the within-area mean regressor block.
    SampleMean,
    /// User-supplied k x s matrix.
    Custom(DMatrix<f64>),
}

impl TargetSpec {
    pub fn resolve(&self, rbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            TargetSpec::SampleMean => Ok(rbar.clone()),
            TargetSpec::Custom(c) => {
                if c.shape() != rbar.shape() {
                    return Err(Error::Shape(format!(
                        "target c_a is {}x{}, expected {}x{}",
                        c.nrows(),
                        c.ncols(),
                        rbar.nrows(),
                        rbar.ncols()
                    )));
                }
                Ok(c.clone())
            }
        }
    }
}

/// Second-order MSEM decomposition for one area.
#[derive(Debug, Clone)]
pub struct MsemParts {
    pub g1: SymMat,
    pub g2: SymMat,
    pub g3: SymMat,
    /// g1 + g2 + 2 g3, the second-order unbiased estimator at plug-ins.
    pub msem: SymMat,
    /// True when plug-in noise drove an msem eigenvalue below zero.
    pub msem_indefinite: bool,
}

impl MsemParts {
    /// The naive estimator g1 + g2 + g3, kept for comparison runs.
    pub fn naive(&self) -> SymMat {
        &(&self.g1 + &self.g2) + &self.g3
    }
}

/// EBLUP output for one area; `uncertainty` is filled by the msem stage.
#[derive(Debug, Clone)]
pub struct AreaPrediction {
    pub area_id: String,
    pub area_index: usize,
    pub theta_hat: DVector<f64>,
    pub target_spec: TargetSpec,
    pub uncertainty: Option<MsemParts>,
}
