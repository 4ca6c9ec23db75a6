//! Moment estimation of the covariance components (Sigma, Psi).
//!
//! Sigma is estimated exactly unbiasedly from within-area-centered residuals;
//! Psi starts from the consistent moment estimator psi0, subtracts its exact
//! finite-sample expectation gap at plug-ins, and is truncated to PSD.
//!
//! The bias term is the exact E[psi0] - Psi under the model at (Psi, Sigma):
//!   Bias = N^{-1} sum_ij R_ij Cov(b_ols) R_ij'
//!        - N^{-1} sum_ij [ K_ij (X'X)^{-1} R_ij' + transpose ],
//! with K_ij = n_i Psi Rbar_i + Sigma R_ij and
//! Cov(b_ols) = (X'X)^{-1} X'DX (X'X)^{-1},
//! X'DX = sum_i [ n_i^2 Rbar_i' Psi Rbar_i + sum_j R_ij' Sigma R_ij ].
//! K_ij is the cross moment E[(v_i + e_ij)(b_ols - b)'] X'X; the whole
//! expression is validated against a Monte Carlo oracle in the acceptance
//! suite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{area_means, CovComponents, Dataset, SymMat};

/// Relative eigenvalue threshold for the rank of the centered regressor stack.
const RANK_TOL: f64 = 1e-10;

/// Geometry and plug-in parameters for the exact bias of psi0.
#[derive(Debug, Clone)]
pub struct BiasInputs<'a> {
    pub psi: &'a SymMat,
    pub sigma: &'a SymMat,
    pub data: &'a Dataset,
    /// Precomputed (X'X)^{-1}.
    pub xtx_inv: &'a SymMat,
}

/// Exact unbiased Sigma-hat and the rank s0 of the centered regressor stack.
///
/// Sigma-hat = (N - m - s0)^{-1} sum_ij r_ij r_ij' with
/// r_ij = (y_ij - ybar_i) - (R_ij - Rbar_i) b_tilde, where b_tilde is the
/// minimum-norm least-squares solution on the centered data. Columns
/// annihilated by centering (e.g. intercepts) contribute nothing to s0.
pub fn estimate_sigma(data: &Dataset) -> Result<(SymMat, usize)> {
    let s = data.s();
    let n_total = data.n_total();
    let m = data.m();

    let mut gram = DMatrix::<f64>::zeros(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    let mut raw_energy = 0.0;
    let means: Vec<_> = data.areas().iter().map(area_means).collect();
    for (area, (ybar, rbar)) in data.areas().iter().zip(&means) {
        for j in 0..area.n_units() {
            let rt = area.regressor(j) - rbar;
            let yt = area.response(j) - ybar;
            gram += rt.tr_mul(&rt);
            rhs += rt.tr_mul(&yt);
            raw_energy += area.regressor(j).norm_squared();
        }
    }

    // The rank scale is the uncentered regressor energy, which dominates the
    // centered gram; a scale taken from the centered gram itself would count
    // centering round-off as rank when centering annihilates every column.
    let eig = SymMat::symmetrize(gram).into_matrix().symmetric_eigen();
    let tol = raw_energy.max(f64::MIN_POSITIVE) * RANK_TOL;
    let s0 = eig.eigenvalues.iter().filter(|&&l| l.abs() > tol).count();
    let pinv_diag =
        DMatrix::from_diagonal(
            &eig.eigenvalues
                .map(|l| if l.abs() > tol { 1.0 / l } else { 0.0 }),
        );
    let beta_tilde = &eig.eigenvectors * pinv_diag * eig.eigenvectors.transpose() * rhs;

    if n_total < m + s0 + 1 {
        return Err(Error::InsufficientDegreesOfFreedom(format!(
            "N - m - s0 = {} - {} - {} < 1",
            n_total, m, s0
        )));
    }

    let k = data.k();
    let mut acc = DMatrix::<f64>::zeros(k, k);
    for (area, (ybar, rbar)) in data.areas().iter().zip(&means) {
        for j in 0..area.n_units() {
            let rt = area.regressor(j) - rbar;
            let r = (area.response(j) - ybar) - rt * &beta_tilde;
            acc += &r * r.transpose();
        }
    }
    let dof = (n_total - m - s0) as f64;
    Ok((SymMat::symmetrize(acc / dof), s0))
}

/// Consistent moment estimator psi0 = N^{-1} sum_ij e_ij e_ij' - Sigma-hat,
/// with e_ij the OLS residuals. May be indefinite.
pub fn estimate_psi0(data: &Dataset, sigma_hat: &SymMat) -> Result<SymMat> {
    let beta_ols = ols_beta(data)?;
    let k = data.k();
    let mut acc = DMatrix::<f64>::zeros(k, k);
    for area in data.areas() {
        for j in 0..area.n_units() {
            let e = area.response(j) - area.regressor(j) * &beta_ols;
            acc += &e * e.transpose();
        }
    }
    acc /= data.n_total() as f64;
    Ok(SymMat::symmetrize(acc - sigma_hat.as_matrix()))
}

/// OLS coefficients (X'X)^{-1} X'y.
pub fn ols_beta(data: &Dataset) -> Result<DVector<f64>> {
    let xtx_inv = xtx_inverse(data)?;
    let mut rhs = DVector::<f64>::zeros(data.s());
    for area in data.areas() {
        for j in 0..area.n_units() {
            rhs += area.regressor(j).tr_mul(area.response(j));
        }
    }
    Ok(xtx_inv.as_matrix() * rhs)
}

/// (X'X)^{-1}, with singularity reported as a rank-deficient design.
pub fn xtx_inverse(data: &Dataset) -> Result<SymMat> {
    data.gram().inverse("X'X").map_err(|e| match e {
        Error::SingularCovariance { rcond, .. } => {
            Error::RankDeficientDesign(format!("X'X is numerically singular (rcond {rcond:.2e})"))
        }
        other => other,
    })
}

/// Exact expectation gap E[psi0] - Psi at the given (Psi, Sigma); O(1/m) in norm.
pub fn bias_psi0(inputs: &BiasInputs) -> Result<SymMat> {
    let data = inputs.data;
    let (k, s) = (data.k(), data.s());
    let psi = inputs.psi.as_matrix();
    let sigma = inputs.sigma.as_matrix();
    let xtx_inv = inputs.xtx_inv.as_matrix();

    let mut xdx = DMatrix::<f64>::zeros(s, s);
    for area in data.areas() {
        let n = area.n_units() as f64;
        let (_, rbar) = area_means(area);
        xdx += rbar.tr_mul(psi) * &rbar * (n * n);
        for j in 0..area.n_units() {
            let r = area.regressor(j);
            xdx += r.tr_mul(sigma) * r;
        }
    }
    let cov_ols = xtx_inv * xdx * xtx_inv;

    let mut direct = DMatrix::<f64>::zeros(k, k);
    let mut cross = DMatrix::<f64>::zeros(k, k);
    for area in data.areas() {
        let n = area.n_units() as f64;
        let (_, rbar) = area_means(area);
        cross += psi * &rbar * xtx_inv * rbar.transpose() * (n * n);
        for j in 0..area.n_units() {
            let r = area.regressor(j);
            direct += r * &cov_ols * r.transpose();
            cross += sigma * r * xtx_inv * r.transpose();
        }
    }

    let n_total = data.n_total() as f64;
    let bias = (direct - &cross - cross.transpose()) / n_total;
    Ok(SymMat::symmetrize(bias))
}

/// Eigenvalue truncation of psi1 to PSD. Negative eigenvalues within round-off
/// of zero (|l| <= 1e-12 * spectral norm) are clipped without raising the flag.
pub fn truncate_psd(psi1: &SymMat) -> (SymMat, bool, Vec<f64>) {
    let (vals, vecs) = psi1.eigen();
    let spectral = vals.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let truncated = vals.iter().any(|&l| l < -1e-12 * spectral);
    let clipped = DMatrix::from_diagonal(&vals.map(|l| l.max(0.0)));
    let psi_hat = SymMat::symmetrize(&vecs * clipped * vecs.transpose());
    let mut eigenvalues: Vec<f64> = vals.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (psi_hat, truncated, eigenvalues)
}

/// Full Psi stage: psi0, plug-in bias correction, PSD truncation.
pub fn estimate_psi(data: &Dataset, sigma_hat: &SymMat, s0: usize) -> Result<CovComponents> {
    let psi0 = estimate_psi0(data, sigma_hat)?;
    let xtx_inv = xtx_inverse(data)?;
    let bias = bias_psi0(&BiasInputs {
        psi: &psi0,
        sigma: sigma_hat,
        data,
        xtx_inv: &xtx_inv,
    })?;
    let psi1 = &psi0 - &bias;
    let (psi_hat, truncated, eigenvalues) = truncate_psd(&psi1);
    Ok(CovComponents {
        sigma_hat: sigma_hat.clone(),
        psi0,
        psi1,
        psi_hat,
        s0,
        truncated,
        eigenvalues,
    })
}

/// estimate_sigma followed by estimate_psi.
pub fn estimate_components(data: &Dataset) -> Result<CovComponents> {
    let (sigma_hat, s0) = estimate_sigma(data)?;
    estimate_psi(data, &sigma_hat, s0)
}
