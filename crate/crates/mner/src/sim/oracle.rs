//! Brute-force oracles: a dense GLS solve that materializes the full
//! covariance, and a scalar (k = 1) pipeline written with plain `Vec`
//! arithmetic and its own Gaussian elimination, sharing no matrix code with
//! the main implementation. Both exist to cross-check the structured paths;
//! the scalar pipeline also provides the univariate competitor inside
//! replication studies. The only shared code is the scalar normal quantile,
//! which is pinned elsewhere against frozen high-precision values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dataset, SymMat};
use crate::stats::normal_quantile;

/// Refuse dense solves beyond this stacked dimension.
pub const DENSE_ORACLE_LIMIT: usize = 600;

/// GLS by materializing the full Nk x Nk covariance D = blockdiag(D_i),
/// D_i = J (x) Psi + I (x) Sigma, and solving directly.
pub fn dense_gls_oracle(
    data: &Dataset,
    psi: &SymMat,
    sigma: &SymMat,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = data.k();
    let s = data.s();
    let nk = data.n_total() * k;
    if nk > DENSE_ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            nk,
            limit: DENSE_ORACLE_LIMIT,
        });
    }

    let mut x = DMatrix::<f64>::zeros(nk, s);
    let mut y = DVector::<f64>::zeros(nk);
    let mut d = DMatrix::<f64>::zeros(nk, nk);
    let mut row = 0;
    for i in 0..data.m() {
        let block = data.area(i);
        let n_i = block.n_units();
        let base = row;
        for j in 0..n_i {
            x.view_mut((row, 0), (k, s)).copy_from(block.regressor(j));
            y.rows_mut(row, k).copy_from(block.response(j));
            row += k;
        }
        for a in 0..n_i {
            for b in 0..n_i {
                let mut cell = d.view_mut((base + a * k, base + b * k), (k, k));
                cell += psi.as_matrix();
                if a == b {
                    cell += sigma.as_matrix();
                }
            }
        }
    }

    let d_inv = d.try_inverse().ok_or(Error::SingularCovariance {
        name: "dense D".into(),
        rcond: 0.0,
    })?;
    let xtdx = x.transpose() * &d_inv * &x;
    let beta_cov = xtdx
        .try_inverse()
        .ok_or_else(|| Error::RankDeficientDesign("dense X' D^{-1} X is singular".into()))?;
    let beta = &beta_cov * (x.transpose() * (&d_inv * &y));
    Ok((beta, beta_cov))
}

/// One area's scalar data: unit responses and their regressor rows.
#[derive(Debug, Clone)]
pub struct ScalarArea {
    pub y: Vec<f64>,
    /// One regressor row per unit, all of the same length.
    pub x: Vec<Vec<f64>>,
}

/// Extracts component `t` of a dataset as scalar areas, keeping the named
/// regressor columns of row `t` (for block designs, the columns that row
/// actually touches).
pub fn scalar_slice(data: &Dataset, component: usize, columns: &[usize]) -> Vec<ScalarArea> {
    data.areas()
        .iter()
        .map(|block| {
            let y = (0..block.n_units())
                .map(|j| block.response(j)[component])
                .collect();
            let x = (0..block.n_units())
                .map(|j| {
                    let r = block.regressor(j);
                    columns.iter().map(|&c| r[(component, c)]).collect()
                })
                .collect();
            ScalarArea { y, x }
        })
        .collect()
}

/// Scalar covariance-component estimates.
#[derive(Debug, Clone)]
pub struct ScalarComponents {
    pub sigma_hat: f64,
    pub s0: usize,
    pub psi0: f64,
    pub bias: f64,
    pub psi1: f64,
    pub psi_hat: f64,
    pub truncated: bool,
}

/// Scalar per-area prediction and uncertainty results.
#[derive(Debug, Clone)]
pub struct ScalarAreaResult {
    pub theta: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub msem: f64,
    pub naive: f64,
    pub v: f64,
    pub z_star: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_naive: f64,
    pub upper_naive: f64,
}

/// Scalar fit at given components, plus per-area results.
#[derive(Debug, Clone)]
pub struct ScalarFit {
    pub beta: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    pub areas: Vec<ScalarAreaResult>,
}

/// Scalar full pipeline: estimated components plus the fit at them.
#[derive(Debug, Clone)]
pub struct ScalarPipeline {
    pub components: ScalarComponents,
    pub fit: ScalarFit,
}

fn dims(areas: &[ScalarArea]) -> (usize, usize, usize) {
    let m = areas.len();
    let n_total = areas.iter().map(|a| a.y.len()).sum();
    let s = areas[0].x[0].len();
    (m, n_total, s)
}

fn means(area: &ScalarArea) -> (f64, Vec<f64>) {
    let n = area.y.len() as f64;
    let ybar = area.y.iter().sum::<f64>() / n;
    let s = area.x[0].len();
    let mut xbar = vec![0.0; s];
    for row in &area.x {
        for (acc, v) in xbar.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut xbar {
        *v /= n;
    }
    (ybar, xbar)
}

/// Gaussian elimination with partial pivoting; near-zero pivots (relative to
/// the largest initial diagonal scale) are skipped with their unknowns set to
/// 0, returning any solution of a consistent system plus the pivot count.
fn solve_pivoted(a: Vec<Vec<f64>>, b: Vec<f64>, rel_tol: f64) -> (Vec<f64>, usize) {
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    solve_with_tol(a, b, rel_tol * scale)
}

/// Same elimination with an externally anchored absolute pivot tolerance, for
/// systems whose own entries can be pure round-off (e.g. centered grams).
fn solve_with_tol(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, tol: f64) -> (Vec<f64>, usize) {
    let n = b.len();
    let mut pivot_cols = Vec::new();
    let mut used = vec![false; n];
    for col in 0..n {
        let mut best = usize::MAX;
        let mut best_val = tol;
        for (r, row) in a.iter().enumerate() {
            if !used[r] && row[col].abs() > best_val {
                best_val = row[col].abs();
                best = r;
            }
        }
        if best == usize::MAX {
            continue;
        }
        used[best] = true;
        pivot_cols.push((best, col));
        let pivot_row = a[best].clone();
        let pivot_b = b[best];
        let p = pivot_row[col];
        for r in 0..n {
            if r == best || a[r][col] == 0.0 {
                continue;
            }
            let f = a[r][col] / p;
            for c in 0..n {
                a[r][c] -= f * pivot_row[c];
            }
            b[r] -= f * pivot_b;
        }
    }
    let mut x = vec![0.0; n];
    for &(r, c) in &pivot_cols {
        x[c] = b[r] / a[r][c];
    }
    (x, pivot_cols.len())
}

fn solve_full_rank(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let (x, rank) = solve_pivoted(a, b, 1e-13);
    if rank < n {
        return Err(Error::RankDeficientDesign(format!(
            "scalar system rank {rank} < {n}"
        )));
    }
    Ok(x)
}

fn invert(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve_full_rank(a.to_vec(), e)?);
    }
    // cols[j] is the j-th column of the inverse.
    let mut inv = vec![vec![0.0; n]; n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            inv[i][j] = *v;
        }
    }
    Ok(inv)
}

fn quad(mat: &[Vec<f64>], u: &[f64], w: &[f64]) -> f64 {
    let mut total = 0.0;
    for (row, &ui) in mat.iter().zip(u) {
        let mut inner = 0.0;
        for (v, &wj) in row.iter().zip(w) {
            inner += v * wj;
        }
        total += ui * inner;
    }
    total
}

fn dot(u: &[f64], w: &[f64]) -> f64 {
    u.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Scalar covariance components: within-area regression for sigma, moment
/// estimator and closed-form bias correction for psi.
pub fn scalar_components(areas: &[ScalarArea]) -> Result<ScalarComponents> {
    let (m, n_total, s) = dims(areas);

    // sigma from within-area-centered least squares. The rank tolerance is
    // anchored at the uncentered regressor energy, matching the main
    // implementation, so fully annihilated columns never count as rank.
    let mut xtx_c = vec![vec![0.0; s]; s];
    let mut xty_c = vec![0.0; s];
    let mut raw_energy = 0.0;
    for area in areas {
        let (ybar, xbar) = means(area);
        for (row, &yv) in area.x.iter().zip(&area.y) {
            let xc: Vec<f64> = row.iter().zip(&xbar).map(|(a, b)| a - b).collect();
            let yc = yv - ybar;
            for i in 0..s {
                for j in 0..s {
                    xtx_c[i][j] += xc[i] * xc[j];
                }
                xty_c[i] += xc[i] * yc;
            }
            raw_energy += row.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let (beta_tilde, s0) = solve_with_tol(xtx_c, xty_c, 1e-10 * raw_energy.max(f64::MIN_POSITIVE));
    if n_total <= m + s0 {
        return Err(Error::InsufficientDegreesOfFreedom(format!(
            "scalar sigma needs N > m + s0, got N = {n_total}, m = {m}, s0 = {s0}"
        )));
    }
    let mut rss = 0.0;
    for area in areas {
        let (ybar, xbar) = means(area);
        for (row, &yv) in area.x.iter().zip(&area.y) {
            let xc: Vec<f64> = row.iter().zip(&xbar).map(|(a, b)| a - b).collect();
            let r = (yv - ybar) - dot(&xc, &beta_tilde);
            rss += r * r;
        }
    }
    let sigma_hat = rss / (n_total - m - s0) as f64;

    // psi0 from OLS residuals.
    let mut xtx = vec![vec![0.0; s]; s];
    let mut xty = vec![0.0; s];
    for area in areas {
        for (row, &yv) in area.x.iter().zip(&area.y) {
            for i in 0..s {
                for j in 0..s {
                    xtx[i][j] += row[i] * row[j];
                }
                xty[i] += row[i] * yv;
            }
        }
    }
    let beta_ols = solve_full_rank(xtx.clone(), xty)?;
    let mut ess = 0.0;
    for area in areas {
        for (row, &yv) in area.x.iter().zip(&area.y) {
            let e = yv - dot(row, &beta_ols);
            ess += e * e;
        }
    }
    let nf = n_total as f64;
    let psi0 = ess / nf - sigma_hat;

    // Closed-form bias of psi0, evaluated at (psi0, sigma_hat):
    //   N^{-1} sum x' Cov(b_ols) x - (2/N)[ psi sum n_i^2 xbar' G^{-1} xbar
    //                                       + sigma sum x' G^{-1} x ]
    // with Cov(b_ols) = G^{-1} (X' D X) G^{-1}.
    let g_inv = invert(&xtx)?;
    let mut xdx = vec![vec![0.0; s]; s];
    for area in areas {
        let n_i = area.y.len() as f64;
        let (_, xbar) = means(area);
        for i in 0..s {
            for j in 0..s {
                xdx[i][j] += psi0 * n_i * n_i * xbar[i] * xbar[j];
            }
        }
        for row in &area.x {
            for i in 0..s {
                for j in 0..s {
                    xdx[i][j] += sigma_hat * row[i] * row[j];
                }
            }
        }
    }
    let mut cov_ols = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in 0..s {
            let mut v = 0.0;
            for p in 0..s {
                for q in 0..s {
                    v += g_inv[i][p] * xdx[p][q] * g_inv[q][j];
                }
            }
            cov_ols[i][j] = v;
        }
    }
    let mut direct = 0.0;
    let mut cross = 0.0;
    for area in areas {
        let n_i = area.y.len() as f64;
        let (_, xbar) = means(area);
        cross += psi0 * n_i * n_i * quad(&g_inv, &xbar, &xbar);
        for row in &area.x {
            direct += quad(&cov_ols, row, row);
            cross += sigma_hat * quad(&g_inv, row, row);
        }
    }
    let bias = (direct - 2.0 * cross) / nf;
    let psi1 = psi0 - bias;
    let truncated = psi1 < -1e-12 * psi1.abs();
    let psi_hat = psi1.max(0.0);
    Ok(ScalarComponents {
        sigma_hat,
        s0,
        psi0,
        bias,
        psi1,
        psi_hat,
        truncated,
    })
}

/// Scalar GLS, shrinkage prediction, MSE terms, V, and intervals at known
/// (psi, sigma).
pub fn univariate_eblup_oracle(
    areas: &[ScalarArea],
    psi: f64,
    sigma: f64,
    alpha: f64,
) -> Result<ScalarFit> {
    let (m, n_total, s) = dims(areas);
    let nf = n_total as f64;
    let mf = m as f64;

    // GLS via the scalar factored inverse: D_i^{-1} = sigma^{-1} I - c_i J,
    // c_i = psi / (sigma (sigma + n_i psi)).
    let mut xtdx = vec![vec![0.0; s]; s];
    let mut xtdy = vec![0.0; s];
    for area in areas {
        let n_i = area.y.len() as f64;
        let c_i = psi / (sigma * (sigma + n_i * psi));
        let (ybar, xbar) = means(area);
        for (row, &yv) in area.x.iter().zip(&area.y) {
            for i in 0..s {
                for j in 0..s {
                    xtdx[i][j] += row[i] * row[j] / sigma;
                }
                xtdy[i] += row[i] * yv / sigma;
            }
        }
        for i in 0..s {
            for j in 0..s {
                xtdx[i][j] -= n_i * n_i * c_i * xbar[i] * xbar[j];
            }
            xtdy[i] -= n_i * n_i * c_i * xbar[i] * ybar;
        }
    }
    let beta = solve_full_rank(xtdx.clone(), xtdy)?;
    let beta_cov = invert(&xtdx)?;

    let z = normal_quantile(1.0 - alpha / 2.0);
    let sizes: Vec<f64> = areas.iter().map(|a| a.y.len() as f64).collect();
    let lam = |n: f64| psi + sigma / n;

    let mut results = Vec::with_capacity(m);
    for area in areas {
        let n_a = area.y.len() as f64;
        let lam_a = lam(n_a);
        let b_a = psi / lam_a;
        let (ybar, xbar) = means(area);
        let synth = dot(&xbar, &beta);
        let theta = synth + b_a * (ybar - synth);

        let g1 = psi * sigma / (n_a * lam_a);
        let g2 = (1.0 - b_a) * (1.0 - b_a) * quad(&beta_cov, &xbar, &xbar);

        // g3: both displayed terms in scalar form.
        let la = 1.0 / lam_a;
        let mut inner = 0.0;
        for &n_i in &sizes {
            let li = lam(n_i);
            inner += n_i * n_i * (li * la * li + la * li * li);
        }
        let t1 = sigma * la * inner * la * sigma / (n_a * n_a * nf * nf);
        let w = nf * psi + mf * sigma;
        let mid = sigma * la * sigma + la * sigma * sigma;
        let t2 = w * la * mid * la * w / (n_a * n_a * nf * nf * (nf - mf));
        let g3 = t1 + t2;

        // V: the four lines with ell = 1.
        let mut line1 = 0.0;
        for &n_i in &sizes {
            let li = lam(n_i);
            let a1 = sigma * la * li;
            let b1 = sigma * la * li * la * sigma;
            line1 += n_i * n_i * (a1 * a1 + b1 * li);
        }
        let v1 = line1 / (n_a.powi(4) * nf * nf);
        let d3 = sigma * la * sigma * la * sigma;
        let v2 = 2.0 * mf * mf * d3 * d3 / (n_a.powi(4) * nf * nf * (nf - mf));
        let e3 = psi * la * sigma * la * psi;
        let v3 = 2.0 * e3 * e3 / (n_a * n_a * (nf - mf));
        let f3 = sigma * la * sigma;
        let g4 = sigma * la * sigma * la * psi;
        let v4 = -2.0 * mf * (e3 * f3 + g4 * g4) / (n_a.powi(3) * nf * (nf - mf));
        let v = (v1 + v2 + v3 + v4).max(0.0);

        let msem = g1 + g2 + 2.0 * g3;
        let naive = g1 + g2 + g3;
        if msem <= 0.0 || naive <= 0.0 {
            return Err(Error::NonpositiveMse(msem.min(naive)));
        }
        let z_star = z + (z * z * z + z) * v / (8.0 * naive * naive);
        let half = msem.sqrt();
        results.push(ScalarAreaResult {
            theta,
            g1,
            g2,
            g3,
            msem,
            naive,
            v,
            z_star,
            lower: theta - z_star * half,
            upper: theta + z_star * half,
            lower_naive: theta - z * half,
            upper_naive: theta + z * half,
        });
    }
    Ok(ScalarFit {
        beta,
        beta_cov,
        areas: results,
    })
}

/// Scalar full pipeline: estimate components, then fit and predict at them.
pub fn univariate_pipeline(areas: &[ScalarArea], alpha: f64) -> Result<ScalarPipeline> {
    let components = scalar_components(areas)?;
    let fit = univariate_eblup_oracle(areas, components.psi_hat, components.sigma_hat, alpha)?;
    Ok(ScalarPipeline { components, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UnitBlock;
    use crate::varcomp;

    fn scalar_area(y: &[f64], x: &[&[f64]]) -> ScalarArea {
        ScalarArea {
            y: y.to_vec(),
            x: x.iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn tiny_dataset() -> Dataset {
        // m = 2, n = (1, 1), k = 1, single covariate (no intercept).
        let mk_area = |x: f64, y: f64| {
            UnitBlock::new(
                vec![DVector::from_row_slice(&[y])],
                vec![DMatrix::from_row_slice(1, 1, &[x])],
            )
            .unwrap()
        };
        Dataset::new(
            vec![mk_area(1.0, 2.0), mk_area(2.0, 3.0)],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn dense_oracle_hand_solvable_and_ols_limit() {
        // With one unit per area, D = (psi + sigma) I, so beta is the OLS
        // slope (1*2 + 2*3) / (1 + 4) = 8/5 and cov = (psi+sigma)/5.
        let data = tiny_dataset();
        let psi = SymMat::diagonal(&[0.7]);
        let sigma = SymMat::diagonal(&[0.3]);
        let (beta, cov) = dense_gls_oracle(&data, &psi, &sigma).unwrap();
        assert!((beta[0] - 1.6).abs() < 1e-14);
        assert!((cov[(0, 0)] - 1.0 / 5.0).abs() < 1e-14);

        let (beta, _) = dense_gls_oracle(&data, &SymMat::zeros(1), &SymMat::identity(1)).unwrap();
        let ols = varcomp::ols_beta(&data).unwrap();
        assert!((beta[0] - ols[0]).abs() < 1e-14);
    }

    #[test]
    fn dense_oracle_size_guard() {
        let units = 301;
        let mk_area = || {
            let responses = (0..units)
                .map(|j| DVector::from_row_slice(&[j as f64]))
                .collect();
            let regressors = (0..units)
                .map(|_| DMatrix::from_row_slice(1, 1, &[1.0]))
                .collect();
            UnitBlock::new(responses, regressors).unwrap()
        };
        let data = Dataset::new(vec![mk_area(), mk_area()], vec!["a".into(), "b".into()]).unwrap();
        match dense_gls_oracle(&data, &SymMat::identity(1), &SymMat::identity(1)) {
            Err(Error::OracleTooLarge { nk, limit }) => {
                assert_eq!(nk, 602);
                assert_eq!(limit, DENSE_ORACLE_LIMIT);
            }
            other => panic!("expected OracleTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn scalar_shrinkage_limits() {
        // psi = 0: prediction collapses to the synthetic value xbar' beta.
        let areas = vec![
            scalar_area(&[1.0, 2.0], &[&[1.0, 0.5], &[1.0, -0.5]]),
            scalar_area(&[0.0, 1.0, 2.0], &[&[1.0, 0.2], &[1.0, 0.4], &[1.0, 0.9]]),
            scalar_area(&[3.0], &[&[1.0, -0.8]]),
        ];
        let fit = univariate_eblup_oracle(&areas, 0.0, 1.0, 0.05).unwrap();
        for (result, area) in fit.areas.iter().zip(&areas) {
            let (_, xbar) = means(area);
            assert!((result.theta - dot(&xbar, &fit.beta)).abs() < 1e-13);
        }

        // sigma -> 0: prediction approaches ybar.
        let fit = univariate_eblup_oracle(&areas, 1.0, 1e-12, 0.05).unwrap();
        for (result, area) in fit.areas.iter().zip(&areas) {
            let (ybar, _) = means(area);
            assert!((result.theta - ybar).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_components_match_hand_values() {
        // Intercept-only, two areas of two units: sigma from within-area
        // spread, psi0 from OLS residual second moment minus sigma.
        let areas = vec![
            scalar_area(&[0.0, 2.0], &[&[1.0], &[1.0]]),
            scalar_area(&[1.0, 3.0], &[&[1.0], &[1.0]]),
        ];
        let comp = scalar_components(&areas).unwrap();
        // Centered residuals are (-1, 1, -1, 1); dof = 4 - 2 - 0 = 2.
        assert_eq!(comp.s0, 0);
        assert!((comp.sigma_hat - 2.0).abs() < 1e-14);
        // OLS mean 1.5, residuals (-1.5, 0.5, -0.5, 1.5), ess = 5
        // psi0 = 5/4 - 2 = -0.75.
        assert!((comp.psi0 + 0.75).abs() < 1e-14);
    }

    #[test]
    fn pivoted_solver_handles_rank_deficiency() {
        // Duplicate column: rank 1; residuals of the solution must still fit.
        let a = vec![vec![2.0, 2.0], vec![2.0, 2.0]];
        let b = vec![4.0, 4.0];
        let (x, rank) = solve_pivoted(a, b, 1e-10);
        assert_eq!(rank, 1);
        assert!((2.0 * x[0] + 2.0 * x[1] - 4.0).abs() < 1e-12);
    }
}
