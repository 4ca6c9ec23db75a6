//! GLS coefficient estimation and Bayes/BLUP/EBLUP prediction.
//!
//! The fitted coefficients are beta(Psi, Sigma) = (X' D^{-1} X)^{-1} X' D^{-1} y
//! with D = blockdiag(D_1, ..., D_m). All products use the factored form of
//! D_i^{-1}, so nothing larger than s x s or k x s is ever materialized:
//!
//!   X' D^{-1} X = sum_i [ sum_j R_ij' Sigma^{-1} R_ij - n_i^2 Rbar_i' C_i Rbar_i ]
//!
//! and likewise for X' D^{-1} y with y_ij, ybar_i in place of R_ij, Rbar_i.
//!
//! Prediction of theta_a = c_a beta + v_a composes the synthetic part c_a beta
//! with the shrinkage innovation B_a (ybar_a - Rbar_a beta); the EBLUP is the
//! same composition at estimated components.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    area_means, marginal_block_inverse, AreaCache, AreaPrediction, CovComponents, Dataset,
    FitResult, SymMat, TargetSpec, UnitBlock,
};
use crate::varcomp;

/// Lambda_a = Psi + n_a^{-1} Sigma, the covariance of ybar_a - Rbar_a beta.
pub fn lambda_matrix(psi: &SymMat, sigma: &SymMat, n_a: usize) -> SymMat {
    SymMat::symmetrize(psi.as_matrix() + sigma.as_matrix() / n_a as f64)
}

/// B_a = Psi Lambda_a^{-1}, the weight the Bayes predictor puts on the data.
pub fn shrinkage_matrix(psi: &SymMat, sigma: &SymMat, n_a: usize) -> Result<DMatrix<f64>> {
    let lam_inv = lambda_matrix(psi, sigma, n_a).inverse("Lambda_a")?;
    Ok(psi.as_matrix() * lam_inv.as_matrix())
}

/// theta = c_a beta + B_a (ybar - Rbar beta).
fn compose(
    beta: &DVector<f64>,
    c_a: &DMatrix<f64>,
    b_a: &DMatrix<f64>,
    ybar: &DVector<f64>,
    rbar: &DMatrix<f64>,
) -> DVector<f64> {
    c_a * beta + b_a * (ybar - rbar * beta)
}

/// Bayes predictor of theta_a = c_a beta + v_a at known (beta, Psi, Sigma).
pub fn bayes_predict(
    beta: &DVector<f64>,
    psi: &SymMat,
    sigma: &SymMat,
    area: &UnitBlock,
    c_a: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let b_a = shrinkage_matrix(psi, sigma, area.n_units())?;
    let (ybar, rbar) = area_means(area);
    Ok(compose(beta, c_a, &b_a, &ybar, &rbar))
}

struct SizeCache {
    sigma_inv: SymMat,
    c: SymMat,
    lambda: SymMat,
    lambda_inv: SymMat,
    shrinkage: DMatrix<f64>,
}

/// GLS fit at known covariance components.
pub fn gls_fit(data: &Dataset, psi: &SymMat, sigma: &SymMat) -> Result<FitResult> {
    gls_fit_with(data, CovComponents::from_known(psi.clone(), sigma.clone()))
}

/// Full pipeline: estimate the covariance components, then GLS at the
/// estimates.
pub fn fit(data: &Dataset) -> Result<FitResult> {
    gls_fit_with(data, varcomp::estimate_components(data)?)
}

/// GLS fit at the components carried in `components` (psi_hat, sigma_hat).
pub fn gls_fit_with(data: &Dataset, components: CovComponents) -> Result<FitResult> {
    let psi = &components.psi_hat;
    let sigma = &components.sigma_hat;
    let s = data.s();
    let mut by_size: BTreeMap<usize, SizeCache> = BTreeMap::new();
    let mut xtdx = DMatrix::<f64>::zeros(s, s);
    let mut xtdy = DVector::<f64>::zeros(s);
    let mut per_area = Vec::with_capacity(data.m());

    for i in 0..data.m() {
        let block = data.area(i);
        let n_i = block.n_units();
        if !by_size.contains_key(&n_i) {
            let marginal = marginal_block_inverse(psi, sigma, n_i)?;
            let lambda = lambda_matrix(psi, sigma, n_i);
            let lambda_inv = lambda.inverse("Lambda_a").map_err(|e| match e {
                Error::SingularCovariance { rcond, .. } => Error::SingularCovariance {
                    name: format!("Lambda_a (area {}, n_a = {})", data.area_id(i), n_i),
                    rcond,
                },
                other => other,
            })?;
            let shrinkage = psi.as_matrix() * lambda_inv.as_matrix();
            by_size.insert(
                n_i,
                SizeCache {
                    sigma_inv: marginal.sigma_inv,
                    c: marginal.c,
                    lambda,
                    lambda_inv,
                    shrinkage,
                },
            );
        }
        let sc = &by_size[&n_i];
        let (ybar, rbar) = area_means(block);
        for j in 0..n_i {
            let r = block.regressor(j);
            let si_r = sc.sigma_inv.as_matrix() * r;
            xtdx += r.tr_mul(&si_r);
            xtdy += r.tr_mul(&(sc.sigma_inv.as_matrix() * block.response(j)));
        }
        let nf2 = (n_i * n_i) as f64;
        let c_rbar = sc.c.as_matrix() * &rbar;
        xtdx -= rbar.tr_mul(&c_rbar) * nf2;
        xtdy -= rbar.tr_mul(&(sc.c.as_matrix() * &ybar)) * nf2;
        per_area.push(AreaCache {
            n_a: n_i,
            lambda: sc.lambda.clone(),
            lambda_inv: sc.lambda_inv.clone(),
            shrinkage: sc.shrinkage.clone(),
            ybar,
            rbar,
        });
    }

    let beta_cov = SymMat::symmetrize(xtdx)
        .inverse("X' D^{-1} X")
        .map_err(|e| match e {
            Error::SingularCovariance { rcond, .. } => Error::RankDeficientDesign(format!(
                "X' D^{{-1}} X is numerically singular (rcond {rcond:.2e}); the stacked \
                 regressors lack full column rank"
            )),
            other => other,
        })?;
    let beta = beta_cov.as_matrix() * xtdy;
    Ok(FitResult {
        beta,
        beta_cov,
        components,
        per_area,
    })
}

/// Point prediction for one area from an existing fit; no uncertainty attached.
pub fn predict_area(
    fit: &FitResult,
    data: &Dataset,
    area_index: usize,
    c_spec: &TargetSpec,
) -> Result<AreaPrediction> {
    if area_index >= data.m() {
        return Err(Error::Shape(format!(
            "area index {area_index} out of range for m = {}",
            data.m()
        )));
    }
    let cache = &fit.per_area[area_index];
    let c_a = c_spec.resolve(&cache.rbar)?;
    let theta_hat = compose(&fit.beta, &c_a, &cache.shrinkage, &cache.ybar, &cache.rbar);
    Ok(AreaPrediction {
        area_id: data.area_id(area_index).to_string(),
        area_index,
        theta_hat,
        target_spec: c_spec.clone(),
        uncertainty: None,
    })
}

/// EBLUP for the requested areas: estimates components, fits, predicts.
pub fn eblup(
    data: &Dataset,
    target_areas: &[usize],
    c_spec: &TargetSpec,
) -> Result<Vec<AreaPrediction>> {
    let fitted = fit(data)?;
    target_areas
        .iter()
        .map(|&i| predict_area(&fitted, data, i, c_spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        build_design, derive_rng, psd_sqrt, synthesize, EffectDist, GroupRule, SimConfig,
        TAG_PHASE_A,
    };

    fn sim_dataset(master_seed: u64) -> (Dataset, SimConfig) {
        let config = SimConfig {
            m: 8,
            k: 2,
            group_rule: GroupRule::Cycle(vec![1, 2, 3]),
            beta: vec![0.8, -0.5, -0.3, 0.6],
            rho: 0.5,
            psi_vector: None,
            sigma: None,
            effect_dist: EffectDist::Normal,
            replications_a: 1,
            replications_b: 1,
            master_seed,
            alpha: 0.05,
            workers: Some(1),
        };
        let design = build_design(&config).unwrap();
        let beta = DVector::from_row_slice(&config.beta);
        let psi_sqrt = psd_sqrt(&config.psi().unwrap());
        let sigma_sqrt = psd_sqrt(&config.sigma().unwrap());
        let mut rng = derive_rng(master_seed, TAG_PHASE_A, 0);
        let (data, _) = synthesize(
            &design,
            &beta,
            &psi_sqrt,
            &sigma_sqrt,
            config.effect_dist,
            &mut rng,
        );
        (data, config)
    }

    #[test]
    fn zero_psi_reduces_gls_to_ols() {
        let (data, _) = sim_dataset(5);
        let fit = gls_fit(&data, &SymMat::zeros(2), &SymMat::identity(2)).unwrap();
        let ols = varcomp::ols_beta(&data).unwrap();
        assert!((&fit.beta - ols).amax() < 1e-12);
        let xtx_inv = varcomp::xtx_inverse(&data).unwrap();
        assert!((fit.beta_cov.as_matrix() - xtx_inv.as_matrix()).amax() < 1e-12);
    }

    #[test]
    fn shrinkage_trivial_cases() {
        let zero = shrinkage_matrix(&SymMat::zeros(2), &SymMat::identity(2), 3).unwrap();
        assert!(zero.amax() == 0.0);

        let half = shrinkage_matrix(&SymMat::identity(2), &SymMat::identity(2), 1).unwrap();
        assert!((half - DMatrix::<f64>::identity(2, 2) * 0.5).amax() < 1e-15);

        let psi = SymMat::diagonal(&[2.0, 0.5]);
        let sigma = SymMat::diagonal(&[1.0, 3.0]);
        let b = shrinkage_matrix(&psi, &sigma, 4).unwrap();
        assert!((b[(0, 0)] - 2.0 / (2.0 + 0.25)).abs() < 1e-15);
        assert!((b[(1, 1)] - 0.5 / (0.5 + 0.75)).abs() < 1e-15);
        assert!(b[(0, 1)].abs() < 1e-15 && b[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn bayes_predictor_composition() {
        // Zero innovation: responses sit exactly on the regression plane.
        let r = DMatrix::from_row_slice(2, 4, &[1.0, 0.3, 0.0, 0.0, 0.0, 0.0, 1.0, -0.7]);
        let beta = DVector::from_row_slice(&[0.8, -0.5, -0.3, 0.6]);
        let on_plane = &r * &beta;
        let area =
            UnitBlock::new(vec![on_plane.clone(), on_plane], vec![r.clone(), r.clone()]).unwrap();
        let c_a = DMatrix::from_row_slice(2, 4, &[1.0, 0.1, 0.0, 0.0, 0.0, 0.0, 1.0, 0.9]);
        let psi = SymMat::identity(2);
        let sigma = SymMat::identity(2);
        let theta = bayes_predict(&beta, &psi, &sigma, &area, &c_a).unwrap();
        assert!((&theta - &c_a * &beta).amax() < 1e-14);

        // Full weight on the data: B_a = I with c_a = Rbar returns ybar.
        let (data, _) = sim_dataset(6);
        let block = data.area(2);
        let (ybar, rbar) = area_means(block);
        let eye = DMatrix::<f64>::identity(2, 2);
        let theta = compose(&beta, &rbar, &eye, &ybar, &rbar);
        assert!((&theta - &ybar).amax() < 1e-14);
    }

    #[test]
    fn zero_psi_hat_degrades_to_synthetic_estimator() {
        let (data, _) = sim_dataset(7);
        let fit = gls_fit(&data, &SymMat::zeros(2), &SymMat::identity(2)).unwrap();
        for i in 0..data.m() {
            let pred = predict_area(&fit, &data, i, &TargetSpec::SampleMean).unwrap();
            let synthetic = &fit.per_area[i].rbar * &fit.beta;
            assert!((&pred.theta_hat - synthetic).amax() < 1e-14);
            assert!(pred.uncertainty.is_none());
        }
    }

    #[test]
    fn eblup_is_deterministic_and_shaped() {
        let (data, _) = sim_dataset(8);
        let targets: Vec<usize> = (0..data.m()).collect();
        let a = eblup(&data, &targets, &TargetSpec::SampleMean).unwrap();
        let b = eblup(&data, &targets, &TargetSpec::SampleMean).unwrap();
        assert_eq!(a.len(), data.m());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.theta_hat, pb.theta_hat);
            assert_eq!(pa.theta_hat.len(), 2);
        }
        assert_eq!(a[3].area_id, data.area_id(3));
    }

    #[test]
    fn diagonal_components_decouple_to_componentwise_fits() {
        // With diagonal (Psi, Sigma) and regressor rows touching disjoint
        // coefficient blocks, the joint GLS fit and predictor must equal the
        // two scalar fits run separately on each response component.
        let (data, _) = sim_dataset(9);
        let psi = SymMat::diagonal(&[1.5, 0.5]);
        let sigma = SymMat::diagonal(&[1.0, 2.0]);
        let joint = gls_fit(&data, &psi, &sigma).unwrap();

        for t in 0..2 {
            let areas: Vec<UnitBlock> = data
                .areas()
                .iter()
                .map(|block| {
                    let responses = (0..block.n_units())
                        .map(|j| DVector::from_row_slice(&[block.response(j)[t]]))
                        .collect();
                    let regressors = (0..block.n_units())
                        .map(|j| {
                            let r = block.regressor(j);
                            DMatrix::from_row_slice(1, 2, &[r[(t, 2 * t)], r[(t, 2 * t + 1)]])
                        })
                        .collect();
                    UnitBlock::new(responses, regressors).unwrap()
                })
                .collect();
            let ids = (0..data.m()).map(|i| data.area_id(i).to_string()).collect();
            let scalar_data = Dataset::new(areas, ids).unwrap();
            let scalar_fit = gls_fit(
                &scalar_data,
                &SymMat::diagonal(&[psi.as_matrix()[(t, t)]]),
                &SymMat::diagonal(&[sigma.as_matrix()[(t, t)]]),
            )
            .unwrap();
            assert!((scalar_fit.beta[0] - joint.beta[2 * t]).abs() < 1e-12);
            assert!((scalar_fit.beta[1] - joint.beta[2 * t + 1]).abs() < 1e-12);

            for i in 0..data.m() {
                let joint_pred = predict_area(&joint, &data, i, &TargetSpec::SampleMean).unwrap();
                let scalar_pred =
                    predict_area(&scalar_fit, &scalar_data, i, &TargetSpec::SampleMean).unwrap();
                assert!((joint_pred.theta_hat[t] - scalar_pred.theta_hat[0]).abs() < 1e-12);
            }
        }
    }
}
