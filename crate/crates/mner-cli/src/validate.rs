//! Self-check suites for `mner validate`: the structured GLS solver against
//! a dense solve, the psi0 bias formula against a Monte Carlo estimate, and
//! the k = 1 pipeline against an independent scalar implementation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mner::sim::oracle::{dense_gls_oracle, scalar_slice, univariate_pipeline};
use mner::sim::{
    build_design, derive_rng, psd_sqrt, synthesize, EffectDist, GroupRule, SimConfig, TAG_PHASE_A,
};
use mner::varcomp::{self, BiasInputs};
use mner::{blup, uncertainty, Dataset, SymMat, TargetSpec, UnitBlock};

/// One suite's verdict: Ok carries the pass detail, Err the failure.
pub struct Suite {
    pub name: &'static str,
    pub outcome: Result<String, String>,
}

/// Runs all suites; deterministic (fixed seeds), a few seconds total.
pub fn run_all() -> Vec<Suite> {
    vec![
        Suite {
            name: "gls-dense",
            outcome: dense_equivalence(),
        },
        Suite {
            name: "bias-mc",
            outcome: bias_monte_carlo(),
        },
        Suite {
            name: "scalar-reduction",
            outcome: scalar_reduction(),
        },
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Random dataset with n_i in 1..=5 and PD (psi, sigma).
fn random_instance(
    rng: &mut ChaCha8Rng,
    k: usize,
    s: usize,
    m: usize,
    constant_within_area: bool,
) -> (Dataset, SymMat, SymMat) {
    let mut areas = Vec::with_capacity(m);
    for _ in 0..m {
        let n_i = rng.gen_range(1..=5usize);
        let shared = DMatrix::<f64>::from_fn(k, s, |_, _| rng.gen_range(-1.0..1.0));
        let mut responses = Vec::with_capacity(n_i);
        let mut regressors = Vec::with_capacity(n_i);
        for _ in 0..n_i {
            let r = if constant_within_area {
                shared.clone()
            } else {
                DMatrix::<f64>::from_fn(k, s, |_, _| rng.gen_range(-1.0..1.0))
            };
            responses.push(DVector::<f64>::from_fn(k, |_, _| rng.gen_range(-2.0..2.0)));
            regressors.push(r);
        }
        areas.push(UnitBlock::new(responses, regressors).expect("consistent shapes"));
    }
    let ids = (0..m).map(|i| format!("v{i}")).collect();
    let data = Dataset::new(areas, ids).expect("m >= 2");
    let rand_pd = |rng: &mut ChaCha8Rng| {
        let a = DMatrix::<f64>::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        SymMat::symmetrize(&a * a.transpose() + DMatrix::identity(k, k) * 0.2)
    };
    let psi = rand_pd(rng);
    let sigma = rand_pd(rng);
    (data, psi, sigma)
}

/// Structured GLS equals a dense Nk x Nk solve on 60 random instances.
fn dense_equivalence() -> Result<String, String> {
    let mut rng = derive_rng(9001, 0, 0);
    let mut max_rel: f64 = 0.0;
    for trial in 0..60 {
        let k = rng.gen_range(1..=3usize);
        let s = rng.gen_range(k..=2 * k);
        let m = rng.gen_range(2..=8usize);
        let (data, psi, sigma) = random_instance(&mut rng, k, s, m, false);
        let fit = blup::gls_fit(&data, &psi, &sigma).map_err(|e| format!("trial {trial}: {e}"))?;
        let (beta_d, cov_d) =
            dense_gls_oracle(&data, &psi, &sigma).map_err(|e| format!("trial {trial}: {e}"))?;
        let beta_err = (&fit.beta - &beta_d).amax() / beta_d.amax().max(1.0);
        let cov_err = (fit.beta_cov.as_matrix() - &cov_d).amax() / cov_d.amax().max(1.0);
        max_rel = max_rel.max(beta_err).max(cov_err);
    }
    if max_rel < 1e-10 {
        Ok(format!("max rel {max_rel:.2e} over 60 instances"))
    } else {
        Err(format!("max rel {max_rel:.2e} exceeds 1e-10"))
    }
}

/// The closed-form bias of psi0 matches a 40,000-replication Monte Carlo
/// mean of psi0 - psi within 3.5 standard errors elementwise.
fn bias_monte_carlo() -> Result<String, String> {
    let reps = 40_000usize;
    let config = SimConfig {
        m: 10,
        k: 2,
        group_rule: GroupRule::Cycle(vec![1, 4, 7, 10]),
        beta: vec![0.8, -0.5, -0.3, 0.6],
        rho: 0.5,
        psi_vector: None,
        sigma: None,
        effect_dist: EffectDist::Normal,
        replications_a: reps,
        replications_b: 1,
        master_seed: 7002,
        alpha: 0.05,
        workers: Some(1),
    };
    config.validate().map_err(|e| e.to_string())?;
    let design = build_design(&config).map_err(|e| e.to_string())?;
    let psi = config.psi().map_err(|e| e.to_string())?;
    let sigma = config.sigma().map_err(|e| e.to_string())?;
    let beta = DVector::from_row_slice(&config.beta);
    let psi_sqrt = psd_sqrt(&psi);
    let sigma_sqrt = psd_sqrt(&sigma);

    let k = config.k;
    let mut sum = DMatrix::<f64>::zeros(k, k);
    let mut sum_sq = DMatrix::<f64>::zeros(k, k);
    let mut geometry: Option<Dataset> = None;
    for r in 0..reps {
        let mut rng = derive_rng(config.master_seed, TAG_PHASE_A, r as u64);
        let (data, _) = synthesize(
            &design,
            &beta,
            &psi_sqrt,
            &sigma_sqrt,
            config.effect_dist,
            &mut rng,
        );
        let (sigma_hat, _) = varcomp::estimate_sigma(&data).map_err(|e| e.to_string())?;
        let psi0 = varcomp::estimate_psi0(&data, &sigma_hat).map_err(|e| e.to_string())?;
        let d = psi0.as_matrix() - psi.as_matrix();
        sum += &d;
        sum_sq += d.component_mul(&d);
        if geometry.is_none() {
            geometry = Some(data);
        }
    }
    let mean = sum / reps as f64;
    let var = sum_sq / reps as f64 - mean.component_mul(&mean);

    // The regressors are fixed across replications, so any replication
    // carries the design geometry the formula needs.
    let data = geometry.expect("reps >= 1");
    let xtx_inv = varcomp::xtx_inverse(&data).map_err(|e| e.to_string())?;
    let bias = varcomp::bias_psi0(&BiasInputs {
        psi: &psi,
        sigma: &sigma,
        data: &data,
        xtx_inv: &xtx_inv,
    })
    .map_err(|e| e.to_string())?;

    let mut max_se: f64 = 0.0;
    for t in 0..k {
        for u in 0..k {
            let se = (var[(t, u)] / reps as f64).sqrt();
            max_se = max_se.max((mean[(t, u)] - bias.as_matrix()[(t, u)]).abs() / se);
        }
    }
    if max_se <= 3.5 {
        Ok(format!(
            "max |mc - formula| = {max_se:.2} se over {reps} replications"
        ))
    } else {
        Err(format!("max |mc - formula| = {max_se:.2} se exceeds 3.5"))
    }
}

/// The k = 1 multivariate pipeline agrees with the independent scalar
/// implementation end to end, on generic and constant-within-area designs.
fn scalar_reduction() -> Result<String, String> {
    let mut max_rel: f64 = 0.0;
    for (case, constant) in [(0u64, false), (1u64, true)] {
        let mut rng = derive_rng(9002, 1, case);
        let (data, _, _) = random_instance(&mut rng, 1, 2, 8, constant);
        let alpha = 0.05;

        let scalar_areas = scalar_slice(&data, 0, &[0, 1]);
        let scalar = univariate_pipeline(&scalar_areas, alpha).map_err(|e| e.to_string())?;
        let components = varcomp::estimate_components(&data).map_err(|e| e.to_string())?;
        if components.s0 != scalar.components.s0 {
            return Err(format!("case {case}: s0 mismatch"));
        }
        for (main, oracle) in [
            (
                components.sigma_hat.as_matrix()[(0, 0)],
                scalar.components.sigma_hat,
            ),
            (components.psi0.as_matrix()[(0, 0)], scalar.components.psi0),
            (
                components.psi_hat.as_matrix()[(0, 0)],
                scalar.components.psi_hat,
            ),
        ] {
            max_rel = max_rel.max(rel_err(main, oracle));
        }

        let fit = blup::fit(&data).map_err(|e| e.to_string())?;
        for j in 0..2 {
            max_rel = max_rel.max(rel_err(fit.beta[j], scalar.fit.beta[j]));
        }
        let ell = DVector::from_row_slice(&[1.0]);
        let sizes = data.sizes();
        for i in 0..data.m() {
            let pred = uncertainty::msem_estimate(&data, &fit, i, &TargetSpec::SampleMean)
                .map_err(|e| e.to_string())?;
            let parts = pred.uncertainty.as_ref().expect("filled by msem_estimate");
            let o = &scalar.fit.areas[i];
            for (main, oracle) in [
                (pred.theta_hat[0], o.theta),
                (parts.msem.as_matrix()[(0, 0)], o.msem),
            ] {
                max_rel = max_rel.max(rel_err(main, oracle));
            }
            let pair = uncertainty::corrected_interval(&pred, &ell, alpha, &fit.components, &sizes)
                .map_err(|e| e.to_string())?;
            for (main, oracle) in [
                (pair.corrected.lower, o.lower),
                (pair.corrected.upper, o.upper),
                (pair.naive.lower, o.lower_naive),
                (pair.naive.upper, o.upper_naive),
            ] {
                max_rel = max_rel.max(rel_err(main, oracle));
            }
        }
    }
    if max_rel < 1e-10 {
        Ok(format!("max rel {max_rel:.2e} across both layouts"))
    } else {
        Err(format!("max rel {max_rel:.2e} exceeds 1e-10"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_scalar_suites_pass() {
        assert!(dense_equivalence().is_ok());
        assert!(scalar_reduction().is_ok());
    }
}
