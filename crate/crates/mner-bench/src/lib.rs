//! Shared fixtures for the criterion benches.

use nalgebra::DVector;

use mner::sim::{build_design, derive_rng, psd_sqrt, synthesize, EffectDist, GroupRule, SimConfig};
use mner::{Dataset, SymMat};

/// Study-shaped instance: k = 2, sizes cycling 1, 4, 7, 10, rho = 0.5,
/// Sigma = I, normal effects.
pub fn study_instance(m: usize, seed: u64) -> (Dataset, SymMat, SymMat) {
    let config = SimConfig {
        m,
        k: 2,
        group_rule: GroupRule::Cycle(vec![1, 4, 7, 10]),
        beta: vec![0.8, -0.5, -0.3, 0.6],
        rho: 0.5,
        psi_vector: None,
        sigma: None,
        effect_dist: EffectDist::Normal,
        replications_a: 1,
        replications_b: 1,
        master_seed: seed,
        alpha: 0.05,
        workers: Some(1),
    };
    let design = build_design(&config).expect("valid bench config");
    let psi = config.psi().expect("rho in range");
    let sigma = config.sigma().expect("identity");
    let beta = DVector::from_row_slice(&config.beta);
    let mut rng = derive_rng(seed, 7, 0);
    let (data, _) = synthesize(
        &design,
        &beta,
        &psd_sqrt(&psi),
        &psd_sqrt(&sigma),
        config.effect_dist,
        &mut rng,
    );
    (data, psi, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_has_study_shape() {
        let (data, psi, sigma) = study_instance(8, 3);
        assert_eq!((data.m(), data.k(), data.s()), (8, 2, 4));
        assert_eq!(data.sizes(), vec![1, 4, 7, 10, 1, 4, 7, 10]);
        assert!(psi.is_psd() && sigma.is_psd());
    }
}
