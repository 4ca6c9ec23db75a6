//! Monte Carlo replication harness: design generation, effect distributions,
//! the two-phase study protocol, and brute-force oracles for other modules'
//! tests.
//!
//! ## Determinism
//! Every random stream is a ChaCha8 generator keyed by (master_seed, tag,
//! index) through a 64-bit mix chain, so replication r is reproducible in
//! isolation and results are independent of worker count: replications are
//! accumulated in fixed-size chunks that are merged in chunk order.
//!
//! Phase A (truth estimation) and phase B (estimator evaluation) use disjoint
//! tags, so the truth never reuses phase-B random numbers.

pub mod oracle;
mod study;

pub use study::{prial_percent, rb_percent, run_study, GroupMetrics, IntervalCell, SimMetrics};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, SymMat, UnitBlock};

/// Stream tags for `derive_rng`.
pub const TAG_DESIGN: u64 = 1;
pub const TAG_PHASE_A: u64 = 2;
pub const TAG_PHASE_B: u64 = 3;

/// How per-area sample sizes are assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GroupRule {
    /// Four equal groups of m/4 areas with sizes 1, 4, 7, 10; requires 4 | m.
    FourGroups,
    /// Sizes cycle through the given list.
    Cycle(Vec<usize>),
    /// One explicit size per area.
    Explicit(Vec<usize>),
}

/// Distribution of the area effects v_i; all are standardized so Cov(v_i) = Psi.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EffectDist {
    /// M1: multivariate normal.
    Normal,
    /// M2: multivariate t with 5 degrees of freedom, rescaled by sqrt(3/5).
    StudentT,
    /// M3: componentwise (chi2_2 - 2)/2 before the Psi^{1/2} map.
    ChiSquare,
}

/// Replication-count presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Preset {
    /// (50_000, 5_000): full replication scale.
    Full,
    /// (20_000, 5_000): acceptance runs.
    Acceptance,
    /// (2_000, 1_000): smoke tests.
    Smoke,
}

impl Preset {
    pub fn replications(self) -> (usize, usize) {
        match self {
            Preset::Full => (50_000, 5_000),
            Preset::Acceptance => (20_000, 5_000),
            Preset::Smoke => (2_000, 1_000),
        }
    }
}

/// Full specification of one simulation study.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub m: usize,
    pub k: usize,
    pub group_rule: GroupRule,
    /// Regression coefficients, length s = 2k.
    pub beta: Vec<f64>,
    /// Correlation parameter of Psi; must lie in (-1, 1).
    pub rho: f64,
    /// Psi construction vector; None selects the preset psi_k (k in {2, 3}).
    pub psi_vector: Option<Vec<f64>>,
    /// Unit-error covariance; None selects I_k.
    pub sigma: Option<SymMat>,
    pub effect_dist: EffectDist,
    pub replications_a: usize,
    pub replications_b: usize,
    pub master_seed: u64,
    pub alpha: f64,
    /// Worker threads for the replication pool; None uses all available.
    pub workers: Option<usize>,
}

impl SimConfig {
    /// The reference study design: m=40 in four size groups, default beta for
    /// the given k, default psi vector, Sigma = I, alpha = 0.05.
    pub fn preset(
        preset: Preset,
        k: usize,
        rho: f64,
        effect_dist: EffectDist,
        master_seed: u64,
    ) -> Result<Self> {
        let beta = match k {
            2 => vec![0.8, -0.5, -0.3, 0.6],
            3 => vec![0.8, -0.5, -0.3, 0.6, 0.4, -0.2],
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "no preset beta for k = {k}; provide SimConfig fields directly"
                )))
            }
        };
        let (replications_a, replications_b) = preset.replications();
        let config = SimConfig {
            m: 40,
            k,
            group_rule: GroupRule::FourGroups,
            beta,
            rho,
            psi_vector: None,
            sigma: None,
            effect_dist,
            replications_a,
            replications_b,
            master_seed,
            alpha: 0.05,
            workers: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidConfig(format!("m = {} < 2", self.m)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho = {} outside (-1, 1)",
                self.rho
            )));
        }
        if self.beta.len() != 2 * self.k {
            return Err(Error::InvalidConfig(format!(
                "beta length {} != 2k = {}",
                self.beta.len(),
                2 * self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        self.sizes()?;
        self.psi()?;
        Ok(())
    }

    pub fn sizes(&self) -> Result<Vec<usize>> {
        group_sizes(&self.group_rule, self.m)
    }

    pub fn psi(&self) -> Result<SymMat> {
        let vec_owned;
        let v = match &self.psi_vector {
            Some(v) => {
                if v.len() != self.k {
                    return Err(Error::InvalidConfig(format!(
                        "psi_vector length {} != k = {}",
                        v.len(),
                        self.k
                    )));
                }
                v.as_slice()
            }
            None => {
                vec_owned = default_psi_vector(self.k)?;
                &vec_owned
            }
        };
        psi_from_rho(self.rho, v)
    }

    pub fn sigma(&self) -> Result<SymMat> {
        match &self.sigma {
            Some(s) => {
                if s.dim() != self.k {
                    return Err(Error::InvalidConfig(format!(
                        "sigma is {}x{} but k = {}",
                        s.dim(),
                        s.dim(),
                        self.k
                    )));
                }
                Ok(s.clone())
            }
            None => Ok(SymMat::identity(self.k)),
        }
    }
}

/// Expands a grouping rule into per-area sizes.
pub fn group_sizes(rule: &GroupRule, m: usize) -> Result<Vec<usize>> {
    let sizes = match rule {
        GroupRule::FourGroups => {
            if m % 4 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "four-group sizing requires 4 | m, got m = {m}"
                )));
            }
            let per = m / 4;
            (0..m).map(|i| 3 * (i / per + 1) - 2).collect()
        }
        GroupRule::Cycle(c) => {
            if c.is_empty() || c.contains(&0) {
                return Err(Error::InvalidConfig(
                    "cycle sizes must be nonempty positives".into(),
                ));
            }
            (0..m).map(|i| c[i % c.len()]).collect()
        }
        GroupRule::Explicit(v) => {
            if v.len() != m || v.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "explicit sizes must list {} positive entries",
                    m
                )));
            }
            v.clone()
        }
    };
    Ok(sizes)
}

/// Preset psi vectors: psi_2 = (sqrt 1.5, sqrt 0.5), psi_3 = (sqrt 1.5, 1, sqrt 0.5).
pub fn default_psi_vector(k: usize) -> Result<Vec<f64>> {
    match k {
        2 => Ok(vec![1.5_f64.sqrt(), 0.5_f64.sqrt()]),
        3 => Ok(vec![1.5_f64.sqrt(), 1.0, 0.5_f64.sqrt()]),
        _ => Err(Error::InvalidConfig(format!(
            "no preset psi vector for k = {k}; set psi_vector explicitly"
        ))),
    }
}

/// Psi = rho psi psi' + (1 - rho) diag(psi psi'); PSD for rho in [0, 1].
pub fn psi_from_rho(rho: f64, psi_vec: &[f64]) -> Result<SymMat> {
    let k = psi_vec.len();
    let p = DVector::from_row_slice(psi_vec);
    let outer = &p * p.transpose();
    let mut m = &outer * rho;
    for t in 0..k {
        m[(t, t)] += (1.0 - rho) * outer[(t, t)];
    }
    let psi = SymMat::symmetrize(m);
    if psi.min_eigenvalue() < -1e-12 * psi.as_matrix().amax() {
        return Err(Error::InvalidConfig(format!(
            "psi_from_rho(rho = {rho}) is not PSD"
        )));
    }
    Ok(psi)
}

/// Regressors of the study design: per area one k x 2k block, rows
/// (.. 1 x_it ..) with the intercept/covariate pair of response t in columns
/// 2t, 2t+1. Covariates are drawn once from the master seed and shared by all
/// units of the area.
#[derive(Debug, Clone)]
pub struct DesignSkeleton {
    pub sizes: Vec<usize>,
    /// One k x 2k regressor block per area, shared by its units.
    pub regressors: Vec<DMatrix<f64>>,
}

impl DesignSkeleton {
    pub fn n_total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Draws the fixed design: covariates x_it ~ U(-1, 1), one per (area, response).
pub fn build_design(config: &SimConfig) -> Result<DesignSkeleton> {
    let sizes = config.sizes()?;
    let k = config.k;
    let mut rng = derive_rng(config.master_seed, TAG_DESIGN, 0);
    let regressors = (0..config.m)
        .map(|_| {
            let mut r = DMatrix::zeros(k, 2 * k);
            for t in 0..k {
                r[(t, 2 * t)] = 1.0;
                r[(t, 2 * t + 1)] = rng.gen_range(-1.0..1.0);
            }
            r
        })
        .collect();
    Ok(DesignSkeleton { sizes, regressors })
}

/// Symmetric PSD square root via eigendecomposition; negative round-off
/// eigenvalues are clipped, so a boundary-truncated Psi is accepted.
pub fn psd_sqrt(a: &SymMat) -> DMatrix<f64> {
    let (vals, vecs) = a.eigen();
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(|l| l.max(0.0).sqrt()));
    &vecs * sqrt_diag * vecs.transpose()
}

/// Standardized effect vectors w with E[w] = 0, Cov(w) = I_k.
fn draw_standardized(k: usize, dist: EffectDist, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match dist {
        EffectDist::Normal => DVector::from_fn(k, |_, _| rng.sample(StandardNormal)),
        EffectDist::StudentT => {
            let chi5 = ChiSquared::new(5.0).unwrap();
            let u: f64 = chi5.sample(rng);
            let scale = (3.0 / u).sqrt();
            DVector::from_fn(k, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
        }
        EffectDist::ChiSquare => {
            let chi2 = ChiSquared::new(2.0).unwrap();
            DVector::from_fn(k, |_, _| (chi2.sample(rng) - 2.0) / 2.0)
        }
    }
}

/// m area effects v_i = Psi^{1/2} w_i; `psi_sqrt` from `psd_sqrt`.
pub fn draw_effects_with(
    psi_sqrt: &DMatrix<f64>,
    dist: EffectDist,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let k = psi_sqrt.nrows();
    (0..m)
        .map(|_| psi_sqrt * draw_standardized(k, dist, rng))
        .collect()
}

/// Convenience entry: draws the m effects for a config from one stream.
pub fn draw_effects(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>> {
    let psi_sqrt = psd_sqrt(&config.psi()?);
    Ok(draw_effects_with(
        &psi_sqrt,
        config.effect_dist,
        config.m,
        rng,
    ))
}

/// One replication's synthetic dataset plus the realized effects.
/// y_ij = R_i beta + v_i + e_ij with e_ij = Sigma^{1/2} z, z standard normal.
pub fn synthesize(
    design: &DesignSkeleton,
    beta: &DVector<f64>,
    psi_sqrt: &DMatrix<f64>,
    sigma_sqrt: &DMatrix<f64>,
    dist: EffectDist,
    rng: &mut ChaCha8Rng,
) -> (Dataset, Vec<DVector<f64>>) {
    let m = design.sizes.len();
    let k = psi_sqrt.nrows();
    let effects = draw_effects_with(psi_sqrt, dist, m, rng);
    let mut areas = Vec::with_capacity(m);
    for (i, (&n_i, r)) in design.sizes.iter().zip(&design.regressors).enumerate() {
        let mean = r * beta + &effects[i];
        let responses = (0..n_i)
            .map(|_| {
                let z = DVector::from_fn(k, |_, _| rng.sample(StandardNormal));
                &mean + sigma_sqrt * z
            })
            .collect();
        let regressors = vec![r.clone(); n_i];
        areas.push(UnitBlock::new(responses, regressors).expect("design shapes are consistent"));
    }
    let ids = (0..m).map(|i| format!("area{:03}", i + 1)).collect();
    let data = Dataset::new(areas, ids).expect("m >= 2 and shared dimensions by construction");
    (data, effects)
}

/// 64-bit finalizer (murmur3-style) used by the seed derivation chain.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ceb9fe1a85ec53);
    z ^ (z >> 33)
}

/// Deterministic stream for (master, tag, index); streams with distinct keys
/// are independent for all practical purposes.
pub fn derive_rng(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut h = mix64(master ^ 0x9e3779b97f4a7c15);
    h = mix64(h ^ tag);
    h = mix64(h ^ index);
    let mut seed = [0u8; 32];
    let mut state = h;
    for chunk in seed.chunks_mut(8) {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
