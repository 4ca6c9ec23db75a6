//! Two-phase replication studies over the synthetic design.
//!
//! Phase A estimates the true MSEM of each competitor by averaging outer
//! products of prediction errors; phase B evaluates the msem estimators and
//! intervals rep by rep against the phase-A truth. Replication r draws its
//! generator from (master_seed, phase tag, r), and accumulation happens in
//! fixed chunks merged in index order, so results are identical for any
//! worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::blup;
use crate::error::{Error, Result};
use crate::model::{SymMat, TargetSpec};
use crate::uncertainty;

use super::oracle::{scalar_slice, univariate_pipeline};
use super::{
    build_design, derive_rng, psd_sqrt, synthesize, DesignSkeleton, SimConfig, TAG_PHASE_A,
    TAG_PHASE_B,
};

const CHUNK: usize = 256;

/// Coverage probability and average length of one interval family.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IntervalCell {
    pub cp: f64,
    pub al: f64,
}

/// Metrics aggregated over the areas sharing one sample size.
#[derive(Debug, Clone, Serialize)]
pub struct GroupMetrics {
    pub n_a: usize,
    pub areas: usize,
    /// Mean elementwise percent relative bias of the msem estimator.
    pub rb_corrected: SymMat,
    /// Same for the naive g1 + g2 + g3 estimator.
    pub rb_naive: SymMat,
    /// Intervals for ell = e1 (first component).
    pub e1_corrected: IntervalCell,
    pub e1_naive: IntervalCell,
    /// Intervals for ell = (1, ..., 1).
    pub ones_corrected: IntervalCell,
    pub ones_naive: IntervalCell,
    /// Percent improvement of the EBLUP over the direct estimator ybar_a.
    pub prial_vs_direct: f64,
    /// Percent improvement over componentwise univariate EBLUPs.
    pub prial_vs_univariate: f64,
}

/// Full study output.
#[derive(Debug, Clone, Serialize)]
pub struct SimMetrics {
    pub config: SimConfig,
    /// Simulated true MSEM per area, one per estimator.
    pub area_msem_eb: Vec<SymMat>,
    pub area_msem_direct: Vec<SymMat>,
    pub area_msem_univariate: Vec<SymMat>,
    pub groups: Vec<GroupMetrics>,
    /// Phase means of the component estimators (diagnostics).
    pub mean_sigma_hat: SymMat,
    pub mean_psi0: SymMat,
    pub mean_psi_hat: SymMat,
    pub completed_a: usize,
    pub completed_b: usize,
    pub failures_a: usize,
    pub failures_b: usize,
    /// Fraction of phase-A replications whose psi1 needed truncation.
    pub truncation_frequency: f64,
}

/// PRIAL in percent over a set of areas: 100 (1 - sum tr num / sum tr den).
pub fn prial_percent(num: &[SymMat], den: &[SymMat], idx: &[usize]) -> f64 {
    let top: f64 = idx.iter().map(|&i| num[i].trace()).sum();
    let bottom: f64 = idx.iter().map(|&i| den[i].trace()).sum();
    100.0 * (1.0 - top / bottom)
}

/// Elementwise percent relative bias of a mean estimate against its truth.
pub fn rb_percent(mean_est: &SymMat, truth: &SymMat) -> SymMat {
    let k = truth.dim();
    let mut out = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] = 100.0 * (mean_est.as_matrix()[(i, j)] - truth.as_matrix()[(i, j)])
                / truth.as_matrix()[(i, j)];
        }
    }
    SymMat::symmetrize(out)
}

fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::SingularCovariance { .. }
            | Error::RankDeficientDesign(_)
            | Error::InsufficientDegreesOfFreedom(_)
            | Error::NonpositiveMse(_)
    )
}

struct Shared<'a> {
    config: &'a SimConfig,
    design: &'a DesignSkeleton,
    beta: DVector<f64>,
    psi_sqrt: DMatrix<f64>,
    sigma_sqrt: DMatrix<f64>,
    /// c_a beta per area (the fixed synthetic part of theta_a).
    synth: Vec<DVector<f64>>,
    /// Columns of the block design touched by each response row.
    scalar_columns: Vec<[usize; 2]>,
}

impl<'a> Shared<'a> {
    fn new(config: &'a SimConfig, design: &'a DesignSkeleton) -> Result<Self> {
        let beta = DVector::from_row_slice(&config.beta);
        let psi_sqrt = psd_sqrt(&config.psi()?);
        let sigma_sqrt = psd_sqrt(&config.sigma()?);
        let synth = design.regressors.iter().map(|r| r * &beta).collect();
        let scalar_columns = (0..config.k).map(|t| [2 * t, 2 * t + 1]).collect();
        Ok(Shared {
            config,
            design,
            beta,
            psi_sqrt,
            sigma_sqrt,
            synth,
            scalar_columns,
        })
    }
}

struct PhaseAAcc {
    count: usize,
    failures: usize,
    truncations: usize,
    eb: Vec<DMatrix<f64>>,
    direct: Vec<DMatrix<f64>>,
    univ: Vec<DMatrix<f64>>,
    sigma_hat: DMatrix<f64>,
    psi0: DMatrix<f64>,
    psi_hat: DMatrix<f64>,
}

impl PhaseAAcc {
    fn new(m: usize, k: usize) -> Self {
        PhaseAAcc {
            count: 0,
            failures: 0,
            truncations: 0,
            eb: vec![DMatrix::zeros(k, k); m],
            direct: vec![DMatrix::zeros(k, k); m],
            univ: vec![DMatrix::zeros(k, k); m],
            sigma_hat: DMatrix::zeros(k, k),
            psi0: DMatrix::zeros(k, k),
            psi_hat: DMatrix::zeros(k, k),
        }
    }

    fn merge(&mut self, other: PhaseAAcc) {
        self.count += other.count;
        self.failures += other.failures;
        self.truncations += other.truncations;
        for (a, b) in self.eb.iter_mut().zip(&other.eb) {
            *a += b;
        }
        for (a, b) in self.direct.iter_mut().zip(&other.direct) {
            *a += b;
        }
        for (a, b) in self.univ.iter_mut().zip(&other.univ) {
            *a += b;
        }
        self.sigma_hat += &other.sigma_hat;
        self.psi0 += &other.psi0;
        self.psi_hat += &other.psi_hat;
    }
}

fn phase_a_rep(shared: &Shared, r: usize, acc: &mut PhaseAAcc) -> Result<()> {
    let config = shared.config;
    let mut rng = derive_rng(config.master_seed, TAG_PHASE_A, r as u64);
    let (data, effects) = synthesize(
        shared.design,
        &shared.beta,
        &shared.psi_sqrt,
        &shared.sigma_sqrt,
        config.effect_dist,
        &mut rng,
    );
    let fit = blup::fit(&data)?;

    // Componentwise univariate competitor, estimating its own scalar
    // components from each response component.
    let k = config.k;
    let m = config.m;
    let mut univ_theta = vec![DVector::<f64>::zeros(k); m];
    for t in 0..k {
        let areas = scalar_slice(&data, t, &shared.scalar_columns[t]);
        let pipe = univariate_pipeline(&areas, config.alpha)?;
        for (i, res) in pipe.fit.areas.iter().enumerate() {
            univ_theta[i][t] = res.theta;
        }
    }

    for i in 0..m {
        let truth = &shared.synth[i] + &effects[i];
        let pred = blup::predict_area(&fit, &data, i, &TargetSpec::SampleMean)?;
        let d_eb = &pred.theta_hat - &truth;
        acc.eb[i] += &d_eb * d_eb.transpose();

        let (ybar, _) = crate::model::area_means(data.area(i));
        let d_direct = ybar - &truth;
        acc.direct[i] += &d_direct * d_direct.transpose();

        let d_univ = &univ_theta[i] - &truth;
        acc.univ[i] += &d_univ * d_univ.transpose();
    }
    acc.sigma_hat += fit.components.sigma_hat.as_matrix();
    acc.psi0 += fit.components.psi0.as_matrix();
    acc.psi_hat += fit.components.psi_hat.as_matrix();
    acc.truncations += fit.components.truncated as usize;
    acc.count += 1;
    Ok(())
}

struct PhaseBAcc {
    count: usize,
    failures: usize,
    msem_corr: Vec<DMatrix<f64>>,
    msem_naive: Vec<DMatrix<f64>>,
    /// hits[area][ell][method]; ell 0 = e1, 1 = ones; method 0 = corrected.
    hits: Vec<[[u64; 2]; 2]>,
    lengths: Vec<[[f64; 2]; 2]>,
}

impl PhaseBAcc {
    fn new(m: usize, k: usize) -> Self {
        PhaseBAcc {
            count: 0,
            failures: 0,
            msem_corr: vec![DMatrix::zeros(k, k); m],
            msem_naive: vec![DMatrix::zeros(k, k); m],
            hits: vec![[[0; 2]; 2]; m],
            lengths: vec![[[0.0; 2]; 2]; m],
        }
    }

    fn merge(&mut self, other: PhaseBAcc) {
        self.count += other.count;
        self.failures += other.failures;
        for (a, b) in self.msem_corr.iter_mut().zip(&other.msem_corr) {
            *a += b;
        }
        for (a, b) in self.msem_naive.iter_mut().zip(&other.msem_naive) {
            *a += b;
        }
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            for (ra, rb) in a.iter_mut().zip(b) {
                ra[0] += rb[0];
                ra[1] += rb[1];
            }
        }
        for (a, b) in self.lengths.iter_mut().zip(&other.lengths) {
            for (ra, rb) in a.iter_mut().zip(b) {
                ra[0] += rb[0];
                ra[1] += rb[1];
            }
        }
    }
}

fn phase_b_rep(shared: &Shared, r: usize, acc: &mut PhaseBAcc) -> Result<()> {
    let config = shared.config;
    let mut rng = derive_rng(config.master_seed, TAG_PHASE_B, r as u64);
    let (data, effects) = synthesize(
        shared.design,
        &shared.beta,
        &shared.psi_sqrt,
        &shared.sigma_sqrt,
        config.effect_dist,
        &mut rng,
    );
    let fit = blup::fit(&data)?;
    let sizes = data.sizes();
    let k = config.k;
    let ells = [
        DVector::<f64>::from_fn(k, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        DVector::<f64>::from_element(k, 1.0),
    ];

    // Buffer the whole replication before touching the accumulator, so a
    // failure in any area skips the rep without partial contamination.
    let m = config.m;
    let mut msem_corr = Vec::with_capacity(m);
    let mut msem_naive = Vec::with_capacity(m);
    let mut hits = vec![[[0u64; 2]; 2]; m];
    let mut lengths = vec![[[0.0f64; 2]; 2]; m];
    for i in 0..m {
        let truth = &shared.synth[i] + &effects[i];
        let pred = uncertainty::msem_estimate(&data, &fit, i, &TargetSpec::SampleMean)?;
        let parts = pred
            .uncertainty
            .as_ref()
            .expect("msem_estimate fills parts");
        msem_corr.push(parts.msem.as_matrix().clone());
        msem_naive.push(parts.naive().as_matrix().clone());
        for (li, ell) in ells.iter().enumerate() {
            let pair =
                uncertainty::corrected_interval(&pred, ell, config.alpha, &fit.components, &sizes)?;
            let target = ell.dot(&truth);
            for (mi, interval) in [&pair.corrected, &pair.naive].into_iter().enumerate() {
                if interval.lower <= target && target <= interval.upper {
                    hits[i][li][mi] += 1;
                }
                lengths[i][li][mi] += interval.upper - interval.lower;
            }
        }
    }
    for i in 0..m {
        acc.msem_corr[i] += &msem_corr[i];
        acc.msem_naive[i] += &msem_naive[i];
        for li in 0..2 {
            for mi in 0..2 {
                acc.hits[i][li][mi] += hits[i][li][mi];
                acc.lengths[i][li][mi] += lengths[i][li][mi];
            }
        }
    }
    acc.count += 1;
    Ok(())
}

/// Runs replications [0, total) in deterministic chunks, in parallel when a
/// pool is available, merging chunk accumulators in index order.
fn run_phase<Acc: Send>(
    shared: &Shared,
    total: usize,
    new_acc: impl Fn() -> Acc + Sync,
    rep: impl Fn(&Shared, usize, &mut Acc) -> Result<()> + Sync,
    merge: impl Fn(&mut Acc, Acc),
    bump_failure: impl Fn(&mut Acc) + Sync,
) -> Result<Acc> {
    let chunks: Vec<(usize, usize)> = (0..total)
        .step_by(CHUNK)
        .map(|start| (start, (start + CHUNK).min(total)))
        .collect();
    let partials: Vec<Result<Acc>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut acc = new_acc();
            for r in start..end {
                match rep(shared, r, &mut acc) {
                    Ok(()) => {}
                    Err(e) if skippable(&e) => bump_failure(&mut acc),
                    Err(e) => return Err(e),
                }
            }
            Ok(acc)
        })
        .collect();
    let mut out = new_acc();
    for partial in partials {
        merge(&mut out, partial?);
    }
    Ok(out)
}

fn check_failures(phase: &str, failures: usize, total: usize) -> Result<()> {
    if failures * 100 > total {
        return Err(Error::InvalidConfig(format!(
            "study aborted: {failures} of {total} {phase} replications failed (> 1%)"
        )));
    }
    Ok(())
}

/// Runs the full two-phase study described by `config`.
pub fn run_study(config: &SimConfig) -> Result<SimMetrics> {
    config.validate()?;
    let design = build_design(config)?;
    let shared = Shared::new(config, &design)?;
    let m = config.m;
    let k = config.k;

    let body = || -> Result<(PhaseAAcc, PhaseBAcc)> {
        let acc_a = run_phase(
            &shared,
            config.replications_a,
            || PhaseAAcc::new(m, k),
            phase_a_rep,
            PhaseAAcc::merge,
            |acc| acc.failures += 1,
        )?;
        check_failures("phase A", acc_a.failures, config.replications_a)?;
        let acc_b = run_phase(
            &shared,
            config.replications_b,
            || PhaseBAcc::new(m, k),
            phase_b_rep,
            PhaseBAcc::merge,
            |acc| acc.failures += 1,
        )?;
        check_failures("phase B", acc_b.failures, config.replications_b)?;
        Ok((acc_a, acc_b))
    };
    let (acc_a, acc_b) = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(body),
        None => body(),
    }?;

    let ra = acc_a.count as f64;
    let to_sym = |v: &[DMatrix<f64>]| -> Vec<SymMat> {
        v.iter().map(|s| SymMat::symmetrize(s / ra)).collect()
    };
    let area_msem_eb = to_sym(&acc_a.eb);
    let area_msem_direct = to_sym(&acc_a.direct);
    let area_msem_univariate = to_sym(&acc_a.univ);

    let rb_count = acc_b.count as f64;
    let sizes = design.sizes.clone();
    let distinct: Vec<usize> = {
        let mut d = sizes.clone();
        d.sort_unstable();
        d.dedup();
        d
    };

    let mut groups = Vec::with_capacity(distinct.len());
    for &n_a in &distinct {
        let idx: Vec<usize> = (0..m).filter(|&i| sizes[i] == n_a).collect();
        let count = idx.len();

        let mut rb_c = DMatrix::<f64>::zeros(k, k);
        let mut rb_n = DMatrix::<f64>::zeros(k, k);
        for &i in &idx {
            let mean_c = SymMat::symmetrize(&acc_b.msem_corr[i] / rb_count);
            let mean_n = SymMat::symmetrize(&acc_b.msem_naive[i] / rb_count);
            rb_c += rb_percent(&mean_c, &area_msem_eb[i]).as_matrix();
            rb_n += rb_percent(&mean_n, &area_msem_eb[i]).as_matrix();
        }
        rb_c /= count as f64;
        rb_n /= count as f64;

        let cell = |li: usize, mi: usize| -> IntervalCell {
            let mut h = 0u64;
            let mut l = 0.0;
            for &i in &idx {
                h += acc_b.hits[i][li][mi];
                l += acc_b.lengths[i][li][mi];
            }
            let denom = count as f64 * rb_count;
            IntervalCell {
                cp: h as f64 / denom,
                al: l / denom,
            }
        };

        groups.push(GroupMetrics {
            n_a,
            areas: count,
            rb_corrected: SymMat::symmetrize(rb_c),
            rb_naive: SymMat::symmetrize(rb_n),
            e1_corrected: cell(0, 0),
            e1_naive: cell(0, 1),
            ones_corrected: cell(1, 0),
            ones_naive: cell(1, 1),
            prial_vs_direct: prial_percent(&area_msem_eb, &area_msem_direct, &idx),
            prial_vs_univariate: prial_percent(&area_msem_eb, &area_msem_univariate, &idx),
        });
    }

    Ok(SimMetrics {
        config: config.clone(),
        area_msem_eb,
        area_msem_direct,
        area_msem_univariate,
        groups,
        mean_sigma_hat: SymMat::symmetrize(&acc_a.sigma_hat / ra),
        mean_psi0: SymMat::symmetrize(&acc_a.psi0 / ra),
        mean_psi_hat: SymMat::symmetrize(&acc_a.psi_hat / ra),
        completed_a: acc_a.count,
        completed_b: acc_b.count,
        failures_a: acc_a.failures,
        failures_b: acc_b.failures,
        truncation_frequency: acc_a.truncations as f64 / ra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EffectDist, GroupRule, Preset};

    #[test]
    fn prial_and_rb_identities() {
        let a = vec![SymMat::diagonal(&[1.0, 2.0]), SymMat::diagonal(&[0.5, 0.7])];
        assert!(prial_percent(&a, &a, &[0, 1]).abs() < 1e-15);

        let truth = SymMat::diagonal(&[1.5, 0.5]);
        let rb = rb_percent(&truth, &truth);
        assert!(rb.as_matrix().amax() < 1e-15);

        // Doubling every entry gives +100% everywhere.
        let rb2 = rb_percent(&truth.scaled(2.0), &truth);
        for i in 0..2 {
            assert!((rb2.as_matrix()[(i, i)] - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoke_study_is_deterministic_and_sane() {
        let mut config = SimConfig::preset(Preset::Smoke, 2, 0.5, EffectDist::Normal, 314).unwrap();
        config.m = 8;
        config.group_rule = GroupRule::Cycle(vec![2, 5]);
        config.replications_a = 150;
        config.replications_b = 60;
        config.workers = Some(1);
        let a = run_study(&config).unwrap();
        config.workers = Some(3);
        let b = run_study(&config).unwrap();

        assert_eq!(a.completed_a, 150);
        assert_eq!(a.failures_a, 0);
        assert_eq!(a.groups.len(), 2);
        assert_eq!(a.groups[0].n_a, 2);
        assert_eq!(a.groups[1].n_a, 5);
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            // Bitwise equality across worker counts.
            assert_eq!(ga.rb_corrected.as_matrix(), gb.rb_corrected.as_matrix());
            assert_eq!(ga.e1_corrected.cp, gb.e1_corrected.cp);
            assert_eq!(ga.prial_vs_direct, gb.prial_vs_direct);
            assert!(ga.e1_corrected.cp >= 0.0 && ga.e1_corrected.cp <= 1.0);
            assert!(ga.e1_corrected.al > 0.0);
            assert!(ga.ones_naive.al > 0.0);
        }
        for (ma, mb) in a.area_msem_eb.iter().zip(&b.area_msem_eb) {
            assert_eq!(ma.as_matrix(), mb.as_matrix());
        }
        // Larger areas shrink the EBLUP's simulated MSEM trace on average.
        let small: f64 = (0..8).step_by(2).map(|i| a.area_msem_eb[i].trace()).sum();
        let large: f64 = (1..8).step_by(2).map(|i| a.area_msem_eb[i].trace()).sum();
        assert!(large < small);
    }
}
