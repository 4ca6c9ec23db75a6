//! Standard normal distribution functions, implemented in-artifact.
//!
//! The interval machinery needs Phi, phi and the quantile to be deterministic
//! across platforms and accurate to 1e-12, so no external special-function
//! crate is used. Phi goes through erf/erfc: a positive-term confluent series
//! below t = sqrt(1.5) and a modified-Lentz continued fraction for the
//! incomplete gamma Q(1/2, t^2) above it. The quantile is a rational
//! approximation polished by one Newton step on Phi.

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_PI: f64 = 0.5641895835477562869480794515607726_f64;
const FRAC_1_SQRT_2PI: f64 = 0.3989422804014326779399460599343819_f64;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let t = x.abs() / SQRT_2;
    if x <= 0.0 {
        0.5 * erfc_pos(t)
    } else {
        1.0 - 0.5 * erfc_pos(t)
    }
}

/// erfc(t) for t >= 0.
fn erfc_pos(t: f64) -> f64 {
    if t < 1.224744871391589 {
        1.0 - erf_series(t)
    } else if t > 27.0 {
        // erfc(27) < 1e-317; below double range.
        0.0
    } else {
        // Q(1/2, t^2) via continued fraction: erfc(t) = t e^{-t^2} / sqrt(pi) * cf.
        t * (-t * t).exp() * FRAC_1_SQRT_PI * gamma_q_half_cf(t * t)
    }
}

/// Confluent series erf(t) = 2t/sqrt(pi) e^{-t^2} sum_n (2t^2)^n / (2n+1)!!;
/// all terms positive, so no cancellation.
fn erf_series(t: f64) -> f64 {
    let z = 2.0 * t * t;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut denom = 1.0;
    for _ in 0..200 {
        denom += 2.0;
        term *= z / denom;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    2.0 * t * FRAC_1_SQRT_PI * (-t * t).exp() * sum
}

/// Modified-Lentz continued fraction for Q(a, x) with a = 1/2, missing the
/// e^{-x} x^a / Gamma(a) prefactor (applied by the caller).
fn gamma_q_half_cf(x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let a = 0.5;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..400 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Standard normal quantile for p in (0, 1).
///
/// Rational approximation (central/tail split at 0.02425) followed by one
/// Newton step on `normal_cdf`; panics outside the open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };

    let pdf = normal_pdf(x);
    if pdf > 0.0 {
        x - (normal_cdf(x) - p) / pdf
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // (x, Phi(x), phi(x)); mpmath at 60 digits, rounded to nearest f64.
    const CDF_PDF_POINTS: [(f64, f64, f64); 20] = [
        (-8.0, 6.220960574271784e-16, 5.052271083536892e-15),
        (-6.5, 4.016000583859118e-11, 2.669556614762852e-10),
        (-5.0, 2.866515718791939e-07, 1.4867195147342977e-06),
        (-4.0, 3.1671241833119924e-05, 0.00013383022576488534),
        (-3.2, 0.0006871379379158485, 0.0023840882014648426),
        (-2.5, 0.006209665325776135, 0.017528300493568537),
        (
            -1.959963984540054,
            0.025000000000000015,
            0.05844506980503539,
        ),
        (-1.5, 0.06680720126885807, 0.12951759566589172),
        (-1.0, 0.15865525393145705, 0.24197072451914334),
        (-0.5, 0.3085375387259869, 0.35206532676429947),
        (-0.123456789, 0.4508726949218579, 0.3959135805096434),
        (0.0, 0.5, 0.3989422804014327),
        (0.25, 0.5987063256829237, 0.3866681168028492),
        (0.7, 0.758036347776927, 0.31225393336676127),
        (1.281551565544601, 0.9000000000000001, 0.17549833193248668),
        (2.0, 0.9772498680518208, 0.05399096651318805),
        (2.575829303548901, 0.995, 0.014459743026917394),
        (3.5, 0.9997673709209645, 0.00087268269504576),
        (5.5, 0.9999999810104375, 1.0769760042543276e-07),
        (7.25, 0.9999999999997916, 1.538537950561275e-12),
    ];

    // (p, quantile(p)); same oracle.
    const QUANTILE_POINTS: [(f64, f64); 20] = [
        (1e-12, -7.034483825301132),
        (1e-09, -5.9978070150076865),
        (1e-06, -4.753424308822899),
        (0.0001, -3.7190164854556804),
        (0.001, -3.0902323061678136),
        (0.01, -2.326347874040841),
        (0.025, -1.9599639845400543),
        (0.05, -1.6448536269514726),
        (0.1, -1.2815515655446004),
        (0.25, -0.6744897501960817),
        (0.4, -0.2533471031357998),
        (0.5, 0.0),
        (0.6, 0.2533471031357998),
        (0.75, 0.6744897501960817),
        (0.9, 1.2815515655446004),
        (0.95, 1.6448536269514726),
        (0.975, 1.9599639845400543),
        (0.99, 2.326347874040841),
        (0.999, 3.0902323061678136),
        (0.999999, 4.753424308822899),
    ];

    #[test]
    fn cdf_and_pdf_match_frozen_oracle_to_1e12() {
        for &(x, cdf, pdf) in &CDF_PDF_POINTS {
            let rel_cdf = (normal_cdf(x) - cdf).abs() / cdf.max(1e-300);
            let rel_pdf = (normal_pdf(x) - pdf).abs() / pdf.max(1e-300);
            assert!(rel_cdf < 1e-12, "Phi({x}): rel err {rel_cdf:.2e}");
            assert!(rel_pdf < 1e-12, "phi({x}): rel err {rel_pdf:.2e}");
        }
    }

    #[test]
    fn quantile_matches_frozen_oracle_to_1e12() {
        for &(p, z) in &QUANTILE_POINTS {
            let got = normal_quantile(p);
            let err = (got - z).abs() / z.abs().max(1.0);
            assert!(err < 1e-12, "quantile({p}): got {got}, want {z}");
        }
    }

    #[test]
    fn cdf_symmetry_and_monotonicity() {
        let mut prev = 0.0;
        for i in 0..=160 {
            let x = -8.0 + 0.1 * i as f64;
            let c = normal_cdf(x);
            assert!((c + normal_cdf(-x) - 1.0).abs() < 1e-15);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn quantile_roundtrips_through_cdf() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-14);
        }
    }
}
