use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Two-sided p value.
    pub p: f64,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos approximation, reflection below 0.5).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test.
///
/// When both samples have zero variance the test is degenerate: `p = 1` for equal means and
/// `p = 0` otherwise, with `t` set to 0 or ±∞.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("each sample needs at least two values".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    if sa + sb == 0.0 {
        let dof = na + nb - 2.0;
        return Ok(if ma == mb {
            WelchResult { t: 0.0, dof, p: 1.0 }
        } else {
            WelchResult {
                t: f64::INFINITY.copysign(ma - mb),
                dof,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        dof,
        p: student_t_two_sided(t, dof),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};
    use statrs::function::{beta::beta_reg, gamma::ln_gamma as sr_ln_gamma};

    #[test]
    fn ln_gamma_matches_reference() {
        for x in [0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 55.5, 170.0] {
            assert!(
                (ln_gamma(x) - sr_ln_gamma(x)).abs() < 1e-10 * (1.0 + sr_ln_gamma(x).abs()),
                "x={x}"
            );
        }
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_matches_reference() {
        for &(a, b) in &[(0.5, 0.5), (1.0, 3.0), (4.0, 0.5), (12.5, 0.5), (30.0, 2.0)] {
            for i in 1..20 {
                let x = i as f64 / 20.0;
                assert!((regularized_incomplete_beta(a, b, x) - beta_reg(a, b, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_reference_pair() {
        // Reference values from scipy.stats.ttest_ind(equal_var=False).
        let r = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.dof - 8.0).abs() < 1e-12);
        assert!((r.p - 0.346_593_507_087_334_16).abs() < 1e-12);

        let r = welch_t_test(&[1.5, 2.25, 9.0, 4.0], &[0.1, 0.2, 0.25, 0.4, 0.3, 0.9]).unwrap();
        assert!((r.t - 2.263_814_621_785_052_3).abs() < 1e-12);
        assert!((r.dof - 3.028_265_804_430_295_5).abs() < 1e-10);
        assert!((r.p - 0.107_716_216_553_993_65).abs() < 1e-10);
    }

    #[test]
    fn identical_and_degenerate_samples() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = welch_t_test(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.p, 1.0);
        let r = welch_t_test(&[2.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t < 0.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 2..30)
    }

    proptest! {
        #[test]
        fn agrees_with_statrs(a in sample(), b in sample()) {
            let r = welch_t_test(&a, &b).unwrap();
            prop_assume!(r.dof.is_finite() && r.t.is_finite());
            let dist = StudentsT::new(0.0, 1.0, r.dof).unwrap();
            let p = 2.0 * dist.cdf(-r.t.abs());
            prop_assert!((r.p - p).abs() < 1e-6);
            prop_assert!(r.dof > 0.0 && (0.0..=1.0).contains(&r.p));
        }

        #[test]
        fn swapping_negates_t(a in sample(), b in sample()) {
            let ab = welch_t_test(&a, &b).unwrap();
            let ba = welch_t_test(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert_eq!(ab.p, ba.p);
            prop_assert_eq!(ab.dof, ba.dof);
        }
    }
}
