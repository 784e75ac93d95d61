use serde::{Deserialize, Serialize};

use super::special::{ln_beta_reg, ln_chi2_sf_even, ln_one_minus_exp};
use crate::error::{Error, Result};

/// Outcome of the carrier/classifier cosine test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTestResult {
    pub per_class_cosines: Vec<f64>,
    pub per_class_log10p: Vec<f64>,
    pub combined_log10p: f64,
    pub effective_dim: usize,
}

fn check(c: f64, d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::invalid(format!(
            "dimension must be at least 2, got {d}"
        )));
    }
    if !(-1.0..=1.0).contains(&c) || c.is_nan() {
        return Err(Error::invalid(format!("cosine {c} outside [-1, 1]")));
    }
    Ok(())
}

/// Natural log of `P(cos >= c)` for a uniform random direction in `R^d`.
pub fn cosine_ln_pvalue(c: f64, d: usize) -> Result<f64> {
    check(c, d)?;
    Ok(ln_upper_tail(c, d))
}

fn ln_upper_tail(c: f64, d: usize) -> f64 {
    let a = (d as f64 - 1.0) / 2.0;
    if c >= 0.0 {
        // p = 1/2 * I_{1-c^2}((d-1)/2, 1/2); 1 - c^2 computed as (1-c)(1+c)
        let x = (1.0 - c) * (1.0 + c);
        -std::f64::consts::LN_2 + ln_beta_reg(a, 0.5, x)
    } else {
        ln_one_minus_exp(ln_upper_tail(-c, d))
    }
}

/// `P(cos >= c)` for the angle between a fixed vector and a uniform random unit vector in `R^d`.
pub fn cosine_pvalue(c: f64, d: usize) -> Result<f64> {
    cosine_ln_pvalue(c, d).map(f64::exp)
}

pub fn cosine_log10_pvalue(c: f64, d: usize) -> Result<f64> {
    cosine_ln_pvalue(c, d).map(|l| l / std::f64::consts::LN_10)
}

/// Fisher's method on natural-log p-values; returns the natural log of the combined p.
pub fn combine_ln_pvalues(ln_p: &[f64]) -> Result<f64> {
    if ln_p.is_empty() {
        return Err(Error::invalid("no p-values to combine"));
    }
    if let Some(bad) = ln_p.iter().find(|l| l.is_nan() || **l > 1e-12) {
        return Err(Error::invalid(format!(
            "log p-value {bad} is not a log-probability"
        )));
    }
    if ln_p.contains(&f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    // X = -2 sum ln p ~ chi2(2m); pass s = X / 2
    let s: f64 = -ln_p.iter().map(|l| l.min(0.0)).sum::<f64>();
    Ok(ln_chi2_sf_even(s, ln_p.len()))
}

/// Fisher's method: upper tail of chi-square with `2m` degrees of freedom at `-2 sum ln p`.
pub fn combine_pvalues(per_class_p: &[f64]) -> Result<f64> {
    if let Some(bad) = per_class_p.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::invalid(format!("p-value {bad} outside (0, 1]")));
    }
    let ln_p: Vec<f64> = per_class_p.iter().map(|p| p.ln()).collect();
    combine_ln_pvalues(&ln_p).map(f64::exp)
}

/// Runs the per-class cosine test at dimension `d` and combines the classes.
pub fn cosine_hypothesis_test(cosines: &[f64], d: usize) -> Result<HypothesisTestResult> {
    let ln_p = cosines
        .iter()
        .map(|&c| cosine_ln_pvalue(c, d))
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_ln_pvalues(&ln_p)?;
    let ln10 = std::f64::consts::LN_10;
    Ok(HypothesisTestResult {
        per_class_cosines: cosines.to_vec(),
        per_class_log10p: ln_p.iter().map(|l| l / ln10).collect(),
        combined_log10p: combined / ln10,
        effective_dim: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_cosine_is_one_half() {
        for d in [2, 3, 8, 64, 512, 4096] {
            assert!((cosine_pvalue(0.0, d).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn low_dimensional_closed_forms() {
        assert!((cosine_pvalue(0.5, 3).unwrap() - 0.25).abs() < 1e-12);
        let c = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine_pvalue(c, 2).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn boundaries_and_errors() {
        assert_eq!(cosine_pvalue(1.0, 64).unwrap(), 0.0);
        assert!((cosine_pvalue(-1.0, 64).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_pvalue(1.5, 64).is_err());
        assert!(cosine_pvalue(0.1, 1).is_err());
    }

    #[test]
    fn extreme_cosines_have_finite_log10p() {
        let l = cosine_log10_pvalue(0.999, 512).unwrap();
        assert!(l.is_finite() && l < -300.0, "{l}");
    }

    #[test]
    fn fisher_examples() {
        assert!((combine_pvalues(&[0.05]).unwrap() - 0.05).abs() < 1e-12);
        assert!((combine_pvalues(&[1.0, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // X = -2 (ln .05 + ln .05) = 11.98; chi2(4) sf = e^{-X/2} (1 + X/2)
        let x: f64 = -2.0 * 2.0 * 0.05f64.ln();
        let expect = (-x / 2.0).exp() * (1.0 + x / 2.0);
        let got = combine_pvalues(&[0.05, 0.05]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.017479).abs() < 1e-6, "{got}");
        assert!(combine_pvalues(&[0.0, 0.5]).is_err());
        assert!(combine_pvalues(&[]).is_err());
    }

    proptest! {
        #[test]
        fn tails_are_complementary(c in -1.0f64..=1.0, d in 2usize..600) {
            let s = cosine_pvalue(c, d).unwrap() + cosine_pvalue(-c, d).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }

        #[test]
        fn pvalue_non_increasing_in_cosine(c in -0.99f64..0.99, dc in 0.0f64..0.01, d in 2usize..600) {
            let a = cosine_pvalue(c, d).unwrap();
            let b = cosine_pvalue(c + dc, d).unwrap();
            prop_assert!(b <= a + 1e-12);
        }
    }
}
