use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{MediationError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTest {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Classic pooled-variance two-sample test.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n − 1) variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn check_sizes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MediationError::Degenerate(format!(
            "groups need at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MediationError::Degenerate("non-finite value in a group".into()));
    }
    Ok(())
}

fn pooled_variance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    ((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0)
}

pub fn welch_t_test(a: &[f64], b: &[f64], test: TTest) -> Result<TTestResult> {
    check_sizes(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let diff = mean(a) - mean(b);
    let (t, df) = match test {
        TTest::Welch => {
            if va == 0.0 && vb == 0.0 {
                return Err(MediationError::Degenerate("both groups have zero variance".into()));
            }
            let (sa, sb) = (va / na, vb / nb);
            let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
            (diff / (sa + sb).sqrt(), df)
        }
        TTest::Student => {
            let sp2 = pooled_variance(a, b);
            if sp2 == 0.0 {
                return Err(MediationError::Degenerate("pooled variance is zero".into()));
            }
            (diff / (sp2 * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
        }
    };
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| MediationError::Degenerate(format!("t distribution with df {df}: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p })
}

/// Standardized mean difference with the n − 1 pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sizes(a, b)?;
    let sp2 = pooled_variance(a, b);
    if sp2 == 0.0 {
        return Err(MediationError::Degenerate("pooled variance is zero".into()));
    }
    Ok((mean(a) - mean(b)) / sp2.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub groups: [String; 2],
    pub sizes: [usize; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub test: TTest,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub cohens_d: f64,
}

pub fn summarize(label_a: &str, a: &[f64], label_b: &str, b: &[f64], test: TTest) -> Result<StatsSummary> {
    let r = welch_t_test(a, b, test)?;
    Ok(StatsSummary {
        groups: [label_a.into(), label_b.into()],
        sizes: [a.len(), b.len()],
        means: [mean(a), mean(b)],
        variances: [sample_variance(a), sample_variance(b)],
        test,
        t: r.t,
        df: r.df,
        p: r.p,
        cohens_d: cohens_d(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_welch_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = welch_t_test(&a, &b, TTest::Welch).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        assert!((r.p - 0.3466).abs() < 1e-3, "p {}", r.p);
        let s = welch_t_test(&b, &a, TTest::Welch).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn identical_groups() {
        let a = [1.0, 4.0, 2.0];
        let r = welch_t_test(&a, &a, TTest::Welch).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cohens_d_hand_case() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), -1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            welch_t_test(&[1.0, 1.0], &[2.0, 2.0], TTest::Welch),
            Err(MediationError::Degenerate(_))
        ));
        assert!(cohens_d(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0], &[2.0, 3.0], TTest::Welch).is_err());
    }

    #[test]
    fn student_variant_uses_pooled_df() {
        let r = welch_t_test(&[1.0, 2.0, 3.0, 9.0], &[2.0, 3.0], TTest::Student).unwrap();
        assert_eq!(r.df, 4.0);
    }
}
