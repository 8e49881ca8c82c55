mod common;

use common::{cohens_d_oracle, same_sig, welch_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragtrace::mediation::{cohens_d, summarize, welch_t_test, MediationError, TTest};

#[test]
fn oracle_reproduces_known_values() {
    let (t, df, p) = welch_oracle(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!((t + 1.0).abs() < 1e-12);
    assert!((df - 8.0).abs() < 1e-12);
    assert!((p - 0.346_593_507_087_298_7).abs() < 1e-12);
}

#[test]
fn welch_and_cohens_d_match_oracle_on_random_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let na = rng.random_range(3..40);
        let nb = rng.random_range(3..40);
        let (ma, mb) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (sa, sb) = (rng.random_range(0.1..4.0), rng.random_range(0.1..4.0));
        let a: Vec<f64> = (0..na).map(|_| ma + sa * rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| mb + sb * rng.random_range(-1.0..1.0)).collect();
        let got = welch_t_test(&a, &b, TTest::Welch).unwrap();
        let (t, df, p) = welch_oracle(&a, &b);
        assert!(same_sig(got.t, t, 6), "t {} vs {t}", got.t);
        assert!(same_sig(got.df, df, 6), "df {} vs {df}", got.df);
        assert!(same_sig(got.p, p, 6), "p {} vs {p}", got.p);
        let d = cohens_d(&a, &b).unwrap();
        assert!(same_sig(d, cohens_d_oracle(&a, &b), 6));
    }
}

#[test]
fn cohens_d_textbook_example_is_exact() {
    assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), -1.0);
}

#[test]
fn degenerate_groups_are_reported() {
    assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0], TTest::Welch), Err(MediationError::Degenerate(_))));
    assert!(matches!(cohens_d(&[2.0, 2.0], &[2.0, 2.0]), Err(MediationError::Degenerate(_))));
    assert!(summarize("a", &[1.0, 1.0], "b", &[1.0, 1.0], TTest::Welch).is_err());
}

#[test]
fn summary_records_groups_in_order() {
    let s = summarize("x", &[1.0, 2.0, 3.0, 4.0], "y", &[5.0, 7.0, 9.0], TTest::Welch).unwrap();
    assert_eq!(s.groups, ["x".to_string(), "y".to_string()]);
    assert_eq!(s.sizes, [4, 3]);
    assert!(s.t < 0.0 && s.cohens_d < 0.0);
}
