mod common;

use survref::fit_full::full_log_likelihood;
use survref::optimize::BfgsOptions;
use survref::{maximize_full, Dataset, EvalPath, SubjectRecord};

#[test]
fn gradient_matches_central_differences() {
    let (worst, _) = common::gradient_vs_central_differences(3, 20).unwrap();
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn score_vanishes_at_optimum() {
    for rep in 0..20 {
        let (data, design) = common::simulated_cohort("table1-weibull", 17, rep);
        let config = design.fit_config();
        let fit = maximize_full(&data, &config).unwrap();
        assert!(fit.converged);
        assert!(
            fit.gradient_norm < BfgsOptions::default().stall_gtol,
            "rep {rep}: gradient norm {}",
            fit.gradient_norm
        );
    }
}

#[test]
fn likelihood_ignores_record_order() {
    let (data, design) = common::simulated_cohort("table1-weibull", 23, 0);
    let mut reversed: Vec<SubjectRecord> = data.records().to_vec();
    reversed.reverse();
    let reversed = Dataset::new(reversed).unwrap();
    let a = full_log_likelihood(&design.truth, &design.truth_partition, &data, EvalPath::Auto).unwrap();
    let b = full_log_likelihood(&design.truth, &design.truth_partition, &reversed, EvalPath::Auto).unwrap();
    assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");

    let config = design.fit_config();
    let fa = maximize_full(&data, &config).unwrap();
    let fb = maximize_full(&reversed, &config).unwrap();
    for (x, y) in fa.natural.iter().zip(&fb.natural) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn fit_is_equivariant_to_time_units() {
    let (data, design) = common::simulated_cohort("table1-weibull", 29, 0);
    let c: f64 = 12.0;
    let scaled = Dataset::new(
        data.records()
            .iter()
            .map(|r| SubjectRecord {
                r: r.r * c,
                x: r.x * c,
                u: r.u * c,
                ..r.clone()
            })
            .collect(),
    )
    .unwrap();
    let config = design.fit_config();
    let base = maximize_full(&data, &config).unwrap();
    let months = maximize_full(&scaled, &config).unwrap();
    for (k, (a, b)) in base.natural.iter().zip(&months.natural).enumerate() {
        let expected = if k == 1 { a + c.ln() } else { *a };
        assert!((b - expected).abs() < 1e-6, "parameter {k}: {b} vs {expected}");
    }
    // Events contribute densities in both r and x, censored records in r only.
    let n_events = data.n_events() as f64;
    let jacobian = -(2.0 * n_events + (data.len() as f64 - n_events)) * c.ln();
    assert!((months.loglik - base.loglik - jacobian).abs() < 1e-6 * base.loglik.abs());
}
