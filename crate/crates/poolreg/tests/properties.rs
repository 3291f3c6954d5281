//! Property tests: plan validity and determinism over random inputs, sum
//! preservation through pooling, solver score and gradient identities, and
//! the deviance monotonicity of the damped Newton iteration.

mod common;

use proptest::prelude::*;

use poolreg::glm::{fit_traced, log_likelihood_at, DesignRow, FitOptions};
use poolreg::model::{evaluate_term, MicroRecord, ModelSpec, StudyMeta, Term};
use poolreg::num::sigmoid;
use poolreg::pooling::{aggregate_centralized, build_plan, PoolingError, SizePolicy};

fn ids(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i:04}")).collect()
}

fn policy_strategy() -> impl Strategy<Value = SizePolicy> {
    prop_oneof![
        (1usize..=6).prop_map(|g| SizePolicy::single(g)),
        (2usize..=5).prop_map(SizePolicy::auto),
        ((2usize..=4), (1usize..=3)).prop_map(|(s, d)| SizePolicy::Pair {
            small: s,
            large: s + d,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    /// Any plan the builder returns satisfies every plan invariant; any
    /// rejection is one of the declared error kinds.
    #[test]
    fn plans_are_valid_or_rejected_cleanly(
        n in 2usize..60,
        m in 2usize..80,
        policy in policy_strategy(),
        privacy in proptest::bool::ANY,
        seed in proptest::num::u64::ANY,
    ) {
        let case_ids = ids("c", n);
        let control_ids = ids("k", m);
        let meta = StudyMeta::new(n, m);
        match build_plan(&meta, &case_ids, &control_ids, &policy, privacy, seed) {
            Ok(plan) => {
                prop_assert!(plan.validate(&case_ids, &control_ids).is_ok());
                // Outcome purity and common representation are inside
                // validate(); the leftover bound is the planner's own.
                let largest = plan.largest_size().unwrap_or(1);
                prop_assert!(plan.leftovers.len() < 2 * largest.max(1));
                if privacy {
                    prop_assert!(plan.smallest_size().unwrap_or(2) >= 2);
                }
                // Determinism: byte-identical serialization on a re-run.
                let again = build_plan(&meta, &case_ids, &control_ids, &policy, privacy, seed)
                    .expect("same inputs build again");
                prop_assert_eq!(
                    serde_json::to_string(&plan).unwrap(),
                    serde_json::to_string(&again).unwrap()
                );
            }
            Err(PoolingError::InfeasibleSizes(_)) | Err(PoolingError::PrivacyViolation(_)) => {}
            Err(PoolingError::InvalidInput(_)) => {}
            Err(other) => prop_assert!(false, "unexpected error: {other}"),
        }
    }

    /// Total of pooled term values plus leftover individual values equals
    /// the total over all subjects, within quantization noise.
    #[test]
    fn pooling_preserves_sums(
        n in 2usize..40,
        m in 2usize..40,
        g in 1usize..5,
        seed in proptest::num::u64::ANY,
        values in proptest::collection::vec(-1000.0f64..1000.0, 80),
    ) {
        let case_ids = ids("c", n);
        let control_ids = ids("k", m);
        let mut records = Vec::new();
        for (i, id) in case_ids.iter().chain(&control_ids).enumerate() {
            let outcome = u8::from(i < n);
            records.push(MicroRecord::new(id.clone(), outcome, [("x", values[i % values.len()])]));
        }
        let meta = StudyMeta::new(n, m);
        let plan = match build_plan(&meta, &case_ids, &control_ids, &SizePolicy::single(g), false, seed) {
            Ok(plan) => plan,
            Err(_) => return Ok(()),
        };
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let rows = aggregate_centralized(&plan, &records, &spec).unwrap();
        let by_id: std::collections::BTreeMap<&str, &MicroRecord> =
            records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
        let pooled_total: f64 = rows.iter().map(|r| r.term_values[0]).sum();
        let leftover_total: f64 = plan
            .leftovers
            .iter()
            .map(|id| evaluate_term(&spec.terms[0], by_id[id.as_str()]).unwrap())
            .sum();
        let direct_total: f64 = records
            .iter()
            .map(|r| evaluate_term(&spec.terms[0], r).unwrap())
            .sum();
        let tol = 1e-9 * direct_total.abs().max(1.0);
        prop_assert!(((pooled_total + leftover_total) - direct_total).abs() <= tol);
    }

    /// At convergence the score vanishes: ||X^T (y - p)||_inf < tol.
    #[test]
    fn score_vanishes_at_convergence(
        seed in proptest::num::u64::ANY,
        n in 12usize..48,
        slope in -1.5f64..1.5,
    ) {
        let mut rng = poolreg::rng::stream(seed, 3);
        use rand::Rng;
        let rows: Vec<DesignRow> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-2.0..2.0);
                let offset: f64 = rng.random_range(-0.5..0.5);
                let p = sigmoid(0.3 + slope * x + offset);
                let y = u8::from(rng.random::<f64>() < p);
                DesignRow::new(y, vec![1.0, x], offset)
            })
            .collect();
        if !(rows.iter().any(|r| r.y == 1) && rows.iter().any(|r| r.y == 0)) {
            return Ok(());
        }
        let options = FitOptions::default();
        let fit = match fit_traced(&rows, vec!["b0".into(), "x".into()], &options) {
            Ok((fit, _)) => fit,
            Err(_) => return Ok(()), // separation on a tiny draw is legitimate
        };
        if !fit.converged {
            return Ok(());
        }
        let mut score = [0.0f64; 2];
        for row in &rows {
            let eta = row.offset + row.x[0] * fit.coefficients[0] + row.x[1] * fit.coefficients[1];
            let resid = f64::from(row.y) - sigmoid(eta);
            score[0] += row.x[0] * resid;
            score[1] += row.x[1] * resid;
        }
        prop_assert!(score[0].abs() < options.tol && score[1].abs() < options.tol,
            "score = {score:?}");
    }

    /// The analytic score matches central finite differences of the
    /// log-likelihood at random coefficient points.
    #[test]
    fn gradient_matches_finite_differences(
        seed in proptest::num::u64::ANY,
        beta0 in -1.0f64..1.0,
        beta1 in -1.0f64..1.0,
    ) {
        let mut rng = poolreg::rng::stream(seed, 4);
        use rand::Rng;
        let rows: Vec<DesignRow> = (0..25)
            .map(|_| {
                let x: f64 = rng.random_range(-2.0..2.0);
                let y = u8::from(rng.random::<f64>() < 0.4);
                DesignRow::new(y, vec![1.0, x], rng.random_range(-0.3..0.3))
            })
            .collect();
        let beta = [beta0, beta1];
        let mut analytic = [0.0f64; 2];
        for row in &rows {
            let eta = row.offset + row.x[0] * beta[0] + row.x[1] * beta[1];
            let resid = f64::from(row.y) - sigmoid(eta);
            analytic[0] += row.x[0] * resid;
            analytic[1] += row.x[1] * resid;
        }
        for j in 0..2 {
            let h = 1e-5 * beta[j].abs().max(1.0);
            let mut hi = beta;
            hi[j] += h;
            let mut lo = beta;
            lo[j] -= h;
            let fd = (log_likelihood_at(&rows, &hi).unwrap()
                - log_likelihood_at(&rows, &lo).unwrap())
                / (2.0 * h);
            let tol = 1e-6 * analytic[j].abs().max(1.0);
            prop_assert!((fd - analytic[j]).abs() <= tol,
                "component {j}: fd {fd} vs analytic {}", analytic[j]);
        }
    }
}

/// A pool of identical records with x = 1 has a log-term sum of exactly 0.
#[test]
fn log_term_of_unit_pool_is_exactly_zero() {
    for g in [1usize, 2, 5, 40] {
        let records: Vec<MicroRecord> = (0..g)
            .map(|i| MicroRecord::new(format!("s{i}"), 1, [("z1", 1.0)]))
            .collect();
        let controls: Vec<MicroRecord> = (0..g)
            .map(|i| MicroRecord::new(format!("t{i}"), 0, [("z1", 1.0)]))
            .collect();
        let case_ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        let control_ids: Vec<String> = controls.iter().map(|r| r.subject_id.clone()).collect();
        let all: Vec<MicroRecord> = records.into_iter().chain(controls).collect();
        let plan = build_plan(
            &StudyMeta::new(g, g),
            &case_ids,
            &control_ids,
            &SizePolicy::single(g),
            false,
            1,
        )
        .unwrap();
        let spec = ModelSpec::new(vec![Term::log("z1")]);
        let rows = aggregate_centralized(&plan, &all, &spec).unwrap();
        for row in rows {
            assert_eq!(row.term_values[0], 0.0);
        }
    }
}

/// Step-halving keeps the deviance non-increasing (up to documented
/// rounding noise) on random small datasets.
#[test]
fn deviance_is_non_increasing_across_iterations() {
    use rand::Rng;
    let mut failures = 0;
    for seed in 0..100u64 {
        let mut rng = poolreg::rng::stream(seed, 5);
        let n = rng.random_range(10..40);
        let rows: Vec<DesignRow> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-3.0..3.0);
                let z: f64 = rng.random_range(-1.0..1.0);
                let p = sigmoid(-0.2 + 0.8 * x - 0.5 * z);
                let y = u8::from(rng.random::<f64>() < p);
                DesignRow::new(y, vec![1.0, x, z], 0.0)
            })
            .collect();
        if !(rows.iter().any(|r| r.y == 1) && rows.iter().any(|r| r.y == 0)) {
            continue;
        }
        let traced = fit_traced(
            &rows,
            vec!["b0".into(), "x".into(), "z".into()],
            &FitOptions::default(),
        );
        let Ok((_, deviances)) = traced else {
            failures += 1; // separation: no deviance path to check
            continue;
        };
        for window in deviances.windows(2) {
            let slack = 1e-8 * window[0].abs().max(1.0);
            assert!(
                window[1] <= window[0] + slack,
                "seed {seed}: deviance rose {} -> {}",
                window[0],
                window[1]
            );
        }
    }
    assert!(failures < 50, "too many degenerate draws: {failures}");
}
