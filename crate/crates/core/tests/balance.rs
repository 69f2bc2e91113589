use dosesens_core::balance::{balance_randomization_test, covariate_balance, write_balance_csv};
use dosesens_core::design::{CovariateTable, MatchedDesign, MatchedSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairs whose doses track the first covariate.
fn confounded(seed: u64, strength: f64) -> MatchedDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    let mut rows = Vec::new();
    for i in 0..200 {
        let mut doses = Vec::new();
        for _ in 0..2 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let noise: f64 = rng.random_range(-1.0..1.0);
            doses.push(strength * x + noise);
            rows.push(vec![Some(x), Some(rng.random::<f64>())]);
        }
        sets.push(MatchedSet::new(format!("s{i}"), doses, vec![0, 1]).unwrap());
    }
    let cov = CovariateTable { names: vec!["x".into(), "w".into()], rows };
    MatchedDesign::with_covariates(sets, Some(cov)).unwrap()
}

#[test]
fn detects_doses_that_follow_a_covariate() {
    let rejected = (0..40).filter(|&r| balance_randomization_test(&confounded(r, 1.0), 0.1, 500, r).unwrap().reject).count();
    assert!(rejected as f64 / 40.0 > 0.95, "{rejected}/40");
}

#[test]
fn balance_table_shows_the_imbalance() {
    let rows = covariate_balance(&confounded(1, 1.0)).unwrap();
    assert!(rows[0].smd_after.unwrap() > 0.5);
    assert!(rows[0].ks_p_after.unwrap() < 0.01);
    assert!(rows[1].smd_after.unwrap().abs() < 0.3);
    let mut buf = Vec::new();
    write_balance_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("confounder,below,above,smd_before,ks_p_before,low,high,smd_after,ks_p_after\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn missing_values_drop_the_covariate_from_the_fit() {
    let mut d = confounded(2, 1.0);
    d.covariates.as_mut().unwrap().rows[5][1] = None;
    let r = balance_randomization_test(&d, 0.1, 200, 3).unwrap();
    assert_eq!(r.used_covariates, vec!["x".to_string()]);
    assert_eq!(r.dropped_covariates, vec!["w".to_string()]);
    assert_eq!(covariate_balance(&d).unwrap()[1].missing, 1);
}
