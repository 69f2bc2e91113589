//! End-to-end acceptance checks. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{all_tables, grid_points, join, key, meet, permutations, stat_law, table_law, tail, TableKey, TableStat};
use dosesens_core::assignment::SensitivityParameter;
use dosesens_core::attributable::{
    all_candidates, separability_test, test_tae_bnb, test_tae_enumeration, BnbMode, Decision, Sidedness,
    StratumCandidate, TaeInstance,
};
use dosesens_core::balance::balance_randomization_test;
use dosesens_core::design::{CovariateTable, MatchedDesign, MatchedSet};
use dosesens_core::design_sensitivity::{simulate_power, solve_design_sensitivity};
use dosesens_core::dgp::{sample_dgp, DgpSpec, DoseLaw, OutcomeCurve};
use dosesens_core::hardness::verify_counterexample;
use dosesens_core::sharp_null::{
    exact_tail, upper_normal_tail, worst_case_p_enumeration, worst_case_p_exact_mc, worst_case_p_normal, CubeSearch,
    ScoreModel,
};
use dosesens_core::statistic::{Statistic, StatisticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// Agreement flag, enumeration rejections and logged disagreements for one instance.
type InstanceCheck = Result<(bool, usize, Vec<String>), String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed.as_secs() < limit_s, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 1. Interior maximizer of the cube problem

fn counterexample() -> Outcome {
    let start = Instant::now();
    let r = verify_counterexample(2.0, CubeSearch::default()).map_err(|e| e.to_string())?;
    let u = &r.u_star;
    check(u.len() == 5, "u* must have five coordinates")?;
    check((u[2] - 0.9483617).abs() <= 1e-3, format!("u3* = {}", u[2]))?;
    check(u[0] <= 1e-6 && u[1] <= 1e-6, format!("u1*, u2* = {}, {}", u[0], u[1]))?;
    check(u[3] >= 1.0 - 1e-6 && u[4] >= 1.0 - 1e-6, format!("u4*, u5* = {}, {}", u[3], u[4]))?;
    check(r.corner_gap > 0.0, format!("gap over the corners is {:e}", r.corner_gap))?;
    within(start.elapsed(), 30)?;
    Ok(format!(
        "u3* = {:.7}, p(u*) = {:.6}, best corner {:.6}, gap {:.2e}, {:.1}s",
        u[2],
        r.p_at_u_star,
        r.best_corner_p,
        r.corner_gap,
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2 and 3. Lattice dominance on small designs

const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const STATS: [TableStat; 3] = [TableStat::Sum, TableStat::Count(0.5), TableStat::WithinRank];

fn small_designs(seed: u64) -> Vec<(MatchedDesign, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50)
        .map(|_| {
            let d = common::random_design(&mut rng, 3, 4, 8);
            let gamma = rng.random_range(0.0..3.0);
            (d, gamma)
        })
        .collect()
}

/// Per-set table laws for every grid allocation of the set's units.
fn grid_laws(set: &MatchedSet, gamma: f64) -> Vec<(Vec<f64>, BTreeMap<TableKey, f64>)> {
    grid_points(&GRID, set.len())
        .into_iter()
        .map(|u| {
            let law = table_law(set, &u, gamma);
            (u, law)
        })
        .collect()
}

fn upper_u(set: &MatchedSet) -> Vec<f64> {
    set.outcomes.iter().map(|&r| f64::from(r)).collect()
}

fn dominance() -> Outcome {
    let start = Instant::now();
    let designs = small_designs(2);
    let checked: Vec<Result<usize, String>> = designs
        .par_iter()
        .enumerate()
        .map(|(idx, (d, gamma))| {
            let per_set: Vec<_> = d.sets.iter().map(|s| grid_laws(s, *gamma)).collect();
            let plus: Vec<BTreeMap<TableKey, f64>> = d.sets.iter().map(|s| table_law(s, &upper_u(s), *gamma)).collect();
            let gp = SensitivityParameter::new(*gamma).unwrap();
            let mut count = 0usize;
            for stat in STATS {
                let plus_refs: Vec<&BTreeMap<TableKey, f64>> = plus.iter().collect();
                let plus_law = stat_law(d, &plus_refs, stat);
                let mut support: Vec<f64> = plus_law.iter().map(|(v, _)| *v).collect();
                support.sort_by(f64::total_cmp);
                support.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                let plus_tails: Vec<f64> = support.iter().map(|&t| tail(&plus_law, t)).collect();

                // The library's exact tail at u⁺ agrees with the oracle.
                if let TableStat::Sum = stat {
                    let model = ScoreModel::statistic(&StatisticSpec::perm_t(), d);
                    for (&t, &p) in support.iter().zip(&plus_tails) {
                        let lib = exact_tail(d, &model, &gp, &d.outcome_vector(), t).unwrap();
                        if (lib - p).abs() > 1e-12 {
                            return Err(format!("design {idx}: library tail {lib} vs oracle {p} at t = {t}"));
                        }
                    }
                }

                // Odometer over the per-set grid allocations.
                let sizes: Vec<usize> = per_set.iter().map(Vec::len).collect();
                let total: usize = sizes.iter().product();
                for code in 0..total {
                    let mut c = code;
                    let laws: Vec<&BTreeMap<TableKey, f64>> = per_set
                        .iter()
                        .zip(&sizes)
                        .map(|(grid, &k)| {
                            let l = &grid[c % k].1;
                            c /= k;
                            l
                        })
                        .collect();
                    let law = stat_law(d, &laws, stat);
                    for (&t, &pp) in support.iter().zip(&plus_tails) {
                        let pu = tail(&law, t);
                        if pu > pp + 1e-12 {
                            return Err(format!("design {idx}: pr_u(T >= {t}) = {pu} exceeds {pp}"));
                        }
                    }
                    count += 1;
                }
            }
            Ok(count)
        })
        .collect();
    let mut allocations = 0;
    for r in checked {
        allocations += r?;
    }
    within(start.elapsed(), 300)?;
    Ok(format!(
        "50 designs, {allocations} (allocation, statistic) pairs, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn holley_pairs(
    tables: &[Vec<f64>],
    p_plus: &dyn Fn(&[f64]) -> f64,
    p_u: &dyn Fn(&[f64]) -> f64,
) -> Option<String> {
    for a in tables {
        for b in tables {
            let lhs = p_plus(&join(a, b)) * p_u(&meet(a, b));
            let rhs = p_plus(a) * p_u(b);
            if lhs < rhs - 1e-12 {
                return Some(format!("{lhs} < {rhs} for {a:?}, {b:?}"));
            }
        }
    }
    None
}

fn holley() -> Outcome {
    let start = Instant::now();
    let designs = small_designs(3);
    let results: Vec<Result<(usize, usize), String>> = designs
        .par_iter()
        .enumerate()
        .map(|(idx, (d, gamma))| {
            let mut per_stratum = 0usize;
            let mut tables_by_set = Vec::new();
            let mut plus_by_set = Vec::new();
            for set in &d.sets {
                let m = set.outcomes.iter().filter(|&&r| r == 1).count();
                let tables = all_tables(&set.doses, m);
                let plus = table_law(set, &upper_u(set), *gamma);
                for (_, law) in grid_laws(set, *gamma) {
                    let pp = |s: &[f64]| plus.get(&key(s)).copied().unwrap_or(0.0);
                    let pu = |s: &[f64]| law.get(&key(s)).copied().unwrap_or(0.0);
                    if let Some(msg) = holley_pairs(&tables, &pp, &pu) {
                        return Err(format!("design {idx}, set {}: {msg}", set.id));
                    }
                    per_stratum += 1;
                }
                tables_by_set.push(tables);
                plus_by_set.push(plus);
            }

            // Joint tables are concatenations of per-set tables; the lattice
            // operations act set by set.
            let lens: Vec<usize> = d.sets.iter().map(|s| s.outcomes.iter().filter(|&&r| r == 1).count()).collect();
            let mut joint: Vec<Vec<f64>> = vec![Vec::new()];
            for ts in &tables_by_set {
                joint = joint.iter().flat_map(|p| ts.iter().map(move |t| [p.clone(), t.clone()].concat())).collect();
            }
            let split = |s: &[f64]| -> Vec<Vec<f64>> {
                let mut out = Vec::new();
                let mut at = 0;
                for &l in &lens {
                    out.push(s[at..at + l].to_vec());
                    at += l;
                }
                out
            };
            let n = d.num_units();
            let allocations: Vec<Vec<f64>> = if n <= 6 {
                grid_points(&GRID, n)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + idx as u64);
                (0..300).map(|_| (0..n).map(|_| GRID[rng.random_range(0..GRID.len())]).collect()).collect()
            };
            let offsets = d.offsets();
            for u in &allocations {
                let laws: Vec<BTreeMap<TableKey, f64>> = d
                    .sets
                    .iter()
                    .enumerate()
                    .map(|(i, s)| table_law(s, &u[offsets[i]..offsets[i] + s.len()], *gamma))
                    .collect();
                let prob = |ls: &[BTreeMap<TableKey, f64>], s: &[f64]| -> f64 {
                    split(s).iter().zip(ls).map(|(part, l)| l.get(&key(part)).copied().unwrap_or(0.0)).product()
                };
                let pp = |s: &[f64]| prob(&plus_by_set, s);
                let pu = |s: &[f64]| prob(&laws, s);
                if let Some(msg) = holley_pairs(&joint, &pp, &pu) {
                    return Err(format!("design {idx}, joint: {msg}"));
                }
            }
            Ok((per_stratum, allocations.len()))
        })
        .collect();
    let (mut strata, mut joint) = (0, 0);
    for r in results {
        let (a, b) = r?;
        strata += a;
        joint += b;
    }
    Ok(format!(
        "{strata} per-set and {joint} joint allocations, all table pairs, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4. Normal approximation against exact Monte Carlo

fn normal_accuracy() -> Outcome {
    let start = Instant::now();
    let dgp = DgpSpec::new(OutcomeCurve::Power(2.0), 1.5, 0.0, DoseLaw::Uniform).unwrap();
    let design = sample_dgp(&dgp, 500, 4).map_err(|e| e.to_string())?;
    let spec = StatisticSpec::perm_t();
    let mut parts = Vec::new();
    for gamma in [0.0, 0.5, 1.0] {
        let gp = SensitivityParameter::new(gamma).unwrap();
        let n = worst_case_p_normal(&design, &spec, &gp).map_err(|e| e.to_string())?.p_worst;
        let mc = worst_case_p_exact_mc(&design, &spec, &gp, 100_000, 7).map_err(|e| e.to_string())?.p_worst;
        check((n - mc).abs() <= 0.02, format!("gamma {gamma}: normal {n:.4} vs Monte Carlo {mc:.4}"))?;
        parts.push(format!("g={gamma}: {n:.4}/{mc:.4}"));
    }
    within(start.elapsed(), 120)?;
    Ok(format!("{} (normal/MC), {:.1}s", parts.join(", "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 5. Design sensitivity values

fn design_sensitivity() -> Outcome {
    let start = Instant::now();
    let unif = DgpSpec::new(OutcomeCurve::Power(0.25), 1.5, 0.0, DoseLaw::Uniform).unwrap();
    let beta = DgpSpec::new(OutcomeCurve::Power(4.0), 1.5, 0.0, DoseLaw::Beta(2.0, 2.0)).unwrap();
    let cases = [
        ("z^0.25 Unif perm_t", &unif, StatisticSpec::perm_t(), 2.17),
        ("z^0.25 Unif threshold 0.1", &unif, StatisticSpec::threshold(0.1), 3.16),
        ("z^4 Beta(2,2) perm_t", &beta, StatisticSpec::perm_t(), 2.85),
    ];
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (name, dgp, spec, target) in cases {
        let r = solve_design_sensitivity(dgp, &spec, 100_000, 1e-2, 5).map_err(|e| e.to_string())?;
        let g = r.big_gamma_tilde;
        if (g - target).abs() > 0.15 {
            failures.push(format!("{name}: {g:.3} vs {target}"));
        }
        parts.push(format!("{name} {g:.3} (target {target})"));
    }
    check(failures.is_empty(), failures.join("; "))?;
    within(start.elapsed(), 600)?;
    Ok(format!("{}, {:.1}s", parts.join(", "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 6. Power comparison at reduced scale

fn power() -> Outcome {
    let start = Instant::now();
    let dgp = DgpSpec::new(OutcomeCurve::Power(0.25), 1.5, 0.0, DoseLaw::Uniform).unwrap();
    let gamma = 2.25f64.ln();
    let thr = simulate_power(&dgp, &Statistic::Single(StatisticSpec::threshold(0.1)), gamma, 2000, 0.05, 200, 6)
        .map_err(|e| e.to_string())?;
    let lin = simulate_power(&dgp, &Statistic::Single(StatisticSpec::perm_t()), gamma, 2000, 0.05, 200, 6)
        .map_err(|e| e.to_string())?;
    let se = (thr.se.powi(2) + lin.se.powi(2)).sqrt();
    let diff = thr.power - lin.power;
    check(diff > 3.0 * se, format!("threshold {:.3} vs linear {:.3}, difference {diff:.3}, se {se:.3}", thr.power, lin.power))?;
    within(start.elapsed(), 900)?;
    Ok(format!(
        "power threshold {:.3} vs linear {:.3}, difference {:.1} se, {:.1}s",
        thr.power,
        lin.power,
        diff / se.max(f64::MIN_POSITIVE),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 7. Branch and bound against enumeration

fn tae_design(rng: &mut ChaCha8Rng, max_sets: usize, max_n: usize) -> MatchedDesign {
    let num = rng.random_range(1..=max_sets);
    let sets = (0..num)
        .map(|i| {
            let n = rng.random_range(2..=max_n);
            let doses = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(0.0..3.0) }).collect();
            let outcomes = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
            MatchedSet::new(format!("s{i}"), doses, outcomes).unwrap()
        })
        .collect();
    MatchedDesign::new(sets).unwrap()
}

fn tae_instance(rng: &mut ChaCha8Rng) -> TaeInstance {
    let gamma = rng.random_range(0.0..2.0);
    let alpha = [0.05, 0.1, 0.2][rng.random_range(0..3)];
    TaeInstance::new(1.0, 0.0, alpha, SensitivityParameter::new(gamma).unwrap()).unwrap()
}

fn selections(cands: &[Vec<StratumCandidate>]) -> u128 {
    cands.iter().map(|c| c.len() as u128).product()
}

fn solver_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut instances = Vec::new();
    while instances.len() < 100 {
        let d = tae_design(&mut rng, 7, 4);
        let inst = tae_instance(&mut rng);
        if selections(&all_candidates(&d, &inst).unwrap()) <= 10_000 {
            instances.push((d, inst));
        }
    }
    let results: Vec<Result<(usize, usize), String>> = instances
        .par_iter()
        .enumerate()
        .map(|(k, (d, inst))| {
            let (mut tests, mut rejections) = (0, 0);
            for delta in 0..=inst.observed_count(d) {
                let e = test_tae_enumeration(d, inst, delta).map_err(|e| e.to_string())?;
                let b = test_tae_bnb(d, inst, delta, BnbMode::Exact).map_err(|e| e.to_string())?;
                let r = test_tae_bnb(d, inst, delta, BnbMode::Relaxed).map_err(|e| e.to_string())?;
                if e.decision != b.decision {
                    return Err(format!("instance {k}, delta {delta}: enumeration {:?}, bnb {:?}", e.decision, b.decision));
                }
                if e.accepted() && r.decision == Decision::Reject {
                    return Err(format!("instance {k}, delta {delta}: relaxed mode rejected"));
                }
                tests += 1;
                rejections += usize::from(!e.accepted());
            }
            Ok((tests, rejections))
        })
        .collect();
    let (mut tests, mut rejections) = (0, 0);
    for r in results {
        let (t, j) = r?;
        tests += t;
        rejections += j;
    }
    within(start.elapsed(), 600)?;
    Ok(format!("100 instances, {tests} hypotheses ({rejections} rejected), {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 8. Greedy separability test against enumeration

/// Sets with exactly one unit dosed above the threshold, so each set's pivot is
/// 0 or 1.
fn binary_contribution_design(rng: &mut ChaCha8Rng) -> MatchedDesign {
    let num = rng.random_range(2..=12);
    let sets = (0..num)
        .map(|i| {
            let n = rng.random_range(2..=3);
            let mut doses = vec![rng.random_range(0.5..1.0)];
            let mut outcomes = vec![u8::from(rng.random::<f64>() < 0.7)];
            for _ in 1..n {
                doses.push(if rng.random::<f64>() < 0.6 { rng.random_range(0.0..0.2) } else { rng.random_range(0.2..0.5) });
                outcomes.push(u8::from(rng.random::<f64>() < 0.25));
            }
            MatchedSet::new(format!("s{i}"), doses, outcomes).unwrap()
        })
        .collect();
    MatchedDesign::new(sets).unwrap()
}

/// Standardized excess `(k − Σ E) / √Σ V` of a selection; negative values and
/// zero variance with `k ≤ Σ E` are always accepted.
fn excess(cands: &[Vec<StratumCandidate>], choice: &[usize], k: f64) -> f64 {
    let (e, v) = choice.iter().enumerate().fold((0.0, 0.0), |(e, v), (i, &c)| (e + cands[i][c].e_upp, v + cands[i][c].v_upp));
    if k <= e {
        f64::NEG_INFINITY
    } else if v > 0.0 {
        (k - e) / v.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Smallest excess over selections with pivot total `k`.
fn best_excess(cands: &[Vec<StratumCandidate>], k: i64) -> f64 {
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; cands.len()];
    let total: usize = cands.iter().map(Vec::len).product();
    for code in 0..total {
        let mut c = code;
        for (i, cs) in cands.iter().enumerate() {
            choice[i] = c % cs.len();
            c /= cs.len();
        }
        let t: i64 = choice.iter().enumerate().map(|(i, &c)| cands[i][c].t).sum();
        if t == k {
            best = best.min(excess(cands, &choice, k as f64));
        }
    }
    best
}

fn separability() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut instances = Vec::new();
    while instances.len() < 100 {
        let d = binary_contribution_design(&mut rng);
        let gamma = rng.random_range(0.0..1.5);
        let inst = TaeInstance::new(0.5, 0.2, 0.05, SensitivityParameter::new(gamma).unwrap())
            .unwrap()
            .with_sidedness(Sidedness::Upper);
        if selections(&all_candidates(&d, &inst).unwrap()) <= 200_000 {
            instances.push((d, inst));
        }
    }
    let results: Vec<InstanceCheck> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, (d, inst))| {
            let cands = all_candidates(d, inst).map_err(|e| e.to_string())?;
            let obs = inst.observed_count(d);
            let mut agree = true;
            let mut rejections = 0;
            let mut log = Vec::new();
            for a in 0..=obs {
                let e = test_tae_enumeration(d, inst, a).map_err(|e| e.to_string())?;
                let g = separability_test(d, inst, a).map_err(|e| e.to_string())?;
                rejections += usize::from(!e.accepted());
                if e.decision == g.decision {
                    continue;
                }
                agree = false;
                let k = obs - a;
                let witness = g.witness.clone().unwrap_or_default();
                let greedy = if witness.is_empty() { f64::NAN } else { excess(&cands, &witness, k as f64) };
                let optimum = best_excess(&cands, k);
                let matches = greedy == optimum || (greedy - optimum).abs() <= 1e-9;
                log.push(format!(
                    "instance {idx}, a = {a}: enumeration {:?}, greedy {:?}, greedy excess {greedy:.4}, optimum {optimum:.4}{}",
                    e.decision,
                    g.decision,
                    if matches { " (greedy optimal)" } else { "" }
                ));
                if matches {
                    return Err(format!("disagreement with an optimal greedy allocation: {}", log.last().unwrap()));
                }
            }
            Ok((agree, rejections, log))
        })
        .collect();
    let (mut agreeing, mut rejections) = (0, 0);
    for r in results {
        let (agree, rejected, log) = r?;
        agreeing += usize::from(agree);
        rejections += rejected;
        for line in log {
            println!("    separability disagreement: {line}");
        }
    }
    check(agreeing >= 95, format!("{agreeing}/100 instances agree"))?;
    Ok(format!(
        "{agreeing}/100 instances agree on every hypothesis ({rejections} enumeration rejections), {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 9. Balance test calibration

fn null_balance_design(seed: u64) -> MatchedDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    let mut rows = Vec::new();
    for i in 0..200 {
        let n = if rng.random::<f64>() < 0.8 { 2 } else { 3 };
        let shift: f64 = rng.random_range(-1.0..1.0);
        let doses = (0..n).map(|_| rng.random::<f64>()).collect();
        for _ in 0..n {
            rows.push(vec![
                Some(shift + rng.random::<f64>()),
                Some(f64::from(u8::from(rng.random::<f64>() < 0.4))),
                Some(shift * 2.0 + rng.random_range(-1.0..1.0)),
            ]);
        }
        sets.push(MatchedSet::new(format!("s{i}"), doses, vec![0; n]).unwrap());
    }
    let cov = CovariateTable { names: vec!["x1".into(), "x2".into(), "x3".into()], rows };
    MatchedDesign::with_covariates(sets, Some(cov)).unwrap()
}

fn balance_calibration() -> Outcome {
    let start = Instant::now();
    let alpha = 0.1;
    let reps = 1000u64;
    let rejected: usize = (0..reps)
        .into_par_iter()
        .map(|r| {
            let d = null_balance_design(90_000 + r);
            usize::from(balance_randomization_test(&d, alpha, 1000, r).unwrap().reject)
        })
        .sum();
    let rate = rejected as f64 / reps as f64;
    check((rate - alpha).abs() <= 0.02, format!("type-I error {rate:.3}"))?;
    Ok(format!("type-I error {rate:.3} at alpha {alpha}, {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 10. No bias reduces to randomization inference

/// Uniform-permutation mean and variance of `Σ_j m(z_π(j)) w_j`.
fn uniform_moments(doses: &[f64], w: &[f64], m: impl Fn(f64) -> f64) -> (f64, f64) {
    let perms = permutations(doses.len());
    let vals: Vec<f64> = perms.iter().map(|p| p.iter().zip(w).map(|(&d, wj)| m(doses[d]) * wj).sum()).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

/// Randomization test of `TAE = Δ` at `Γ = 1`, from first principles.
fn plain_tae_accepts(d: &MatchedDesign, c: f64, eps: f64, z: f64, delta: i64) -> bool {
    let observed: i64 =
        d.sets.iter().map(|s| s.doses.iter().zip(&s.outcomes).filter(|(&x, &r)| x > c && r == 1).count() as i64).sum();
    // (pivot, mean, variance) per compatible reference pattern, per set
    let per_set: Vec<Vec<(i64, f64, f64)>> = d
        .sets
        .iter()
        .map(|s| {
            let free: Vec<usize> = (0..s.len()).filter(|&j| s.doses[j] > eps && s.outcomes[j] == 1).collect();
            (0..1usize << free.len())
                .map(|mask| {
                    let mut r0: Vec<f64> =
                        (0..s.len()).map(|j| if s.doses[j] <= eps { f64::from(s.outcomes[j]) } else { 0.0 }).collect();
                    for (b, &j) in free.iter().enumerate() {
                        r0[j] = ((mask >> b) & 1) as f64;
                    }
                    let t = (0..s.len()).filter(|&j| s.doses[j] > c && r0[j] == 1.0).count() as i64;
                    let (e, v) = uniform_moments(&s.doses, &r0, |x| f64::from(u8::from(x > c)));
                    (t, e, v)
                })
                .collect()
        })
        .collect();
    let target = observed - delta;
    let mut acc: HashMap<i64, Vec<(f64, f64)>> = HashMap::from([(0, vec![(0.0, 0.0)])]);
    for cs in &per_set {
        let mut next: HashMap<i64, Vec<(f64, f64)>> = HashMap::new();
        for (t, list) in &acc {
            for &(ct, ce, cv) in cs {
                let entry = next.entry(t + ct).or_default();
                entry.extend(list.iter().map(|&(e, v)| (e + ce, v + cv)));
            }
        }
        acc = next;
    }
    acc.get(&target).is_some_and(|list| {
        list.iter().any(|&(e, v)| {
            let dev = (target as f64 - e).abs();
            dev < 1e-9 || dev < z * v.sqrt()
        })
    })
}

fn no_bias_reduction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gp = SensitivityParameter::new(0.0).unwrap();
    let spec = StatisticSpec::perm_t();
    let mut max_mc_dev = 0.0f64;
    for k in 0..20 {
        let d = common::random_design(&mut rng, 4, 4, 12);
        // plain randomization law: all dose permutations equally likely
        let laws: Vec<BTreeMap<TableKey, f64>> = d.sets.iter().map(|s| table_law(s, &vec![0.0; s.len()], 0.0)).collect();
        let refs: Vec<&BTreeMap<TableKey, f64>> = laws.iter().collect();
        let law = stat_law(&d, &refs, TableStat::Sum);
        let t_obs: f64 = d.sets.iter().map(|s| s.doses.iter().zip(&s.outcomes).map(|(z, &r)| z * f64::from(r)).sum::<f64>()).sum();
        let p_plain = tail(&law, t_obs);
        let mean: f64 = law.iter().map(|(v, p)| v * p).sum();
        let var: f64 = law.iter().map(|(v, p)| (v - mean).powi(2) * p).sum();

        let enumerated = worst_case_p_enumeration(&d, &spec, &gp).map_err(|e| e.to_string())?.p_worst;
        check((enumerated - p_plain).abs() < 1e-12, format!("design {k}: enumeration {enumerated} vs {p_plain}"))?;
        let normal = worst_case_p_normal(&d, &spec, &gp).map_err(|e| e.to_string())?;
        let (me, ve) = normal.moments.unwrap();
        check((me - mean).abs() < 1e-9 && (ve - var).abs() < 1e-9, format!("design {k}: moments ({me}, {ve}) vs ({mean}, {var})"))?;
        if var > 1e-12 {
            let expected = upper_normal_tail((t_obs - mean) / var.sqrt());
            check((normal.p_worst - expected).abs() < 1e-9, format!("design {k}: normal {} vs {expected}", normal.p_worst))?;
        }
        let reps = 20_000;
        let mc = worst_case_p_exact_mc(&d, &spec, &gp, reps, k).map_err(|e| e.to_string())?.p_worst;
        let se = (p_plain * (1.0 - p_plain) / reps as f64).sqrt();
        let dev = (mc - p_plain).abs();
        check(dev <= 4.0 * se + 1.0 / (reps as f64 + 1.0), format!("design {k}: Monte Carlo {mc} vs {p_plain}"))?;
        max_mc_dev = max_mc_dev.max(dev);
    }

    let mut tae_tests = 0;
    for k in 0..20 {
        let d = tae_design(&mut rng, 5, 3);
        let inst = TaeInstance::new(1.0, 0.0, 0.1, gp.clone()).unwrap();
        for delta in 0..=inst.observed_count(&d) {
            let plain = plain_tae_accepts(&d, inst.threshold, inst.eps, inst.z(), delta);
            let e = test_tae_enumeration(&d, &inst, delta).map_err(|e| e.to_string())?;
            let b = test_tae_bnb(&d, &inst, delta, BnbMode::Exact).map_err(|e| e.to_string())?;
            check(e.accepted() == plain, format!("design {k}, delta {delta}: enumeration {:?}, plain accepts {plain}", e.decision))?;
            check(b.decision == e.decision, format!("design {k}, delta {delta}: branch and bound {:?}", b.decision))?;
            tae_tests += 1;
        }
    }
    Ok(format!(
        "20 designs for p-values (largest Monte Carlo deviation {max_mc_dev:.4}), {tae_tests} TAE hypotheses, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("interior maximizer of the cube problem", counterexample),
        ("u+ dominates every grid allocation", dominance),
        ("four-term lattice inequality", holley),
        ("normal approximation accuracy", normal_accuracy),
        ("design sensitivity values", design_sensitivity),
        ("threshold statistic outpowers the linear one", power),
        ("branch and bound equals enumeration", solver_equivalence),
        ("greedy separability agrees with enumeration", separability),
        ("balance test calibration", balance_calibration),
        ("no bias reduces to randomization inference", no_bias_reduction),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {label}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {label}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
