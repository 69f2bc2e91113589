//! Covariate balance of a matched design: standardized mean differences and
//! two-sample Kolmogorov–Smirnov tests between low- and high-dose units, and a
//! cross-fitted randomization test of uniform dose assignment.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::MatchedDesign;
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::sharp_null::tail_cut;

pub const DEFAULT_PERMUTATION_REPS: usize = 2000;

/// Diagonal jitter used when the normal equations are singular.
pub const RIDGE_JITTER: f64 = 1e-8;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (denominator `n − 1`).
pub fn whole_sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// `(mean_high − mean_low) / sd_whole`.
pub fn smd(values: &[f64], high: &[bool], sd_whole: f64) -> Result<f64> {
    if values.len() != high.len() {
        return Err(Error::Shape(format!("{} values for {} labels", values.len(), high.len())));
    }
    if !(sd_whole > 0.0 && sd_whole.is_finite()) {
        return Err(Error::Undefined(format!("whole-sample sd {sd_whole} must be positive")));
    }
    let (hi, lo) = partition(values, high);
    if hi.is_empty() || lo.is_empty() {
        return Err(Error::invalid("both groups must be nonempty"));
    }
    Ok((mean(&hi) - mean(&lo)) / sd_whole)
}

fn partition(values: &[f64], high: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for (&v, &h) in values.iter().zip(high) {
        if h {
            hi.push(v);
        } else {
            lo.push(v);
        }
    }
    (hi, lo)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianSplit {
    /// Per unit, in design order: dose strictly above its set's median.
    pub high: Vec<bool>,
    /// Sets whose doses are all equal, so every unit is low.
    pub degenerate_sets: Vec<String>,
}

pub fn median_split_groups(design: &MatchedDesign) -> MedianSplit {
    let mut high = Vec::with_capacity(design.num_units());
    let mut degenerate_sets = Vec::new();
    for s in &design.sets {
        let m = median(&s.doses);
        high.extend(s.doses.iter().map(|&z| z > m));
        if s.doses.iter().all(|&z| z == s.doses[0]) {
            degenerate_sets.push(s.id.clone());
        }
    }
    MedianSplit { high, degenerate_sets }
}

/// Split at the pooled median dose, ignoring the matched structure.
pub fn pooled_median_split(doses: &[f64]) -> Vec<bool> {
    let m = median(doses);
    doses.iter().map(|&z| z > m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // small-argument series of the CDF
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|k| ((2 * k - 1) as f64).powi(2) * c).map(f64::exp).sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample KS statistic with the asymptotic p-value at effective size
/// `nm/(n+m)`.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<KsResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("KS test needs two nonempty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("KS samples must be finite"));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] == v {
            i += 1;
        }
        while j < m && ys[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    Ok(KsResult { d, p: kolmogorov_q(ne.sqrt() * d) })
}

/// One row of the balance table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateBalance {
    pub name: String,
    /// Pooled median split.
    pub mean_below: f64,
    pub mean_above: f64,
    pub smd_before: Option<f64>,
    pub ks_p_before: Option<f64>,
    /// Within-set median split.
    pub mean_low: f64,
    pub mean_high: f64,
    pub smd_after: Option<f64>,
    pub ks_p_after: Option<f64>,
    pub missing: usize,
}

fn group_stats(values: &[f64], high: &[bool], sd: f64) -> (f64, f64, Option<f64>, Option<f64>) {
    let (hi, lo) = partition(values, high);
    let mh = if hi.is_empty() { f64::NAN } else { mean(&hi) };
    let ml = if lo.is_empty() { f64::NAN } else { mean(&lo) };
    let s = smd(values, high, sd).ok();
    let k = ks_two_sample(&lo, &hi).ok().map(|r| r.p);
    (ml, mh, s, k)
}

/// SMD and KS rows for every covariate; units missing a covariate are left
/// out of that covariate's row. Both splits share the whole-sample sd.
pub fn covariate_balance(design: &MatchedDesign) -> Result<Vec<CovariateBalance>> {
    let cov = design.covariates.as_ref().ok_or_else(|| Error::Precondition("design has no covariates".into()))?;
    let doses = design.all_doses();
    let before = pooled_median_split(&doses);
    let after = median_split_groups(design).high;
    let mut rows = Vec::with_capacity(cov.names.len());
    for (c, name) in cov.names.iter().enumerate() {
        let mut vals = Vec::new();
        let mut hb = Vec::new();
        let mut ha = Vec::new();
        for (u, row) in cov.rows.iter().enumerate() {
            if let Some(v) = row[c] {
                vals.push(v);
                hb.push(before[u]);
                ha.push(after[u]);
            }
        }
        let sd = whole_sample_sd(&vals);
        let (mean_below, mean_above, smd_before, ks_p_before) = group_stats(&vals, &hb, sd);
        let (mean_low, mean_high, smd_after, ks_p_after) = group_stats(&vals, &ha, sd);
        rows.push(CovariateBalance {
            name: name.clone(),
            mean_below,
            mean_above,
            smd_before,
            ks_p_before,
            mean_low,
            mean_high,
            smd_after,
            ks_p_after,
            missing: cov.rows.len() - vals.len(),
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Balance table as CSV, columns in the before/after layout.
pub fn write_balance_csv<W: Write>(rows: &[CovariateBalance], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Parse { line: 0, msg: e.to_string() };
    w.write_record(["confounder", "below", "above", "smd_before", "ks_p_before", "low", "high", "smd_after", "ks_p_after"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:.4}", r.mean_below),
            format!("{:.4}", r.mean_above),
            opt(r.smd_before),
            opt(r.ks_p_before),
            format!("{:.4}", r.mean_low),
            format!("{:.4}", r.mean_high),
            opt(r.smd_after),
            opt(r.ks_p_after),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomizationBalance {
    pub p_1to2: f64,
    pub p_2to1: f64,
    pub t_1to2: f64,
    pub t_2to1: f64,
    pub reject: bool,
    pub alpha: f64,
    pub permutation_reps: usize,
    pub seed: u64,
    /// Set indices of the first part.
    pub part1: Vec<usize>,
    pub used_covariates: Vec<String>,
    /// Covariates with missing values, left out of the fits.
    pub dropped_covariates: Vec<String>,
    /// Some fit needed the ridge jitter.
    pub ridge_fallback: bool,
    /// Some cross statistic was invariant under permutation (p set to 1).
    pub degenerate: bool,
}

struct Fit {
    coef: DVector<f64>,
    ridge: bool,
}

fn design_row(row: &[Option<f64>], cols: &[usize]) -> Vec<f64> {
    std::iter::once(1.0).chain(cols.iter().map(|&c| row[c].expect("complete column"))).collect()
}

/// Least squares with intercept, falling back to ridge when `XᵀX` is singular.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Fit {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    if let Some(ch) = xtx.clone().cholesky() {
        let coef = ch.solve(&xty);
        if coef.iter().all(|v| v.is_finite()) {
            return Fit { coef, ridge: false };
        }
    }
    let k = xtx.nrows();
    let jittered = xtx + DMatrix::identity(k, k) * RIDGE_JITTER;
    let coef = match jittered.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => jittered.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(k)),
    };
    Fit { coef, ridge: true }
}

/// Units of the given sets as (set offsets, design matrix rows).
fn part_matrix(design: &MatchedDesign, sets: &[usize], cols: &[usize], offsets: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let cov = design.covariates.as_ref().expect("checked");
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for &i in sets {
        for (j, &z) in design.sets[i].doses.iter().enumerate() {
            rows.push(design_row(&cov.rows[offsets[i] + j], cols));
            y.push(z);
        }
    }
    let k = cols.len() + 1;
    (DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c]), DVector::from_vec(y))
}

/// Permutation p-value of `Σ Z g` on `sets`, using predictions `g` per set.
fn cross_p(
    design: &MatchedDesign,
    sets: &[usize],
    g: &[Vec<f64>],
    reps: usize,
    seed: u64,
    direction: u64,
) -> (f64, f64, bool) {
    let t_obs: f64 =
        sets.iter().zip(g).map(|(&i, gi)| design.sets[i].doses.iter().zip(gi).map(|(z, v)| z * v).sum::<f64>()).sum();
    let scale = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let invariant = sets.iter().zip(g).all(|(&i, gi)| {
        let doses = &design.sets[i].doses;
        let g_const = gi.iter().all(|v| (v - gi[0]).abs() <= 1e-12 * scale);
        g_const || doses.iter().all(|&z| z == doses[0])
    });
    if invariant {
        return (1.0, t_obs, true);
    }
    let cut = tail_cut(t_obs);
    let hits: usize = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[tag::BALANCE_PERM, direction, r]);
            let mut t = 0.0;
            for (&i, gi) in sets.iter().zip(g) {
                let mut z = design.sets[i].doses.clone();
                z.shuffle(&mut rng);
                t += z.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
            }
            usize::from(t >= cut)
        })
        .sum();
    ((1 + hits) as f64 / (reps + 1) as f64, t_obs, false)
}

/// Split the sets in two, fit a linear dose predictor on each half, and test
/// each predictor on the other half by permuting doses within sets.
pub fn balance_randomization_test(
    design: &MatchedDesign,
    alpha: f64,
    permutation_reps: usize,
    seed: u64,
) -> Result<RandomizationBalance> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if permutation_reps == 0 {
        return Err(Error::invalid("permutation_reps must be positive"));
    }
    let cov = design.covariates.as_ref().ok_or_else(|| Error::Precondition("design has no covariates".into()))?;
    if design.num_sets() < 2 {
        return Err(Error::Precondition("the split needs at least two matched sets".into()));
    }
    let (cols, dropped): (Vec<usize>, Vec<usize>) =
        (0..cov.names.len()).partition(|&c| cov.rows.iter().all(|r| r[c].is_some()));
    if cols.is_empty() {
        return Err(Error::Precondition("no covariate is complete".into()));
    }
    let mut order: Vec<usize> = (0..design.num_sets()).collect();
    order.shuffle(&mut substream(seed, &[tag::BALANCE_SPLIT]));
    let half = design.num_sets().div_ceil(2);
    let mut part1 = order[..half].to_vec();
    let mut part2 = order[half..].to_vec();
    part1.sort_unstable();
    part2.sort_unstable();

    let offsets = design.offsets();
    let (x1, y1) = part_matrix(design, &part1, &cols, &offsets);
    let (x2, y2) = part_matrix(design, &part2, &cols, &offsets);
    let f1 = ols(&x1, &y1);
    let f2 = ols(&x2, &y2);
    let predict = |fit: &Fit, sets: &[usize]| -> Vec<Vec<f64>> {
        sets.iter()
            .map(|&i| {
                (0..design.sets[i].len())
                    .map(|j| {
                        let row = design_row(&cov.rows[offsets[i] + j], &cols);
                        row.iter().zip(fit.coef.iter()).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            })
            .collect()
    };
    let (p12, t12, d12) = cross_p(design, &part2, &predict(&f1, &part2), permutation_reps, seed, 1);
    let (p21, t21, d21) = cross_p(design, &part1, &predict(&f2, &part1), permutation_reps, seed, 2);
    Ok(RandomizationBalance {
        p_1to2: p12,
        p_2to1: p21,
        t_1to2: t12,
        t_2to1: t21,
        reject: p12.min(p21) < alpha / 2.0,
        alpha,
        permutation_reps,
        seed,
        part1,
        used_covariates: cols.iter().map(|&c| cov.names[c].clone()).collect(),
        dropped_covariates: dropped.iter().map(|&c| cov.names[c].clone()).collect(),
        ridge_fallback: f1.ridge || f2.ridge,
        degenerate: d12 || d21,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub rows: Vec<CovariateBalance>,
    pub randomization_test: RandomizationBalance,
}

pub fn balance_report(design: &MatchedDesign, alpha: f64, permutation_reps: usize, seed: u64) -> Result<BalanceReport> {
    Ok(BalanceReport {
        rows: covariate_balance(design)?,
        randomization_test: balance_randomization_test(design, alpha, permutation_reps, seed)?,
    })
}
