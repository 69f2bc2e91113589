//! Design sensitivity by Monte Carlo and bisection, and power of a
//! sensitivity analysis by simulation.
//!
//! The design sensitivity is the root in `γ` of `φ(γ) − E[q_i]`, where `φ(γ)`
//! is the expected worst-case mean of a set's statistic contribution and
//! `E[q_i]` its expected observed value. Both are estimated on one sample of
//! simulated sets, and every `γ` reuses that sample.

use rayon::prelude::*;
use serde::Serialize;

use crate::assignment::{DoseTransform, Representation, SensitivityParameter, StratumSupport, DEFAULT_AGGREGATED_CAP};
use crate::design::MatchedDesign;
use crate::dgp::{sample_dgp, DgpSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::sharp_null::{worst_case_p, Method};
use crate::statistic::{per_stratum_all, Statistic, StatisticSpec};

/// Upper end of the bracket search, `ln 1000`.
pub fn gamma_max() -> f64 {
    1000f64.ln()
}

/// Simulated sets with their supports at `u = R`, shared by every `γ`.
pub struct StrataSample {
    supports: Vec<StratumSupport>,
    observed: Vec<f64>,
    correlation: f64,
}

impl StrataSample {
    pub fn new(dgp: &DgpSpec, spec: &StatisticSpec, draws: usize, seed: u64) -> Result<Self> {
        let design = sample_dgp(dgp, draws, seed)?;
        Self::from_design(&design, spec)
    }

    pub fn from_design(design: &MatchedDesign, spec: &StatisticSpec) -> Result<Self> {
        let m = spec.dose_scores(design);
        let supports = design
            .sets
            .par_iter()
            .zip(&m)
            .map(|(s, m)| {
                let r = s.outcomes_f64();
                StratumSupport::build(
                    &s.doses,
                    &r,
                    &r,
                    m,
                    &DoseTransform::Identity,
                    Representation::Aggregated,
                    DEFAULT_AGGREGATED_CAP,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let observed = per_stratum_all(spec, design);
        let flat_m: Vec<f64> = m.into_iter().flatten().collect();
        let correlation = pearson(&flat_m, &design.outcome_vector());
        Ok(Self { supports, observed, correlation })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    /// Sample correlation of `m(Z)` and `R` over all units.
    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    /// `φ̂(γ)` and its standard error.
    pub fn phi(&self, gamma: f64) -> (f64, f64) {
        mean_se(&self.supports.par_iter().map(|s| s.mean(gamma)).collect::<Vec<_>>())
    }

    /// `Ê[q_i]` and its standard error.
    pub fn mean_observed(&self) -> (f64, f64) {
        mean_se(&self.observed)
    }

    /// Paired estimate of `φ(γ) − E[q_i]` and its standard error.
    pub fn gap(&self, gamma: f64) -> (f64, f64) {
        let d: Vec<f64> = self.supports.par_iter().zip(&self.observed).map(|(s, q)| s.mean(gamma) - q).collect();
        mean_se(&d)
    }
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Monte Carlo estimate of `φ(γ)` on `draws` simulated sets.
pub fn phi_hat(dgp: &DgpSpec, spec: &StatisticSpec, gamma: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    Ok(StrataSample::new(dgp, spec, draws, seed)?.phi(gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiPoint {
    pub gamma: f64,
    pub phi: f64,
    pub se: f64,
    /// `φ̂(γ) − Ê[q]`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignSensitivityResult {
    pub gamma_tilde: f64,
    #[serde(rename = "Gamma_tilde")]
    pub big_gamma_tilde: f64,
    pub mc_draws: usize,
    pub bracket: (f64, f64),
    pub mean_q: f64,
    pub correlation: f64,
    pub phi_samples: Vec<PhiPoint>,
}

/// Bisection for the root of `φ̂(γ) − Ê[q]` on a fixed sample of sets.
pub fn solve_on_sample(sample: &StrataSample, tol: f64) -> Result<DesignSensitivityResult> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let r = sample.correlation();
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Precondition(format!(
            "correlation between dose score and outcome is {r}, not inside (0, 1)"
        )));
    }
    let (mean_q, _) = sample.mean_observed();
    let mut curve = Vec::new();
    let mut eval = |g: f64| {
        let (phi, se) = sample.phi(g);
        let gap = sample.gap(g).0;
        curve.push(PhiPoint { gamma: g, phi, se, gap });
        gap
    };
    if eval(0.0) >= 0.0 {
        return Err(Error::NoSolution("no gap at gamma = 0; the statistic shows no effect".into()));
    }
    let mut lo = 0.0;
    let mut hi = 0.5f64.min(gamma_max());
    loop {
        if eval(hi) > 0.0 {
            break;
        }
        lo = hi;
        if hi >= gamma_max() {
            return Err(Error::NoSolution(format!("no sign change below gamma = {}", gamma_max())));
        }
        hi = (2.0 * hi).min(gamma_max());
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if eval(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let gamma_tilde = 0.5 * (lo + hi);
    curve.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    Ok(DesignSensitivityResult {
        gamma_tilde,
        big_gamma_tilde: gamma_tilde.exp(),
        mc_draws: sample.len(),
        bracket: (lo, hi),
        mean_q,
        correlation: r,
        phi_samples: curve,
    })
}

pub fn solve_design_sensitivity(
    dgp: &DgpSpec,
    spec: &StatisticSpec,
    mc_draws: usize,
    tol: f64,
    seed: u64,
) -> Result<DesignSensitivityResult> {
    solve_on_sample(&StrataSample::new(dgp, spec, mc_draws, seed)?, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerResult {
    pub gamma: f64,
    #[serde(rename = "Gamma")]
    pub big_gamma: f64,
    pub power: f64,
    pub se: f64,
    pub sim_reps: usize,
    pub num_sets: usize,
    pub alpha: f64,
}

/// Power along a grid of `γ`; each simulated design is reused for every `γ`.
pub fn simulate_power_curve(
    dgp: &DgpSpec,
    stat: &Statistic,
    gammas: &[f64],
    num_sets: usize,
    alpha: f64,
    sim_reps: usize,
    seed: u64,
) -> Result<Vec<PowerResult>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if sim_reps == 0 {
        return Err(Error::invalid("sim_reps must be positive"));
    }
    let gps = gammas.iter().map(|&g| SensitivityParameter::new(g)).collect::<Result<Vec<_>>>()?;
    let rejections: Vec<Vec<bool>> = (0..sim_reps as u64)
        .into_par_iter()
        .map(|r| {
            let rep_seed = rand::Rng::random::<u64>(&mut substream(seed, &[tag::POWER_REPLICATE, r]));
            let design = sample_dgp(dgp, num_sets, rep_seed)?;
            gps.iter()
                .map(|gp| Ok(worst_case_p(&design, stat, gp, Method::Normal)?.0 < alpha))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gammas
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let hits = rejections.iter().filter(|row| row[k]).count();
            let power = hits as f64 / sim_reps as f64;
            PowerResult {
                gamma: g,
                big_gamma: g.exp(),
                power,
                se: (power * (1.0 - power) / sim_reps as f64).sqrt(),
                sim_reps,
                num_sets,
                alpha,
            }
        })
        .collect())
}

pub fn simulate_power(
    dgp: &DgpSpec,
    stat: &Statistic,
    gamma: f64,
    num_sets: usize,
    alpha: f64,
    sim_reps: usize,
    seed: u64,
) -> Result<PowerResult> {
    Ok(simulate_power_curve(dgp, stat, &[gamma], num_sets, alpha, sim_reps, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{DoseLaw, OutcomeCurve};

    fn dgp(beta: f64) -> DgpSpec {
        DgpSpec::new(OutcomeCurve::Power(0.25), beta, 0.0, DoseLaw::Uniform).unwrap()
    }

    #[test]
    fn phi_limits() {
        let sample = StrataSample::new(&dgp(1.5), &StatisticSpec::perm_t(), 20_000, 5).unwrap();
        let (q, _) = sample.mean_observed();
        let (phi0, _) = sample.phi(0.0);
        let (phi_big, _) = sample.phi(40.0);
        assert!(phi0 < q, "{phi0} {q}");
        assert!(phi_big > q, "{phi_big} {q}");
    }

    #[test]
    fn phi_is_monotone_on_common_sample() {
        let sample = StrataSample::new(&dgp(1.5), &StatisticSpec::threshold(0.1), 5_000, 6).unwrap();
        let grid = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        for w in grid.windows(2) {
            let (a, se) = sample.phi(w[0]);
            let (b, _) = sample.phi(w[1]);
            assert!(a <= b + 3.0 * se);
        }
    }

    #[test]
    fn null_effect_rejected() {
        let sample = StrataSample::new(&dgp(0.0), &StatisticSpec::perm_t(), 5_000, 7).unwrap();
        for g in [0.1, 0.5, 1.0] {
            let (gap, se) = sample.gap(g);
            assert!(gap > -3.0 * se, "{gap} {se}");
        }
    }

    #[test]
    fn bisection_is_deterministic() {
        let a = solve_design_sensitivity(&dgp(1.5), &StatisticSpec::perm_t(), 5_000, 1e-2, 3).unwrap();
        let b = solve_design_sensitivity(&dgp(1.5), &StatisticSpec::perm_t(), 5_000, 1e-2, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.bracket.1 - a.bracket.0 <= 1e-2);
        assert!(a.big_gamma_tilde > 1.0);
    }

    #[test]
    fn power_near_one_without_bias() {
        let stat = Statistic::Single(StatisticSpec::perm_t());
        let r = simulate_power(&dgp(3.0), &stat, 0.0, 2000, 0.05, 20, 1).unwrap();
        assert!(r.power >= 0.95, "{}", r.power);
    }
}
