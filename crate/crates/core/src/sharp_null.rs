//! Worst-case p-values under the sharp null of no dose effect.
//!
//! For statistics that only depend on the stratum tables the worst case over
//! all confounder allocations is attained at `u⁺ = R`; the p-value there is
//! computed by Monte Carlo or by a normal approximation. For arbitrary unit
//! scores a brute-force search over the unit cube is provided for small
//! designs.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::assignment::{
    normalized_weights, DiscreteLaw, Representation, SensitivityParameter, StratumSupport,
    DEFAULT_AGGREGATED_CAP,
};
use crate::design::MatchedDesign;
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::statistic::{adaptive_p, evaluate, Statistic, StatisticSpec};

/// Lower edge of the tail `{T ≥ t}`, allowing for rounding in summed scores.
pub fn tail_cut(t: f64) -> f64 {
    t - 1e-9 * t.abs().max(1.0)
}

/// Score model `q(π) = Σ_j m[π(j)] w_j` per set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    /// Per-set scores attached to dose indices.
    pub m: Vec<Vec<f64>>,
    /// Per-unit weights in global unit order.
    pub w: Vec<f64>,
}

impl ScoreModel {
    /// The statistic's dose scores weighted by the observed outcomes.
    pub fn statistic(spec: &StatisticSpec, design: &MatchedDesign) -> Self {
        Self { m: spec.dose_scores(design), w: design.outcome_vector() }
    }

    /// `Σ_j Z_{π(j)} q_j` for arbitrary real unit scores `q`.
    pub fn unit_scores(design: &MatchedDesign, q: &[f64]) -> Result<Self> {
        if q.len() != design.num_units() {
            return Err(Error::Shape(format!("{} scores for {} units", q.len(), design.num_units())));
        }
        Ok(Self { m: design.sets.iter().map(|s| s.doses.clone()).collect(), w: q.to_vec() })
    }

    /// Observed value, with every unit at its own dose.
    pub fn observed(&self) -> f64 {
        let mut acc = 0.0;
        let mut j = 0;
        for m in &self.m {
            for x in m {
                acc += x * self.w[j];
                j += 1;
            }
        }
        acc
    }
}

/// Per-set supports of the score under confounder values `u`.
pub fn supports(
    design: &MatchedDesign,
    model: &ScoreModel,
    gp: &SensitivityParameter,
    u: &[f64],
    mode: Representation,
) -> Result<Vec<StratumSupport>> {
    let us = design.split_units(u)?;
    let ws = design.split_units(&model.w)?;
    design
        .sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            StratumSupport::build(&s.doses, us[i], ws[i], &model.m[i], &gp.transform, mode, DEFAULT_AGGREGATED_CAP)
        })
        .collect()
}

/// Exact mean and variance of `Σ_i q_i` under allocation `u`.
pub fn moments_at_u(
    design: &MatchedDesign,
    model: &ScoreModel,
    gp: &SensitivityParameter,
    u: &[f64],
) -> Result<(f64, f64)> {
    let sup = supports(design, model, gp, u, Representation::Aggregated)?;
    Ok(sup.iter().map(|s| s.moments(gp.gamma)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)))
}

/// Law of a sum of independent discrete laws, merging exactly equal sums.
pub fn convolve(laws: &[DiscreteLaw], cap: usize) -> Result<DiscreteLaw> {
    let mut acc = DiscreteLaw { values: vec![0.0], probs: vec![1.0] };
    for law in laws {
        let size = acc.values.len() * law.values.len();
        if size > cap {
            return Err(Error::CapExceeded { what: "joint support".into(), size: size as u128, cap: cap as u128 });
        }
        let mut pairs = Vec::with_capacity(size);
        for (a, pa) in acc.values.iter().zip(&acc.probs) {
            for (b, pb) in law.values.iter().zip(&law.probs) {
                pairs.push((a + b, pa * pb));
            }
        }
        acc = DiscreteLaw::from_pairs(pairs);
    }
    Ok(acc)
}

/// `pr(X ≥ t)` with the rounding allowance of [`tail_cut`].
pub fn tail_ge(law: &DiscreteLaw, t: f64) -> f64 {
    let cut = tail_cut(t);
    law.values.iter().zip(&law.probs).filter(|(v, _)| **v >= cut).map(|(_, p)| p).sum()
}

/// Exact `pr_u(T ≥ t)` by enumerating the joint support.
pub fn exact_tail(
    design: &MatchedDesign,
    model: &ScoreModel,
    gp: &SensitivityParameter,
    u: &[f64],
    t: f64,
) -> Result<f64> {
    let sup = supports(design, model, gp, u, Representation::Aggregated)?;
    let laws: Vec<DiscreteLaw> = sup.iter().map(|s| s.law(gp.gamma)).collect();
    Ok(tail_ge(&convolve(&laws, 10_000_000)?, t).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMethod {
    ExactMc,
    Normal,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharpNullResult {
    pub gamma: f64,
    #[serde(rename = "Gamma")]
    pub big_gamma: f64,
    pub t_obs: f64,
    pub p_worst: f64,
    pub method: PMethod,
    pub mc_se: Option<f64>,
    pub reps: Option<u64>,
    pub seed: Option<u64>,
    /// Mean and variance of `T` at `u⁺`.
    pub moments: Option<(f64, f64)>,
    /// Zero variance at `u⁺`; the p-value is 0 or 1.
    pub degenerate: bool,
    /// Fewer than [`SMALL_SAMPLE_DISCORDANT`] discordant sets.
    pub small_sample: bool,
}

/// Below this many discordant sets the normal approximation is flagged.
pub const SMALL_SAMPLE_DISCORDANT: usize = 20;

fn upper_supports(design: &MatchedDesign, spec: &StatisticSpec, gp: &SensitivityParameter) -> Result<Vec<StratumSupport>> {
    let model = ScoreModel::statistic(spec, design);
    supports(design, &model, gp, &design.outcome_vector(), Representation::Aggregated)
}

fn small_sample(design: &MatchedDesign) -> bool {
    design.sets.iter().filter(|s| !s.is_concordant()).count() < SMALL_SAMPLE_DISCORDANT
}

/// Monte Carlo p-value at `u⁺`: `(1 + #{T* ≥ t}) / (reps + 1)`.
pub fn worst_case_p_exact_mc(
    design: &MatchedDesign,
    spec: &StatisticSpec,
    gp: &SensitivityParameter,
    reps: u64,
    seed: u64,
) -> Result<SharpNullResult> {
    if reps == 0 {
        return Err(Error::invalid("reps must be positive"));
    }
    let t_obs = evaluate(spec, design);
    let sup = upper_supports(design, spec, gp)?;
    let mut constant = 0.0;
    let mut laws = Vec::new();
    for s in &sup {
        let law = s.law(gp.gamma);
        if law.values.len() == 1 {
            constant += law.values[0];
        } else {
            laws.push(law);
        }
    }
    let cut = tail_cut(t_obs);
    let exceed = (0..reps)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = substream(seed, &[tag::MC_REPLICATE, r]);
            let mut t = constant;
            for law in &laws {
                t += law.quantile(rng.random::<f64>());
            }
            t >= cut
        })
        .count() as u64;
    let p = (1 + exceed) as f64 / (reps + 1) as f64;
    let moments = sup.iter().map(|s| s.moments(gp.gamma)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(SharpNullResult {
        gamma: gp.gamma,
        big_gamma: gp.big_gamma(),
        t_obs,
        p_worst: p,
        method: PMethod::ExactMc,
        mc_se: Some((p * (1.0 - p) / reps as f64).sqrt()),
        reps: Some(reps),
        seed: Some(seed),
        moments: Some(moments),
        degenerate: laws.is_empty(),
        small_sample: small_sample(design),
    })
}

/// Normal approximation `1 − Φ((t − E)/√V)` with moments at `u⁺`.
pub fn worst_case_p_normal(
    design: &MatchedDesign,
    spec: &StatisticSpec,
    gp: &SensitivityParameter,
) -> Result<SharpNullResult> {
    let t_obs = evaluate(spec, design);
    let sup = upper_supports(design, spec, gp)?;
    let (mean, var) = sup.iter().map(|s| s.moments(gp.gamma)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let degenerate = var <= 1e-300;
    let p = if degenerate {
        if t_obs <= mean + 1e-9 * mean.abs().max(1.0) {
            1.0
        } else {
            0.0
        }
    } else {
        upper_normal_tail((t_obs - mean) / var.sqrt())
    };
    Ok(SharpNullResult {
        gamma: gp.gamma,
        big_gamma: gp.big_gamma(),
        t_obs,
        p_worst: p,
        method: PMethod::Normal,
        mc_se: None,
        reps: None,
        seed: None,
        moments: Some((mean, var)),
        degenerate,
        small_sample: small_sample(design),
    })
}

/// Exact p-value at `u⁺` by full enumeration of the joint support.
pub fn worst_case_p_enumeration(
    design: &MatchedDesign,
    spec: &StatisticSpec,
    gp: &SensitivityParameter,
) -> Result<SharpNullResult> {
    let model = ScoreModel::statistic(spec, design);
    let t_obs = evaluate(spec, design);
    let u = design.outcome_vector();
    let p = exact_tail(design, &model, gp, &u, t_obs)?;
    let (mean, var) = moments_at_u(design, &model, gp, &u)?;
    Ok(SharpNullResult {
        gamma: gp.gamma,
        big_gamma: gp.big_gamma(),
        t_obs,
        p_worst: p,
        method: PMethod::Enumeration,
        mc_se: None,
        reps: None,
        seed: None,
        moments: Some((mean, var)),
        degenerate: var <= 1e-300,
        small_sample: small_sample(design),
    })
}

/// `1 − Φ(x)` computed without cancellation.
pub fn upper_normal_tail(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Normal,
    ExactMc { reps: u64, seed: u64 },
    Enumeration,
}

/// Worst-case p-value of a single or adaptive statistic. Returns the
/// combined p-value and the per-component results.
pub fn worst_case_p(
    design: &MatchedDesign,
    stat: &Statistic,
    gp: &SensitivityParameter,
    method: Method,
) -> Result<(f64, Vec<SharpNullResult>)> {
    let parts = stat
        .components()
        .into_iter()
        .map(|spec| match method {
            Method::Normal => worst_case_p_normal(design, spec, gp),
            Method::ExactMc { reps, seed } => worst_case_p_exact_mc(design, spec, gp, reps, seed),
            Method::Enumeration => worst_case_p_enumeration(design, spec, gp),
        })
        .collect::<Result<Vec<_>>>()?;
    let p = match stat {
        Statistic::Single(_) => parts[0].p_worst,
        Statistic::Adaptive(_) => adaptive_p(&parts.iter().map(|r| r.p_worst).collect::<Vec<_>>())?,
    };
    Ok((p, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub gamma: f64,
    #[serde(rename = "Gamma")]
    pub big_gamma: f64,
    pub p_worst: f64,
    pub components: Vec<SharpNullResult>,
}

/// Worst-case p-values along an ascending grid of `γ`.
pub fn p_value_curve(
    design: &MatchedDesign,
    stat: &Statistic,
    gammas: &[f64],
    transform: &crate::assignment::DoseTransform,
    method: Method,
) -> Result<Vec<CurvePoint>> {
    if gammas.is_empty() {
        return Err(Error::invalid("empty gamma grid"));
    }
    if gammas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("gamma grid must be sorted ascending"));
    }
    gammas
        .iter()
        .map(|&g| {
            let gp = SensitivityParameter::with_transform(g, transform.clone())?;
            let (p, components) = worst_case_p(design, stat, &gp, method)?;
            Ok(CurvePoint { gamma: g, big_gamma: g.exp(), p_worst: p, components })
        })
        .collect()
}

/// Smallest grid `γ` whose worst-case p-value exceeds `alpha`.
pub fn changepoint(curve: &[CurvePoint], alpha: f64) -> Option<f64> {
    curve.iter().find(|c| c.p_worst > alpha).map(|c| c.gamma)
}

// ---------------------------------------------------------------------------
// Brute force over the unit cube
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeSearch {
    pub grid_step: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CubeSearch {
    fn default() -> Self {
        Self { grid_step: 0.05, restarts: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub restart: usize,
    pub sweep: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CubeMaximizerResult {
    pub u_star: Vec<f64>,
    pub p_at_u_star: f64,
    pub best_corner: Vec<f64>,
    pub best_corner_p: f64,
    pub corners_evaluated: usize,
    /// With `γ = 0` the tail probability does not depend on `u`.
    pub u_independent: bool,
    pub trace: Vec<TraceEntry>,
}

/// Precomputed permutation tables so that the tail probability at any `u`
/// only costs one pass over the joint support.
pub struct CubeProblem {
    gamma: f64,
    /// Per set: `phi[k][j]` is the transformed dose unit `j` gets under arrangement `k`.
    phi: Vec<Vec<Vec<f64>>>,
    score: Vec<Vec<f64>>,
    offsets: Vec<usize>,
    n_units: usize,
    t_obs: f64,
}

impl CubeProblem {
    pub fn new(design: &MatchedDesign, q: &[f64], gp: &SensitivityParameter, t_obs: f64) -> Result<Self> {
        let model = ScoreModel::unit_scores(design, q)?;
        let mut joint: u128 = 1;
        let mut phi = Vec::new();
        let mut score = Vec::new();
        let ws = design.split_units(&model.w)?;
        for (i, s) in design.sets.iter().enumerate() {
            let n = s.len();
            joint = joint.saturating_mul((1..=n as u128).product());
            if joint > 1_000_000 {
                return Err(Error::CapExceeded { what: "joint permutations".into(), size: joint, cap: 1_000_000 });
            }
            let mut rows = Vec::new();
            let mut sc = Vec::new();
            permutations(n, &mut |perm: &[usize]| {
                rows.push(perm.iter().map(|&d| gp.transform.apply(s.doses[d])).collect::<Vec<f64>>());
                sc.push(perm.iter().enumerate().map(|(j, &d)| model.m[i][d] * ws[i][j]).sum());
            });
            phi.push(rows);
            score.push(sc);
        }
        Ok(Self { gamma: gp.gamma, phi, score, offsets: design.offsets(), n_units: design.num_units(), t_obs })
    }

    pub fn tail(&self, u: &[f64]) -> f64 {
        let laws: Vec<DiscreteLaw> = self
            .phi
            .iter()
            .zip(&self.score)
            .zip(&self.offsets)
            .map(|((rows, sc), &o)| {
                let e: Vec<f64> = rows.iter().map(|r| r.iter().enumerate().map(|(j, z)| z * u[o + j]).sum()).collect();
                DiscreteLaw::from_pairs(sc.iter().copied().zip(normalized_weights(&e, self.gamma)))
            })
            .collect();
        tail_ge(&convolve(&laws, usize::MAX).expect("uncapped"), self.t_obs)
    }
}

/// Heap's algorithm over `0..n`.
fn permutations(n: usize, visit: &mut dyn FnMut(&[usize])) {
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            visit(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Maximize `pr_u(T ≥ t_obs)` over `u ∈ [0,1]^N` for `T = Σ_j Z_{π(j)} q_j`.
pub fn brute_force_worst_p(
    design: &MatchedDesign,
    q: &[f64],
    gp: &SensitivityParameter,
    t_obs: f64,
    search: CubeSearch,
) -> Result<CubeMaximizerResult> {
    if !(search.grid_step > 0.0 && search.grid_step <= 1.0) {
        return Err(Error::invalid("grid step must lie in (0, 1]"));
    }
    let prob = CubeProblem::new(design, q, gp, t_obs)?;
    let n = prob.n_units;
    if n > 20 {
        return Err(Error::CapExceeded { what: "cube corners".into(), size: 1u128 << n, cap: 1 << 20 });
    }

    let mut best_corner = vec![0.0; n];
    let mut best_corner_p = f64::NEG_INFINITY;
    for mask in 0u64..(1u64 << n) {
        let u: Vec<f64> = (0..n).map(|j| ((mask >> j) & 1) as f64).collect();
        let p = prob.tail(&u);
        if p > best_corner_p {
            best_corner_p = p;
            best_corner = u;
        }
    }

    let mut starts = vec![vec![0.0; n], vec![1.0; n], best_corner.clone()];
    let extra = search.restarts.saturating_sub(starts.len());
    if extra > 0 {
        let mut rng = substream(search.seed, &[tag::CUBE_RESTART]);
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut strata: Vec<f64> = (0..extra).map(|k| (k as f64 + rng.random::<f64>()) / extra as f64).collect();
                for i in (1..strata.len()).rev() {
                    strata.swap(i, rng.random_range(0..=i));
                }
                strata
            })
            .collect();
        for k in 0..extra {
            starts.push(cols.iter_mut().map(|c| c[k]).collect());
        }
    }
    starts.truncate(search.restarts.max(1));

    let grid: Vec<f64> = {
        let steps = (1.0 / search.grid_step).round() as usize;
        (0..=steps).map(|k| (k as f64 * search.grid_step).min(1.0)).collect()
    };

    let mut trace = Vec::new();
    let mut best_u = best_corner.clone();
    let mut best_p = best_corner_p;
    for (r, start) in starts.into_iter().enumerate() {
        let mut u = start;
        let mut p = prob.tail(&u);
        for sweep in 0..200 {
            let mut improved = false;
            for j in 0..n {
                let eval = |x: f64| {
                    let mut v = u.clone();
                    v[j] = x;
                    prob.tail(&v)
                };
                let (mut bx, mut bp) = (u[j], p);
                for &g in &grid {
                    let v = eval(g);
                    if v > bp {
                        bx = g;
                        bp = v;
                    }
                }
                let lo = (bx - search.grid_step).max(0.0);
                let hi = (bx + search.grid_step).min(1.0);
                let (gx, gp_) = golden_max(&eval, lo, hi, 1e-10);
                if gp_ > bp {
                    bx = gx;
                    bp = gp_;
                }
                if bp > p + 1e-12 {
                    u[j] = bx;
                    p = bp;
                    improved = true;
                }
            }
            trace.push(TraceEntry { restart: r, sweep, p });
            if !improved {
                break;
            }
        }
        if p > best_p {
            best_p = p;
            best_u = u;
        }
    }
    Ok(CubeMaximizerResult {
        u_star: best_u,
        p_at_u_star: best_p,
        best_corner,
        best_corner_p,
        corners_evaluated: 1 << n,
        u_independent: gp.gamma == 0.0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::MatchedSet;
    use approx::assert_abs_diff_eq;

    fn pair_design() -> MatchedDesign {
        MatchedDesign::new(vec![MatchedSet::new("p", vec![0.0, 1.0], vec![0, 1]).unwrap()]).unwrap()
    }

    #[test]
    fn concordant_design_p_is_one() {
        let d = MatchedDesign::new(vec![
            MatchedSet::new("a", vec![0.1, 0.5], vec![1, 1]).unwrap(),
            MatchedSet::new("b", vec![0.2, 0.6, 0.9], vec![0, 0, 0]).unwrap(),
        ])
        .unwrap();
        let gp = SensitivityParameter::new(1.0).unwrap();
        let r = worst_case_p_exact_mc(&d, &StatisticSpec::perm_t(), &gp, 500, 3).unwrap();
        assert_eq!(r.p_worst, 1.0);
        let n = worst_case_p_normal(&d, &StatisticSpec::perm_t(), &gp).unwrap();
        assert!(n.degenerate);
        assert_eq!(n.p_worst, 1.0);
    }

    #[test]
    fn pair_log_two_exact() {
        let gp = SensitivityParameter::new(2f64.ln()).unwrap();
        let e = worst_case_p_enumeration(&pair_design(), &StatisticSpec::perm_t(), &gp).unwrap();
        assert_abs_diff_eq!(e.p_worst, 2.0 / 3.0, epsilon = 1e-12);
        let mc = worst_case_p_exact_mc(&pair_design(), &StatisticSpec::perm_t(), &gp, 20_000, 11).unwrap();
        assert!((mc.p_worst - 2.0 / 3.0).abs() <= 3.0 * mc.mc_se.unwrap());
    }

    #[test]
    fn moments_two_point() {
        let d = MatchedDesign::new(vec![MatchedSet::new("p", vec![1.0, 2.0], vec![0, 1]).unwrap()]).unwrap();
        let model = ScoreModel::statistic(&StatisticSpec::perm_t(), &d);
        let gp = SensitivityParameter::new(0.0).unwrap();
        let (m, v) = moments_at_u(&d, &model, &gp, &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(m, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        let gp = SensitivityParameter::new(1.3).unwrap();
        let (m2, v2) = moments_at_u(&d, &model, &gp, &[0.4, 0.4]).unwrap();
        assert_abs_diff_eq!(m2, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v2, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn normal_uses_upper_moments() {
        let d = MatchedDesign::new(vec![
            MatchedSet::new("a", vec![0.1, 0.5, 0.7], vec![0, 1, 0]).unwrap(),
            MatchedSet::new("b", vec![0.2, 0.6], vec![1, 0]).unwrap(),
        ])
        .unwrap();
        let gp = SensitivityParameter::new(0.7).unwrap();
        let spec = StatisticSpec::perm_t();
        let n = worst_case_p_normal(&d, &spec, &gp).unwrap();
        let model = ScoreModel::statistic(&spec, &d);
        assert_eq!(n.moments.unwrap(), moments_at_u(&d, &model, &gp, &d.outcome_vector()).unwrap());
        assert!(n.small_sample);
    }

    #[test]
    fn mc_is_reproducible() {
        let d = MatchedDesign::new(vec![
            MatchedSet::new("a", vec![0.1, 0.5, 0.7], vec![0, 1, 0]).unwrap(),
            MatchedSet::new("b", vec![0.2, 0.6], vec![1, 0]).unwrap(),
        ])
        .unwrap();
        let gp = SensitivityParameter::new(0.4).unwrap();
        let a = worst_case_p_exact_mc(&d, &StatisticSpec::perm_t(), &gp, 1000, 9).unwrap();
        let b = worst_case_p_exact_mc(&d, &StatisticSpec::perm_t(), &gp, 1000, 9).unwrap();
        assert_eq!(a, b);
        assert!(worst_case_p_exact_mc(&d, &StatisticSpec::perm_t(), &gp, 0, 9).is_err());
    }

    #[test]
    fn curve_and_changepoint() {
        let d = pair_design();
        let stat = Statistic::Single(StatisticSpec::perm_t());
        let curve = p_value_curve(&d, &stat, &[0.0, 1.0], &Default::default(), Method::Enumeration).unwrap();
        assert_abs_diff_eq!(curve[0].p_worst, 0.5, epsilon = 1e-12);
        assert_eq!(changepoint(&curve, 0.05), Some(0.0));
        assert_eq!(changepoint(&curve, 0.99), None);
        assert!(p_value_curve(&d, &stat, &[], &Default::default(), Method::Normal).is_err());
        assert!(p_value_curve(&d, &stat, &[1.0, 0.0], &Default::default(), Method::Normal).is_err());
    }

    #[test]
    fn permutations_count() {
        let mut k = 0;
        permutations(4, &mut |_| k += 1);
        assert_eq!(k, 24);
    }

    #[test]
    fn normal_tail_values() {
        assert_abs_diff_eq!(upper_normal_tail(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(upper_normal_tail(1.959963984540054), 0.025, epsilon = 1e-10);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
    }
}
