//! Biased dose-assignment distributions within a matched set.
//!
//! Unit `j` of a set receives dose `z[π(j)]` for a permutation `π`, with
//! probability proportional to `exp(γ · Σ_j φ(z[π(j)]) · u_j)`. Scores of the
//! form `Σ_j m[π(j)] · w_j` are tracked alongside each arrangement so that
//! moments and tail probabilities of any stratum-wise statistic follow from a
//! single enumeration.

use std::collections::HashMap;

use serde::Serialize;

use crate::design::{MatchedDesign, MatchedSet};
use crate::error::{Error, Result};
use crate::statistic::MonotoneTable;

/// Default cap on the number of arrangements in aggregated mode.
pub const DEFAULT_AGGREGATED_CAP: u128 = 5_000_000;

/// Monotone map applied to doses inside the bias exponent.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DoseTransform {
    #[default]
    Identity,
    /// `z^a` on nonnegative doses.
    Power(f64),
    Table(MonotoneTable),
}

impl DoseTransform {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            DoseTransform::Identity => z,
            DoseTransform::Power(a) => z.max(0.0).powf(*a),
            DoseTransform::Table(t) => t.eval(z),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            DoseTransform::Power(a) if !(a.is_finite() && *a > 0.0) => {
                Err(Error::invalid(format!("power transform exponent {a} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Sensitivity parameter `γ ≥ 0` (so `Γ = e^γ ≥ 1`) and the dose transform.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensitivityParameter {
    pub gamma: f64,
    pub transform: DoseTransform,
}

impl SensitivityParameter {
    pub fn new(gamma: f64) -> Result<Self> {
        Self::with_transform(gamma, DoseTransform::Identity)
    }

    pub fn with_transform(gamma: f64, transform: DoseTransform) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        transform.check()?;
        Ok(Self { gamma, transform })
    }

    /// `Γ = exp(γ)`.
    pub fn big_gamma(&self) -> f64 {
        self.gamma.exp()
    }
}

/// Per-unit values of the unmeasured confounder, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfounderAllocation {
    pub values: Vec<f64>,
}

impl ConfounderAllocation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("confounder value {v} outside [0,1]")));
        }
        Ok(Self { values })
    }

    /// The allocation `u⁺ = R`.
    pub fn upper(design: &MatchedDesign) -> Self {
        Self { values: design.outcome_vector() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// One outcome per permutation of units.
    Full,
    /// Units sharing a key are exchangeable; one outcome per assignment of
    /// doses to key classes.
    Aggregated,
}

/// Enumerates all assignments of dose indices to unit classes with fixed
/// class sizes. `visit` receives the class label of each dose index.
struct ClassEnumerator<'a> {
    sizes: Vec<usize>,
    labels: Vec<u16>,
    visit: &'a mut dyn FnMut(&[u16]),
}

impl ClassEnumerator<'_> {
    fn run(&mut self, i: usize) {
        if i == self.labels.len() {
            (self.visit)(&self.labels);
            return;
        }
        for k in 0..self.sizes.len() {
            if self.sizes[k] > 0 {
                self.sizes[k] -= 1;
                self.labels[i] = k as u16;
                self.run(i + 1);
                self.sizes[k] += 1;
            }
        }
    }
}

fn factorial_u128(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// `n! / Π c_k!`, saturating.
fn multinomial(sizes: &[usize]) -> u128 {
    let mut total = 0usize;
    let mut acc: u128 = 1;
    for &c in sizes {
        for j in 1..=c {
            total += 1;
            acc = acc.saturating_mul(total as u128) / j as u128;
        }
    }
    acc
}

/// Partition units into classes by `key`, in order of first appearance.
fn classes_by_key(keys: &[(u64, u64)], full: bool) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut class_of = Vec::with_capacity(keys.len());
    let mut members: Vec<Vec<usize>> = Vec::new();
    if full {
        for j in 0..keys.len() {
            class_of.push(j);
            members.push(vec![j]);
        }
        return (class_of, members);
    }
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    for (j, key) in keys.iter().enumerate() {
        let k = *index.entry(*key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[k].push(j);
        class_of.push(k);
    }
    (class_of, members)
}

fn check_lengths(doses: &[f64], u: &[f64], w: &[f64], m: &[f64]) -> Result<()> {
    let n = doses.len();
    if u.len() != n || w.len() != n || m.len() != n {
        return Err(Error::Shape(format!(
            "stratum of size {n}: u has {}, w has {}, m has {} entries",
            u.len(),
            w.len(),
            m.len()
        )));
    }
    Ok(())
}

/// Exponents and scores of every arrangement of one stratum.
///
/// `exponent[k] = Σ_j φ(z[π_k(j)]) u_j` excludes `γ`, so one support serves
/// every sensitivity value.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumSupport {
    pub exponent: Vec<f64>,
    pub score: Vec<f64>,
}

impl StratumSupport {
    /// Enumerate the support for doses `z`, confounders `u`, unit weights `w`
    /// and per-dose scores `m`.
    pub fn build(
        doses: &[f64],
        u: &[f64],
        w: &[f64],
        m: &[f64],
        transform: &DoseTransform,
        mode: Representation,
        cap: u128,
    ) -> Result<Self> {
        check_lengths(doses, u, w, m)?;
        let keys: Vec<(u64, u64)> = w.iter().zip(u).map(|(a, b)| (a.to_bits(), b.to_bits())).collect();
        let (_, members) = classes_by_key(&keys, mode == Representation::Full);
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let count = multinomial(&sizes);
        if count > cap {
            return Err(Error::CapExceeded {
                what: format!("{mode:?} arrangements of a set of size {}", doses.len()),
                size: count,
                cap,
            });
        }
        let class_u: Vec<f64> = members.iter().map(|c| u[c[0]]).collect();
        let class_w: Vec<f64> = members.iter().map(|c| w[c[0]]).collect();
        let phi: Vec<f64> = doses.iter().map(|&z| transform.apply(z)).collect();
        let mut exponent = Vec::with_capacity(count as usize);
        let mut score = Vec::with_capacity(count as usize);
        let mut visit = |labels: &[u16]| {
            let mut e = 0.0;
            let mut s = 0.0;
            for (i, &k) in labels.iter().enumerate() {
                e += phi[i] * class_u[k as usize];
                s += m[i] * class_w[k as usize];
            }
            exponent.push(e);
            score.push(s);
        };
        ClassEnumerator { sizes, labels: vec![0; doses.len()], visit: &mut visit }.run(0);
        Ok(Self { exponent, score })
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Normalized probabilities at `gamma`, computed relative to the largest
    /// exponent.
    pub fn probabilities(&self, gamma: f64) -> Vec<f64> {
        normalized_weights(&self.exponent, gamma)
    }

    /// Mean and variance of the score at `gamma`.
    pub fn moments(&self, gamma: f64) -> (f64, f64) {
        let p = self.probabilities(gamma);
        let mean: f64 = p.iter().zip(&self.score).map(|(p, s)| p * s).sum();
        let var: f64 = p.iter().zip(&self.score).map(|(p, s)| p * (s - mean).powi(2)).sum();
        (mean, var.max(0.0))
    }

    /// Mean of the score at `gamma`.
    pub fn mean(&self, gamma: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for &e in &self.exponent {
            max = max.max(gamma * e);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (e, s) in self.exponent.iter().zip(&self.score) {
            let wgt = (gamma * e - max).exp();
            num += wgt * s;
            den += wgt;
        }
        num / den
    }

    /// Merge arrangements with equal scores into a sorted discrete law.
    pub fn law(&self, gamma: f64) -> DiscreteLaw {
        DiscreteLaw::from_pairs(self.score.iter().copied().zip(self.probabilities(gamma)))
    }
}

/// `exp(γ e_k − max)` normalized to sum to one.
pub fn normalized_weights(exponent: &[f64], gamma: f64) -> Vec<f64> {
    let max = exponent.iter().map(|e| gamma * e).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = exponent.iter().map(|e| (gamma * e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Finite distribution on sorted distinct values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteLaw {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteLaw {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut v: Vec<(f64, f64)> = pairs.into_iter().collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(v.len());
        let mut probs: Vec<f64> = Vec::with_capacity(v.len());
        for (x, p) in v {
            if values.last() == Some(&x) {
                *probs.last_mut().expect("nonempty") += p;
            } else {
                values.push(x);
                probs.push(p);
            }
        }
        Self { values, probs }
    }

    /// Draw a value from a uniform variate `r ∈ [0,1)`.
    pub fn quantile(&self, r: f64) -> f64 {
        let mut acc = 0.0;
        for (x, p) in self.values.iter().zip(&self.probs) {
            acc += p;
            if r < acc {
                return *x;
            }
        }
        *self.values.last().expect("nonempty law")
    }
}

/// Probability weights of one stratum's arrangements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentDistribution {
    pub representation: Representation,
    /// Units in each exchangeable class; singletons in full mode.
    pub classes: Vec<Vec<usize>>,
    /// For each arrangement, the class receiving each dose index.
    pub arrangements: Vec<Vec<u16>>,
    pub probs: Vec<f64>,
    /// Number of unit permutations folded into each arrangement.
    pub multiplicity: u128,
}

impl AssignmentDistribution {
    /// Doses received by each unit under arrangement `k`, in full mode.
    pub fn unit_doses(&self, doses: &[f64], k: usize) -> Option<Vec<f64>> {
        if self.representation != Representation::Full {
            return None;
        }
        let mut out = vec![0.0; doses.len()];
        for (i, &c) in self.arrangements[k].iter().enumerate() {
            out[self.classes[c as usize][0]] = doses[i];
        }
        Some(out)
    }
}

/// Arrangement probabilities of a set under confounder values `u`.
///
/// Aggregated mode treats units with equal `(outcome, u)` as exchangeable.
pub fn assignment_probabilities(
    set: &MatchedSet,
    u: &[f64],
    gp: &SensitivityParameter,
    mode: Representation,
    full_cap: usize,
) -> Result<AssignmentDistribution> {
    let n = set.len();
    if u.len() != n {
        return Err(Error::Shape(format!("u has {} entries for a set of size {n}", u.len())));
    }
    if mode == Representation::Full && n > full_cap {
        return Err(Error::CapExceeded {
            what: format!("full enumeration of set {:?}", set.id),
            size: n as u128,
            cap: full_cap as u128,
        });
    }
    let keys: Vec<(u64, u64)> = set
        .outcomes
        .iter()
        .zip(u)
        .map(|(&r, v)| (u64::from(r), v.to_bits()))
        .collect();
    let (_, classes) = classes_by_key(&keys, mode == Representation::Full);
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let count = multinomial(&sizes);
    if count > DEFAULT_AGGREGATED_CAP {
        return Err(Error::CapExceeded {
            what: format!("arrangements of set {:?}", set.id),
            size: count,
            cap: DEFAULT_AGGREGATED_CAP,
        });
    }
    let class_u: Vec<f64> = classes.iter().map(|c| u[c[0]]).collect();
    let phi: Vec<f64> = set.doses.iter().map(|&z| gp.transform.apply(z)).collect();
    let mut arrangements = Vec::with_capacity(count as usize);
    let mut exponent = Vec::with_capacity(count as usize);
    let mut visit = |labels: &[u16]| {
        exponent.push(labels.iter().enumerate().map(|(i, &k)| phi[i] * class_u[k as usize]).sum());
        arrangements.push(labels.to_vec());
    };
    ClassEnumerator { sizes: sizes.clone(), labels: vec![0; n], visit: &mut visit }.run(0);
    let multiplicity = sizes.iter().map(|&c| factorial_u128(c)).product();
    Ok(AssignmentDistribution {
        representation: mode,
        classes,
        arrangements,
        probs: normalized_weights(&exponent, gp.gamma),
        multiplicity,
    })
}

/// Half the L1 distance between the biased and uniform permutation laws.
pub fn tv_from_uniform(set: &MatchedSet, gp: &SensitivityParameter, u: &[f64], full_cap: usize) -> Result<f64> {
    let dist = assignment_probabilities(set, u, gp, Representation::Full, full_cap)?;
    let uniform = 1.0 / dist.probs.len() as f64;
    Ok(0.5 * dist.probs.iter().map(|p| (p - uniform).abs()).sum::<f64>())
}

/// Regularity quantity `l_i` for a discordant set.
pub fn regularity_l(set: &MatchedSet, gp: &SensitivityParameter) -> Result<f64> {
    let n = set.len();
    let m = set.events();
    if m == 0 || m == n {
        return Err(Error::Undefined(format!("set {:?} is concordant", set.id)));
    }
    let mut z: Vec<f64> = set.doses.iter().map(|&d| gp.transform.apply(d)).collect();
    z.sort_by(f64::total_cmp);
    let upper: f64 = z[n.div_ceil(2)..].iter().sum();
    let lower: f64 = z[..n / 2].iter().sum();
    let binom = binomial(n, m);
    Ok(1.0 / (1.0 + (binom - 1.0) * (gp.gamma * (upper - lower)).exp()))
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bounds on the log-odds that the higher of two doses goes to a given unit
/// of a pair: `[-γ Δφ, γ Δφ]`.
pub fn logit_bound_margin(z_low: f64, z_high: f64, gp: &SensitivityParameter) -> Result<(f64, f64)> {
    if !(z_low < z_high) {
        return Err(Error::invalid(format!("need z_low < z_high, got {z_low} and {z_high}")));
    }
    let span = gp.gamma * (gp.transform.apply(z_high) - gp.transform.apply(z_low));
    Ok((-span, span))
}

/// Log-odds that unit 2 of a pair with confounders `(u1, u2)` receives the
/// higher dose.
pub fn pair_logit(z_low: f64, z_high: f64, u1: f64, u2: f64, gp: &SensitivityParameter) -> f64 {
    let (a, b) = (gp.transform.apply(z_low), gp.transform.apply(z_high));
    let high_to_2 = gp.gamma * (a * u1 + b * u2);
    let high_to_1 = gp.gamma * (b * u1 + a * u2);
    let p = 1.0 / (1.0 + (high_to_1 - high_to_2).exp());
    (p / (1.0 - p)).ln()
}
