//! Inference on the threshold attributable effect: the number of units dosed
//! above `c` whose event would not have happened at zero dose.
//!
//! Each hypothesis `TAE = Δ` is composite over the unobserved reference
//! outcomes `r0`. Per set, the compatible `r0` patterns are listed as
//! candidates carrying their pivot value and worst-case moment bounds; a
//! hypothesis is accepted when some cross-set selection of candidates with the
//! right pivot total passes the directional normal test.

mod bnb;
mod confidence;
mod separability;

pub use bnb::{test_tae_bnb, BnbMode};
pub use confidence::{tae_confidence_set, ConfidenceSet, TaeSolver};
pub use separability::{separability_scores, separability_test, SeparabilityScores};

use rayon::prelude::*;
use serde::Serialize;

use crate::assignment::{Representation, SensitivityParameter, StratumSupport, DEFAULT_AGGREGATED_CAP};
use crate::design::{MatchedDesign, MatchedSet};
use crate::error::{Error, Result};
use crate::sharp_null::normal_quantile;

/// Feasibility margin encoding the strict inequality `y < 0`.
pub const FEAS_TOL: f64 = 1e-9;

/// Default cap on candidates per set.
pub const DEFAULT_CANDIDATE_CAP: usize = 1 << 10;

/// Default cap on cross-set combinations for the enumeration oracle.
pub const ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    /// Reject when the pivot falls outside the band between the lower and
    /// upper worst-case moments in either direction.
    #[default]
    Directional,
    /// Reject only when the pivot is too large for the upper bound.
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaeInstance {
    /// Dose threshold `c`.
    pub threshold: f64,
    /// Doses `≤ eps` reveal the reference outcome.
    pub eps: f64,
    pub alpha: f64,
    pub gp: SensitivityParameter,
    pub sidedness: Sidedness,
    pub candidate_cap: usize,
}

impl TaeInstance {
    pub fn new(threshold: f64, eps: f64, alpha: f64, gp: SensitivityParameter) -> Result<Self> {
        if !(threshold.is_finite() && eps.is_finite()) {
            return Err(Error::invalid("threshold and eps must be finite"));
        }
        if !(eps < threshold) {
            return Err(Error::invalid(format!("eps {eps} must be below the threshold {threshold}")));
        }
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid(format!("alpha {alpha} must lie in (0, 0.5)")));
        }
        Ok(Self { threshold, eps, alpha, gp, sidedness: Sidedness::Directional, candidate_cap: DEFAULT_CANDIDATE_CAP })
    }

    pub fn with_sidedness(mut self, sidedness: Sidedness) -> Self {
        self.sidedness = sidedness;
        self
    }

    /// One-sided critical value `Φ⁻¹(1 − α)`.
    pub fn z(&self) -> f64 {
        normal_quantile(1.0 - self.alpha)
    }

    /// `χ²` critical value with one degree of freedom at level `2α`.
    pub fn chi2(&self) -> f64 {
        self.z().powi(2)
    }

    /// `Σ 1{Z > c} R`.
    pub fn observed_count(&self, design: &MatchedDesign) -> i64 {
        design.sets.iter().map(|s| self.set_count(s)).sum()
    }

    pub(crate) fn set_count(&self, set: &MatchedSet) -> i64 {
        set.doses.iter().zip(&set.outcomes).filter(|(&z, &r)| z > self.threshold && r == 1).count() as i64
    }

    fn indicator(&self, set: &MatchedSet) -> Vec<f64> {
        set.doses.iter().map(|&z| if z > self.threshold { 1.0 } else { 0.0 }).collect()
    }
}

/// One compatible reference-outcome pattern of a set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumCandidate {
    pub r0: Vec<u8>,
    /// Observed pivot `Σ_j 1{z_j > c} r0_j`.
    pub t: i64,
    pub e_low: f64,
    pub e_upp: f64,
    pub v_low: f64,
    pub v_upp: f64,
}

/// Pivot moments of a set under pattern `r0` with confounders `u`.
fn pivot_moments(set: &MatchedSet, inst: &TaeInstance, r0: &[f64], u: &[f64]) -> Result<(f64, f64)> {
    let sup = StratumSupport::build(
        &set.doses,
        u,
        r0,
        &inst.indicator(set),
        &inst.gp.transform,
        Representation::Aggregated,
        DEFAULT_AGGREGATED_CAP,
    )?;
    Ok(sup.moments(inst.gp.gamma))
}

/// All reference-outcome patterns compatible with the data and monotonicity.
///
/// Units at dose `≤ eps` keep `r0 = R`; units above `eps` with `R = 0` get
/// `r0 = 0`; units above `eps` with `R = 1` are free.
pub fn enumerate_compatible(set: &MatchedSet, inst: &TaeInstance) -> Result<Vec<StratumCandidate>> {
    let free: Vec<usize> = (0..set.len()).filter(|&j| set.doses[j] > inst.eps && set.outcomes[j] == 1).collect();
    if free.len() >= usize::BITS as usize - 1 || (1usize << free.len()) > inst.candidate_cap {
        return Err(Error::CapExceeded {
            what: format!("candidates of set {:?}", set.id),
            size: 1u128 << free.len().min(127),
            cap: inst.candidate_cap as u128,
        });
    }
    let base: Vec<u8> = (0..set.len()).map(|j| if set.doses[j] <= inst.eps { set.outcomes[j] } else { 0 }).collect();
    let ind = inst.indicator(set);
    let mut out = Vec::with_capacity(1 << free.len());
    for mask in 0..(1usize << free.len()) {
        let mut r0 = base.clone();
        for (b, &j) in free.iter().enumerate() {
            r0[j] = ((mask >> b) & 1) as u8;
        }
        let rf: Vec<f64> = r0.iter().map(|&r| f64::from(r)).collect();
        let flipped: Vec<f64> = rf.iter().map(|r| 1.0 - r).collect();
        let (e_upp, v_upp) = pivot_moments(set, inst, &rf, &rf)?;
        let (e_low, v_low) = pivot_moments(set, inst, &rf, &flipped)?;
        let t = ind.iter().zip(&r0).filter(|(&m, &r)| m > 0.0 && r == 1).count() as i64;
        out.push(StratumCandidate { r0, t, e_low, e_upp, v_low, v_upp });
    }
    Ok(out)
}

/// Candidates of every set.
pub fn all_candidates(design: &MatchedDesign, inst: &TaeInstance) -> Result<Vec<Vec<StratumCandidate>>> {
    design.sets.par_iter().map(|s| enumerate_compatible(s, inst)).collect()
}

/// Upper bound `π̄` on the probability-weighted pivot of a set at `u = r0`.
pub fn pi_bar(set: &MatchedSet, inst: &TaeInstance, r0: &[u8]) -> Result<f64> {
    if r0.len() != set.len() {
        return Err(Error::Shape(format!("pattern of length {} for a set of size {}", r0.len(), set.len())));
    }
    let rf: Vec<f64> = r0.iter().map(|&r| f64::from(r)).collect();
    Ok(pivot_moments(set, inst, &rf, &rf)?.0)
}

/// Accumulated totals of a cross-set selection of candidates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Sums {
    pub t: i64,
    pub el: f64,
    pub eu: f64,
    pub vl: f64,
    pub vu: f64,
}

impl Sums {
    pub(crate) fn add(&self, c: &StratumCandidate) -> Sums {
        Sums { t: self.t + c.t, el: self.el + c.e_low, eu: self.eu + c.e_upp, vl: self.vl + c.v_low, vu: self.vu + c.v_upp }
    }
}

/// Largest active directional violation `y` of a selection; `-∞` when the
/// pivot lies inside the band.
pub(crate) fn selection_y(s: &Sums, chi2: f64, side: Sidedness) -> f64 {
    let t = s.t as f64;
    let mut y = f64::NEG_INFINITY;
    if side == Sidedness::Directional && t < s.el {
        y = y.max((t - s.el).powi(2) - chi2 * s.vl);
    }
    if t > s.eu {
        y = y.max((t - s.eu).powi(2) - chi2 * s.vu);
    }
    y
}

pub(crate) fn selection_accepts(y: f64) -> bool {
    y < -FEAS_TOL
}

/// Allowed range of the pivot total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PivotRange {
    pub lo: i64,
    pub hi: i64,
}

/// The form of a TAE hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hypothesis {
    Equal,
    /// `TAE ≤ Δ`.
    AtMost,
    /// `TAE ≥ Δ`.
    AtLeast,
}

impl Hypothesis {
    pub fn pivot_range(self, observed: i64, delta: i64) -> PivotRange {
        let target = observed - delta;
        match self {
            Hypothesis::Equal => PivotRange { lo: target, hi: target },
            Hypothesis::AtMost => PivotRange { lo: target, hi: i64::MAX },
            Hypothesis::AtLeast => PivotRange { lo: i64::MIN, hi: target },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Reject,
    Accept,
    /// The node budget ran out before a decision.
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaeMode {
    Enumeration,
    BranchAndBound,
    Relaxed,
    Separability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaeTestResult {
    pub delta: i64,
    pub hypothesis: Hypothesis,
    pub decision: Decision,
    /// Smallest directional violation over feasible selections; `None` when
    /// it is unbounded below or no selection is feasible.
    pub optimal_y: Option<f64>,
    pub mode: TaeMode,
    /// Candidate index per set of an accepting selection.
    pub witness: Option<Vec<usize>>,
    pub nodes_explored: u64,
    /// Best lower bound on the violation at the root, where computed.
    pub root_bound: Option<f64>,
    /// Approximate p-value, for the separability test.
    pub p_value: Option<f64>,
}

impl TaeTestResult {
    pub(crate) fn immediate(delta: i64, hypothesis: Hypothesis, mode: TaeMode, decision: Decision) -> Self {
        Self { delta, hypothesis, decision, optimal_y: None, mode, witness: None, nodes_explored: 0, root_bound: None, p_value: None }
    }

    pub fn accepted(&self) -> bool {
        self.decision != Decision::Reject
    }
}

/// Reject outright when no selection can reach the pivot range.
pub(crate) fn trivially_infeasible(cands: &[Vec<StratumCandidate>], range: PivotRange) -> bool {
    let lo: i64 = cands.iter().map(|c| c.iter().map(|k| k.t).min().unwrap_or(0)).sum();
    let hi: i64 = cands.iter().map(|c| c.iter().map(|k| k.t).max().unwrap_or(0)).sum();
    hi < range.lo || lo > range.hi
}

/// Enumerate every cross-set selection with pivot total in `range`.
pub fn enumerate_selections(
    cands: &[Vec<StratumCandidate>],
    range: PivotRange,
    chi2: f64,
    side: Sidedness,
) -> Result<(Option<Vec<usize>>, f64, u64)> {
    let total: u128 = cands.iter().map(|c| c.len() as u128).try_fold(1u128, |a, b| a.checked_mul(b)).unwrap_or(u128::MAX);
    if total > ENUMERATION_CAP {
        return Err(Error::CapExceeded { what: "candidate selections".into(), size: total, cap: ENUMERATION_CAP });
    }
    let n = cands.len();
    let mut suffix_min = vec![0i64; n + 1];
    let mut suffix_max = vec![0i64; n + 1];
    for i in (0..n).rev() {
        suffix_min[i] = suffix_min[i + 1] + cands[i].iter().map(|c| c.t).min().unwrap_or(0);
        suffix_max[i] = suffix_max[i + 1] + cands[i].iter().map(|c| c.t).max().unwrap_or(0);
    }
    struct Walk<'a> {
        cands: &'a [Vec<StratumCandidate>],
        range: PivotRange,
        chi2: f64,
        side: Sidedness,
        suffix_min: Vec<i64>,
        suffix_max: Vec<i64>,
        choice: Vec<usize>,
        best_y: f64,
        witness: Option<Vec<usize>>,
        leaves: u64,
    }
    impl Walk<'_> {
        fn go(&mut self, i: usize, acc: Sums) {
            if acc.t + self.suffix_max[i] < self.range.lo || acc.t + self.suffix_min[i] > self.range.hi {
                return;
            }
            if i == self.cands.len() {
                self.leaves += 1;
                let y = selection_y(&acc, self.chi2, self.side);
                if y < self.best_y {
                    self.best_y = y;
                    if selection_accepts(y) {
                        self.witness = Some(self.choice.clone());
                    }
                }
                return;
            }
            for k in 0..self.cands[i].len() {
                self.choice[i] = k;
                let next = acc.add(&self.cands[i][k]);
                self.go(i + 1, next);
            }
        }
    }
    let mut w = Walk {
        cands,
        range,
        chi2,
        side,
        suffix_min,
        suffix_max,
        choice: vec![0; n],
        best_y: f64::INFINITY,
        witness: None,
        leaves: 0,
    };
    w.go(0, Sums::default());
    Ok((w.witness, w.best_y, w.leaves))
}

pub(crate) fn delta_out_of_range(observed: i64, delta: i64, hypothesis: Hypothesis) -> bool {
    match hypothesis {
        Hypothesis::Equal => delta > observed || delta < 0,
        Hypothesis::AtLeast => delta > observed,
        Hypothesis::AtMost => delta < 0,
    }
}

/// Exact test by enumerating all candidate selections.
pub fn test_tae_enumeration(design: &MatchedDesign, inst: &TaeInstance, delta: i64) -> Result<TaeTestResult> {
    test_tae_enumeration_with(design, inst, delta, Hypothesis::Equal)
}

pub fn test_tae_enumeration_with(
    design: &MatchedDesign,
    inst: &TaeInstance,
    delta: i64,
    hypothesis: Hypothesis,
) -> Result<TaeTestResult> {
    let observed = inst.observed_count(design);
    if delta_out_of_range(observed, delta, hypothesis) {
        return Ok(TaeTestResult::immediate(delta, hypothesis, TaeMode::Enumeration, Decision::Reject));
    }
    let cands = all_candidates(design, inst)?;
    enumeration_on(&cands, inst, observed, delta, hypothesis)
}

pub(crate) fn enumeration_on(
    cands: &[Vec<StratumCandidate>],
    inst: &TaeInstance,
    observed: i64,
    delta: i64,
    hypothesis: Hypothesis,
) -> Result<TaeTestResult> {
    if delta_out_of_range(observed, delta, hypothesis) {
        return Ok(TaeTestResult::immediate(delta, hypothesis, TaeMode::Enumeration, Decision::Reject));
    }
    let range = hypothesis.pivot_range(observed, delta);
    let (witness, best_y, leaves) = enumerate_selections(cands, range, inst.chi2(), inst.sidedness)?;
    Ok(TaeTestResult {
        delta,
        hypothesis,
        decision: if witness.is_some() { Decision::Accept } else { Decision::Reject },
        optimal_y: best_y.is_finite().then_some(best_y),
        mode: TaeMode::Enumeration,
        witness,
        nodes_explored: leaves,
        root_bound: None,
        p_value: None,
    })
}
