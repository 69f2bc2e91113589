//! Confidence sets for the threshold attributable effect by test inversion.

use serde::Serialize;

use super::bnb::{bnb_on, BnbMode, NODE_BUDGET};
use super::{all_candidates, enumeration_on, Decision, Hypothesis, StratumCandidate, TaeInstance};
use crate::design::MatchedDesign;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaeSolver {
    Enumeration,
    BranchAndBound,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceSet {
    /// Smallest `Δ` with `TAE ≤ Δ` not rejected.
    pub lower: i64,
    /// Largest `Δ` with `TAE ≥ Δ` not rejected.
    pub upper: i64,
    pub observed: i64,
    pub solver: TaeSolver,
    /// Some test hit the node budget and was counted as accepted.
    pub undecided: bool,
    /// Values of `Δ` whose point hypothesis is accepted (enumeration only).
    pub accepted_points: Option<Vec<i64>>,
    pub tests_run: usize,
}

struct Inverter<'a> {
    cands: &'a [Vec<StratumCandidate>],
    inst: &'a TaeInstance,
    observed: i64,
    solver: TaeSolver,
    undecided: bool,
    tests: usize,
}

impl Inverter<'_> {
    fn accept(&mut self, hypothesis: Hypothesis, delta: i64) -> Result<bool> {
        self.tests += 1;
        let r = match self.solver {
            TaeSolver::Enumeration => enumeration_on(self.cands, self.inst, self.observed, delta, hypothesis)?,
            TaeSolver::BranchAndBound => {
                bnb_on(self.cands, self.inst, self.observed, delta, hypothesis, BnbMode::Exact, NODE_BUDGET)
            }
            TaeSolver::Relaxed => {
                bnb_on(self.cands, self.inst, self.observed, delta, hypothesis, BnbMode::Relaxed, NODE_BUDGET)
            }
        };
        if r.decision == Decision::Undecided {
            self.undecided = true;
        }
        Ok(r.accepted())
    }

    /// Largest `Δ` in `[0, obs]` with `TAE ≥ Δ` accepted; acceptance is
    /// nonincreasing in `Δ` for the exact solvers.
    fn upper(&mut self) -> Result<Option<i64>> {
        if self.solver == TaeSolver::Relaxed {
            for d in (0..=self.observed).rev() {
                if self.accept(Hypothesis::AtLeast, d)? {
                    return Ok(Some(d));
                }
            }
            return Ok(None);
        }
        if !self.accept(Hypothesis::AtLeast, 0)? {
            return Ok(None);
        }
        let (mut ok, mut bad) = (0, self.observed + 1);
        while bad - ok > 1 {
            let mid = ok + (bad - ok) / 2;
            if self.accept(Hypothesis::AtLeast, mid)? {
                ok = mid;
            } else {
                bad = mid;
            }
        }
        Ok(Some(ok))
    }

    /// Smallest `Δ` in `[0, obs]` with `TAE ≤ Δ` accepted.
    fn lower(&mut self) -> Result<Option<i64>> {
        if self.solver == TaeSolver::Relaxed {
            for d in 0..=self.observed {
                if self.accept(Hypothesis::AtMost, d)? {
                    return Ok(Some(d));
                }
            }
            return Ok(None);
        }
        if !self.accept(Hypothesis::AtMost, self.observed)? {
            return Ok(None);
        }
        let (mut bad, mut ok) = (-1, self.observed);
        while ok - bad > 1 {
            let mid = bad + (ok - bad) / 2;
            if self.accept(Hypothesis::AtMost, mid)? {
                ok = mid;
            } else {
                bad = mid;
            }
        }
        Ok(Some(ok))
    }
}

/// Interval `[lower, upper]` of attributable effects not rejected at level
/// `α`, or `None` when every value is rejected.
pub fn tae_confidence_set(
    design: &MatchedDesign,
    inst: &TaeInstance,
    solver: TaeSolver,
) -> Result<Option<ConfidenceSet>> {
    let cands = all_candidates(design, inst)?;
    let observed = inst.observed_count(design);
    let mut inv = Inverter { cands: &cands, inst, observed, solver, undecided: false, tests: 0 };
    let Some(upper) = inv.upper()? else {
        return Ok(None);
    };
    let Some(lower) = inv.lower()? else {
        return Ok(None);
    };
    if lower > upper {
        return Ok(None);
    }
    let accepted_points = if solver == TaeSolver::Enumeration {
        let mut pts = Vec::new();
        for d in 0..=observed {
            if inv.accept(Hypothesis::Equal, d)? {
                pts.push(d);
            }
        }
        Some(pts)
    } else {
        None
    };
    Ok(Some(ConfidenceSet {
        lower,
        upper,
        observed,
        solver,
        undecided: inv.undecided,
        accepted_points,
        tests_run: inv.tests,
    }))
}
