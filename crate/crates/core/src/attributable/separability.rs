//! Greedy test of `TAE = a` for designs where every set contributes at most
//! one exposed event. Each set's pivot is treated as a Bernoulli trial whose
//! success probability is bounded by `π̄`; the `a` sets whose attribution
//! costs the least expectation are attributed, and the resulting bound on the
//! tail is approximated by a normal law.

use serde::Serialize;

use super::{all_candidates, pi_bar, Decision, Hypothesis, StratumCandidate, TaeInstance, TaeMode, TaeTestResult};
use crate::design::MatchedDesign;
use crate::error::{Error, Result};
use crate::sharp_null::upper_normal_tail;

/// Per-set bounds for the two attribution choices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityScores {
    pub set_id: String,
    /// `Σ_j 1{Z > c} R` of the set, 0 or 1.
    pub contribution: i64,
    /// `π̄` when the set's event is not attributed to exposure.
    pub lambda_kept: f64,
    /// `π̄` when it is attributed; `None` for sets without an exposed event.
    pub lambda_attributed: Option<f64>,
    pub omega_kept: f64,
    pub omega_attributed: Option<f64>,
    /// Candidate indices realising the two bounds.
    pub kept_candidate: usize,
    pub attributed_candidate: Option<usize>,
}

/// Best candidate among those with pivot `t` (or any pivot): largest `π̄`,
/// ties broken by the larger `π̄(1 − π̄)`.
fn best(pis: &[f64], cands: &[StratumCandidate], t: Option<i64>) -> Option<(usize, f64)> {
    let mut out: Option<(usize, f64)> = None;
    for (k, c) in cands.iter().enumerate() {
        if t.is_some_and(|t| c.t != t) {
            continue;
        }
        let p = pis[k];
        let better = match out {
            None => true,
            Some((_, q)) => p > q || (p == q && p * (1.0 - p) > q * (1.0 - q)),
        };
        if better {
            out = Some((k, p));
        }
    }
    out
}

fn scores_from(
    design: &MatchedDesign,
    inst: &TaeInstance,
    cands: &[Vec<StratumCandidate>],
) -> Result<Vec<SeparabilityScores>> {
    let mut out = Vec::with_capacity(design.sets.len());
    for (set, cs) in design.sets.iter().zip(cands) {
        let contribution = inst.set_count(set);
        if contribution > 1 {
            return Err(Error::Precondition(format!(
                "set {:?} contributes {contribution} exposed events; at most one is allowed",
                set.id
            )));
        }
        let pis = cs.iter().map(|c| pi_bar(set, inst, &c.r0)).collect::<Result<Vec<f64>>>()?;
        let omega = |p: f64| p * (1.0 - p);
        let (kept, attributed) = if contribution == 1 {
            (best(&pis, cs, Some(1)), best(&pis, cs, Some(0)))
        } else {
            (best(&pis, cs, None), None)
        };
        let (kept_candidate, lambda_kept) = kept.expect("every set has a candidate");
        out.push(SeparabilityScores {
            set_id: set.id.clone(),
            contribution,
            lambda_kept,
            lambda_attributed: attributed.map(|a| a.1),
            omega_kept: omega(lambda_kept),
            omega_attributed: attributed.map(|a| omega(a.1)),
            kept_candidate,
            attributed_candidate: attributed.map(|a| a.0),
        });
    }
    Ok(out)
}

/// Attribution bounds for every set.
pub fn separability_scores(design: &MatchedDesign, inst: &TaeInstance) -> Result<Vec<SeparabilityScores>> {
    let cands = all_candidates(design, inst)?;
    scores_from(design, inst, &cands)
}

/// Approximate test of `TAE = a` by the greedy attribution.
pub fn separability_test(design: &MatchedDesign, inst: &TaeInstance, a: i64) -> Result<TaeTestResult> {
    let cands = all_candidates(design, inst)?;
    let scores = scores_from(design, inst, &cands)?;
    let observed = inst.observed_count(design);
    let mut result = TaeTestResult::immediate(a, Hypothesis::Equal, TaeMode::Separability, Decision::Reject);
    if a > observed || a < 0 {
        return Ok(result);
    }
    let mut eligible: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].contribution == 1).collect();
    let decline = |s: &SeparabilityScores| s.lambda_kept - s.lambda_attributed.unwrap_or(0.0);
    let omega_decline = |s: &SeparabilityScores| s.omega_kept - s.omega_attributed.unwrap_or(0.0);
    eligible.sort_by(|&i, &j| {
        decline(&scores[i])
            .total_cmp(&decline(&scores[j]))
            .then(omega_decline(&scores[i]).total_cmp(&omega_decline(&scores[j])))
            .then(i.cmp(&j))
    });
    let mut witness: Vec<usize> = scores.iter().map(|s| s.kept_candidate).collect();
    let mut pis: Vec<f64> = scores.iter().map(|s| s.lambda_kept).collect();
    for &i in eligible.iter().take(a as usize) {
        witness[i] = scores[i].attributed_candidate.expect("eligible sets have an attributed candidate");
        pis[i] = scores[i].lambda_attributed.expect("eligible sets have an attributed bound");
    }
    let mean: f64 = pis.iter().sum();
    let var: f64 = pis.iter().map(|p| p * (1.0 - p)).sum();
    let k = (observed - a) as f64;
    result.witness = Some(witness);
    result.nodes_explored = scores.len() as u64;
    if mean >= k {
        result.decision = Decision::Accept;
        result.p_value = Some(1.0);
        return Ok(result);
    }
    let p = if var > 0.0 { upper_normal_tail((k - mean) / var.sqrt()) } else { 0.0 };
    result.p_value = Some(p);
    result.decision = if p < inst.alpha { Decision::Reject } else { Decision::Accept };
    Ok(result)
}
