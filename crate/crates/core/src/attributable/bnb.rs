//! Branch and bound over candidate selections.
//!
//! A selection is accepted when its directional violation is negative. Any
//! accepting selection satisfies
//! `E_low − t ≤ z √V_low` and `t − E_upp ≤ z √V_upp`, so a positive lower
//! bound on the larger of the two left-hand excesses rules out a subtree.
//! The bound comes from a Lagrangian relaxation: mixing the two excesses with
//! weight `λ`, pricing the pivot range with `μ`, and replacing each `√V` by its
//! tangent upper bound `V/(2s) + s/2` makes the problem separable across sets,
//! so its minimum is a sum of per-set minima.

use serde::Serialize;

use super::{
    all_candidates, delta_out_of_range, selection_accepts, selection_y, trivially_infeasible, Decision, Hypothesis,
    PivotRange, Sidedness, StratumCandidate, Sums, TaeInstance, TaeMode, TaeTestResult,
};
use crate::design::MatchedDesign;
use crate::error::Result;

/// Default node budget for exact search.
pub const NODE_BUDGET: u64 = 1_000_000;

/// A subtree is pruned only when its bound exceeds this margin.
const PRUNE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnbMode {
    Exact,
    /// Root bound only; never rejects a hypothesis the exact search accepts.
    Relaxed,
}

#[derive(Debug, Clone, Copy)]
struct Multipliers {
    lambda: f64,
    mu: f64,
    s_low: f64,
    s_upp: f64,
}

struct Search<'a> {
    cands: &'a [Vec<StratumCandidate>],
    z: f64,
    side: Sidedness,
    lo: i64,
    hi: i64,
    /// `reach[i][v]`: pivot total `reach_min[i] + v` is attainable by sets `i..`.
    reach: Vec<Vec<bool>>,
    reach_min: Vec<i64>,
    s_max: f64,
    budget: u64,
    nodes: u64,
    exhausted: bool,
    choice: Vec<usize>,
    witness: Option<Vec<usize>>,
    witness_y: Option<f64>,
    root_bound: Option<f64>,
}

fn golden_max(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
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

impl<'a> Search<'a> {
    fn new(cands: &'a [Vec<StratumCandidate>], inst: &TaeInstance, range: PivotRange, budget: u64) -> Self {
        let n = cands.len();
        let mut reach = vec![vec![true]; n + 1];
        let mut reach_min = vec![0i64; n + 1];
        for i in (0..n).rev() {
            let tmin = cands[i].iter().map(|c| c.t).min().unwrap_or(0);
            let tmax = cands[i].iter().map(|c| c.t).max().unwrap_or(0);
            let next = &reach[i + 1];
            let base = reach_min[i + 1] + tmin;
            let mut cur = vec![false; next.len() + (tmax - tmin) as usize];
            for c in &cands[i] {
                let shift = (c.t - tmin) as usize;
                for (v, &ok) in next.iter().enumerate() {
                    if ok {
                        cur[v + shift] = true;
                    }
                }
            }
            reach[i] = cur;
            reach_min[i] = base;
        }
        let total_min = reach_min[0];
        let total_max = total_min + reach[0].len() as i64 - 1;
        let v_sum: f64 = cands.iter().map(|c| c.iter().map(|k| k.v_low.max(k.v_upp)).fold(0.0, f64::max)).sum();
        Self {
            cands,
            z: inst.z(),
            side: inst.sidedness,
            lo: range.lo.max(total_min),
            hi: range.hi.min(total_max),
            reach,
            reach_min,
            s_max: v_sum.sqrt() + 1.0,
            budget,
            nodes: 0,
            exhausted: false,
            choice: vec![0; n],
            witness: None,
            witness_y: None,
            root_bound: None,
        }
    }

    fn range_ok(&self, depth: usize, t: i64) -> bool {
        let base = t + self.reach_min[depth];
        self.reach[depth].iter().enumerate().any(|(v, &ok)| ok && (self.lo..=self.hi).contains(&(base + v as i64)))
    }

    fn cost(&self, c: &StratumCandidate, m: &Multipliers) -> f64 {
        let t = c.t as f64;
        let upp = t - c.e_upp - self.z * c.v_upp / (2.0 * m.s_upp);
        let low = c.e_low - t - self.z * c.v_low / (2.0 * m.s_low);
        m.lambda * low + (1.0 - m.lambda) * upp + m.mu * t
    }

    /// Lagrangian lower bound on `max(E_low − t − z√V_low, t − E_upp − z√V_upp)`
    /// over selections extending `prefix` at sets `depth..`.
    fn bound(&self, depth: usize, prefix: &Sums, m: &Multipliers) -> f64 {
        let pt = prefix.t as f64;
        let mut total = m.lambda * (prefix.el - pt - self.z * prefix.vl / (2.0 * m.s_low))
            + (1.0 - m.lambda) * (pt - prefix.eu - self.z * prefix.vu / (2.0 * m.s_upp))
            + m.mu * pt;
        for set in &self.cands[depth..] {
            total += set.iter().map(|c| self.cost(c, m)).fold(f64::INFINITY, f64::min);
        }
        let range_term = if m.mu > 0.0 { m.mu * self.hi as f64 } else { m.mu * self.lo as f64 };
        total - m.lambda * self.z * m.s_low / 2.0 - (1.0 - m.lambda) * self.z * m.s_upp / 2.0 - range_term
    }

    fn optimize(&self, depth: usize, prefix: &Sums, start: Multipliers) -> (f64, Multipliers) {
        let mut m = start;
        if self.side == Sidedness::Upper {
            m.lambda = 0.0;
        }
        let mut best = self.bound(depth, prefix, &m);
        for _ in 0..3 {
            if best > PRUNE_TOL {
                break;
            }
            let before = best;
            for coord in 0..4 {
                if self.side == Sidedness::Upper && (coord == 0 || coord == 2) {
                    continue;
                }
                let (a, b) = match coord {
                    0 => (0.0, 1.0),
                    1 => (-2.0, 2.0),
                    _ => (1e-9, self.s_max),
                };
                let set = |m: &mut Multipliers, x: f64| match coord {
                    0 => m.lambda = x,
                    1 => m.mu = x,
                    2 => m.s_low = x,
                    _ => m.s_upp = x,
                };
                let mut f = |x: f64| {
                    let mut trial = m;
                    set(&mut trial, x);
                    self.bound(depth, prefix, &trial)
                };
                let (x, v) = golden_max(&mut f, a, b, 40);
                for (cand_x, cand_v) in [(x, v), (a, f(a)), (b, f(b))] {
                    if cand_v > best {
                        best = cand_v;
                        set(&mut m, cand_x);
                    }
                }
            }
            if best - before < 1e-9 {
                break;
            }
        }
        (best, m)
    }

    fn dfs(&mut self, depth: usize, prefix: Sums, mult: Multipliers) -> bool {
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return false;
        }
        if !self.range_ok(depth, prefix.t) {
            return false;
        }
        if depth == self.cands.len() {
            let y = selection_y(&prefix, self.z * self.z, self.side);
            if selection_accepts(y) {
                self.witness = Some(self.choice.clone());
                self.witness_y = y.is_finite().then_some(y);
                return true;
            }
            return false;
        }
        let (lb, m) = self.optimize(depth, &prefix, mult);
        if depth == 0 {
            self.root_bound = Some(lb);
        }
        if lb > PRUNE_TOL {
            return false;
        }
        let mut order: Vec<(f64, usize)> =
            self.cands[depth].iter().enumerate().map(|(k, c)| (self.cost(c, &m), k)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, k) in order {
            self.choice[depth] = k;
            let next = prefix.add(&self.cands[depth][k]);
            if self.dfs(depth + 1, next, m) {
                return true;
            }
            if self.exhausted {
                return false;
            }
        }
        false
    }

    fn initial(&self) -> Multipliers {
        let mean_v = |f: fn(&StratumCandidate) -> f64| -> f64 {
            self.cands.iter().map(|c| c.iter().map(f).sum::<f64>() / c.len() as f64).sum::<f64>()
        };
        Multipliers {
            lambda: if self.side == Sidedness::Upper { 0.0 } else { 0.5 },
            mu: 0.0,
            s_low: mean_v(|c| c.v_low).sqrt().max(1e-3),
            s_upp: mean_v(|c| c.v_upp).sqrt().max(1e-3),
        }
    }
}

/// Test `TAE = Δ` by branch and bound or by its root relaxation.
pub fn test_tae_bnb(design: &MatchedDesign, inst: &TaeInstance, delta: i64, mode: BnbMode) -> Result<TaeTestResult> {
    test_tae_bnb_with(design, inst, delta, Hypothesis::Equal, mode, NODE_BUDGET)
}

pub fn test_tae_bnb_with(
    design: &MatchedDesign,
    inst: &TaeInstance,
    delta: i64,
    hypothesis: Hypothesis,
    mode: BnbMode,
    budget: u64,
) -> Result<TaeTestResult> {
    let observed = inst.observed_count(design);
    let tmode = match mode {
        BnbMode::Exact => TaeMode::BranchAndBound,
        BnbMode::Relaxed => TaeMode::Relaxed,
    };
    if delta_out_of_range(observed, delta, hypothesis) {
        return Ok(TaeTestResult::immediate(delta, hypothesis, tmode, Decision::Reject));
    }
    let cands = all_candidates(design, inst)?;
    Ok(bnb_on(&cands, inst, observed, delta, hypothesis, mode, budget))
}

pub(crate) fn bnb_on(
    cands: &[Vec<StratumCandidate>],
    inst: &TaeInstance,
    observed: i64,
    delta: i64,
    hypothesis: Hypothesis,
    mode: BnbMode,
    budget: u64,
) -> TaeTestResult {
    let tmode = match mode {
        BnbMode::Exact => TaeMode::BranchAndBound,
        BnbMode::Relaxed => TaeMode::Relaxed,
    };
    if delta_out_of_range(observed, delta, hypothesis) {
        return TaeTestResult::immediate(delta, hypothesis, tmode, Decision::Reject);
    }
    let range = hypothesis.pivot_range(observed, delta);
    if trivially_infeasible(cands, range) {
        return TaeTestResult::immediate(delta, hypothesis, tmode, Decision::Reject);
    }
    let mut search = Search::new(cands, inst, range, budget);
    match mode {
        BnbMode::Relaxed => {
            let (lb, _) = search.optimize(0, &Sums::default(), search.initial());
            TaeTestResult {
                delta,
                hypothesis,
                decision: if lb > PRUNE_TOL { Decision::Reject } else { Decision::Accept },
                optimal_y: None,
                mode: tmode,
                witness: None,
                nodes_explored: 1,
                root_bound: Some(lb),
                p_value: None,
            }
        }
        BnbMode::Exact => {
            let start = search.initial();
            let found = search.dfs(0, Sums::default(), start);
            let decision = if found {
                Decision::Accept
            } else if search.exhausted {
                Decision::Undecided
            } else {
                Decision::Reject
            };
            TaeTestResult {
                delta,
                hypothesis,
                decision,
                optimal_y: None,
                mode: tmode,
                witness: search.witness,
                nodes_explored: search.nodes.min(budget),
                root_bound: search.root_bound,
                p_value: None,
            }
        }
    }
}
