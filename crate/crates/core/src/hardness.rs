//! The worst-case p-value problem for continuous outcomes, rewritten as a
//! signomial program in the exponentiated confounders, and a small instance
//! whose worst case sits strictly inside the unit cube.
//!
//! The program is emitted as data and never solved. For set `i` with sorted
//! doses `z_(1) ≤ … ≤ z_(n)`, the variables are `w_{ijk} = exp(γ z_(j) u_k)`,
//! the normalizer `s_i`, and one probability `p_{iπ}` per arrangement `π`,
//! where arrangement `π` gives unit `k` the dose `z_(π(k))`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::assignment::SensitivityParameter;
use crate::design::{MatchedDesign, MatchedSet};
use crate::error::{Error, Result};
use crate::sharp_null::{brute_force_worst_p, CubeSearch};

/// Largest total number of arrangement variables emitted.
pub const MAX_ARRANGEMENTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variable {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Constraints refer to variables by index into `SignomialProgram::variables`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Constraint {
    /// `p · s = Π w`.
    Product { p: usize, s: usize, w: Vec<usize> },
    /// `s = Σ_terms Π w`.
    Sum { s: usize, terms: Vec<Vec<usize>> },
    /// `w = base^exponent`.
    Power { w: usize, base: usize, exponent: f64 },
    /// `lo ≤ w ≤ hi`.
    Box { w: usize, lo: f64, hi: f64 },
}

/// One arrangement's contribution to the moments of the statistic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveTerm {
    pub set: usize,
    pub p: usize,
    /// Value of the set's statistic under the arrangement.
    pub q: f64,
}

/// `ζ = (t − μ)² − χ² σ²` with `μ = Σ p q` and
/// `σ² = Σ_i [Σ_π p q² − (Σ_π p q)²]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Objective {
    pub t_obs: f64,
    pub chi2: f64,
    pub terms: Vec<ObjectiveTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignomialProgram {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub objective: Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct ProgramCounts {
    pub p_vars: usize,
    pub s_vars: usize,
    pub w_vars: usize,
    pub product: usize,
    pub sum: usize,
    pub power: usize,
    pub boxes: usize,
}

fn for_each_permutation(n: usize, visit: &mut dyn FnMut(&[usize])) {
    // lexicographic order keeps arrangement numbering stable
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        visit(&perm);
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else { return };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).expect("successor exists");
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).fold(1usize, |a, b| a.saturating_mul(b))
}

/// Build the program for the statistic `T = Σ_j φ(Z_j) q_j`.
pub fn formulate_signomial(
    design: &MatchedDesign,
    q: &[f64],
    gp: &SensitivityParameter,
    alpha: f64,
    t_obs: f64,
) -> Result<SignomialProgram> {
    if q.len() != design.num_units() {
        return Err(Error::Shape(format!("{} scores for {} units", q.len(), design.num_units())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if !t_obs.is_finite() || q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("scores and observed statistic must be finite"));
    }
    let total: usize = design.sets.iter().map(|s| factorial(s.len())).fold(0usize, |a, b| a.saturating_add(b));
    if total > MAX_ARRANGEMENTS {
        return Err(Error::CapExceeded {
            what: "arrangement variables".into(),
            size: total as u128,
            cap: MAX_ARRANGEMENTS as u128,
        });
    }
    let z = crate::sharp_null::normal_quantile(1.0 - alpha);
    let qs = design.split_units(q)?;
    let mut variables = Vec::new();
    let mut constraints = Vec::new();
    let mut terms = Vec::new();
    let add = |variables: &mut Vec<Variable>, name: String, lo: f64, hi: f64| {
        variables.push(Variable { name, lo, hi });
        variables.len() - 1
    };
    for (i, set) in design.sets.iter().enumerate() {
        let id = i + 1;
        let n = set.len();
        let mut sorted: Vec<f64> = set.doses.iter().map(|&d| gp.transform.apply(d)).collect();
        sorted.sort_by(f64::total_cmp);
        let z1 = sorted[0];
        if z1 == 0.0 {
            return Err(Error::Undefined(format!(
                "set {:?} has minimum dose 0, so the power-link exponents z_(j)/z_(1) are undefined",
                set.id
            )));
        }
        let e1 = (gp.gamma * z1).exp();
        let (b_lo, b_hi) = (e1.min(1.0), e1.max(1.0));
        let w_hi = sorted.iter().map(|&v| (gp.gamma * v).exp().max(1.0)).fold(1.0, f64::max);
        let w_lo = sorted.iter().map(|&v| (gp.gamma * v).exp().min(1.0)).fold(1.0, f64::min);
        let mut w = vec![vec![0usize; n]; n];
        for (j, row) in w.iter_mut().enumerate() {
            for (k, slot) in row.iter_mut().enumerate() {
                let (lo, hi) = if j == 0 { (b_lo, b_hi) } else { (w_lo, w_hi) };
                *slot = add(&mut variables, format!("w_{id}_{}_{}", j + 1, k + 1), lo, hi);
            }
        }
        let s_max = factorial(n) as f64 * w_hi.powi(n as i32);
        let s = add(&mut variables, format!("s_{id}"), 0.0, s_max);
        let mut sum_terms = Vec::new();
        let mut index = 0usize;
        for_each_permutation(n, &mut |perm: &[usize]| {
            index += 1;
            let p = add(&mut variables, format!("p_{id}_{index}"), 0.0, 1.0);
            let prod: Vec<usize> = perm.iter().enumerate().map(|(k, &j)| w[j][k]).collect();
            let value: f64 = perm.iter().enumerate().map(|(k, &j)| sorted[j] * qs[i][k]).sum();
            constraints.push(Constraint::Product { p, s, w: prod.clone() });
            sum_terms.push(prod);
            terms.push(ObjectiveTerm { set: i, p, q: value });
        });
        constraints.push(Constraint::Sum { s, terms: sum_terms });
        for j in 1..n {
            for (&wj, &base) in w[j].iter().zip(&w[0]) {
                constraints.push(Constraint::Power { w: wj, base, exponent: sorted[j] / z1 });
            }
        }
        for &w0 in &w[0] {
            constraints.push(Constraint::Box { w: w0, lo: b_lo, hi: b_hi });
        }
    }
    Ok(SignomialProgram { variables, constraints, objective: Objective { t_obs, chi2: z * z, terms } })
}

impl SignomialProgram {
    pub fn counts(&self) -> ProgramCounts {
        let mut c = ProgramCounts::default();
        for v in &self.variables {
            match v.name.as_bytes()[0] {
                b'p' => c.p_vars += 1,
                b's' => c.s_vars += 1,
                _ => c.w_vars += 1,
            }
        }
        for k in &self.constraints {
            match k {
                Constraint::Product { .. } => c.product += 1,
                Constraint::Sum { .. } => c.sum += 1,
                Constraint::Power { .. } => c.power += 1,
                Constraint::Box { .. } => c.boxes += 1,
            }
        }
        c
    }

    /// Constraint residuals at `x`, one per constraint; boxes report the
    /// distance outside the interval.
    pub fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.variables.len() {
            return Err(Error::Shape(format!("{} values for {} variables", x.len(), self.variables.len())));
        }
        let prod = |ix: &[usize]| ix.iter().map(|&v| x[v]).product::<f64>();
        Ok(self
            .constraints
            .iter()
            .map(|c| match c {
                Constraint::Product { p, s, w } => x[*p] * x[*s] - prod(w),
                Constraint::Sum { s, terms } => x[*s] - terms.iter().map(|t| prod(t)).sum::<f64>(),
                Constraint::Power { w, base, exponent } => x[*w] - x[*base].powf(*exponent),
                Constraint::Box { w, lo, hi } => (lo - x[*w]).max(x[*w] - hi).max(0.0),
            })
            .collect())
    }

    /// `ζ` at `x`.
    pub fn objective_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.variables.len() {
            return Err(Error::Shape(format!("{} values for {} variables", x.len(), self.variables.len())));
        }
        let sets = self.objective.terms.iter().map(|t| t.set + 1).max().unwrap_or(0);
        let mut first = vec![0.0; sets];
        let mut second = vec![0.0; sets];
        for t in &self.objective.terms {
            first[t.set] += x[t.p] * t.q;
            second[t.set] += x[t.p] * t.q * t.q;
        }
        let mu: f64 = first.iter().sum();
        let var: f64 = first.iter().zip(&second).map(|(m1, m2)| m2 - m1 * m1).sum();
        Ok((self.objective.t_obs - mu).powi(2) - self.objective.chi2 * var)
    }

    /// The point of the program induced by confounders `u`.
    pub fn point_from_u(&self, design: &MatchedDesign, gp: &SensitivityParameter, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != design.num_units() {
            return Err(Error::Shape(format!("{} confounders for {} units", u.len(), design.num_units())));
        }
        let index: HashMap<&str, usize> = self.variables.iter().enumerate().map(|(k, v)| (v.name.as_str(), k)).collect();
        let mut x = vec![f64::NAN; self.variables.len()];
        let us = design.split_units(u)?;
        for (i, set) in design.sets.iter().enumerate() {
            let id = i + 1;
            let n = set.len();
            let mut sorted: Vec<f64> = set.doses.iter().map(|&d| gp.transform.apply(d)).collect();
            sorted.sort_by(f64::total_cmp);
            let lookup = |name: String| index.get(name.as_str()).copied().ok_or_else(|| Error::Shape(format!("missing {name}")));
            for j in 0..n {
                for k in 0..n {
                    x[lookup(format!("w_{id}_{}_{}", j + 1, k + 1))?] = (gp.gamma * sorted[j] * us[i][k]).exp();
                }
            }
            let mut weights = Vec::new();
            for_each_permutation(n, &mut |perm: &[usize]| {
                weights.push(perm.iter().enumerate().map(|(k, &j)| sorted[j] * us[i][k]).sum::<f64>() * gp.gamma);
            });
            let s: f64 = weights.iter().map(|e| e.exp()).sum();
            x[lookup(format!("s_{id}"))?] = s;
            for (a, e) in weights.iter().enumerate() {
                x[lookup(format!("p_{id}_{}", a + 1))?] = e.exp() / s;
            }
        }
        Ok(x)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

impl fmt::Display for SignomialProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |k: usize| self.variables[k].name.as_str();
        let names = |ix: &[usize]| ix.iter().map(|&k| name(k)).collect::<Vec<_>>();
        for v in &self.variables {
            writeln!(f, "var {} in [{},{}]", v.name, fmt_num(v.lo), fmt_num(v.hi))?;
        }
        for c in &self.constraints {
            match c {
                Constraint::Product { p, s, w } => {
                    writeln!(f, "con product {} {} = {}", name(*p), name(*s), names(w).join(" "))?
                }
                Constraint::Sum { s, terms } => {
                    let t: Vec<String> = terms.iter().map(|t| names(t).join("*")).collect();
                    writeln!(f, "con sum {} = {}", name(*s), t.join(" + "))?
                }
                Constraint::Power { w, base, exponent } => {
                    writeln!(f, "con power {} = {} ^ {}", name(*w), name(*base), fmt_num(*exponent))?
                }
                Constraint::Box { w, lo, hi } => {
                    writeln!(f, "con box {} <= {} <= {}", fmt_num(*lo), name(*w), fmt_num(*hi))?
                }
            }
        }
        writeln!(f, "obj quad t {} chi2 {}", fmt_num(self.objective.t_obs), fmt_num(self.objective.chi2))?;
        for t in &self.objective.terms {
            writeln!(f, "obj term {} {} {}", t.set + 1, name(t.p), fmt_num(t.q))?;
        }
        Ok(())
    }
}

impl FromStr for SignomialProgram {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut variables = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut constraints = Vec::new();
        let mut objective = Objective { t_obs: f64::NAN, chi2: f64::NAN, terms: Vec::new() };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Parse { line: ln + 1, msg: format!("{msg}: {line:?}") };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let var = |s: &str| index.get(s).copied().ok_or_else(|| bad("unknown variable"));
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["var", name, "in", range] => {
                    let inner = range.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(|| bad("bad range"))?;
                    let (lo, hi) = inner.split_once(',').ok_or_else(|| bad("bad range"))?;
                    if index.contains_key(*name) {
                        return Err(bad("duplicate variable"));
                    }
                    index.insert(name.to_string(), variables.len());
                    variables.push(Variable { name: name.to_string(), lo: num(lo)?, hi: num(hi)? });
                }
                ["con", "product", p, s, "=", rest @ ..] => {
                    let w = rest.iter().map(|t| var(t)).collect::<Result<Vec<_>>>()?;
                    constraints.push(Constraint::Product { p: var(p)?, s: var(s)?, w });
                }
                ["con", "sum", s, "=", rest @ ..] => {
                    let terms = rest
                        .iter()
                        .filter(|t| **t != "+")
                        .map(|t| t.split('*').map(var).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()?;
                    constraints.push(Constraint::Sum { s: var(s)?, terms });
                }
                ["con", "power", w, "=", base, "^", e] => {
                    constraints.push(Constraint::Power { w: var(w)?, base: var(base)?, exponent: num(e)? });
                }
                ["con", "box", lo, "<=", w, "<=", hi] => {
                    constraints.push(Constraint::Box { w: var(w)?, lo: num(lo)?, hi: num(hi)? });
                }
                ["obj", "quad", "t", t, "chi2", c] => {
                    objective.t_obs = num(t)?;
                    objective.chi2 = num(c)?;
                }
                ["obj", "term", set, p, q] => {
                    let set: usize = set.parse().map_err(|_| bad("bad set index"))?;
                    if set == 0 {
                        return Err(bad("set indices start at 1"));
                    }
                    objective.terms.push(ObjectiveTerm { set: set - 1, p: var(p)?, q: num(q)? });
                }
                _ => return Err(bad("unrecognized line")),
            }
        }
        if objective.t_obs.is_nan() {
            return Err(Error::Parse { line: 0, msg: "missing objective line".into() });
        }
        Ok(SignomialProgram { variables, constraints, objective })
    }
}

/// Doses of the five-unit instance with an interior worst case.
pub const COUNTEREXAMPLE_DOSES: [f64; 5] = [0.1, 0.44, 0.54, 0.73, 0.8];
pub const COUNTEREXAMPLE_SCORES: [f64; 5] = [1.5, 1.5, 3.0, 4.5, 4.5];
pub const COUNTEREXAMPLE_GAMMA: f64 = 2.0;
pub const COUNTEREXAMPLE_T: f64 = 9.03;
pub const COUNTEREXAMPLE_U: [f64; 5] = [0.0, 0.0, 0.9483617, 1.0, 1.0];

/// Largest per-coordinate distance allowed from the reference maximizer.
pub const COUNTEREXAMPLE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub gamma: f64,
    pub t_obs: f64,
    pub scores: Vec<f64>,
    pub u_star: Vec<f64>,
    pub reference_u: Option<Vec<f64>>,
    pub max_coordinate_error: Option<f64>,
    pub p_at_u_star: f64,
    pub best_corner: Vec<f64>,
    pub best_corner_p: f64,
    /// `p(u*) − max over corners`.
    pub corner_gap: f64,
    /// Coordinates of `u*` farther than the tolerance from both 0 and 1.
    pub interior_coordinates: Vec<usize>,
    pub passed: bool,
    pub skipped: bool,
    pub notice: Option<String>,
}

fn single_set(doses: &[f64]) -> Result<MatchedDesign> {
    MatchedDesign::new(vec![MatchedSet::new("counterexample", doses.to_vec(), vec![0; doses.len()])?])
}

/// Maximize the tail over the cube for one set and compare with a reference
/// maximizer when one is supplied. Without a reference the check passes when
/// the maximizer is a corner.
pub fn check_cube_instance(
    doses: &[f64],
    scores: &[f64],
    gamma: f64,
    t_obs: f64,
    reference: Option<&[f64]>,
    search: CubeSearch,
) -> Result<CounterexampleReport> {
    let design = single_set(doses)?;
    let gp = SensitivityParameter::new(gamma)?;
    let r = brute_force_worst_p(&design, scores, &gp, t_obs, search)?;
    let interior: Vec<usize> = r
        .u_star
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > COUNTEREXAMPLE_TOL && v < 1.0 - COUNTEREXAMPLE_TOL)
        .map(|(j, _)| j)
        .collect();
    let gap = r.p_at_u_star - r.best_corner_p;
    let mut report = CounterexampleReport {
        gamma,
        t_obs,
        scores: scores.to_vec(),
        u_star: r.u_star.clone(),
        reference_u: reference.map(<[f64]>::to_vec),
        max_coordinate_error: None,
        p_at_u_star: r.p_at_u_star,
        best_corner: r.best_corner,
        best_corner_p: r.best_corner_p,
        corner_gap: gap,
        interior_coordinates: interior,
        passed: false,
        skipped: false,
        notice: None,
    };
    if r.u_independent {
        report.skipped = true;
        report.passed = true;
        report.notice = Some("gamma = 0: the assignment law does not depend on u; check skipped".into());
        return Ok(report);
    }
    match reference {
        Some(reference) => {
            let err = r.u_star.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            report.max_coordinate_error = Some(err);
            // an interior reference must strictly beat every corner
            let interior_ref = reference.iter().any(|&v| v > COUNTEREXAMPLE_TOL && v < 1.0 - COUNTEREXAMPLE_TOL);
            let gap_ok = if interior_ref { gap > 0.0 } else { gap >= 0.0 };
            report.passed = err <= COUNTEREXAMPLE_TOL && gap_ok;
        }
        None => report.passed = report.interior_coordinates.is_empty(),
    }
    Ok(report)
}

/// Reproduce the interior maximizer of the built-in five-unit instance.
pub fn verify_counterexample(gamma: f64, search: CubeSearch) -> Result<CounterexampleReport> {
    let reference = (gamma == COUNTEREXAMPLE_GAMMA).then_some(&COUNTEREXAMPLE_U[..]);
    check_cube_instance(&COUNTEREXAMPLE_DOSES, &COUNTEREXAMPLE_SCORES, gamma, COUNTEREXAMPLE_T, reference, search)
}
