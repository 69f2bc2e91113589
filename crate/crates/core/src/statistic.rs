//! Stratum-wise isotonic statistics `T = Σ_i Σ_j m(Z_ij) R_ij`.

use std::fmt;
use std::str::FromStr;

use crate::design::{MatchedDesign, MatchedSet};
use crate::error::{Error, Result};

/// Nondecreasing piecewise-linear map, constant outside its knots.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneTable {
    knots: Vec<(f64, f64)>,
}

impl MonotoneTable {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("transform table needs at least one knot"));
        }
        if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("transform table has a non-finite knot"));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in knots.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("repeated knot at x = {}", w[0].0)));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::invalid(format!(
                    "transform table decreases between x = {} and x = {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, z: f64) -> f64 {
        let k = &self.knots;
        if z <= k[0].0 {
            return k[0].1;
        }
        let last = k[k.len() - 1];
        if z >= last.0 {
            return last.1;
        }
        let i = k.partition_point(|(x, _)| *x <= z);
        let (x0, y0) = k[i - 1];
        let (x1, y1) = k[i];
        y0 + (y1 - y0) * (z - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatKind {
    /// `m(z) = z`.
    PermT,
    /// `m(z) = 1{z > c}`.
    Threshold(f64),
    /// Average ranks of doses within each set.
    RankWithin,
    /// Average ranks of doses pooled over all sets.
    RankAcross,
    /// `m(z) = z^a` for nonnegative doses.
    Power(f64),
    Custom(MonotoneTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticSpec {
    pub kind: StatKind,
    /// Negate `m`, turning the upper-tailed test into a lower-tailed one.
    pub lower: bool,
}

impl StatisticSpec {
    pub fn new(kind: StatKind) -> Self {
        Self { kind, lower: false }
    }

    pub fn perm_t() -> Self {
        Self::new(StatKind::PermT)
    }

    pub fn threshold(c: f64) -> Self {
        Self::new(StatKind::Threshold(c))
    }

    fn sign(&self) -> f64 {
        if self.lower {
            -1.0
        } else {
            1.0
        }
    }

    fn point_map(&self, z: f64) -> Option<f64> {
        match &self.kind {
            StatKind::PermT => Some(z),
            StatKind::Threshold(c) => Some(if z > *c { 1.0 } else { 0.0 }),
            StatKind::Power(a) => Some(z.max(0.0).powf(*a)),
            StatKind::Custom(t) => Some(t.eval(z)),
            StatKind::RankWithin | StatKind::RankAcross => None,
        }
    }

    /// `m` evaluated at every dose of every set.
    pub fn dose_scores(&self, design: &MatchedDesign) -> Vec<Vec<f64>> {
        let sign = self.sign();
        match self.kind {
            StatKind::RankAcross => {
                let ranks = average_ranks(&design.all_doses());
                let mut out = Vec::with_capacity(design.num_sets());
                let mut rest = ranks.as_slice();
                for s in &design.sets {
                    let (head, tail) = rest.split_at(s.len());
                    out.push(head.iter().map(|r| sign * r).collect());
                    rest = tail;
                }
                out
            }
            _ => design.sets.iter().map(|s| self.set_scores(s).expect("pointwise kind")).collect(),
        }
    }

    /// `m` at each dose of one set; unavailable for pooled ranks.
    pub fn set_scores(&self, set: &MatchedSet) -> Result<Vec<f64>> {
        let sign = self.sign();
        match self.kind {
            StatKind::RankAcross => Err(Error::invalid("pooled ranks need the whole design")),
            StatKind::RankWithin => Ok(average_ranks(&set.doses).into_iter().map(|r| sign * r).collect()),
            _ => Ok(set.doses.iter().map(|&z| sign * self.point_map(z).expect("pointwise")).collect()),
        }
    }

    /// True when a threshold lies outside `[min dose, max dose)`.
    pub fn is_degenerate(&self, design: &MatchedDesign) -> bool {
        match self.kind {
            StatKind::Threshold(c) => {
                let d = design.all_doses();
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                !(lo <= c && c < hi)
            }
            _ => false,
        }
    }

    fn check(&self) -> Result<()> {
        match self.kind {
            StatKind::Threshold(c) if !c.is_finite() => Err(Error::invalid("threshold must be finite")),
            StatKind::Power(a) if !(a.is_finite() && a > 0.0) => {
                Err(Error::invalid(format!("power exponent {a} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Observed statistic `T`.
pub fn evaluate(spec: &StatisticSpec, design: &MatchedDesign) -> f64 {
    per_stratum_all(spec, design).iter().sum()
}

/// Observed contribution `q_i` of every set.
pub fn per_stratum_all(spec: &StatisticSpec, design: &MatchedDesign) -> Vec<f64> {
    spec.dose_scores(design)
        .iter()
        .zip(&design.sets)
        .map(|(m, s)| contribution(m, &s.outcomes))
        .collect()
}

/// Observed contribution of one set.
pub fn per_stratum(spec: &StatisticSpec, set: &MatchedSet) -> Result<f64> {
    Ok(contribution(&spec.set_scores(set)?, &set.outcomes))
}

fn contribution(m: &[f64], outcomes: &[u8]) -> f64 {
    m.iter().zip(outcomes).filter(|(_, &r)| r == 1).map(|(x, _)| x).sum()
}

/// Bonferroni combination of several statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSpec {
    pub components: Vec<StatisticSpec>,
}

impl AdaptiveSpec {
    pub fn new(components: Vec<StatisticSpec>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::invalid("an adaptive test needs at least two components"));
        }
        Ok(Self { components })
    }
}

/// `min(1, k · min p)` over `k` component p-values.
pub fn adaptive_p(component_p: &[f64]) -> Result<f64> {
    if component_p.is_empty() {
        return Err(Error::invalid("no component p-values"));
    }
    let min = component_p.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((component_p.len() as f64 * min).min(1.0))
}

/// Either a single statistic or a Bonferroni combination.
#[derive(Debug, Clone, PartialEq)]
pub enum Statistic {
    Single(StatisticSpec),
    Adaptive(AdaptiveSpec),
}

impl Statistic {
    pub fn components(&self) -> Vec<&StatisticSpec> {
        match self {
            Statistic::Single(s) => vec![s],
            Statistic::Adaptive(a) => a.components.iter().collect(),
        }
    }
}

impl FromStr for StatisticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("lower:") {
            let mut spec: StatisticSpec = rest.parse()?;
            spec.lower = !spec.lower;
            return Ok(spec);
        }
        let num = |v: &str| -> Result<f64> {
            v.trim().parse().map_err(|_| Error::invalid(format!("bad number {v:?} in statistic {s:?}")))
        };
        let kind = match s.split_once(':') {
            None => match s {
                "t" | "perm-t" | "perm_t" => StatKind::PermT,
                "rank-within" | "rank_within" => StatKind::RankWithin,
                "rank-across" | "rank_across" => StatKind::RankAcross,
                _ => return Err(Error::invalid(format!("unknown statistic {s:?}"))),
            },
            Some(("threshold", v)) => StatKind::Threshold(num(v)?),
            Some(("power", v)) => StatKind::Power(num(v)?),
            Some(("custom", v)) => {
                let knots = v
                    .split(',')
                    .map(|kv| {
                        let (x, y) = kv
                            .split_once('=')
                            .ok_or_else(|| Error::invalid(format!("custom knot {kv:?} is not x=y")))?;
                        Ok((num(x)?, num(y)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                StatKind::Custom(MonotoneTable::new(knots)?)
            }
            _ => return Err(Error::invalid(format!("unknown statistic {s:?}"))),
        };
        let spec = StatisticSpec::new(kind);
        spec.check()?;
        Ok(spec)
    }
}

impl fmt::Display for StatisticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lower {
            f.write_str("lower:")?;
        }
        match &self.kind {
            StatKind::PermT => f.write_str("t"),
            StatKind::Threshold(c) => write!(f, "threshold:{c}"),
            StatKind::RankWithin => f.write_str("rank-within"),
            StatKind::RankAcross => f.write_str("rank-across"),
            StatKind::Power(a) => write!(f, "power:{a}"),
            StatKind::Custom(t) => {
                f.write_str("custom:")?;
                let parts: Vec<String> = t.knots().iter().map(|(x, y)| format!("{x}={y}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.trim().strip_prefix("adaptive:") else {
            return Ok(Statistic::Single(s.parse()?));
        };
        // custom tables contain commas; knots (x=y) attach to the preceding token
        let mut parts: Vec<String> = Vec::new();
        for tok in rest.split(',') {
            match parts.last_mut() {
                Some(prev) if tok.contains('=') && prev.contains("custom:") => {
                    prev.push(',');
                    prev.push_str(tok);
                }
                _ => parts.push(tok.to_string()),
            }
        }
        let components = parts.iter().map(|p| p.parse()).collect::<Result<Vec<_>>>()?;
        Ok(Statistic::Adaptive(AdaptiveSpec::new(components)?))
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Single(s) => s.fmt(f),
            Statistic::Adaptive(a) => {
                let parts: Vec<String> = a.components.iter().map(ToString::to_string).collect();
                write!(f, "adaptive:{}", parts.join(","))
            }
        }
    }
}
